// Copyright (C) 2026 The sgma-toolkit Authors
// SPDX-License-Identifier: Apache-2.0

// Attack losses: global text-image and image-image disruption, the local
// phrase loss, their untargeted and targeted totals, and two baselines.
//
// Every loss is built on the autodiff tape; the value-level functions run
// the same graph on constants so there is a single implementation.

#pragma once

#include <optional>
#include <string>
#include <vector>

#include "sgma/grounding.hpp"

namespace sgma {

struct LossBreakdown {
  double text_image = 0.0;
  double image_image = 0.0;
  double local = 0.0;
  double total = 0.0;
};

struct LossToggles {
  bool text_image = true;
  bool image_image = true;
  bool local = true;
};

enum class GoalMode { untargeted, targeted };

struct AttackGoal {
  GoalMode mode = GoalMode::untargeted;
  std::string target_caption;
  std::optional<ImageTensor> target_image;
  double lambda = 1.0;  // weight on the attract terms

  bool targeted() const { return mode == GoalMode::targeted; }

  void validate() const {
    if (!targeted()) return;
    if (split_words(target_caption).empty()) fail(ErrorKind::config, "targeted goal requires a target caption");
    if (!target_image || target_image->empty()) fail(ErrorKind::config, "targeted goal requires a target image");
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) fail(ErrorKind::config, "fusion weight must be >= 0, got ", lambda);
  }
};

/// Row-normalized copy; throws naming the first zero-norm row.
inline Matrix unit_rows(const Matrix& m) {
  Matrix out(m.rows(), m.cols());
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    const double n = m.row(i).norm();
    if (!(n > 0.0) || !std::isfinite(n)) fail(ErrorKind::numeric, "zero-norm token at row ", i);
    out.row(i) = m.row(i) / n;
  }
  return out;
}

namespace loss {

inline ad::Var zero(ad::Tape& tape) { return tape.constant(Matrix::Zero(1, 1)); }

/// 1 - <e, t> for a unit 1 x d embedding row and a unit text vector.
inline ad::Var text_image(ad::Tape& tape, ad::Var embedding, const Vector& text) {
  return ad::affine(ad::row_dot(embedding, tape.constant(text.transpose())), -1.0, 1.0);
}

/// Mean over token rows of 1 - cos(adv_i, clean_i); `unit_tokens` is the
/// row-normalized adversarial token matrix.
inline ad::Var image_image(ad::Tape& tape, ad::Var unit_tokens, const Matrix& clean_unit) {
  if (ad::value(unit_tokens).rows() != clean_unit.rows() || ad::value(unit_tokens).cols() != clean_unit.cols())
    fail(ErrorKind::invariant, "image_image: token shapes differ");
  return ad::affine(ad::mean_all(ad::row_dot(unit_tokens, tape.constant(clean_unit))), -1.0, 1.0);
}

/// (1/N') sum_n (1/|R_n|) sum_{i in R_n} [1 - cos(patch_i, c_n)] over retained regions.
/// Token row i+1 holds patch i. All regions go through one gather so that
/// the whole term reaches `unit_tokens` as a single gradient contribution.
inline ad::Var local(ad::Tape& tape, ad::Var unit_tokens, const std::vector<PhraseRegion>& regions) {
  std::vector<const PhraseRegion*> kept;
  for (const auto& r : regions)
    if (r.retained()) kept.push_back(&r);
  if (kept.empty()) return zero(tape);
  std::size_t total = 0;
  for (const auto* r : kept) total += r->indices.size();
  const Eigen::Index d = ad::value(unit_tokens).cols();
  std::vector<int> rows;
  rows.reserve(total);
  Matrix centers(static_cast<Eigen::Index>(total), d);
  Matrix weights(static_cast<Eigen::Index>(total), 1);
  Eigen::Index k = 0;
  for (const auto* r : kept) {
    const Vector c = r->center->normalized();
    const double w = 1.0 / (static_cast<double>(kept.size()) * static_cast<double>(r->indices.size()));
    for (int i : r->indices) {
      rows.push_back(i + 1);
      centers.row(k) = c.transpose();
      weights(k, 0) = w;
      ++k;
    }
  }
  auto sims = ad::row_dot(ad::gather_rows(unit_tokens, rows), tape.constant(centers));
  return ad::affine(ad::sum_all(ad::mul(sims, tape.constant(weights))), -1.0, 1.0);
}

}  // namespace loss

// Value-level losses ----------------------------------------------------------

inline double loss_text_image(const Embedding& adv, const Embedding& text) {
  if (adv.vector().size() != text.vector().size()) fail(ErrorKind::invariant, "embedding dimensions differ");
  ad::Tape tape;
  return ad::value(loss::text_image(tape, tape.constant(adv.vector().transpose()), text.vector()))(0, 0);
}

inline double loss_image_image(const TokenFeatures& adv, const TokenFeatures& clean) {
  ad::Tape tape;
  auto u = tape.constant(unit_rows(adv.all_tokens));
  return ad::value(loss::image_image(tape, u, unit_rows(clean.all_tokens)))(0, 0);
}

inline double loss_local(const TokenFeatures& adv, const std::vector<PhraseRegion>& regions) {
  if (retained_regions(regions).empty()) log_warning("local loss has no retained phrase regions; contributing 0");
  ad::Tape tape;
  return ad::value(loss::local(tape, tape.constant(unit_rows(adv.all_tokens)), regions))(0, 0);
}

/// Attack-Bard style feature distance; same formula as the image-image loss.
inline double baseline_feature_distance(const TokenFeatures& adv, const TokenFeatures& clean) {
  return loss_image_image(adv, clean);
}

/// Cui et al. style text-feature loss; same formula as the text-image loss.
inline double baseline_text_feature(const Embedding& adv, const Embedding& text) { return loss_text_image(adv, text); }

// Composed objectives -----------------------------------------------------------

/// Clean-side constants for one encoder.
struct LossTargets {
  Vector text;                        // f_t(T_d)
  Matrix clean_unit;                  // row-normalized clean all_tokens
  std::vector<PhraseRegion> regions;  // regions from T_d on the clean image
  // Targeted attract side, used when `targeted` is set.
  bool targeted = false;
  double lambda = 1.0;
  Vector target_text;
  Matrix target_unit;
  std::vector<PhraseRegion> target_regions;  // centers from the target image's tokens
};

struct LossTerms {
  ad::Var text_image, image_image, local, total;
};

/// Builds the enabled components on one trace. Disabled components are the
/// constant 0. Repel/attract pairs are built adjacently so that identical
/// pairs cancel exactly in the backward pass.
inline LossTerms build_loss(ad::Tape& tape, const VisionTrace& tr, const LossTargets& t, const LossToggles& on) {
  const bool attract = t.targeted && t.lambda != 0.0;
  auto pair = [&](ad::Var repel, auto make_attract) {
    if (!attract) return repel;
    return ad::sub(repel, ad::scale(make_attract(), t.lambda));
  };
  LossTerms out;
  out.text_image = on.text_image ? pair(loss::text_image(tape, tr.embedding, t.text),
                                        [&] { return loss::text_image(tape, tr.embedding, t.target_text); })
                                 : loss::zero(tape);
  ad::Var unit{};
  if (on.image_image || on.local) unit = ad::normalize_rows(tr.all_tokens);
  out.image_image = on.image_image ? pair(loss::image_image(tape, unit, t.clean_unit),
                                          [&] { return loss::image_image(tape, unit, t.target_unit); })
                                   : loss::zero(tape);
  out.local = on.local ? pair(loss::local(tape, unit, t.regions),
                              [&] { return loss::local(tape, unit, t.target_regions); })
                       : loss::zero(tape);
  out.total = ad::add(ad::add(out.text_image, out.image_image), out.local);
  return out;
}

inline LossBreakdown breakdown_of(const LossTerms& terms) {
  LossBreakdown b;
  b.text_image = ad::value(terms.text_image)(0, 0);
  b.image_image = ad::value(terms.image_image)(0, 0);
  b.local = ad::value(terms.local)(0, 0);
  b.total = ad::value(terms.total)(0, 0);
  return b;
}

/// Constants for the untargeted objective from one clean forward pass.
inline LossTargets untargeted_targets(const VisionLanguageEncoder& enc, const ImageTensor& clean,
                                      std::string_view caption, std::vector<PhraseRegion> regions) {
  LossTargets t;
  t.text = embed_text(enc, caption).vector();
  t.clean_unit = unit_rows(forward_tokens(enc, clean).all_tokens);
  t.regions = retained_regions(regions);
  return t;
}

inline LossTargets targeted_targets(const VisionLanguageEncoder& enc, const ImageTensor& clean,
                                    std::string_view caption, const AttackGoal& goal,
                                    std::vector<PhraseRegion> regions_orig, std::vector<PhraseRegion> regions_tgt) {
  if (!goal.targeted()) fail(ErrorKind::config, "targeted objective requires a targeted goal");
  goal.validate();
  detail::check_resolution(enc, *goal.target_image);
  LossTargets t = untargeted_targets(enc, clean, caption, std::move(regions_orig));
  t.targeted = true;
  t.lambda = goal.lambda;
  t.target_text = embed_text(enc, goal.target_caption).vector();
  t.target_unit = unit_rows(forward_tokens(enc, *goal.target_image).all_tokens);
  t.target_regions = retained_regions(regions_tgt);
  return t;
}

/// Evaluates the composed loss on `adv` with a single forward pass.
inline LossBreakdown evaluate_loss(const VisionLanguageEncoder& enc, const ImageTensor& adv, const LossTargets& t,
                                   const LossToggles& on = {}) {
  detail::check_resolution(enc, adv);
  ad::Tape tape;
  auto tr = enc.trace(tape, tape.constant(detail::pixel_column(adv)));
  return breakdown_of(build_loss(tape, tr, t, on));
}

inline LossBreakdown total_untargeted(const VisionLanguageEncoder& enc, const ImageTensor& adv,
                                      const ImageTensor& clean, std::string_view caption,
                                      const std::vector<PhraseRegion>& regions, const LossToggles& on = {}) {
  return evaluate_loss(enc, adv, untargeted_targets(enc, clean, caption, regions), on);
}

inline LossBreakdown total_targeted(const VisionLanguageEncoder& enc, const ImageTensor& adv,
                                    const ImageTensor& clean, std::string_view caption, const AttackGoal& goal,
                                    const std::vector<PhraseRegion>& regions_orig,
                                    const std::vector<PhraseRegion>& regions_tgt, const LossToggles& on = {}) {
  return evaluate_loss(enc, adv, targeted_targets(enc, clean, caption, goal, regions_orig, regions_tgt), on);
}

// Objective adapters for pixel_gradient --------------------------------------------

namespace objective {

inline Objective image_image(Matrix clean_unit) {
  return {"image_image", true, [c = std::move(clean_unit)](ad::Tape& tape, ad::Var, const VisionTrace& tr) {
            return loss::image_image(tape, ad::normalize_rows(tr.all_tokens), c);
          }};
}

inline Objective local(std::vector<PhraseRegion> regions) {
  return {"local", true, [r = std::move(regions)](ad::Tape& tape, ad::Var, const VisionTrace& tr) {
            return loss::local(tape, ad::normalize_rows(tr.all_tokens), r);
          }};
}

inline Objective total(LossTargets targets, LossToggles on = {}) {
  return {targets.targeted ? "targeted_total" : "total", true,
          [t = std::move(targets), on](ad::Tape& tape, ad::Var, const VisionTrace& tr) {
            return build_loss(tape, tr, t, on).total;
          }};
}

inline Objective baseline_feature_distance(Matrix clean_unit) {
  auto o = image_image(std::move(clean_unit));
  o.name = "baseline_feature_distance";
  return o;
}

inline Objective baseline_text_feature(const Embedding& text) {
  auto o = text_image_distance(text);
  o.name = "baseline_text_feature";
  return o;
}

}  // namespace objective

}  // namespace sgma
