// Copyright (C) 2026 The sgma-toolkit Authors
// SPDX-License-Identifier: Apache-2.0

// PGD with per-pixel budget projection, untargeted and targeted loops, and
// the surrogate ensemble.

#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <exception>
#include <functional>
#include <mutex>
#include <span>
#include <thread>

#include <json.hpp>

#include "sgma/allocation.hpp"
#include "sgma/objectives.hpp"

namespace sgma {

/// What the loop maximizes. The baselines run with a uniform budget.
enum class ObjectiveKind { sgma, baseline_text_feature, baseline_feature_distance };

inline const char* to_string(ObjectiveKind k) {
  switch (k) {
    case ObjectiveKind::sgma: return "sgma";
    case ObjectiveKind::baseline_text_feature: return "baseline_text_feature";
    case ObjectiveKind::baseline_feature_distance: return "baseline_feature_distance";
  }
  return "?";
}

inline ObjectiveKind objective_kind_from_string(std::string_view s) {
  if (s == "sgma") return ObjectiveKind::sgma;
  if (s == "baseline_text_feature") return ObjectiveKind::baseline_text_feature;
  if (s == "baseline_feature_distance") return ObjectiveKind::baseline_feature_distance;
  fail(ErrorKind::config, "unknown objective '", s, "'");
}

struct AttackConfig {
  int steps = 100;
  double step_size = 1.0 / 255.0;
  double epsilon = 8.0 / 255.0;
  double base_ratio = 0.2;
  double tau = 0.3;
  LossToggles toggles;
  bool semantic_allocation = true;  // off: eps everywhere
  ObjectiveKind objective = ObjectiveKind::sgma;
  AttackGoal goal;
  std::uint64_t seed = 0;
  std::vector<EncoderPtr> encoders;

  void validate() const {
    if (steps < 0) fail(ErrorKind::config, "steps must be >= 0, got ", steps);
    if (!(step_size > 0.0) || !std::isfinite(step_size)) fail(ErrorKind::config, "step size must be positive");
    BudgetParams{epsilon, base_ratio}.validate();
    check_tau(tau);
    goal.validate();
    if (encoders.empty()) fail(ErrorKind::config, "at least one surrogate encoder is required");
    for (const auto& e : encoders) {
      if (!e) fail(ErrorKind::load, "surrogate encoder is not initialized");
      if (e->info().resolution != encoders.front()->info().resolution)
        fail(ErrorKind::config, "surrogate resolutions differ: ", encoders.front()->info().id, " vs ", e->info().id);
    }
  }

  int resolution() const { return encoders.front()->info().resolution; }

  /// Everything that determines the output, in canonical key order.
  nlohmann::json describe() const {
    nlohmann::json ids = nlohmann::json::array();
    for (const auto& e : encoders) ids.push_back(e->info().id);
    nlohmann::json j{{"steps", steps},
                     {"step_size", step_size},
                     {"epsilon", epsilon},
                     {"base_ratio", base_ratio},
                     {"tau", tau},
                     {"toggles", {{"text_image", toggles.text_image},
                                  {"image_image", toggles.image_image},
                                  {"local", toggles.local}}},
                     {"semantic_allocation", semantic_allocation},
                     {"objective", to_string(objective)},
                     {"goal", goal.targeted() ? "targeted" : "untargeted"},
                     {"seed", seed},
                     {"encoders", ids}};
    if (goal.targeted()) {
      j["target_caption"] = goal.target_caption;
      j["lambda"] = goal.lambda;
      j["target_image"] = goal.target_image ? image_hash(*goal.target_image) : "";
    }
    return j;
  }

  std::string hash() const { return sha256_hex(describe().dump()); }
};

struct AttackRun {
  ImageTensor clean;
  ImageTensor adversarial;
  Tensor3 delta;
  std::vector<LossBreakdown> loss_trace;  // loss at the iterate each step starts from
  LossBreakdown initial_loss;             // at delta = 0
  LossBreakdown final_loss;               // at the returned delta
  BudgetMap budget;
  SemanticMask mask;
  PhraseSet phrases;
  bool phrase_fallback = false;  // chunker found nothing; whole caption used
  std::string config_hash;
  std::vector<std::string> encoder_ids;
  double wall_seconds = 0.0;
};

/// Called after every projected step with the step index, the loss at the
/// pre-step iterate, and the updated perturbation and image.
using StepObserver = std::function<void(int step, const LossBreakdown&, const Tensor3& delta, const ImageTensor& adv)>;

inline double sign_of(double g) { return g > 0.0 ? 1.0 : (g < 0.0 ? -1.0 : 0.0); }

/// delta' = clip(delta + alpha * sign(grad), -b, b); where clean + delta'
/// leaves [0,1] it is clamped and delta' recomputed from it.
inline Tensor3 pgd_step(const Tensor3& delta, const Tensor3& grad, double alpha, const BudgetMap& budget,
                        const ImageTensor& clean, int step_index = 0) {
  const auto& c = clean.tensor();
  if (!delta.same_shape(grad) || !delta.same_shape(c) || budget.budget.rows() != c.height ||
      budget.budget.cols() != c.width)
    fail(ErrorKind::invariant, "pgd_step: shape mismatch");
  Tensor3 out(delta.height, delta.width);
  for (int y = 0; y < delta.height; ++y)
    for (int x = 0; x < delta.width; ++x) {
      const double b = budget.budget(y, x);
      for (int ch = 0; ch < Tensor3::channels; ++ch) {
        const auto i = delta.index(y, x, ch);
        const double g = grad.values[i];
        if (!std::isfinite(g)) fail(ErrorKind::numeric, "non-finite gradient at step ", step_index);
        double d = std::clamp(delta.values[i] + alpha * sign_of(g), -b, b);
        const double v = c.values[i] + d;
        if (v < 0.0 || v > 1.0) d = std::clamp(v, 0.0, 1.0) - c.values[i];
        out.values[i] = d;
      }
    }
  return out;
}

/// Pixelwise mean, accumulated incrementally so identical inputs return the
/// mask unchanged.
inline SemanticMask ensemble_mask(std::span<const SemanticMask> masks) {
  if (masks.empty()) fail(ErrorKind::input, "ensemble_mask: no masks");
  SemanticMask out;
  out.values = masks.front().values;
  out.degenerate = masks.front().degenerate;
  for (std::size_t m = 1; m < masks.size(); ++m) {
    if (masks[m].values.rows() != out.values.rows() || masks[m].values.cols() != out.values.cols())
      fail(ErrorKind::resolution, "ensemble_mask: masks differ in size");
    out.values += (masks[m].values - out.values) / static_cast<double>(m + 1);
    out.degenerate = out.degenerate && masks[m].degenerate;
  }
  return out;
}

inline LossBreakdown ensemble_loss(std::span<const LossBreakdown> parts) {
  if (parts.empty()) fail(ErrorKind::input, "ensemble_loss: no breakdowns");
  if (parts.size() == 1) return parts.front();
  LossBreakdown s;
  for (const auto& p : parts) {
    s.text_image += p.text_image;
    s.image_image += p.image_image;
    s.local += p.local;
    s.total += p.total;
  }
  const double m = static_cast<double>(parts.size());
  return {s.text_image / m, s.image_image / m, s.local / m, s.total / m};
}

/// Checks |delta| <= budget (+1e-9) and clean + delta in [0,1]; throws otherwise.
inline void check_projection(const Tensor3& delta, const BudgetMap& budget, const ImageTensor& clean, int step) {
  const auto& c = clean.tensor();
  for (int y = 0; y < delta.height; ++y)
    for (int x = 0; x < delta.width; ++x)
      for (int ch = 0; ch < Tensor3::channels; ++ch) {
        const auto i = delta.index(y, x, ch);
        const double v = c.values[i] + delta.values[i];
        if (std::abs(delta.values[i]) > budget.budget(y, x) + 1e-9 || v < -1e-12 || v > 1.0 + 1e-12)
          fail(ErrorKind::invariant, "projection violated at step ", step, " pixel (", y, ",", x, ",", ch, ")");
      }
}

namespace detail {

/// Per-encoder constants computed once from the clean image.
struct SurrogateState {
  EncoderPtr encoder;
  LossTargets targets;
  SemanticMask mask;
};

inline std::vector<PhraseRegion> ground_phrases(const VisionLanguageEncoder& enc, const ImageTensor& image,
                                                const PhraseSet& phrases, double tau) {
  std::vector<PhraseRegion> regions;
  for (const auto& p : phrases) regions.push_back(associate(enc, image, p, tau));
  return phrase_centers(forward_tokens(enc, image), std::move(regions));
}

inline PhraseSet phrases_or_fallback(std::string_view caption, const Chunker& chunker, bool& fallback) {
  try {
    fallback = false;
    return extract_noun_phrases(caption, chunker);
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::input && e.kind() != ErrorKind::transport && e.kind() != ErrorKind::parse) throw;
    log_warning(concat("phrase extraction failed (", e.what(), "); using the whole caption"));
    fallback = true;
    std::string whole;
    for (const auto& w : split_words(caption)) whole += (whole.empty() ? "" : " ") + w;
    return {whole};
  }
}

inline Tensor3 to_tensor(const Matrix& column, int h, int w) {
  Tensor3 t(h, w);
  std::copy(column.data(), column.data() + column.size(), t.values.begin());
  return t;
}

inline ImageTensor apply_delta(const ImageTensor& clean, const Tensor3& delta) { return add_clamped(clean, delta); }

}  // namespace detail

/// Runs the configured attack. The goal in `config` selects the untargeted or
/// targeted loop; `chunker` defaults to the rule-based one.
inline AttackRun run_attack(const ImageTensor& clean, std::string_view caption, const AttackConfig& config,
                            const StepObserver& observer = {}, const Chunker* chunker = nullptr) {
  const auto started = std::chrono::steady_clock::now();
  config.validate();
  if (split_words(caption).empty()) fail(ErrorKind::input, "caption is empty");
  for (const auto& e : config.encoders) detail::check_resolution(*e, clean);
  static const RuleChunker default_chunker;
  const Chunker& chunk = chunker ? *chunker : default_chunker;
  const auto& goal = config.goal;
  const bool targeted = goal.targeted();
  const bool sgma_objective = config.objective == ObjectiveKind::sgma;

  AttackRun run;
  run.clean = clean;
  run.config_hash = config.hash();
  for (const auto& e : config.encoders) run.encoder_ids.push_back(e->info().id);

  // Step 1: semantic mask and budget. A targeted run with a positive fusion
  // weight builds the mask from the target caption.
  const std::string mask_text{targeted && goal.lambda != 0.0 ? std::string_view(goal.target_caption) : caption};
  PhraseSet target_phrases;
  bool target_fallback = false;
  const bool need_regions = sgma_objective && config.toggles.local;
  if (need_regions) {
    run.phrases = detail::phrases_or_fallback(caption, chunk, run.phrase_fallback);
    if (targeted && goal.lambda != 0.0) target_phrases = detail::phrases_or_fallback(goal.target_caption, chunk, target_fallback);
  }

  std::vector<detail::SurrogateState> states;
  std::vector<SemanticMask> masks;
  for (const auto& enc : config.encoders) {
    detail::SurrogateState s;
    s.encoder = enc;
    s.mask = to_mask(patch_saliency(*enc, clean, mask_text), config.resolution());
    masks.push_back(s.mask);
    std::vector<PhraseRegion> regions, target_regions;
    if (need_regions) {
      regions = detail::ground_phrases(*enc, clean, run.phrases, config.tau);
      if (retained_regions(regions).empty())
        log_warning(concat("no phrase region retained on ", enc->info().id, "; local loss contributes 0"));
      if (targeted && goal.lambda != 0.0)
        target_regions = detail::ground_phrases(*enc, *goal.target_image, target_phrases, config.tau);
    }
    switch (config.objective) {
      case ObjectiveKind::sgma:
        s.targets = targeted ? targeted_targets(*enc, clean, caption, goal, regions, target_regions)
                             : untargeted_targets(*enc, clean, caption, regions);
        break;
      case ObjectiveKind::baseline_text_feature:
      case ObjectiveKind::baseline_feature_distance:
        if (targeted) fail(ErrorKind::config, "baseline objectives are untargeted only");
        s.targets = untargeted_targets(*enc, clean, caption, {});
        break;
    }
    states.push_back(std::move(s));
  }
  run.mask = ensemble_mask(masks);
  const bool allocate_semantically = config.semantic_allocation && sgma_objective;
  run.budget = allocate_semantically ? allocate(run.mask, {config.epsilon, config.base_ratio})
                                     : uniform_budget(config.resolution(), config.epsilon);

  LossToggles toggles = config.toggles;
  if (config.objective == ObjectiveKind::baseline_text_feature) toggles = {true, false, false};
  if (config.objective == ObjectiveKind::baseline_feature_distance) toggles = {false, true, false};

  const int R = config.resolution();
  // Loss (and optionally gradient) averaged over the surrogates at one iterate.
  auto evaluate = [&](const Tensor3& delta, Tensor3* grad_out) {
    const ImageTensor adv = detail::apply_delta(clean, delta);
    const Matrix column = detail::pixel_column(adv);
    std::vector<LossBreakdown> parts;
    Matrix grad_sum;
    for (const auto& s : states) {
      ad::Tape tape;
      auto pixels = grad_out ? tape.variable(column) : tape.constant(column);
      auto tr = s.encoder->trace(tape, pixels);
      auto terms = build_loss(tape, tr, s.targets, toggles);
      parts.push_back(breakdown_of(terms));
      if (grad_out) {
        tape.backward(terms.total);
        if (grad_sum.size() == 0) grad_sum = tape.grad(pixels);
        else grad_sum += tape.grad(pixels);
      }
    }
    if (grad_out) {
      if (states.size() > 1) grad_sum /= static_cast<double>(states.size());
      *grad_out = detail::to_tensor(grad_sum, R, R);
    }
    return ensemble_loss(parts);
  };

  // Step 2: PGD from delta = 0.
  run.delta = Tensor3(R, R);
  Tensor3 grad;
  for (int step = 0; step < config.steps; ++step) {
    const auto loss = evaluate(run.delta, &grad);
    if (step == 0) run.initial_loss = loss;
    run.loss_trace.push_back(loss);
    run.delta = pgd_step(run.delta, grad, config.step_size, run.budget, clean, step);
    check_projection(run.delta, run.budget, clean, step);
    if (observer) observer(step, loss, run.delta, detail::apply_delta(clean, run.delta));
  }
  run.adversarial = detail::apply_delta(clean, run.delta);
  run.final_loss = evaluate(run.delta, nullptr);
  if (config.steps == 0) run.initial_loss = run.final_loss;
  run.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return run;
}

inline AttackRun run_untargeted(const ImageTensor& clean, std::string_view caption, AttackConfig config,
                                const StepObserver& observer = {}, const Chunker* chunker = nullptr) {
  if (config.goal.targeted()) fail(ErrorKind::config, "run_untargeted called with a targeted goal");
  return run_attack(clean, caption, config, observer, chunker);
}

inline AttackRun run_targeted(const ImageTensor& clean, std::string_view caption, const AttackConfig& config,
                              const StepObserver& observer = {}, const Chunker* chunker = nullptr) {
  if (!config.goal.targeted()) fail(ErrorKind::config, "run_targeted requires a targeted goal");
  return run_attack(clean, caption, config, observer, chunker);
}

/// Runs fn(i) for i in [0, n) on up to `workers` threads. The first
/// exception is rethrown after all workers finish.
inline void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn) {
  if (workers <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  const auto count = std::min<std::size_t>(static_cast<std::size_t>(workers), n);
  for (std::size_t t = 0; t < count; ++t)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace sgma
