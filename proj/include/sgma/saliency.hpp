// Copyright (C) 2026 The sgma-toolkit Authors
// SPDX-License-Identifier: Apache-2.0

// Text-conditioned patch saliency (Grad-ECLIP style), semantic masks and
// patch-deviation diagnostics.

#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "sgma/encoder.hpp"
#include "sgma/image.hpp"

namespace sgma {

/// Raw per-patch scores s_i reshaped to the H x W patch grid.
struct SaliencyMap {
  Matrix scores;
};

/// R x R mask in [0,1]; uniform ones when the source map carried no signal.
struct SemanticMask {
  Matrix values;
  bool degenerate = false;

  int resolution() const { return static_cast<int>(values.rows()); }
};

/// 1 - cos between clean and adversarial patch tokens on the H x W grid.
struct DeviationMap {
  Matrix distances;
};

/// s_i = alpha_i * <v_i, g> where g is the gradient of cos(v, t) w.r.t. o_CLS.
/// Exposed separately so tests can inject stub internals.
inline SaliencyMap saliency_from_internals(const Vector& attn_cls, const Matrix& values, const Vector& cls_gradient,
                                           int grid_h, int grid_w) {
  const Eigen::Index hw = static_cast<Eigen::Index>(grid_h) * grid_w;
  if (attn_cls.size() != hw || values.rows() != hw)
    fail(ErrorKind::invariant, "saliency: expected ", hw, " patches, got attn ", attn_cls.size(), " values ",
         values.rows());
  if (values.cols() != cls_gradient.size())
    fail(ErrorKind::invariant, "saliency: value width ", values.cols(), " != gradient width ", cls_gradient.size());
  const Vector s = attn_cls.cwiseProduct(values * cls_gradient);
  SaliencyMap out;
  out.scores.resize(grid_h, grid_w);
  for (int i = 0; i < grid_h; ++i)
    for (int j = 0; j < grid_w; ++j) out.scores(i, j) = s(static_cast<Eigen::Index>(i) * grid_w + j);
  return out;
}

inline SaliencyMap patch_saliency(const VisionLanguageEncoder& enc, const ImageTensor& image,
                                  const Embedding& text) {
  const auto caps = enc.capabilities();
  if (!caps.exposes_internals)
    fail(ErrorKind::capability, "encoder ", enc.info().id, " does not expose attention/value hooks");
  if (!caps.differentiable) fail(ErrorKind::capability, "encoder ", enc.info().id, " provides no gradients");
  detail::check_resolution(enc, image);
  ad::Tape tape;
  // Pixels are a variable only so that the token path is recorded for backward.
  auto tr = enc.trace(tape, tape.variable(detail::pixel_column(image)));
  if (!tape.requires_grad(tr.all_tokens))
    fail(ErrorKind::capability, "encoder ", enc.info().id, " did not record a differentiable token path");
  auto cosine = ad::row_dot(tr.embedding, tape.constant(text.vector().transpose()));
  tape.backward(cosine);
  const Vector g = tape.grad(tr.all_tokens).row(0).transpose();
  const auto& info = enc.info();
  return saliency_from_internals(tr.attn_cls, tr.values, g, info.grid_h, info.grid_w);
}

inline SaliencyMap patch_saliency(const VisionLanguageEncoder& enc, const ImageTensor& image,
                                  std::string_view text) {
  return patch_saliency(enc, image, embed_text(enc, text));
}

/// Rectify, then min-max normalize to [0,1]. Returns false (and leaves
/// `out` all zero) when the rectified map is constant.
inline bool normalize_scores(const Matrix& scores, Matrix& out) {
  if (!scores.allFinite()) fail(ErrorKind::numeric, "saliency map contains non-finite values");
  out = scores.cwiseMax(0.0);
  const double lo = out.minCoeff(), hi = out.maxCoeff();
  if (!(hi > lo)) {
    out.setZero();
    return false;
  }
  out = (out.array() - lo) / (hi - lo);
  return true;
}

/// Half-pixel-centre bilinear resampling (edge replicate), the convention of
/// cv::resize INTER_LINEAR.
inline Matrix bilinear_resize(const Matrix& src, int out_h, int out_w) {
  if (src.rows() < 1 || src.cols() < 1 || out_h < 1 || out_w < 1) fail(ErrorKind::input, "bilinear: empty shape");
  const int in_h = static_cast<int>(src.rows()), in_w = static_cast<int>(src.cols());
  auto axis = [](int i, int in, int out, int& i0, int& i1, double& t) {
    double pos = (i + 0.5) * in / out - 0.5;
    pos = std::clamp(pos, 0.0, static_cast<double>(in - 1));
    i0 = static_cast<int>(std::floor(pos));
    i1 = std::min(i0 + 1, in - 1);
    t = pos - i0;
  };
  Matrix out(out_h, out_w);
  for (int y = 0; y < out_h; ++y) {
    int y0, y1;
    double ty;
    axis(y, in_h, out_h, y0, y1, ty);
    for (int x = 0; x < out_w; ++x) {
      int x0, x1;
      double tx;
      axis(x, in_w, out_w, x0, x1, tx);
      const double top = (1 - tx) * src(y0, x0) + tx * src(y0, x1);
      const double bottom = (1 - tx) * src(y1, x0) + tx * src(y1, x1);
      out(y, x) = (1 - ty) * top + ty * bottom;
    }
  }
  return out;
}

/// Normalizes on the patch grid, upsamples to R x R, and rescales so a
/// non-degenerate mask peaks at exactly 1 (interior maxima fall between
/// sample points under half-pixel resampling).
inline SemanticMask to_mask(const SaliencyMap& map, int resolution) {
  if (resolution < 1) fail(ErrorKind::input, "mask resolution must be positive");
  Matrix norm;
  SemanticMask mask;
  if (!normalize_scores(map.scores, norm)) {
    mask.values = Matrix::Ones(resolution, resolution);
    mask.degenerate = true;
    return mask;
  }
  mask.values = bilinear_resize(norm, resolution, resolution);
  const double peak = mask.values.maxCoeff();
  if (peak != 1.0) mask.values /= peak;
  mask.values = mask.values.cwiseMax(0.0).cwiseMin(1.0);
  return mask;
}

inline DeviationMap patch_deviation(const TokenFeatures& clean, const TokenFeatures& adv, int grid_h, int grid_w) {
  if (clean.all_tokens.rows() != adv.all_tokens.rows() || clean.all_tokens.cols() != adv.all_tokens.cols())
    fail(ErrorKind::resolution, "patch_deviation: token shapes differ");
  if (clean.patch_count() != static_cast<Eigen::Index>(grid_h) * grid_w)
    fail(ErrorKind::invariant, "patch_deviation: grid does not match token count");
  DeviationMap out;
  out.distances.resize(grid_h, grid_w);
  const auto a = clean.patch_tokens();
  const auto b = adv.patch_tokens();
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    double d = 0.0;
    if (a.row(i) != b.row(i)) {
      const double na = a.row(i).norm(), nb = b.row(i).norm();
      if (!(na > 0.0) || !(nb > 0.0)) fail(ErrorKind::numeric, "patch_deviation: zero-norm token at patch ", i);
      d = std::clamp(1.0 - a.row(i).dot(b.row(i)) / (na * nb), 0.0, 2.0);
    }
    out.distances(i / grid_w, i % grid_w) = d;
  }
  return out;
}

inline DeviationMap patch_deviation(const VisionLanguageEncoder& enc, const ImageTensor& clean,
                                    const ImageTensor& adv) {
  detail::check_resolution(enc, clean);
  detail::check_resolution(enc, adv);
  return patch_deviation(forward_tokens(enc, clean), forward_tokens(enc, adv), enc.info().grid_h,
                         enc.info().grid_w);
}

/// Grayscale PNG scaled by the map's max (zero map stays black) plus a CSV of raw values.
inline void export_heatmap(const Matrix& m, const std::filesystem::path& png, const std::filesystem::path& csv) {
  Matrix scaled = m.cwiseMax(0.0);
  const double hi = scaled.size() ? scaled.maxCoeff() : 0.0;
  if (hi > 0.0) scaled /= hi;
  write_gray_png(png, scaled);
  write_matrix_csv(csv, m);
}

}  // namespace sgma
