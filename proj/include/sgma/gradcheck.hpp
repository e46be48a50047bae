// Copyright (C) 2026 The sgma-toolkit Authors
// SPDX-License-Identifier: Apache-2.0

// Finite-difference audit of analytic pixel gradients.

#pragma once

#include <random>

#include "sgma/engine.hpp"

namespace sgma {

struct GradcheckSample {
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradcheckResult {
  std::string name;
  std::vector<GradcheckSample> samples;

  double max_rel_error() const {
    double m = 0.0;
    for (const auto& s : samples) m = std::max(m, s.rel_error);
    return m;
  }
};

/// |a - n| / max(|a|, |n|); 0 when both vanish.
inline double relative_error(double analytic, double numeric) {
  const double scale = std::max(std::abs(analytic), std::abs(numeric));
  return scale == 0.0 ? 0.0 : std::abs(analytic - numeric) / scale;
}

/// Central differences with step `h` at `count` pixel coordinates drawn from
/// `seed`. Coordinates whose +-h probe would leave [0,1] are redrawn.
inline GradcheckResult gradient_audit(const VisionLanguageEncoder& enc, const ImageTensor& image, const Objective& obj,
                                      int count = 10, double h = 1e-3, std::uint64_t seed = 0) {
  if (count < 1) fail(ErrorKind::config, "gradcheck needs at least one coordinate");
  if (!(h > 0.0)) fail(ErrorKind::config, "gradcheck step must be positive");
  GradcheckResult out;
  out.name = obj.name;
  const auto g = pixel_gradient(enc, image, obj);
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, image.size() - 1);
  int misses = 0;
  while (static_cast<int>(out.samples.size()) < count) {
    const std::size_t i = pick(rng);
    const double v = image.data()[i];
    if (v - h < 0.0 || v + h > 1.0) {
      if (++misses > 100 * count) fail(ErrorKind::input, "gradcheck: image too close to the pixel range bounds");
      continue;
    }
    Tensor3 p = image.tensor(), m = image.tensor();
    p.values[i] += h;
    m.values[i] -= h;
    const double num =
        (pixel_gradient(enc, ImageTensor::from(p), obj).value - pixel_gradient(enc, ImageTensor::from(m), obj).value) /
        (2 * h);
    out.samples.push_back({i, g.gradient.values[i], num, relative_error(g.gradient.values[i], num)});
  }
  return out;
}

/// Every loss component and total, untargeted and targeted, at `adv`.
/// Regions come from `caption` (and the target caption) on the clean and
/// target images.
inline std::vector<GradcheckResult> audit_losses(const VisionLanguageEncoder& enc, const ImageTensor& clean,
                                                 const ImageTensor& adv, std::string_view caption,
                                                 const AttackGoal& goal, double tau = 0.3, int count = 10,
                                                 double h = 1e-3, std::uint64_t seed = 0) {
  bool fb = false;
  const RuleChunker chunker;
  const auto phrases = detail::phrases_or_fallback(caption, chunker, fb);
  const auto regions = detail::ground_phrases(enc, clean, phrases, tau);
  const auto untargeted = untargeted_targets(enc, clean, caption, regions);
  std::vector<std::pair<LossTargets, std::string>> sets{{untargeted, ""}};
  if (goal.targeted()) {
    const auto tphrases = detail::phrases_or_fallback(goal.target_caption, chunker, fb);
    const auto tregions = detail::ground_phrases(enc, *goal.target_image, tphrases, tau);
    sets.emplace_back(targeted_targets(enc, clean, caption, goal, regions, tregions), "targeted_");
  }
  std::vector<GradcheckResult> out;
  for (const auto& [targets, prefix] : sets) {
    if (targets.regions.empty()) log_warning("gradcheck: no retained phrase region; local loss is constant 0");
    const std::pair<const char*, LossToggles> parts[] = {{"text_image", {true, false, false}},
                                                         {"image_image", {false, true, false}},
                                                         {"local", {false, false, true}},
                                                         {"total", {true, true, true}}};
    for (const auto& [name, toggles] : parts) {
      auto obj = objective::total(targets, toggles);
      obj.name = prefix + name;
      out.push_back(gradient_audit(enc, adv, obj, count, h, seed));
    }
  }
  return out;
}

}  // namespace sgma
