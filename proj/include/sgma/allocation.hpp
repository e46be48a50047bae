// Copyright (C) 2026 The sgma-toolkit Authors
// SPDX-License-Identifier: Apache-2.0

// Per-pixel perturbation budgets from a semantic mask.

#pragma once

#include "sgma/saliency.hpp"

namespace sgma {

struct BudgetParams {
  double epsilon = 8.0 / 255.0;
  double base_ratio = 0.2;

  void validate() const {
    if (!(epsilon > 0.0) || !std::isfinite(epsilon)) fail(ErrorKind::config, "epsilon must be positive, got ", epsilon);
    if (!(base_ratio >= 0.0 && base_ratio <= 1.0))
      fail(ErrorKind::config, "base ratio must lie in [0,1], got ", base_ratio);
  }
};

/// Per-pixel l-inf bound shared by the three channels.
struct BudgetMap {
  Matrix budget;

  int resolution() const { return static_cast<int>(budget.rows()); }
};

/// budget = r*eps + (M / sum M) * eps * (1 - r) * R^2
inline BudgetMap allocate(const SemanticMask& mask, const BudgetParams& params) {
  params.validate();
  const auto& m = mask.values;
  if (m.rows() == 0 || m.rows() != m.cols()) fail(ErrorKind::input, "mask must be square and non-empty");
  if (!m.allFinite() || m.minCoeff() < 0.0 || m.maxCoeff() > 1.0) fail(ErrorKind::input, "mask values outside [0,1]");
  const double total = m.sum();
  if (!(total > 0.0)) {
    if (!mask.degenerate) fail(ErrorKind::invariant, "mask sums to zero but is not flagged degenerate");
    fail(ErrorKind::invariant, "degenerate mask was not replaced by the uniform fallback");
  }
  // A constant mask reduces the formula to eps; return it without rounding drift.
  if (m.minCoeff() == m.maxCoeff()) return BudgetMap{Matrix::Constant(m.rows(), m.cols(), params.epsilon)};
  const double area = static_cast<double>(m.size());
  const double floor = params.base_ratio * params.epsilon;
  const double focused = params.epsilon * (1.0 - params.base_ratio) * area;
  BudgetMap out;
  out.budget = (floor + (m.array() / total) * focused).matrix();
  return out;
}

/// Budget when semantic allocation is switched off: eps everywhere.
inline BudgetMap uniform_budget(int resolution, double epsilon) {
  BudgetParams{epsilon, 1.0}.validate();
  return BudgetMap{Matrix::Constant(resolution, resolution, epsilon)};
}

}  // namespace sgma
