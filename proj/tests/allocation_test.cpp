// Copyright (C) 2026 The sgma-toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "sgma/allocation.hpp"
#include "test_support.hpp"

using namespace sgma;
using namespace sgma::testing;

TEST(Allocation, UniformMaskGivesEpsilon) {
  for (double r : {0.0, 0.2, 0.5, 1.0}) {
    const auto b = allocate({Matrix::Ones(8, 8), false}, {8.0 / 255, r});
    EXPECT_TRUE((b.budget.array() == 8.0 / 255).all()) << r;
  }
}

TEST(Allocation, FullBaseRatioGivesEpsilon) {
  const auto mask = to_mask({random_matrix(4, 4, 1)}, 16);
  const auto b = allocate(mask, {8.0 / 255, 1.0});
  EXPECT_TRUE((b.budget.array() == 8.0 / 255).all());
}

TEST(Allocation, HandExample) {
  Matrix m(2, 2);
  m << 1, 1, 0, 0;
  const auto b = allocate({m, false}, {8.0 / 255, 0.5});
  EXPECT_NEAR(b.budget(0, 0), 12.0 / 255, 1e-15);
  EXPECT_NEAR(b.budget(0, 1), 12.0 / 255, 1e-15);
  EXPECT_NEAR(b.budget(1, 0), 4.0 / 255, 1e-15);
  EXPECT_NEAR(b.budget(1, 1), 4.0 / 255, 1e-15);
  EXPECT_NEAR(b.budget.sum(), 32.0 / 255, 1e-15);
}

TEST(Allocation, ConservationFloorMonotonicity) {
  for (std::uint64_t seed = 0; seed < 10; ++seed)
    for (double r : {0.0, 0.2, 0.5, 1.0}) {
      const Matrix m = random_matrix(32, 32, seed, 0, 1);
      const double eps = 8.0 / 255;
      const auto b = allocate({m, false}, {eps, r});
      EXPECT_NEAR(b.budget.sum(), eps * 32 * 32, 1e-9 * eps * 32 * 32);
      EXPECT_GE(b.budget.minCoeff(), r * eps);
      if (r < 1.0) {
        for (int k = 0; k < 50; ++k) {
          const int a = (k * 37) % 1024, c = (k * 101 + 7) % 1024;
          const double ma = m(a / 32, a % 32), mc = m(c / 32, c % 32);
          if (ma > mc) EXPECT_GT(b.budget(a / 32, a % 32), b.budget(c / 32, c % 32));
        }
      }
    }
}

TEST(Allocation, ConstantMaskAnyLevel) {
  const auto b = allocate({Matrix::Constant(5, 5, 0.3), false}, {4.0 / 255, 0.2});
  EXPECT_TRUE((b.budget.array() == 4.0 / 255).all());
}

TEST(Allocation, ZeroMaskIsInvariantViolation) {
  try {
    allocate({Matrix::Zero(4, 4), false}, {8.0 / 255, 0.2});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::invariant);
  }
}

TEST(Allocation, ParameterValidation) {
  EXPECT_THROW(allocate({Matrix::Ones(2, 2), false}, {0.0, 0.2}), Error);
  EXPECT_THROW(allocate({Matrix::Ones(2, 2), false}, {0.1, 1.5}), Error);
  Matrix bad = Matrix::Ones(2, 2);
  bad(0, 0) = 1.5;
  EXPECT_THROW(allocate({bad, false}, {0.1, 0.2}), Error);
}
