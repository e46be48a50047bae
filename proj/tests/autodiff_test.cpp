// Copyright (C) 2026 The sgma-toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#include <random>

#include <gtest/gtest.h>

#include "sgma/autodiff.hpp"

namespace ad = sgma::ad;
using ad::Matrix;

namespace {

Matrix random_matrix(int rows, int cols, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

// Central differences of a scalar function of one matrix input.
template <typename F>
Matrix numeric_grad(const Matrix& x, F&& f, double h = 1e-6) {
  Matrix g(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    Matrix xp = x, xm = x;
    xp.data()[i] += h;
    xm.data()[i] -= h;
    g.data()[i] = (f(xp) - f(xm)) / (2 * h);
  }
  return g;
}

// Builds a graph from one input variable and compares analytic vs numeric gradient.
template <typename Build>
void expect_gradient_matches(const Matrix& x0, Build&& build, double tol = 1e-6) {
  ad::Tape tape;
  auto x = tape.variable(x0);
  auto out = build(tape, x);
  tape.backward(out);
  const Matrix analytic = tape.grad(x);
  const Matrix numeric = numeric_grad(x0, [&](const Matrix& xv) {
    ad::Tape t;
    return ad::value(build(t, t.constant(xv)))(0, 0);
  });
  ASSERT_EQ(analytic.rows(), numeric.rows());
  for (Eigen::Index i = 0; i < analytic.size(); ++i)
    EXPECT_NEAR(analytic.data()[i], numeric.data()[i], tol * (1 + std::abs(numeric.data()[i]))) << "element " << i;
}

class AutodiffTest : public ::testing::Test {
 protected:
  std::mt19937_64 rng{42};
};

}  // namespace

TEST_F(AutodiffTest, MatmulTransposeAndBias) {
  const Matrix w = random_matrix(4, 3, rng);
  const Matrix b = random_matrix(1, 3, rng);
  expect_gradient_matches(random_matrix(5, 4, rng), [&](ad::Tape& t, ad::Var x) {
    auto y = ad::add_row(ad::matmul(x, t.constant(w)), t.constant(b));
    return ad::sum_all(ad::mul(y, ad::transpose(ad::transpose(y))));
  });
}

TEST_F(AutodiffTest, LayerNormAllInputs) {
  const Matrix x0 = random_matrix(3, 6, rng);
  const Matrix g0 = random_matrix(1, 6, rng);
  const Matrix b0 = random_matrix(1, 6, rng);
  const Matrix probe = random_matrix(3, 6, rng);
  expect_gradient_matches(x0, [&](ad::Tape& t, ad::Var x) {
    return ad::sum_all(ad::mul(ad::layer_norm(x, t.constant(g0), t.constant(b0)), t.constant(probe)));
  });
  expect_gradient_matches(g0, [&](ad::Tape& t, ad::Var g) {
    return ad::sum_all(ad::mul(ad::layer_norm(t.constant(x0), g, t.constant(b0)), t.constant(probe)));
  });
}

TEST_F(AutodiffTest, SoftmaxGeluNormalize) {
  const Matrix probe = random_matrix(4, 5, rng);
  expect_gradient_matches(random_matrix(4, 5, rng), [&](ad::Tape& t, ad::Var x) {
    auto y = ad::normalize_rows(ad::quick_gelu(ad::softmax_rows(ad::scale(x, 3.0))));
    return ad::sum_all(ad::mul(y, t.constant(probe)));
  });
}

TEST_F(AutodiffTest, SlicesConcatsAndGathers) {
  auto index = std::make_shared<const std::vector<int>>(std::vector<int>{5, 0, 3, 3, 11, 7});
  expect_gradient_matches(random_matrix(4, 3, rng), [&](ad::Tape&, ad::Var x) {
    auto a = ad::slice_cols(x, 1, 2);
    auto b = ad::slice_rows(x, 2, 2);
    const ad::Var cols[] = {a, a};
    const ad::Var rows[] = {ad::transpose(b), ad::slice_cols(ad::gather_rows(x, {0, 0, 3}), 0, 2)};
    auto c = ad::concat_cols(cols);
    auto g = ad::gather(x, index, 2, 3);
    return ad::add(ad::add(ad::sum_all(ad::mul(c, c)), ad::mean_all(ad::concat_rows(rows))),
                   ad::sum_all(ad::mul(g, g)));
  });
}

TEST_F(AutodiffTest, RowDotMeanRowsCrossEntropy) {
  const Matrix other = random_matrix(3, 3, rng);
  expect_gradient_matches(random_matrix(3, 3, rng), [&](ad::Tape& t, ad::Var x) {
    auto d = ad::row_dot(x, t.constant(other));
    auto m = ad::mean_rows(x);
    return ad::add(ad::add(ad::sum_all(d), ad::sum_all(ad::mul(m, m))), ad::cross_entropy_rows(x, {2, 0, 1}));
  });
}

TEST_F(AutodiffTest, ConstantsCarryNoGradient) {
  ad::Tape tape;
  auto c = tape.constant(Matrix::Ones(2, 2));
  auto v = tape.variable(Matrix::Ones(2, 2));
  auto out = ad::sum_all(ad::mul(c, v));
  tape.backward(out);
  EXPECT_FALSE(tape.requires_grad(c));
  EXPECT_TRUE(tape.grad(c).isZero());
  EXPECT_TRUE(tape.grad(v).isApproxToConstant(1.0));
}

TEST_F(AutodiffTest, ZeroRowNormalizationIsNumericError) {
  ad::Tape tape;
  Matrix m = Matrix::Ones(2, 3);
  m.row(1).setZero();
  try {
    ad::normalize_rows(tape.constant(m));
    FAIL() << "expected a numeric error";
  } catch (const sgma::Error& e) {
    EXPECT_EQ(e.kind(), sgma::ErrorKind::numeric);
    EXPECT_NE(std::string(e.what()).find("row 1"), std::string::npos);
  }
}

TEST_F(AutodiffTest, BackwardRequiresScalar) {
  ad::Tape tape;
  auto v = tape.variable(Matrix::Ones(2, 2));
  EXPECT_THROW(tape.backward(v), sgma::Error);
}
