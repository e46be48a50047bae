// Copyright (C) 2026 The sgma-toolkit Authors
// SPDX-License-Identifier: Apache-2.0

// Reverse-mode differentiation over dense matrices.
//
// A Tape records every intermediate value together with a closure that pushes
// the output gradient back to its inputs. Nodes that do not depend on any
// variable skip the closure entirely, so clean forward passes cost nothing
// extra. All values are double precision.

#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "sgma/common.hpp"

namespace sgma::ad {

using Matrix = Eigen::MatrixXd;

class Tape;

/// Handle to a node on a tape.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, int self)>;

  Tape() { nodes_.reserve(256); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value) { return push(std::move(value), false, nullptr); }
  Var variable(Matrix value) { return push(std::move(value), true, nullptr); }

  const Matrix& value(Var v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

  /// Gradient accumulated by the last backward(); zeros if the node was not reached.
  Matrix grad(Var v) const {
    const auto& n = nodes_.at(v.id);
    if (n.grad.size() == 0) return Matrix::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  /// Seeds d(output)/d(output) = 1 and propagates to every node that requires grad.
  void backward(Var output) {
    const auto& out = nodes_.at(output.id);
    if (out.value.size() != 1) fail(ErrorKind::invariant, "backward() needs a scalar output");
    for (auto& n : nodes_) n.grad.resize(0, 0);
    if (!out.requires_grad) return;
    nodes_[output.id].grad = Matrix::Ones(1, 1);
    for (int i = output.id; i >= 0; --i) {
      auto& n = nodes_[i];
      if (n.backward && n.grad.size() != 0) n.backward(*this, i);
    }
  }

  std::size_t size() const { return nodes_.size(); }

  // Op-building interface ---------------------------------------------------

  /// Records a node. `backward` runs only when any input requires grad.
  Var push(Matrix value, bool requires_grad, Backward backward) {
    nodes_.push_back(Node{std::move(value), Matrix(), requires_grad, requires_grad ? std::move(backward) : nullptr});
    return Var{this, static_cast<int>(nodes_.size()) - 1};
  }

  const Matrix& out_grad(int self) const { return nodes_[self].grad; }
  const Matrix& value_of(int id) const { return nodes_[id].value; }
  bool needs(int id) const { return nodes_[id].requires_grad; }

  template <typename Expr>
  void accumulate(int id, const Expr& g) {
    auto& n = nodes_[id];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g.matrix();
    } else {
      n.grad += g.matrix();
    }
  }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad;
    Backward backward;
  };
  std::vector<Node> nodes_;
};

namespace detail {
inline Tape& tape_of(Var a) {
  if (!a.valid()) fail(ErrorKind::invariant, "use of an invalid autodiff handle");
  return *a.tape;
}
inline Tape& tape_of(Var a, Var b) {
  if (a.tape != b.tape) fail(ErrorKind::invariant, "operands live on different tapes");
  return tape_of(a);
}
inline void check_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    fail(ErrorKind::invariant, op, ": shape mismatch ", a.rows(), "x", a.cols(), " vs ", b.rows(), "x", b.cols());
}
}  // namespace detail

inline const Matrix& value(Var v) { return detail::tape_of(v).value(v); }

// Linear algebra ------------------------------------------------------------------

inline Var matmul(Var a, Var b) {
  Tape& t = detail::tape_of(a, b);
  const Matrix& A = t.value(a);
  const Matrix& B = t.value(b);
  if (A.cols() != B.rows()) fail(ErrorKind::invariant, "matmul: inner dimensions ", A.cols(), " vs ", B.rows());
  Matrix out = A * B;
  return t.push(std::move(out), t.needs(a.id) || t.needs(b.id), [a = a.id, b = b.id](Tape& tp, int self) {
    const Matrix& G = tp.out_grad(self);
    if (tp.needs(a)) tp.accumulate(a, G * tp.value_of(b).transpose());
    if (tp.needs(b)) tp.accumulate(b, tp.value_of(a).transpose() * G);
  });
}

inline Var transpose(Var a) {
  Tape& t = detail::tape_of(a);
  return t.push(t.value(a).transpose(), t.needs(a.id), [a = a.id](Tape& tp, int self) {
    tp.accumulate(a, tp.out_grad(self).transpose());
  });
}

inline Var add(Var a, Var b) {
  Tape& t = detail::tape_of(a, b);
  detail::check_same_shape(t.value(a), t.value(b), "add");
  return t.push(t.value(a) + t.value(b), t.needs(a.id) || t.needs(b.id), [a = a.id, b = b.id](Tape& tp, int self) {
    tp.accumulate(a, tp.out_grad(self));
    tp.accumulate(b, tp.out_grad(self));
  });
}

inline Var sub(Var a, Var b) {
  Tape& t = detail::tape_of(a, b);
  detail::check_same_shape(t.value(a), t.value(b), "sub");
  return t.push(t.value(a) - t.value(b), t.needs(a.id) || t.needs(b.id), [a = a.id, b = b.id](Tape& tp, int self) {
    tp.accumulate(a, tp.out_grad(self));
    tp.accumulate(b, -tp.out_grad(self));
  });
}

/// Element-wise product.
inline Var mul(Var a, Var b) {
  Tape& t = detail::tape_of(a, b);
  detail::check_same_shape(t.value(a), t.value(b), "mul");
  return t.push(t.value(a).cwiseProduct(t.value(b)), t.needs(a.id) || t.needs(b.id),
                [a = a.id, b = b.id](Tape& tp, int self) {
                  const Matrix& G = tp.out_grad(self);
                  if (tp.needs(a)) tp.accumulate(a, G.cwiseProduct(tp.value_of(b)));
                  if (tp.needs(b)) tp.accumulate(b, G.cwiseProduct(tp.value_of(a)));
                });
}

/// out = scale * a + offset (element-wise).
inline Var affine(Var a, double scale, double offset = 0.0) {
  Tape& t = detail::tape_of(a);
  Matrix out = (t.value(a) * scale).array() + offset;
  return t.push(std::move(out), t.needs(a.id), [a = a.id, scale](Tape& tp, int self) {
    tp.accumulate(a, tp.out_grad(self) * scale);
  });
}

inline Var scale(Var a, double s) { return affine(a, s, 0.0); }

/// Adds a 1 x n row to every row of a.
inline Var add_row(Var a, Var row) {
  Tape& t = detail::tape_of(a, row);
  const Matrix& A = t.value(a);
  const Matrix& r = t.value(row);
  if (r.rows() != 1 || r.cols() != A.cols()) fail(ErrorKind::invariant, "add_row: bias shape mismatch");
  Matrix out = A.rowwise() + r.row(0);
  return t.push(std::move(out), t.needs(a.id) || t.needs(row.id), [a = a.id, row = row.id](Tape& tp, int self) {
    const Matrix& G = tp.out_grad(self);
    tp.accumulate(a, G);
    if (tp.needs(row)) tp.accumulate(row, G.colwise().sum());
  });
}

// Shape ops -------------------------------------------------------------------------

inline Var slice_cols(Var a, Eigen::Index start, Eigen::Index count) {
  Tape& t = detail::tape_of(a);
  const Matrix& A = t.value(a);
  if (start < 0 || start + count > A.cols()) fail(ErrorKind::invariant, "slice_cols out of range");
  return t.push(A.middleCols(start, count), t.needs(a.id), [a = a.id, start, count](Tape& tp, int self) {
    Matrix g = Matrix::Zero(tp.value_of(a).rows(), tp.value_of(a).cols());
    g.middleCols(start, count) = tp.out_grad(self);
    tp.accumulate(a, g);
  });
}

inline Var slice_rows(Var a, Eigen::Index start, Eigen::Index count) {
  Tape& t = detail::tape_of(a);
  const Matrix& A = t.value(a);
  if (start < 0 || start + count > A.rows()) fail(ErrorKind::invariant, "slice_rows out of range");
  return t.push(A.middleRows(start, count), t.needs(a.id), [a = a.id, start, count](Tape& tp, int self) {
    Matrix g = Matrix::Zero(tp.value_of(a).rows(), tp.value_of(a).cols());
    g.middleRows(start, count) = tp.out_grad(self);
    tp.accumulate(a, g);
  });
}

inline Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) fail(ErrorKind::invariant, "concat_cols of nothing");
  Tape& t = detail::tape_of(parts.front());
  Eigen::Index cols = 0;
  const Eigen::Index rows = t.value(parts.front()).rows();
  bool needs = false;
  for (Var p : parts) {
    if (t.value(p).rows() != rows) fail(ErrorKind::invariant, "concat_cols: row mismatch");
    cols += t.value(p).cols();
    needs = needs || t.needs(p.id);
  }
  Matrix out(rows, cols);
  std::vector<int> ids;
  Eigen::Index c = 0;
  for (Var p : parts) {
    out.middleCols(c, t.value(p).cols()) = t.value(p);
    c += t.value(p).cols();
    ids.push_back(p.id);
  }
  return t.push(std::move(out), needs, [ids = std::move(ids)](Tape& tp, int self) {
    Eigen::Index c0 = 0;
    for (int id : ids) {
      const auto n = tp.value_of(id).cols();
      if (tp.needs(id)) tp.accumulate(id, tp.out_grad(self).middleCols(c0, n));
      c0 += n;
    }
  });
}

inline Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) fail(ErrorKind::invariant, "concat_rows of nothing");
  Tape& t = detail::tape_of(parts.front());
  Eigen::Index rows = 0;
  const Eigen::Index cols = t.value(parts.front()).cols();
  bool needs = false;
  for (Var p : parts) {
    if (t.value(p).cols() != cols) fail(ErrorKind::invariant, "concat_rows: column mismatch");
    rows += t.value(p).rows();
    needs = needs || t.needs(p.id);
  }
  Matrix out(rows, cols);
  std::vector<int> ids;
  Eigen::Index r = 0;
  for (Var p : parts) {
    out.middleRows(r, t.value(p).rows()) = t.value(p);
    r += t.value(p).rows();
    ids.push_back(p.id);
  }
  return t.push(std::move(out), needs, [ids = std::move(ids)](Tape& tp, int self) {
    Eigen::Index r0 = 0;
    for (int id : ids) {
      const auto n = tp.value_of(id).rows();
      if (tp.needs(id)) tp.accumulate(id, tp.out_grad(self).middleRows(r0, n));
      r0 += n;
    }
  });
}

/// Selects rows by index (duplicates allowed).
inline Var gather_rows(Var a, std::vector<int> rows) {
  Tape& t = detail::tape_of(a);
  const Matrix& A = t.value(a);
  Matrix out(static_cast<Eigen::Index>(rows.size()), A.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= A.rows()) fail(ErrorKind::invariant, "gather_rows index ", rows[i], " out of range");
    out.row(static_cast<Eigen::Index>(i)) = A.row(rows[i]);
  }
  return t.push(std::move(out), t.needs(a.id), [a = a.id, rows = std::move(rows)](Tape& tp, int self) {
    const Matrix& G = tp.out_grad(self);
    Matrix g = Matrix::Zero(tp.value_of(a).rows(), tp.value_of(a).cols());
    for (std::size_t i = 0; i < rows.size(); ++i) g.row(rows[i]) += G.row(static_cast<Eigen::Index>(i));
    tp.accumulate(a, g);
  });
}

/// Arbitrary element gather: out(r, c) = a.data()[index[r * cols + c]] where
/// a.data() is the column-major storage of the input.
inline Var gather(Var a, std::shared_ptr<const std::vector<int>> index, Eigen::Index rows, Eigen::Index cols) {
  Tape& t = detail::tape_of(a);
  const Matrix& A = t.value(a);
  if (static_cast<Eigen::Index>(index->size()) != rows * cols) fail(ErrorKind::invariant, "gather: index size");
  Matrix out(rows, cols);
  const double* src = A.data();
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) out(r, c) = src[(*index)[r * cols + c]];
  return t.push(std::move(out), t.needs(a.id), [a = a.id, index, rows, cols](Tape& tp, int self) {
    const Matrix& G = tp.out_grad(self);
    Matrix g = Matrix::Zero(tp.value_of(a).rows(), tp.value_of(a).cols());
    double* dst = g.data();
    for (Eigen::Index r = 0; r < rows; ++r)
      for (Eigen::Index c = 0; c < cols; ++c) dst[(*index)[r * cols + c]] += G(r, c);
    tp.accumulate(a, g);
  });
}

// Reductions ----------------------------------------------------------------------

inline Var sum_all(Var a) {
  Tape& t = detail::tape_of(a);
  Matrix out(1, 1);
  out(0, 0) = t.value(a).sum();
  return t.push(std::move(out), t.needs(a.id), [a = a.id](Tape& tp, int self) {
    const double g = tp.out_grad(self)(0, 0);
    tp.accumulate(a, Matrix::Constant(tp.value_of(a).rows(), tp.value_of(a).cols(), g));
  });
}

inline Var mean_all(Var a) {
  Tape& t = detail::tape_of(a);
  const auto n = static_cast<double>(t.value(a).size());
  if (n == 0) fail(ErrorKind::invariant, "mean of an empty matrix");
  Matrix out(1, 1);
  out(0, 0) = t.value(a).sum() / n;
  return t.push(std::move(out), t.needs(a.id), [a = a.id, n](Tape& tp, int self) {
    const double g = tp.out_grad(self)(0, 0) / n;
    tp.accumulate(a, Matrix::Constant(tp.value_of(a).rows(), tp.value_of(a).cols(), g));
  });
}

/// Column means: (rows x n) -> (1 x n).
inline Var mean_rows(Var a) {
  Tape& t = detail::tape_of(a);
  const auto rows = t.value(a).rows();
  if (rows == 0) fail(ErrorKind::invariant, "mean_rows of an empty matrix");
  Matrix out = t.value(a).colwise().mean();
  return t.push(std::move(out), t.needs(a.id), [a = a.id, rows](Tape& tp, int self) {
    Matrix g = tp.out_grad(self).replicate(rows, 1) / static_cast<double>(rows);
    tp.accumulate(a, g);
  });
}

/// Row-wise inner products: (n x d, n x d) -> (n x 1).
inline Var row_dot(Var a, Var b) {
  Tape& t = detail::tape_of(a, b);
  detail::check_same_shape(t.value(a), t.value(b), "row_dot");
  Matrix out = t.value(a).cwiseProduct(t.value(b)).rowwise().sum();
  return t.push(std::move(out), t.needs(a.id) || t.needs(b.id), [a = a.id, b = b.id](Tape& tp, int self) {
    const Matrix& G = tp.out_grad(self);
    if (tp.needs(a)) tp.accumulate(a, tp.value_of(b).array().colwise() * G.col(0).array());
    if (tp.needs(b)) tp.accumulate(b, tp.value_of(a).array().colwise() * G.col(0).array());
  });
}

// Nonlinearities -----------------------------------------------------------------

/// Scales every row to unit Euclidean norm. A zero row is a numeric error naming the row.
inline Var normalize_rows(Var a) {
  Tape& t = detail::tape_of(a);
  const Matrix& A = t.value(a);
  Eigen::VectorXd norms = A.rowwise().norm();
  for (Eigen::Index r = 0; r < norms.size(); ++r)
    if (!(norms(r) > 0.0) || !std::isfinite(norms(r))) fail(ErrorKind::numeric, "row ", r, " has zero or non-finite norm");
  Matrix out = A.array().colwise() / norms.array();
  return t.push(std::move(out), t.needs(a.id), [a = a.id, norms = std::move(norms)](Tape& tp, int self) {
    const Matrix& G = tp.out_grad(self);
    const Matrix& Y = tp.value_of(self);
    Eigen::VectorXd proj = G.cwiseProduct(Y).rowwise().sum();
    Matrix g = (G - (Y.array().colwise() * proj.array()).matrix()).array().colwise() / norms.array();
    tp.accumulate(a, g);
  });
}

inline Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5) {
  Tape& t = detail::tape_of(x, gamma);
  const Matrix& X = t.value(x);
  const Matrix& gm = t.value(gamma);
  const Matrix& bt = t.value(beta);
  if (gm.rows() != 1 || gm.cols() != X.cols() || bt.rows() != 1 || bt.cols() != X.cols())
    fail(ErrorKind::invariant, "layer_norm: parameter shape mismatch");
  const auto n = static_cast<double>(X.cols());
  Eigen::VectorXd mean = X.rowwise().mean();
  Matrix centered = X.colwise() - mean;
  Eigen::VectorXd inv_std = ((centered.array().square().rowwise().sum() / n) + eps).rsqrt();
  Matrix xhat = centered.array().colwise() * inv_std.array();
  Matrix out = (xhat.array().rowwise() * gm.row(0).array()).rowwise() + bt.row(0).array();
  const bool needs = t.needs(x.id) || t.needs(gamma.id) || t.needs(beta.id);
  return t.push(std::move(out), needs,
                [x = x.id, g_id = gamma.id, b_id = beta.id, xhat = std::move(xhat), inv_std = std::move(inv_std), n](
                    Tape& tp, int self) {
                  const Matrix& G = tp.out_grad(self);
                  if (tp.needs(g_id)) tp.accumulate(g_id, G.cwiseProduct(xhat).colwise().sum());
                  if (tp.needs(b_id)) tp.accumulate(b_id, G.colwise().sum());
                  if (!tp.needs(x)) return;
                  Matrix dxhat = G.array().rowwise() * tp.value_of(g_id).row(0).array();
                  Eigen::VectorXd m1 = dxhat.rowwise().sum() / n;
                  Eigen::VectorXd m2 = dxhat.cwiseProduct(xhat).rowwise().sum() / n;
                  Matrix dx = (dxhat.colwise() - m1) - (xhat.array().colwise() * m2.array()).matrix();
                  tp.accumulate(x, dx.array().colwise() * inv_std.array());
                });
}

/// x * sigmoid(1.702 x), the GELU approximation used by CLIP.
inline Var quick_gelu(Var a) {
  Tape& t = detail::tape_of(a);
  const Matrix& X = t.value(a);
  Matrix sig = (1.0 + (-1.702 * X.array()).exp()).inverse();
  Matrix out = X.cwiseProduct(sig);
  return t.push(std::move(out), t.needs(a.id), [a = a.id, sig = std::move(sig)](Tape& tp, int self) {
    const auto X = tp.value_of(a).array();
    const auto s = sig.array();
    Matrix d = s + 1.702 * X * s * (1.0 - s);
    tp.accumulate(a, tp.out_grad(self).cwiseProduct(d));
  });
}

inline Var softmax_rows(Var a) {
  Tape& t = detail::tape_of(a);
  const Matrix& X = t.value(a);
  Eigen::VectorXd mx = X.rowwise().maxCoeff();
  Matrix e = (X.colwise() - mx).array().exp();
  Eigen::VectorXd z = e.rowwise().sum();
  Matrix out = e.array().colwise() / z.array();
  return t.push(std::move(out), t.needs(a.id), [a = a.id](Tape& tp, int self) {
    const Matrix& G = tp.out_grad(self);
    const Matrix& Y = tp.value_of(self);
    Eigen::VectorXd inner = G.cwiseProduct(Y).rowwise().sum();
    tp.accumulate(a, Y.cwiseProduct((G.colwise() - inner)));
  });
}

/// Mean over rows of -log softmax(logits)[target]. Used for contrastive training.
inline Var cross_entropy_rows(Var logits, std::vector<int> targets) {
  Tape& t = detail::tape_of(logits);
  const Matrix& X = t.value(logits);
  if (static_cast<Eigen::Index>(targets.size()) != X.rows()) fail(ErrorKind::invariant, "cross_entropy: target count");
  Eigen::VectorXd mx = X.rowwise().maxCoeff();
  Matrix e = (X.colwise() - mx).array().exp();
  Eigen::VectorXd z = e.rowwise().sum();
  Matrix p = e.array().colwise() / z.array();
  double loss = 0.0;
  for (Eigen::Index r = 0; r < X.rows(); ++r) loss -= (X(r, targets[r]) - mx(r) - std::log(z(r)));
  const double n = static_cast<double>(X.rows());
  Matrix out(1, 1);
  out(0, 0) = loss / n;
  return t.push(std::move(out), t.needs(logits.id),
                [a = logits.id, p = std::move(p), targets = std::move(targets), n](Tape& tp, int self) {
                  Matrix g = p;
                  for (Eigen::Index r = 0; r < g.rows(); ++r) g(r, targets[r]) -= 1.0;
                  tp.accumulate(a, g * (tp.out_grad(self)(0, 0) / n));
                });
}

}  // namespace sgma::ad
