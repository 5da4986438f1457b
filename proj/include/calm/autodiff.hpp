// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode differentiation over dense row-major matrices.
//
// A Graph is a tape: every op appends one node holding its forward value and a
// closure that scatters the node's gradient into its inputs. Ops are free
// functions over Var handles, so model code reads like ordinary math:
//
//   auto h = relu(add_row(matmul(x, w1), b1));
//
// Values are checked for finiteness as they are produced; the first op that
// yields NaN/Inf throws NumericError naming the op.

#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace calm {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using MatrixXd = Matrix<double>;

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A named, trainable (or frozen) dense array. Rank 1 tensors are stored as a
/// single row; `rank` records what was declared so checkpoints round-trip.
template <typename Scalar>
struct Tensor {
  std::string name;
  int rank = 2;
  Matrix<Scalar> value;
  Matrix<Scalar> grad;  // empty until the first backward pass touches it

  Tensor() = default;
  Tensor(std::string n, Matrix<Scalar> v, int r = 2)
      : name(std::move(n)), rank(r), value(std::move(v)) {}

  std::vector<std::int64_t> shape() const {
    if (rank == 1) return {value.cols()};
    return {value.rows(), value.cols()};
  }
  bool has_grad() const { return grad.size() != 0; }
  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

template <typename Scalar>
class Graph;

template <typename Scalar>
struct Var {
  Graph<Scalar>* graph = nullptr;
  std::size_t id = 0;

  const Matrix<Scalar>& value() const { return graph->value(*this); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
};

template <typename Scalar>
class Graph {
 public:
  using Mat = Matrix<Scalar>;
  using VarT = Var<Scalar>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// A leaf that never receives gradient.
  VarT constant(Mat value) { return push("constant", std::move(value), false, {}); }

  /// A leaf whose gradient is readable through grad() after backward().
  VarT variable(Mat value) { return push("variable", std::move(value), true, {}); }

  /// A leaf bound to an external tensor. backward() accumulates into
  /// tensor.grad when `trainable`; frozen tensors are only read.
  VarT parameter(Tensor<Scalar>& tensor, bool trainable = true) {
    auto v = push("parameter", tensor.value, trainable, {});
    if (trainable) nodes_[v.id].bound = &tensor;
    return v;
  }

  const Mat& value(VarT v) const { return nodes_.at(v.id).value; }

  /// Gradient of the last backward() loss w.r.t. v; zeros if v did not
  /// influence the loss.
  Mat grad(VarT v) const {
    const auto& n = nodes_.at(v.id);
    if (n.grad.size() == 0) return Mat::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  bool requires_grad(VarT v) const { return nodes_.at(v.id).requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  void backward(VarT loss) {
    auto& root = nodes_.at(loss.id);
    if (root.value.rows() != 1 || root.value.cols() != 1) {
      throw ShapeError("backward: loss must be a scalar, got " +
                       std::to_string(root.value.rows()) + "x" +
                       std::to_string(root.value.cols()));
    }
    for (auto& n : nodes_) n.grad.resize(0, 0);
    root.grad = Mat::Ones(1, 1);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (!n.requires_grad || n.grad.size() == 0) continue;
      if (!n.grad.allFinite()) {
        throw NumericError("backward: non-finite gradient at op '" + n.op + "'");
      }
      if (n.backward) n.backward(n.grad);
      if (n.bound != nullptr) {
        if (!n.bound->has_grad()) n.bound->zero_grad();
        n.bound->grad += n.grad;
      }
    }
  }

  // Op construction; used by the free functions below.
  VarT push(std::string op, Mat value, bool requires_grad,
            std::function<void(const Mat&)> backward) {
    if (!value.allFinite()) throw NumericError("forward: non-finite value from op '" + op + "'");
    nodes_.push_back(Node{std::move(op), std::move(value), Mat(), requires_grad,
                          std::move(backward), nullptr});
    return VarT{this, nodes_.size() - 1};
  }

  /// Accumulate g into the gradient buffer of v (no-op for constants).
  void accumulate(VarT v, const Mat& g) {
    auto& n = nodes_[v.id];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  template <typename Block>
  void accumulate_block(VarT v, Eigen::Index row, Eigen::Index col, const Block& g) {
    auto& n = nodes_[v.id];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
    n.grad.block(row, col, g.rows(), g.cols()) += g;
  }

 private:
  struct Node {
    std::string op;
    Mat value;
    Mat grad;
    bool requires_grad;
    std::function<void(const Mat&)> backward;
    Tensor<Scalar>* bound;
  };
  std::vector<Node> nodes_;
};

namespace detail {

template <typename Scalar>
Graph<Scalar>& same_graph(Var<Scalar> a, Var<Scalar> b) {
  if (a.graph != b.graph || a.graph == nullptr) {
    throw std::invalid_argument("autodiff: operands belong to different graphs");
  }
  return *a.graph;
}

template <typename Scalar>
void require_same_shape(const char* op, Var<Scalar> a, Var<Scalar> b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                     std::to_string(b.cols()));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

template <typename Scalar>
Var<Scalar> operator+(Var<Scalar> a, Var<Scalar> b) {
  auto& g = detail::same_graph(a, b);
  detail::require_same_shape("add", a, b);
  bool rg = g.requires_grad(a) || g.requires_grad(b);
  return g.push("add", a.value() + b.value(), rg, [&g, a, b](const Matrix<Scalar>& dy) {
    g.accumulate(a, dy);
    g.accumulate(b, dy);
  });
}

template <typename Scalar>
Var<Scalar> operator-(Var<Scalar> a, Var<Scalar> b) {
  auto& g = detail::same_graph(a, b);
  detail::require_same_shape("sub", a, b);
  bool rg = g.requires_grad(a) || g.requires_grad(b);
  return g.push("sub", a.value() - b.value(), rg, [&g, a, b](const Matrix<Scalar>& dy) {
    g.accumulate(a, dy);
    g.accumulate(b, Matrix<Scalar>(-dy));
  });
}

/// Hadamard product.
template <typename Scalar>
Var<Scalar> cwise_product(Var<Scalar> a, Var<Scalar> b) {
  auto& g = detail::same_graph(a, b);
  detail::require_same_shape("cwise_product", a, b);
  bool rg = g.requires_grad(a) || g.requires_grad(b);
  return g.push("cwise_product", a.value().cwiseProduct(b.value()), rg,
                [&g, a, b](const Matrix<Scalar>& dy) {
                  g.accumulate(a, Matrix<Scalar>(dy.cwiseProduct(b.value())));
                  g.accumulate(b, Matrix<Scalar>(dy.cwiseProduct(a.value())));
                });
}

template <typename Scalar>
Var<Scalar> operator*(Var<Scalar> a, Scalar s) {
  auto& g = *a.graph;
  return g.push("scale", a.value() * s, g.requires_grad(a),
                [&g, a, s](const Matrix<Scalar>& dy) { g.accumulate(a, Matrix<Scalar>(dy * s)); });
}

template <typename Scalar>
Var<Scalar> operator*(Scalar s, Var<Scalar> a) {
  return a * s;
}

// ---------------------------------------------------------------------------
// Linear algebra

template <typename Scalar>
Var<Scalar> matmul(Var<Scalar> a, Var<Scalar> b) {
  auto& g = detail::same_graph(a, b);
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions " + std::to_string(a.cols()) + " and " +
                     std::to_string(b.rows()) + " differ");
  }
  bool rg = g.requires_grad(a) || g.requires_grad(b);
  return g.push("matmul", a.value() * b.value(), rg, [&g, a, b](const Matrix<Scalar>& dy) {
    if (g.requires_grad(a)) g.accumulate(a, Matrix<Scalar>(dy * b.value().transpose()));
    if (g.requires_grad(b)) g.accumulate(b, Matrix<Scalar>(a.value().transpose() * dy));
  });
}

/// a * b^T without materializing the transpose.
template <typename Scalar>
Var<Scalar> matmul_nt(Var<Scalar> a, Var<Scalar> b) {
  auto& g = detail::same_graph(a, b);
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt: column counts " + std::to_string(a.cols()) + " and " +
                     std::to_string(b.cols()) + " differ");
  }
  bool rg = g.requires_grad(a) || g.requires_grad(b);
  return g.push("matmul_nt", a.value() * b.value().transpose(), rg,
                [&g, a, b](const Matrix<Scalar>& dy) {
                  if (g.requires_grad(a)) g.accumulate(a, Matrix<Scalar>(dy * b.value()));
                  if (g.requires_grad(b)) g.accumulate(b, Matrix<Scalar>(dy.transpose() * a.value()));
                });
}

/// Adds a 1xN bias row to every row of an MxN matrix. This is the only
/// broadcasting the engine supports.
template <typename Scalar>
Var<Scalar> add_row(Var<Scalar> a, Var<Scalar> bias) {
  auto& g = detail::same_graph(a, bias);
  if (bias.rows() != 1 || bias.cols() != a.cols()) {
    throw ShapeError("add_row: bias must be 1x" + std::to_string(a.cols()));
  }
  bool rg = g.requires_grad(a) || g.requires_grad(bias);
  Matrix<Scalar> y = a.value().rowwise() + bias.value().row(0);
  return g.push("add_row", std::move(y), rg, [&g, a, bias](const Matrix<Scalar>& dy) {
    g.accumulate(a, dy);
    if (g.requires_grad(bias)) g.accumulate(bias, Matrix<Scalar>(dy.colwise().sum()));
  });
}

// ---------------------------------------------------------------------------
// Nonlinearities

template <typename Scalar>
Var<Scalar> relu(Var<Scalar> a) {
  auto& g = *a.graph;
  return g.push("relu", a.value().cwiseMax(Scalar(0)), g.requires_grad(a),
                [&g, a](const Matrix<Scalar>& dy) {
                  Matrix<Scalar> dx = (a.value().array() > Scalar(0)).select(dy, Scalar(0));
                  g.accumulate(a, dx);
                });
}

/// Tanh-approximated GELU.
template <typename Scalar>
Var<Scalar> gelu(Var<Scalar> a) {
  auto& g = *a.graph;
  const Scalar c = std::sqrt(Scalar(2) / Scalar(M_PI));
  const Scalar k = Scalar(0.044715);
  Matrix<Scalar> x = a.value();
  Matrix<Scalar> t = (c * (x.array() + k * x.array().cube())).tanh().matrix();
  Matrix<Scalar> y = (Scalar(0.5) * x.array() * (Scalar(1) + t.array())).matrix();
  return g.push("gelu", std::move(y), g.requires_grad(a),
                [&g, a, t, c, k](const Matrix<Scalar>& dy) {
                  const auto& x = a.value().array();
                  auto sech2 = Scalar(1) - t.array().square();
                  auto d = Scalar(0.5) * (Scalar(1) + t.array()) +
                           Scalar(0.5) * x * sech2 * c * (Scalar(1) + Scalar(3) * k * x.square());
                  g.accumulate(a, Matrix<Scalar>((dy.array() * d).matrix()));
                });
}

template <typename Scalar>
Var<Scalar> tanh(Var<Scalar> a) {
  auto& g = *a.graph;
  Matrix<Scalar> y = a.value().array().tanh().matrix();
  return g.push("tanh", y, g.requires_grad(a), [&g, a, y](const Matrix<Scalar>& dy) {
    g.accumulate(a, Matrix<Scalar>((dy.array() * (Scalar(1) - y.array().square())).matrix()));
  });
}

/// Row-wise softmax, max-shifted.
template <typename Scalar>
Matrix<Scalar> softmax_rows_value(const Matrix<Scalar>& x) {
  Matrix<Scalar> y(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const Scalar m = x.row(r).maxCoeff();
    y.row(r) = (x.row(r).array() - m).exp().matrix();
    Scalar s = 0;
    for (Eigen::Index c = 0; c < x.cols(); ++c) s += y(r, c);
    y.row(r) /= s;
  }
  return y;
}

template <typename Scalar>
Var<Scalar> softmax_rows(Var<Scalar> a) {
  auto& g = *a.graph;
  Matrix<Scalar> y = softmax_rows_value(a.value());
  return g.push("softmax_rows", y, g.requires_grad(a), [&g, a, y](const Matrix<Scalar>& dy) {
    Matrix<Scalar> dx(y.rows(), y.cols());
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      const Scalar dot = dy.row(r).dot(y.row(r));
      dx.row(r) = (y.row(r).array() * (dy.row(r).array() - dot)).matrix();
    }
    g.accumulate(a, dx);
  });
}

/// Per-row layer normalization with learned gain and bias (both 1xN).
template <typename Scalar>
Var<Scalar> layer_norm_rows(Var<Scalar> x, Var<Scalar> gain, Var<Scalar> bias,
                            Scalar eps = Scalar(1e-5)) {
  auto& g = detail::same_graph(x, gain);
  const Eigen::Index n = x.cols();
  if (gain.rows() != 1 || gain.cols() != n || bias.rows() != 1 || bias.cols() != n) {
    throw ShapeError("layer_norm_rows: gain/bias must be 1x" + std::to_string(n));
  }
  Matrix<Scalar> xhat(x.rows(), n);
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> inv_std(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const Scalar mu = x.value().row(r).mean();
    const Scalar var = (x.value().row(r).array() - mu).square().mean();
    inv_std(r) = Scalar(1) / std::sqrt(var + eps);
    xhat.row(r) = ((x.value().row(r).array() - mu) * inv_std(r)).matrix();
  }
  Matrix<Scalar> y = (xhat.array().rowwise() * gain.value().row(0).array()).matrix();
  y.rowwise() += bias.value().row(0);
  bool rg = g.requires_grad(x) || g.requires_grad(gain) || g.requires_grad(bias);
  return g.push("layer_norm_rows", std::move(y), rg,
                [&g, x, gain, bias, xhat, inv_std, n](const Matrix<Scalar>& dy) {
                  if (g.requires_grad(gain)) {
                    g.accumulate(gain, Matrix<Scalar>(dy.cwiseProduct(xhat).colwise().sum()));
                  }
                  if (g.requires_grad(bias)) g.accumulate(bias, Matrix<Scalar>(dy.colwise().sum()));
                  if (!g.requires_grad(x)) return;
                  Matrix<Scalar> dxhat = (dy.array().rowwise() * gain.value().row(0).array()).matrix();
                  Matrix<Scalar> dx(dy.rows(), n);
                  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
                    const Scalar m1 = dxhat.row(r).mean();
                    const Scalar m2 = dxhat.row(r).dot(xhat.row(r)) / Scalar(n);
                    dx.row(r) = (inv_std(r) *
                                 (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2))
                                    .matrix();
                  }
                  g.accumulate(x, dx);
                });
}

// ---------------------------------------------------------------------------
// Structural ops

/// Rows [start, start + count).
template <typename Scalar>
Var<Scalar> slice_rows(Var<Scalar> a, Eigen::Index start, Eigen::Index count) {
  auto& g = *a.graph;
  if (start < 0 || count < 0 || start + count > a.rows()) throw ShapeError("slice_rows: out of range");
  return g.push("slice_rows", a.value().middleRows(start, count), g.requires_grad(a),
                [&g, a, start](const Matrix<Scalar>& dy) { g.accumulate_block(a, start, 0, dy); });
}

/// Columns [start, start + count).
template <typename Scalar>
Var<Scalar> slice_cols(Var<Scalar> a, Eigen::Index start, Eigen::Index count) {
  auto& g = *a.graph;
  if (start < 0 || count < 0 || start + count > a.cols()) throw ShapeError("slice_cols: out of range");
  return g.push("slice_cols", a.value().middleCols(start, count), g.requires_grad(a),
                [&g, a, start](const Matrix<Scalar>& dy) { g.accumulate_block(a, 0, start, dy); });
}

template <typename Scalar>
Var<Scalar> concat_cols(std::span<const Var<Scalar>> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  auto& g = *parts.front().graph;
  const Eigen::Index rows = parts.front().rows();
  Eigen::Index cols = 0;
  bool rg = false;
  for (auto p : parts) {
    if (p.graph != &g) throw std::invalid_argument("concat_cols: mixed graphs");
    if (p.rows() != rows) throw ShapeError("concat_cols: row counts differ");
    cols += p.cols();
    rg = rg || g.requires_grad(p);
  }
  Matrix<Scalar> y(rows, cols);
  Eigen::Index at = 0;
  for (auto p : parts) {
    y.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  std::vector<Var<Scalar>> saved(parts.begin(), parts.end());
  return g.push("concat_cols", std::move(y), rg, [&g, saved](const Matrix<Scalar>& dy) {
    Eigen::Index at = 0;
    for (auto p : saved) {
      if (g.requires_grad(p)) g.accumulate(p, Matrix<Scalar>(dy.middleCols(at, p.cols())));
      at += p.cols();
    }
  });
}

template <typename Scalar>
Var<Scalar> concat_cols(Var<Scalar> a, Var<Scalar> b) {
  const Var<Scalar> parts[] = {a, b};
  return concat_cols<Scalar>(std::span<const Var<Scalar>>(parts));
}

template <typename Scalar>
Var<Scalar> concat_rows(std::span<const Var<Scalar>> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  auto& g = *parts.front().graph;
  const Eigen::Index cols = parts.front().cols();
  Eigen::Index rows = 0;
  bool rg = false;
  for (auto p : parts) {
    if (p.graph != &g) throw std::invalid_argument("concat_rows: mixed graphs");
    if (p.cols() != cols) throw ShapeError("concat_rows: column counts differ");
    rows += p.rows();
    rg = rg || g.requires_grad(p);
  }
  Matrix<Scalar> y(rows, cols);
  Eigen::Index at = 0;
  for (auto p : parts) {
    y.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  std::vector<Var<Scalar>> saved(parts.begin(), parts.end());
  return g.push("concat_rows", std::move(y), rg, [&g, saved](const Matrix<Scalar>& dy) {
    Eigen::Index at = 0;
    for (auto p : saved) {
      if (g.requires_grad(p)) g.accumulate(p, Matrix<Scalar>(dy.middleRows(at, p.rows())));
      at += p.rows();
    }
  });
}

/// Contiguous row range [start, start + length) holding one sequence.
struct Segment {
  Eigen::Index start = 0;
  Eigen::Index length = 0;
};

/// Scaled dot-product self-attention over `heads` column blocks of q, k, v,
/// restricted to rows of the same segment. Several sequences can therefore be
/// stacked into one matrix without attending across each other.
template <typename Scalar>
Var<Scalar> multi_head_attention(Var<Scalar> q, Var<Scalar> k, Var<Scalar> v, int heads,
                                 std::span<const Segment> segments) {
  auto& g = detail::same_graph(q, k);
  detail::require_same_shape("multi_head_attention", q, k);
  detail::require_same_shape("multi_head_attention", q, v);
  if (heads < 1 || q.cols() % heads != 0) {
    throw ShapeError("multi_head_attention: width not divisible by head count");
  }
  Eigen::Index covered = 0;
  for (const auto& s : segments) {
    if (s.start != covered || s.length < 1) throw ShapeError("multi_head_attention: segments must tile the rows");
    covered += s.length;
  }
  if (covered != q.rows()) throw ShapeError("multi_head_attention: segments must tile the rows");

  const Eigen::Index dh = q.cols() / heads;
  const Scalar scale = Scalar(1) / std::sqrt(Scalar(dh));
  // probs[segment * heads + head]
  std::vector<Matrix<Scalar>> probs;
  probs.reserve(segments.size() * static_cast<std::size_t>(heads));
  Matrix<Scalar> out(q.rows(), q.cols());
  for (const auto& s : segments) {
    for (int h = 0; h < heads; ++h) {
      const auto qh = q.value().block(s.start, h * dh, s.length, dh);
      const auto kh = k.value().block(s.start, h * dh, s.length, dh);
      const auto vh = v.value().block(s.start, h * dh, s.length, dh);
      Matrix<Scalar> scores = (qh * kh.transpose()) * scale;
      Matrix<Scalar> p = softmax_rows_value(scores);
      out.block(s.start, h * dh, s.length, dh) = p * vh;
      probs.push_back(std::move(p));
    }
  }
  bool rg = g.requires_grad(q) || g.requires_grad(k) || g.requires_grad(v);
  std::vector<Segment> segs(segments.begin(), segments.end());
  return g.push(
      "multi_head_attention", std::move(out), rg,
      [&g, q, k, v, heads, dh, scale, segs, probs](const Matrix<Scalar>& dy) {
        Matrix<Scalar> dq = Matrix<Scalar>::Zero(q.rows(), q.cols());
        Matrix<Scalar> dk = Matrix<Scalar>::Zero(k.rows(), k.cols());
        Matrix<Scalar> dv = Matrix<Scalar>::Zero(v.rows(), v.cols());
        std::size_t idx = 0;
        for (const auto& s : segs) {
          for (int h = 0; h < heads; ++h, ++idx) {
            const auto& p = probs[idx];
            const auto qh = q.value().block(s.start, h * dh, s.length, dh);
            const auto kh = k.value().block(s.start, h * dh, s.length, dh);
            const auto vh = v.value().block(s.start, h * dh, s.length, dh);
            const auto doh = dy.block(s.start, h * dh, s.length, dh);
            dv.block(s.start, h * dh, s.length, dh) = p.transpose() * doh;
            Matrix<Scalar> dp = doh * vh.transpose();
            Matrix<Scalar> ds(p.rows(), p.cols());
            for (Eigen::Index r = 0; r < p.rows(); ++r) {
              const Scalar dot = dp.row(r).dot(p.row(r));
              ds.row(r) = (p.row(r).array() * (dp.row(r).array() - dot)).matrix();
            }
            ds *= scale;
            dq.block(s.start, h * dh, s.length, dh) = ds * kh;
            dk.block(s.start, h * dh, s.length, dh) = ds.transpose() * qh;
          }
        }
        g.accumulate(q, dq);
        g.accumulate(k, dk);
        g.accumulate(v, dv);
      });
}

/// Embedding lookup: row ids[i] of `table` becomes row i of the result.
template <typename Scalar>
Var<Scalar> gather_rows(Var<Scalar> table, std::span<const int> ids) {
  auto& g = *table.graph;
  Matrix<Scalar> y(static_cast<Eigen::Index>(ids.size()), table.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= table.rows()) {
      throw std::out_of_range("gather_rows: id " + std::to_string(ids[i]) + " outside table of " +
                              std::to_string(table.rows()) + " rows");
    }
    y.row(static_cast<Eigen::Index>(i)) = table.value().row(ids[i]);
  }
  std::vector<int> saved(ids.begin(), ids.end());
  return g.push("gather_rows", std::move(y), g.requires_grad(table),
                [&g, table, saved](const Matrix<Scalar>& dy) {
                  for (std::size_t i = 0; i < saved.size(); ++i) {
                    g.accumulate_block(table, saved[i], 0, dy.row(static_cast<Eigen::Index>(i)));
                  }
                });
}

/// Returns a copy of `a` with row `row` replaced by `replacement` (1xN).
/// Gradient flows to both the untouched rows of `a` and `replacement`.
template <typename Scalar>
Var<Scalar> replace_row(Var<Scalar> a, Eigen::Index row, Var<Scalar> replacement) {
  auto& g = detail::same_graph(a, replacement);
  if (row < 0 || row >= a.rows() || replacement.rows() != 1 || replacement.cols() != a.cols()) {
    throw ShapeError("replace_row: bad row index or replacement shape");
  }
  Matrix<Scalar> y = a.value();
  y.row(row) = replacement.value().row(0);
  bool rg = g.requires_grad(a) || g.requires_grad(replacement);
  return g.push("replace_row", std::move(y), rg, [&g, a, row, replacement](const Matrix<Scalar>& dy) {
    if (g.requires_grad(a)) {
      Matrix<Scalar> da = dy;
      da.row(row).setZero();
      g.accumulate(a, da);
    }
    g.accumulate(replacement, Matrix<Scalar>(dy.row(row)));
  });
}

// ---------------------------------------------------------------------------
// Reductions and losses. Sums run left to right in row-major order so that
// reruns are bit-identical.

template <typename Scalar>
Scalar ordered_sum(const Matrix<Scalar>& m) {
  Scalar s = 0;
  const Scalar* p = m.data();
  for (Eigen::Index i = 0; i < m.size(); ++i) s += p[i];
  return s;
}

template <typename Scalar>
Var<Scalar> sum(Var<Scalar> a) {
  auto& g = *a.graph;
  Matrix<Scalar> y(1, 1);
  y(0, 0) = ordered_sum(a.value());
  return g.push("sum", std::move(y), g.requires_grad(a), [&g, a](const Matrix<Scalar>& dy) {
    g.accumulate(a, Matrix<Scalar>::Constant(a.rows(), a.cols(), dy(0, 0)));
  });
}

template <typename Scalar>
Var<Scalar> mean(Var<Scalar> a) {
  if (a.value().size() == 0) throw ShapeError("mean: empty input");
  return sum(a) * (Scalar(1) / Scalar(a.value().size()));
}

/// Mean softmax cross-entropy of each row of `logits` against targets[row].
template <typename Scalar>
Var<Scalar> cross_entropy_rows(Var<Scalar> logits, std::span<const int> targets) {
  auto& g = *logits.graph;
  if (static_cast<Eigen::Index>(targets.size()) != logits.rows()) {
    throw ShapeError("cross_entropy_rows: one target per row required");
  }
  const Eigen::Index n = logits.rows();
  Matrix<Scalar> p = softmax_rows_value(logits.value());
  Scalar total = 0;
  for (Eigen::Index r = 0; r < n; ++r) {
    const int t = targets[static_cast<std::size_t>(r)];
    if (t < 0 || t >= logits.cols()) throw std::out_of_range("cross_entropy_rows: target out of range");
    const auto row = logits.value().row(r);
    const Scalar m = row.maxCoeff();
    Scalar s = 0;
    for (Eigen::Index c = 0; c < row.cols(); ++c) s += std::exp(row(c) - m);
    total += (m + std::log(s)) - row(t);
  }
  Matrix<Scalar> y(1, 1);
  y(0, 0) = total / Scalar(n);
  std::vector<int> saved(targets.begin(), targets.end());
  return g.push("cross_entropy_rows", std::move(y), g.requires_grad(logits),
                [&g, logits, p, saved, n](const Matrix<Scalar>& dy) {
                  Matrix<Scalar> dx = p;
                  for (Eigen::Index r = 0; r < n; ++r) dx(r, saved[static_cast<std::size_t>(r)]) -= 1;
                  g.accumulate(logits, Matrix<Scalar>(dx * (dy(0, 0) / Scalar(n))));
                });
}

/// Numerically stable binary cross-entropy with logits for a single value.
template <typename Scalar>
Scalar bce_with_logits_value(Scalar z, Scalar label) {
  return std::max(z, Scalar(0)) - z * label + std::log1p(std::exp(-std::abs(z)));
}

template <typename Scalar>
Scalar sigmoid(Scalar z) {
  if (z >= 0) return Scalar(1) / (Scalar(1) + std::exp(-z));
  const Scalar e = std::exp(z);
  return e / (Scalar(1) + e);
}

/// Mean BCE-with-logits over an Nx1 column of logits.
template <typename Scalar>
Var<Scalar> bce_with_logits(Var<Scalar> logits, std::span<const Scalar> labels) {
  auto& g = *logits.graph;
  if (logits.cols() != 1 || static_cast<Eigen::Index>(labels.size()) != logits.rows()) {
    throw ShapeError("bce_with_logits: expected Nx1 logits and N labels");
  }
  for (Scalar y : labels) {
    if (y != Scalar(0) && y != Scalar(1)) throw std::invalid_argument("bce_with_logits: label must be 0 or 1");
  }
  const Eigen::Index n = logits.rows();
  Scalar total = 0;
  for (Eigen::Index r = 0; r < n; ++r) {
    total += bce_with_logits_value(logits.value()(r, 0), labels[static_cast<std::size_t>(r)]);
  }
  Matrix<Scalar> y(1, 1);
  y(0, 0) = total / Scalar(n);
  std::vector<Scalar> saved(labels.begin(), labels.end());
  return g.push("bce_with_logits", std::move(y), g.requires_grad(logits),
                [&g, logits, saved, n](const Matrix<Scalar>& dy) {
                  Matrix<Scalar> dx(n, 1);
                  for (Eigen::Index r = 0; r < n; ++r) {
                    dx(r, 0) = (sigmoid(logits.value()(r, 0)) - saved[static_cast<std::size_t>(r)]) *
                               dy(0, 0) / Scalar(n);
                  }
                  g.accumulate(logits, dx);
                });
}

template <typename Scalar>
Var<Scalar> bce_with_logits(Var<Scalar> logit, Scalar label) {
  const Scalar labels[] = {label};
  return bce_with_logits(logit, std::span<const Scalar>(labels));
}

/// Inverted dropout. Identity when `p == 0`; callers skip it in eval mode.
template <typename Scalar, typename Rng>
Var<Scalar> dropout(Var<Scalar> a, Scalar p, Rng& rng) {
  auto& g = *a.graph;
  if (p < 0 || p >= 1) throw std::invalid_argument("dropout: p must lie in [0, 1)");
  if (p == 0) return a;
  std::bernoulli_distribution keep(1.0 - static_cast<double>(p));
  Matrix<Scalar> mask(a.rows(), a.cols());
  const Scalar scale = Scalar(1) / (Scalar(1) - p);
  for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = keep(rng) ? scale : Scalar(0);
  return g.push("dropout", a.value().cwiseProduct(mask), g.requires_grad(a),
                [&g, a, mask](const Matrix<Scalar>& dy) { g.accumulate(a, Matrix<Scalar>(dy.cwiseProduct(mask))); });
}

}  // namespace calm
