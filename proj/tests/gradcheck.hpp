// SPDX-License-Identifier: Apache-2.0
//
// Central finite-difference oracle for the autodiff engine. Lives in test
// code only; it evaluates the forward pass repeatedly and never touches the
// backward closures it is checking.

#pragma once

#include "calm/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

namespace calm::testing {

using Builder = std::function<Var<double>(Graph<double>&, const std::vector<Var<double>>&)>;

inline double evaluate(const Builder& build, const std::vector<MatrixXd>& inputs) {
  Graph<double> g;
  std::vector<Var<double>> vars;
  for (const auto& m : inputs) vars.push_back(g.variable(m));
  return build(g, vars).value()(0, 0);
}

struct GradCheckResult {
  double max_rel_error = 0;  // over inputs, norm-wise
};

/// Norm-wise relative error |a - n| / max(|a| + |n|, floor) per input, where
/// a is the analytic gradient and n the central-difference estimate.
inline GradCheckResult gradcheck(const Builder& build, const std::vector<MatrixXd>& inputs,
                                 double step = 1e-5) {
  Graph<double> g;
  std::vector<Var<double>> vars;
  for (const auto& m : inputs) vars.push_back(g.variable(m));
  auto loss = build(g, vars);
  g.backward(loss);

  GradCheckResult r;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    MatrixXd analytic = g.grad(vars[i]);
    MatrixXd numeric(inputs[i].rows(), inputs[i].cols());
    for (Eigen::Index e = 0; e < inputs[i].size(); ++e) {
      auto plus = inputs;
      auto minus = inputs;
      plus[i].data()[e] += step;
      minus[i].data()[e] -= step;
      numeric.data()[e] = (evaluate(build, plus) - evaluate(build, minus)) / (2 * step);
    }
    const double denom = std::max(analytic.norm() + numeric.norm(), 1e-7);
    r.max_rel_error = std::max(r.max_rel_error, (analytic - numeric).norm() / denom);
  }
  return r;
}

/// Uniform in [-1, 1] but at least `gap` away from zero, so kinks (ReLU) are
/// not straddled by the difference stencil.
inline MatrixXd random_matrix(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols,
                              double gap = 0.0) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    double x;
    do {
      x = u(rng);
    } while (std::abs(x) < gap);
    m.data()[i] = x;
  }
  return m;
}

/// Reduces any matrix to a scalar with fixed generic weights, so every output
/// coordinate contributes a distinct amount to the loss.
inline Var<double> weighted_sum(Graph<double>& g, Var<double> y, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  auto w = g.constant(random_matrix(rng, y.rows(), y.cols()));
  return sum(cwise_product(y, w));
}

struct OpCheck {
  std::string op;
  double rel_error = 0;
};

/// Finite-difference checks of every op on one draw of random shapes.
inline std::vector<OpCheck> op_checks(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> dim(1, 5);
  std::vector<OpCheck> out;
  const int r = dim(rng), c = dim(rng), k = dim(rng);
  auto check = [&](const char* name, const Builder& b, std::vector<MatrixXd> in) {
    out.push_back({name, gradcheck(b, in).max_rel_error});
  };
  check("add", [](auto& g, auto& v) { return weighted_sum(g, v[0] + v[1]); },
        {random_matrix(rng, r, c), random_matrix(rng, r, c)});
  check("sub", [](auto& g, auto& v) { return weighted_sum(g, v[0] - v[1]); },
        {random_matrix(rng, r, c), random_matrix(rng, r, c)});
  check("cwise_product", [](auto& g, auto& v) { return weighted_sum(g, cwise_product(v[0], v[1])); },
        {random_matrix(rng, r, c), random_matrix(rng, r, c)});
  check("scale", [](auto& g, auto& v) { return weighted_sum(g, v[0] * 2.5); },
        {random_matrix(rng, r, c)});
  check("matmul", [](auto& g, auto& v) { return weighted_sum(g, matmul(v[0], v[1])); },
        {random_matrix(rng, r, k), random_matrix(rng, k, c)});
  check("matmul_nt", [](auto& g, auto& v) { return weighted_sum(g, matmul_nt(v[0], v[1])); },
        {random_matrix(rng, r, k), random_matrix(rng, c, k)});
  check("add_row", [](auto& g, auto& v) { return weighted_sum(g, add_row(v[0], v[1])); },
        {random_matrix(rng, r, c), random_matrix(rng, 1, c)});
  check("relu", [](auto& g, auto& v) { return weighted_sum(g, relu(v[0])); },
        {random_matrix(rng, r, c, 1e-3)});
  check("gelu", [](auto& g, auto& v) { return weighted_sum(g, gelu(v[0])); },
        {random_matrix(rng, r, c)});
  check("tanh", [](auto& g, auto& v) { return weighted_sum(g, tanh(v[0])); },
        {random_matrix(rng, r, c)});
  check("softmax_rows", [](auto& g, auto& v) { return weighted_sum(g, softmax_rows(v[0])); },
        {random_matrix(rng, r, c)});
  if (c >= 2) {
    check("layer_norm_rows",
          [](auto& g, auto& v) { return weighted_sum(g, layer_norm_rows(v[0], v[1], v[2])); },
          {random_matrix(rng, r, c), random_matrix(rng, 1, c), random_matrix(rng, 1, c)});
  }
  check("slice_rows", [r](auto& g, auto& v) { return weighted_sum(g, slice_rows(v[0], r / 2, r - r / 2)); },
        {random_matrix(rng, r, c)});
  check("slice_cols", [c](auto& g, auto& v) { return weighted_sum(g, slice_cols(v[0], c / 2, c - c / 2)); },
        {random_matrix(rng, r, c)});
  check("concat_cols", [](auto& g, auto& v) { return weighted_sum(g, concat_cols(v[0], v[1])); },
        {random_matrix(rng, r, c), random_matrix(rng, r, k)});
  check("concat_rows",
        [](auto& g, auto& v) {
          const Var<double> parts[] = {v[0], v[1]};
          return weighted_sum(g, concat_rows<double>(parts));
        },
        {random_matrix(rng, r, c), random_matrix(rng, k, c)});
  check("gather_rows",
        [](auto& g, auto& v) {
          const int ids[] = {0, 2, 0, 1};
          return weighted_sum(g, gather_rows<double>(v[0], ids));
        },
        {random_matrix(rng, 3, c)});
  check("replace_row", [](auto& g, auto& v) { return weighted_sum(g, replace_row(v[0], 0, v[1])); },
        {random_matrix(rng, r, c), random_matrix(rng, 1, c)});
  check("sum", [](auto&, auto& v) { return sum(v[0]); }, {random_matrix(rng, r, c)});
  check("mean", [](auto&, auto& v) { return mean(v[0]); }, {random_matrix(rng, r, c)});
  check("cross_entropy_rows",
        [r, c](auto&, auto& v) {
          std::vector<int> t;
          for (int i = 0; i < r; ++i) t.push_back((i * 7) % c);
          return cross_entropy_rows<double>(v[0], t);
        },
        {random_matrix(rng, r, c)});
  check("bce_with_logits",
        [r](auto&, auto& v) {
          std::vector<double> y;
          for (int i = 0; i < r; ++i) y.push_back(i % 2);
          return bce_with_logits<double>(v[0], y);
        },
        {random_matrix(rng, r, 1)});
  {
    const int heads = 1 + static_cast<int>(rng() % 2);
    const int width = 2 * heads;
    const int len_a = dim(rng), len_b = dim(rng);
    check("multi_head_attention",
          [heads, len_a, len_b](auto& g, auto& v) {
            const Segment segs[] = {{0, len_a}, {len_a, len_b}};
            return weighted_sum(g, multi_head_attention<double>(v[0], v[1], v[2], heads, segs));
          },
          {random_matrix(rng, len_a + len_b, width), random_matrix(rng, len_a + len_b, width),
           random_matrix(rng, len_a + len_b, width)});
  }
  return out;
}

}  // namespace calm::testing
