// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "calm/autodiff.hpp"

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

namespace calm {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename Scalar>
struct AdamState {
  std::vector<Matrix<Scalar>> m;
  std::vector<Matrix<Scalar>> v;
  std::int64_t step = 0;

  static AdamState zeros_like(std::span<Tensor<Scalar>* const> params) {
    AdamState s;
    for (const auto* p : params) {
      s.m.push_back(Matrix<Scalar>::Zero(p->value.rows(), p->value.cols()));
      s.v.push_back(Matrix<Scalar>::Zero(p->value.rows(), p->value.cols()));
    }
    return s;
  }
};

/// One bias-corrected Adam update, in place. Parameters without a gradient
/// buffer are treated as having zero gradient.
template <typename Scalar>
void adam_step(std::span<Tensor<Scalar>* const> params, AdamState<Scalar>& state,
               const AdamConfig& cfg) {
  if (state.m.size() != params.size() || state.v.size() != params.size() || state.step < 0) {
    throw ShapeError("adam_step: state does not match parameter list");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& w = params[i]->value;
    if (state.m[i].rows() != w.rows() || state.m[i].cols() != w.cols() ||
        state.v[i].rows() != w.rows() || state.v[i].cols() != w.cols()) {
      throw ShapeError("adam_step: moment shape mismatch for '" + params[i]->name + "'");
    }
    if (params[i]->has_grad() &&
        (params[i]->grad.rows() != w.rows() || params[i]->grad.cols() != w.cols())) {
      throw ShapeError("adam_step: gradient shape mismatch for '" + params[i]->name + "'");
    }
  }

  const std::int64_t t = ++state.step;
  const Scalar b1 = Scalar(cfg.beta1);
  const Scalar b2 = Scalar(cfg.beta2);
  const Scalar c1 = Scalar(1) - std::pow(b1, Scalar(t));
  const Scalar c2 = Scalar(1) - std::pow(b2, Scalar(t));
  const Scalar lr = Scalar(cfg.lr);
  const Scalar eps = Scalar(cfg.eps);

  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = *params[i];
    if (!p.has_grad()) continue;
    auto& m = state.m[i];
    auto& v = state.v[i];
    m = b1 * m + (Scalar(1) - b1) * p.grad;
    v = b2 * v + (Scalar(1) - b2) * p.grad.cwiseAbs2();
    p.value.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
  }
}

/// Convenience wrapper owning the moment buffers for a fixed parameter list.
template <typename Scalar>
class Adam {
 public:
  Adam(std::vector<Tensor<Scalar>*> params, AdamConfig cfg)
      : params_(std::move(params)), cfg_(cfg), state_(AdamState<Scalar>::zeros_like(params_)) {}

  void zero_grad() {
    for (auto* p : params_) p->zero_grad();
  }
  void step() { adam_step<Scalar>(params_, state_, cfg_); }
  const AdamState<Scalar>& state() const { return state_; }

 private:
  std::vector<Tensor<Scalar>*> params_;
  AdamConfig cfg_;
  AdamState<Scalar> state_;
};

}  // namespace calm
