// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "prefixmtl/numerics/tensor.hpp"

namespace prefixmtl {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename Real>
struct AdamState {
  std::vector<std::vector<Real>> m;
  std::vector<std::vector<Real>> v;
  std::uint64_t step = 0;

  static AdamState for_params(std::span<const Tensor<Real>> params) {
    AdamState s;
    for (const auto& p : params) {
      s.m.emplace_back(p.size(), Real(0));
      s.v.emplace_back(p.size(), Real(0));
    }
    return s;
  }
};

/// One bias-corrected Adam update applied in place from each parameter's
/// grad buffer. Parameters without a grad buffer are treated as having zero
/// gradient.
template <typename Real>
void adam_step(std::span<Tensor<Real>> params, AdamState<Real>& state, const AdamConfig& cfg) {
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw Error(ErrorCode::kStateMismatch, "optimizer state holds " + std::to_string(state.m.size()) +
                                               " buffers for " + std::to_string(params.size()) + " parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.m[i].size() != params[i].size() || state.v[i].size() != params[i].size()) {
      throw Error(ErrorCode::kStateMismatch, "optimizer buffer " + std::to_string(i) + " does not match parameter shape " +
                                                 shape_string(params[i].shape()));
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const Real b1 = Real(cfg.beta1), b2 = Real(cfg.beta2);
  const Real c1 = Real(1.0 / (1.0 - std::pow(cfg.beta1, t)));
  const Real c2 = Real(1.0 / (1.0 - std::pow(cfg.beta2, t)));
  const Real lr = Real(cfg.lr), eps = Real(cfg.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    auto w = p.data();
    auto g = std::span<const Real>(std::as_const(p).grad());
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      const Real gj = g.empty() ? Real(0) : g[j];
      m[j] = b1 * m[j] + (Real(1) - b1) * gj;
      v[j] = b2 * v[j] + (Real(1) - b2) * gj * gj;
      w[j] -= lr * (m[j] * c1) / (std::sqrt(v[j] * c2) + eps);
    }
  }
}

}  // namespace prefixmtl
