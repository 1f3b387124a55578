#pragma once

#include <cstdint>
#include <vector>

#include "amdim/common.hpp"
#include "amdim/tensor.hpp"

namespace amdim {

struct AdamConfig {
  double lr = 2e-4;
  double beta1 = 0.8;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct AdamState {
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
  std::int64_t t = 0;

  void init_for(const std::vector<Tensor<T>>& params) {
    m.clear();
    v.clear();
    for (const auto& p : params) {
      m.emplace_back(p.data().size(), T(0));
      v.emplace_back(p.data().size(), T(0));
    }
    t = 0;
  }
};

// Standard Adam with bias correction. Parameters without an allocated grad
// buffer are treated as zero-gradient (moments still decay).
template <typename T>
void adam_step(std::vector<Tensor<T>>& params, AdamState<T>& state, const AdamConfig& cfg) {
  AMDIM_CHECK(state.m.size() == params.size() && state.v.size() == params.size(),
              "adam state does not match parameter list");
  state.t += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
  const T step = static_cast<T>(cfg.lr * std::sqrt(bc2) / bc1);
  const T eps_hat = static_cast<T>(cfg.eps * std::sqrt(bc2));
  for (size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i].data();
    auto& g = params[i].grad();
    AMDIM_CHECK(state.m[i].size() == p.size() && state.v[i].size() == p.size(),
                "adam moment shape mismatch for parameter " << i);
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (size_t j = 0; j < p.size(); ++j) {
      m[j] = b1 * m[j] + (T(1) - b1) * g[j];
      v[j] = b2 * v[j] + (T(1) - b2) * g[j] * g[j];
      p[j] -= step * m[j] / (std::sqrt(v[j]) + eps_hat);
    }
  }
}

}  // namespace amdim
