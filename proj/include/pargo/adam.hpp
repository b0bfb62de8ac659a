#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "pargo/tensor.hpp"

namespace pargo {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <Real T>
struct AdamState {
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
  std::uint64_t step = 0;
};

/// One bias-corrected Adam update of every tensor in `params` using its
/// accumulated gradient (a tensor without a gradient counts as zero gradient).
/// State is created on the first call and must keep the same layout afterwards.
template <Real T>
void adam_step(std::span<Tensor<T>> params, AdamState<T>& state, const AdamOptions& opt) {
  if (state.m.empty() && state.step == 0) {
    for (const auto& p : params) {
      state.m.emplace_back(p.numel(), T(0));
      state.v.emplace_back(p.numel(), T(0));
    }
  }
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw ShapeError("adam_step: optimizer state tracks " + std::to_string(state.m.size()) + " tensors, got " +
                     std::to_string(params.size()));
  }
  for (std::size_t t = 0; t < params.size(); ++t) {
    if (state.m[t].size() != params[t].numel() || state.v[t].size() != params[t].numel()) {
      throw ShapeError("adam_step: state for tensor " + std::to_string(t) + " does not match shape " +
                       shape_str(params[t].shape()));
    }
    if (params[t].has_grad() && params[t].grad().size() != params[t].numel()) {
      throw ShapeError("adam_step: gradient size mismatch for tensor " + std::to_string(t));
    }
  }

  ++state.step;
  const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(state.step));
  const T b1 = static_cast<T>(opt.beta1), b2 = static_cast<T>(opt.beta2);
  const T step_size = static_cast<T>(opt.lr / bc1);
  const T inv_sqrt_bc2 = static_cast<T>(1.0 / std::sqrt(bc2));
  const T eps = static_cast<T>(opt.eps);

  for (std::size_t t = 0; t < params.size(); ++t) {
    auto w = params[t].data();
    auto& m = state.m[t];
    auto& v = state.v[t];
    const bool has = params[t].has_grad();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const T g = has ? params[t].grad()[i] : T(0);
      m[i] = b1 * m[i] + (T(1) - b1) * g;
      v[i] = b2 * v[i] + (T(1) - b2) * g * g;
      w[i] -= step_size * m[i] / (std::sqrt(v[i]) * inv_sqrt_bc2 + eps);
    }
  }
}

}  // namespace pargo
