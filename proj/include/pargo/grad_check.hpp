#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "pargo/tensor.hpp"

namespace pargo {

/// Compares reverse-mode gradients of a scalar function against central
/// differences (f(x+eps) - f(x-eps)) / 2eps, coordinate by coordinate.
/// Returns the largest |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)
/// over all coordinates of all inputs. `f` is re-evaluated from scratch for
/// each probe, so it must rebuild its graph on every call.
template <class F>
double grad_check(F&& f, std::span<Tensor<double>> inputs, double eps) {
  for (auto& x : inputs) {
    x.set_requires_grad(true);
    x.zero_grad();
  }
  {
    Tensor<double> loss = f();
    if (loss.numel() != 1) throw ShapeError("grad_check: function must be scalar, got " + shape_str(loss.shape()));
    backward(loss);
  }
  std::vector<std::vector<double>> analytic;
  for (auto& x : inputs) {
    if (x.has_grad()) {
      analytic.emplace_back(x.grad().begin(), x.grad().end());
    } else {
      analytic.emplace_back(x.numel(), 0.0);
    }
  }

  double worst = 0.0;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    auto data = inputs[t].data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      data[i] = saved + eps;
      const double up = f().item();
      data[i] = saved - eps;
      const double down = f().item();
      data[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic[t][i];
      const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-8});
      worst = std::max(worst, std::fabs(a - numeric) / denom);
    }
    inputs[t].zero_grad();
  }
  return worst;
}

/// Single-input form: f takes the tensor being checked.
template <class F>
double grad_check(F&& f, Tensor<double>& x, double eps) {
  std::vector<Tensor<double>> inputs{x};
  return grad_check([&] { return f(x); }, std::span<Tensor<double>>(inputs), eps);
}

}  // namespace pargo
