#pragma once

#include <cstdint>
#include <vector>

#include "pargo/grad_check.hpp"
#include "pargo/projector.hpp"

namespace pargo {

/// The smallest config that exercises every projector path: banded partial
/// windows (n_s = 4), two cascade stages and two heads.
inline ParGoConfig tiny_config() {
  ParGoConfig cfg;
  cfg.n_v = 16;
  cfg.n_p = 4;
  cfg.n_g = 2;
  cfg.c = 8;
  cfg.layers = 2;
  cfg.heads = 2;
  cfg.ffn_mult = 2;
  cfg.dtype = DType::float64;
  return cfg;
}

/// Central-difference check of the full projector in float64 against the
/// loss sum(forward(f_v) * R) for random f_v and R. Covers every parameter.
///
/// The check point is the initialization plus N(0, 0.25^2) noise on every
/// entry. At the std-0.02 initialization the attention logits are nearly
/// flat, query/key gradients fall to ~1e-7, and central-difference roundoff
/// (~eps_machine * |loss| / eps) would dominate the relative error.
inline double projector_grad_check(ParGoConfig cfg, std::uint64_t seed, double eps) {
  cfg.dtype = DType::float64;
  cfg.validate();
  Rng rng(seed);
  auto params = init_projector<double>(cfg, rng.split(0));
  Rng jitter = rng.split(2);
  visit_params(params, [&](const std::string&, Tensor<double>& t) {
    for (auto& x : t.data()) x += 0.25 * jitter.normal();
  });
  Rng data = rng.split(1);
  auto random_matrix = [&](std::size_t r, std::size_t c) {
    std::vector<double> v(r * c);
    for (auto& x : v) x = data.normal();
    return Tensor<double>(Shape{r, c}, std::move(v));
  };
  const auto f_v = random_matrix(cfg.n_v, cfg.c);
  const auto weights = random_matrix(cfg.tokens(), cfg.c);
  const ProjectorMasks masks(cfg);
  auto inputs = param_list(params);
  return grad_check([&] { return sum(mul(forward(f_v, params, cfg, masks).tokens, weights)); },
                    std::span<Tensor<double>>(inputs), eps);
}

}  // namespace pargo
