#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "pargo/masks.hpp"
#include "pargo/ops.hpp"
#include "pargo/projector.hpp"
#include "pargo/rng.hpp"

namespace pargo {

// Inference-only cross-attention kernels. Both take the same inputs as the
// attention inside pgp_block (already-normalized tokens and features) and
// return the output-projected result. Neither records gradients.

namespace detail {

template <Real T>
std::vector<T> project_rows(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  const std::size_t m = x.rows(), k = x.cols(), n = w.cols();
  std::vector<T> out(m * n, T(0));
  if (b.defined()) {
    for (std::size_t i = 0; i < m; ++i) std::copy_n(b.data().begin(), n, out.begin() + i * n);
  }
  gemm_nn(m, k, n, x.data().data(), w.data().data(), out.data());
  return out;
}

template <Real T>
void check_xattn_inputs(const Tensor<T>& tokens, const Tensor<T>& f_v, const AttentionWeights<T>& w,
                        std::string_view op) {
  require_rank2(tokens, op, "tokens");
  require_rank2(f_v, op, "f_v");
  const std::size_t c = tokens.cols();
  if (f_v.cols() != c) throw ShapeError(std::string(op) + ": tokens and f_v differ in width");
  if (w.heads == 0 || c % w.heads != 0) throw ShapeError(std::string(op) + ": width not divisible by head count");
  for (const Tensor<T>* m : {&w.wq, &w.wk, &w.wv, &w.wo}) {
    if (!m->defined() || m->shape() != Shape{c, c}) throw ShapeError(std::string(op) + ": projection must be c x c");
  }
}

// out[i, off:off+dh] = sum_j p_j * V[key0 + j, off:off+dh] over `count`
// consecutive keys starting at key0.
template <Real T>
void local_attention_row(const T* qi, const T* K, const T* V, std::size_t key0, std::size_t count, std::size_t c,
                         std::size_t off, std::size_t dh, T sc, T* scores, T* oi) {
  T mx = -std::numeric_limits<T>::infinity();
  for (std::size_t j = 0; j < count; ++j) {
    const T* kj = K + (key0 + j) * c + off;
    T acc = 0;
    for (std::size_t d = 0; d < dh; ++d) acc += qi[d] * kj[d];
    scores[j] = acc * sc;
    mx = std::max(mx, scores[j]);
  }
  T denom = 0;
  for (std::size_t j = 0; j < count; ++j) {
    scores[j] = std::exp(scores[j] - mx);
    denom += scores[j];
  }
  for (std::size_t j = 0; j < count; ++j) scores[j] /= denom;
  for (std::size_t j = 0; j < count; ++j) {
    const T* vj = V + (key0 + j) * c + off;
    for (std::size_t d = 0; d < dh; ++d) oi[d] += scores[j] * vj[d];
  }
}

}  // namespace detail

/// Reference: full (n_q x n_v) score matrix per head, mask applied, softmax,
/// then a dense probability-times-values product.
template <Real T>
Tensor<T> dense_masked_xattn(const Tensor<T>& tokens, const Tensor<T>& f_v, const AttentionWeights<T>& w,
                             const AttentionMask& pg_mask) {
  detail::check_xattn_inputs(tokens, f_v, w, "dense_masked_xattn");
  const std::size_t nq = tokens.rows(), nk = f_v.rows(), c = tokens.cols();
  pg_mask.require_dims(nq, nk);
  const auto visible = detail::visible_lists<T>(pg_mask);
  const std::size_t dh = c / w.heads;
  const T sc = T(1) / std::sqrt(static_cast<T>(dh));

  const auto Q = detail::project_rows(tokens, w.wq, w.bq);
  const auto K = detail::project_rows(f_v, w.wk, Tensor<T>{});
  const auto V = detail::project_rows(f_v, w.wv, w.bv);
  std::vector<T> scores(nk), probs(nk);
  std::vector<T> heads_out(nq * c, T(0));
  for (std::size_t h = 0; h < w.heads; ++h) {
    const std::size_t off = h * dh;
    for (std::size_t i = 0; i < nq; ++i) {
      const T* qi = Q.data() + i * c + off;
      for (std::size_t j = 0; j < nk; ++j) {
        const T* kj = K.data() + j * c + off;
        T acc = 0;
        for (std::size_t d = 0; d < dh; ++d) acc += qi[d] * kj[d];
        scores[j] = acc * sc;
      }
      std::fill(probs.begin(), probs.end(), T(0));
      detail::softmax_visible(scores.data(), visible[i], probs.data());
      T* oi = heads_out.data() + i * c + off;
      for (std::size_t j = 0; j < nk; ++j) {
        const T* vj = V.data() + j * c + off;
        for (std::size_t d = 0; d < dh; ++d) oi[d] += probs[j] * vj[d];
      }
    }
  }
  Tensor<T> mixed(Shape{nq, c}, std::move(heads_out));
  return Tensor<T>(Shape{nq, c}, detail::project_rows(mixed, w.wo, w.bo));
}

/// Fast path for the partial-global mask. Partial token i only reads its own
/// contiguous window of n_s keys, so the partial half is a batch of n_p
/// independent n_s-key attentions over consecutive slabs of K and V. Global
/// tokens use dense unmasked attention.
template <Real T>
Tensor<T> block_partial_xattn(const Tensor<T>& tokens, const Tensor<T>& f_v, const AttentionWeights<T>& w,
                              const PartitionSpec& spec) {
  spec.validate();
  detail::check_xattn_inputs(tokens, f_v, w, "block_partial_xattn");
  if (tokens.rows() != spec.n_p + spec.n_g || f_v.rows() != spec.n_v) {
    throw ShapeError("block_partial_xattn: inputs " + shape_str(tokens.shape()) + " / " + shape_str(f_v.shape()) +
                     " do not match partition (n_v=" + std::to_string(spec.n_v) + ", n_p=" + std::to_string(spec.n_p) +
                     ", n_g=" + std::to_string(spec.n_g) + ")");
  }
  const std::size_t nq = tokens.rows(), c = tokens.cols(), ns = spec.window();
  const std::size_t dh = c / w.heads;
  const T sc = T(1) / std::sqrt(static_cast<T>(dh));

  const auto Q = detail::project_rows(tokens, w.wq, w.bq);
  const auto K = detail::project_rows(f_v, w.wk, Tensor<T>{});
  const auto V = detail::project_rows(f_v, w.wv, w.bv);
  std::vector<T> scores(spec.n_v);
  std::vector<T> heads_out(nq * c, T(0));
  for (std::size_t h = 0; h < w.heads; ++h) {
    const std::size_t off = h * dh;
    for (std::size_t i = 0; i < spec.n_p; ++i) {
      detail::local_attention_row(Q.data() + i * c + off, K.data(), V.data(), i * ns, ns, c, off, dh, sc,
                                  scores.data(), heads_out.data() + i * c + off);
    }
    for (std::size_t i = spec.n_p; i < nq; ++i) {
      detail::local_attention_row(Q.data() + i * c + off, K.data(), V.data(), 0, spec.n_v, c, off, dh, sc,
                                  scores.data(), heads_out.data() + i * c + off);
    }
  }
  Tensor<T> mixed(Shape{nq, c}, std::move(heads_out));
  return Tensor<T>(Shape{nq, c}, detail::project_rows(mixed, w.wo, w.bo));
}

// ---------------------------------------------------------------------------
// FLOP accounting. A multiply-add counts as 2 FLOPs; bias adds, softmax and
// normalization are not counted.
//   score/AV:   2 (QK^T) * heads * (visible query-key pairs) * (c/heads) * 2
//   projection: 2 * c^2 * (n_q [Q] + n_v [K] + n_v [V] + n_q [O])

struct FlopCount {
  std::uint64_t score_av = 0;
  std::uint64_t projection = 0;
};

inline std::uint64_t projection_flops(const PartitionSpec& s, std::size_t c) {
  const std::uint64_t nq = s.n_p + s.n_g;
  return 2ULL * c * c * (2 * nq + 2ULL * s.n_v);
}

inline FlopCount dense_flops(const PartitionSpec& s, std::size_t c, std::size_t heads) {
  const std::uint64_t pairs = static_cast<std::uint64_t>(s.n_p + s.n_g) * s.n_v;
  return {2ULL * heads * pairs * (c / heads) * 2, projection_flops(s, c)};
}

inline FlopCount block_flops(const PartitionSpec& s, std::size_t c, std::size_t heads) {
  const std::uint64_t pairs = static_cast<std::uint64_t>(s.n_p) * s.window() + static_cast<std::uint64_t>(s.n_g) * s.n_v;
  return {2ULL * heads * pairs * (c / heads) * 2, projection_flops(s, c)};
}

/// Score/AV FLOPs of the partial half, dense over block; equals n_v / n_s.
inline double partial_score_flop_ratio(const PartitionSpec& s, std::size_t c, std::size_t heads) {
  s.validate();
  if (s.n_p == 0) throw MaskError("partial_score_flop_ratio: no partial tokens");
  const PartitionSpec partial_only{s.n_v, s.n_p, 0};
  return static_cast<double>(dense_flops(partial_only, c, heads).score_av) /
         static_cast<double>(block_flops(partial_only, c, heads).score_av);
}

struct KernelReport {
  std::string variant;
  double ns_per_call_median = 0;
  std::size_t calls = 0;
  FlopCount flops;

  double gflops_per_s() const {
    return static_cast<double>(flops.score_av + flops.projection) / ns_per_call_median;
  }
};

struct BenchResult {
  ParGoConfig config;
  std::uint64_t seed = 0;
  KernelReport dense;
  KernelReport block;
  double max_abs_diff = 0;
};

inline nlohmann::json to_json(const KernelReport& r, const ParGoConfig& cfg) {
  return {{"variant", r.variant},
          {"ns_per_call_median", r.ns_per_call_median},
          {"calls", r.calls},
          {"flops_scoreav", r.flops.score_av},
          {"flops_projection", r.flops.projection},
          {"gflops_per_s", r.gflops_per_s()},
          {"config", cfg}};
}

inline nlohmann::json to_json(const BenchResult& b) {
  return {{"config", b.config},
          {"seed", b.seed},
          {"threads", 1},
          {"max_abs_diff", b.max_abs_diff},
          {"reports", nlohmann::json::array({to_json(b.dense, b.config), to_json(b.block, b.config)})}};
}

namespace detail {

template <class F>
double median_ns(F&& fn, std::size_t iters, std::size_t warmup) {
  for (std::size_t i = 0; i < warmup; ++i) fn();
  std::vector<double> ns(iters);
  for (auto& t : ns) {
    const auto start = std::chrono::steady_clock::now();
    fn();
    const auto stop = std::chrono::steady_clock::now();
    t = std::max(1.0, static_cast<double>(std::chrono::duration_cast<std::chrono::nanoseconds>(stop - start).count()));
  }
  std::sort(ns.begin(), ns.end());
  return iters % 2 ? ns[iters / 2] : 0.5 * (ns[iters / 2 - 1] + ns[iters / 2]);
}

}  // namespace detail

/// Times both kernels on identical random inputs on the calling thread and
/// records the max abs difference between them. Wall times are informational.
template <Real T>
BenchResult bench(const ParGoConfig& cfg, std::size_t iters, std::size_t warmup, std::uint64_t seed) {
  cfg.validate();
  if (iters == 0) throw ConfigError("bench: iters must be at least 1");
  Rng rng(seed);
  Rng data_rng = rng.split(1);
  auto random_matrix = [&](std::size_t r, std::size_t c) {
    std::vector<T> v(r * c);
    for (auto& x : v) x = static_cast<T>(data_rng.normal());
    return Tensor<T>(Shape{r, c}, std::move(v));
  };
  const auto tokens = random_matrix(cfg.tokens(), cfg.c);
  const auto f_v = random_matrix(cfg.n_v, cfg.c);
  Rng weight_rng = rng.split(2);
  const auto w = detail::init_attention<T>(cfg.c, cfg.heads, weight_rng);
  const auto spec = cfg.partition();
  const auto mask = build_pg_mask(spec);

  const auto ref = dense_masked_xattn(tokens, f_v, w, mask);
  const auto fast = block_partial_xattn(tokens, f_v, w, spec);
  BenchResult out;
  out.config = cfg;
  out.seed = seed;
  for (std::size_t i = 0; i < ref.numel(); ++i) {
    out.max_abs_diff = std::max(out.max_abs_diff, static_cast<double>(std::fabs(ref.data()[i] - fast.data()[i])));
  }
  out.dense = {"dense_masked", detail::median_ns([&] { (void)dense_masked_xattn(tokens, f_v, w, mask); }, iters, warmup),
               iters, dense_flops(spec, cfg.c, cfg.heads)};
  out.block = {"block_partial", detail::median_ns([&] { (void)block_partial_xattn(tokens, f_v, w, spec); }, iters, warmup),
               iters, block_flops(spec, cfg.c, cfg.heads)};
  return out;
}

}  // namespace pargo
