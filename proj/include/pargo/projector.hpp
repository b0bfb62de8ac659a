#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "pargo/masks.hpp"
#include "pargo/ops.hpp"
#include "pargo/rng.hpp"
#include "pargo/tensor.hpp"

namespace pargo {

/// Structural hyperparameters of the projector.
struct ParGoConfig {
  std::size_t n_v = 576;  // visual features from the encoder
  std::size_t n_p = 288;  // partial tokens
  std::size_t n_g = 16;   // global tokens
  std::size_t c = 64;     // model width
  std::size_t layers = 6;
  std::size_t heads = 4;
  std::size_t ffn_mult = 4;
  DType dtype = DType::float32;
  // false saturates every CPP mask (all-true) while keeping the CPP weights.
  bool cascade = true;

  static ParGoConfig reference_default(std::size_t width = 64) {
    ParGoConfig cfg;
    cfg.c = width;
    return cfg;
  }

  std::size_t tokens() const { return n_p + n_g; }
  PartitionSpec partition() const { return {n_v, n_p, n_g}; }
  CascadeSpec cascade_spec() const { return {n_p, layers}; }

  void validate() const {
    if (c == 0 || heads == 0 || layers == 0 || ffn_mult == 0) {
      throw ConfigError("config: c, heads, layers and ffn_mult must be positive");
    }
    if (c % heads != 0) {
      throw ConfigError("config: c=" + std::to_string(c) + " is not divisible by heads=" + std::to_string(heads));
    }
    try {
      partition().validate();
      if (n_p > 0) cascade_spec().validate();
    } catch (const MaskError& e) {
      throw ConfigError(std::string("config: ") + e.what());
    }
  }

  friend bool operator==(const ParGoConfig&, const ParGoConfig&) = default;
};

inline void to_json(nlohmann::json& j, const ParGoConfig& cfg) {
  j = nlohmann::json{{"n_v", cfg.n_v},         {"n_p", cfg.n_p},       {"n_g", cfg.n_g},
                     {"c", cfg.c},             {"layers", cfg.layers}, {"heads", cfg.heads},
                     {"ffn_mult", cfg.ffn_mult}, {"dtype", dtype_name(cfg.dtype)}, {"cascade", cfg.cascade}};
}

inline void from_json(const nlohmann::json& j, ParGoConfig& cfg) {
  static const char* const kKeys[] = {"n_v", "n_p", "n_g", "c", "layers", "heads", "ffn_mult", "dtype", "cascade"};
  if (!j.is_object()) throw ConfigError("projector config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (std::find(std::begin(kKeys), std::end(kKeys), key) == std::end(kKeys)) {
      throw ConfigError("projector config: unknown key '" + key + "'");
    }
  }
  try {
    ParGoConfig out;
    out.n_v = j.value("n_v", out.n_v);
    out.n_p = j.value("n_p", out.n_p);
    out.n_g = j.value("n_g", out.n_g);
    out.c = j.value("c", out.c);
    out.layers = j.value("layers", out.layers);
    out.heads = j.value("heads", out.heads);
    out.ffn_mult = j.value("ffn_mult", out.ffn_mult);
    out.dtype = parse_dtype(j.value("dtype", std::string(dtype_name(out.dtype))));
    out.cascade = j.value("cascade", out.cascade);
    cfg = out;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("projector config: ") + e.what());
  }
}

template <Real T>
struct CppParams {
  Tensor<T> ln_gain, ln_bias;
  AttentionWeights<T> attn;
};

template <Real T>
struct PgpParams {
  Tensor<T> ln_q_gain, ln_q_bias;    // on the tokens
  Tensor<T> ln_kv_gain, ln_kv_bias;  // on the visual features
  AttentionWeights<T> attn;
  Tensor<T> ln_ffn_gain, ln_ffn_bias;
  Tensor<T> ffn_w1, ffn_b1, ffn_w2, ffn_b2;
};

template <Real T>
struct LayerParams {
  std::optional<CppParams<T>> cpp;  // absent when n_p == 0
  PgpParams<T> pgp;
};

template <Real T>
struct ProjectorParams {
  Tensor<T> partial_tokens;  // [n_p x c], undefined when n_p == 0
  Tensor<T> global_tokens;   // [n_g x c], undefined when n_g == 0
  std::vector<LayerParams<T>> layers;
  Tensor<T> final_gain, final_bias;
};

template <Real T>
struct ProjectorOutput {
  Tensor<T> tokens;  // partial tokens first, then global tokens
};

namespace detail {

template <class Attn, class F>
void visit_attention(const std::string& prefix, Attn& a, F& fn) {
  fn(prefix + ".wq", a.wq);
  fn(prefix + ".bq", a.bq);
  fn(prefix + ".wk", a.wk);
  fn(prefix + ".wv", a.wv);
  fn(prefix + ".bv", a.bv);
  fn(prefix + ".wo", a.wo);
  fn(prefix + ".bo", a.bo);
}

}  // namespace detail

/// Calls fn(name, tensor) for every parameter tensor in a fixed order.
/// Works on const and non-const params.
template <class Params, class F>
void visit_params(Params& p, F&& fn) {
  if (p.partial_tokens.defined()) fn(std::string("q_p"), p.partial_tokens);
  if (p.global_tokens.defined()) fn(std::string("q_g"), p.global_tokens);
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    auto& layer = p.layers[l];
    const std::string base = "layers." + std::to_string(l);
    if (layer.cpp) {
      fn(base + ".cpp.ln.gain", layer.cpp->ln_gain);
      fn(base + ".cpp.ln.bias", layer.cpp->ln_bias);
      detail::visit_attention(base + ".cpp.attn", layer.cpp->attn, fn);
    }
    auto& g = layer.pgp;
    fn(base + ".pgp.ln_q.gain", g.ln_q_gain);
    fn(base + ".pgp.ln_q.bias", g.ln_q_bias);
    fn(base + ".pgp.ln_kv.gain", g.ln_kv_gain);
    fn(base + ".pgp.ln_kv.bias", g.ln_kv_bias);
    detail::visit_attention(base + ".pgp.attn", g.attn, fn);
    fn(base + ".pgp.ln_ffn.gain", g.ln_ffn_gain);
    fn(base + ".pgp.ln_ffn.bias", g.ln_ffn_bias);
    fn(base + ".pgp.ffn.w1", g.ffn_w1);
    fn(base + ".pgp.ffn.b1", g.ffn_b1);
    fn(base + ".pgp.ffn.w2", g.ffn_w2);
    fn(base + ".pgp.ffn.b2", g.ffn_b2);
  }
  fn(std::string("final_ln.gain"), p.final_gain);
  fn(std::string("final_ln.bias"), p.final_bias);
}

template <Real T>
std::vector<Tensor<T>> param_list(ProjectorParams<T>& p) {
  std::vector<Tensor<T>> out;
  visit_params(p, [&](const std::string&, Tensor<T>& t) { out.push_back(t); });
  return out;
}

template <Real T>
std::size_t param_count(const ProjectorParams<T>& p) {
  std::size_t n = 0;
  visit_params(p, [&](const std::string&, const Tensor<T>& t) { n += t.numel(); });
  return n;
}

/// Deep copy with independent storage.
template <Real T>
ProjectorParams<T> clone_params(const ProjectorParams<T>& p) {
  ProjectorParams<T> out = p;
  visit_params(out, [](const std::string&, Tensor<T>& t) { t = t.clone(); });
  return out;
}

/// Deep copy with gradients switched off, for inference without a tape.
template <Real T>
ProjectorParams<T> frozen_params(const ProjectorParams<T>& p) {
  ProjectorParams<T> out = p;
  visit_params(out, [](const std::string&, Tensor<T>& t) { t = t.detach(); });
  return out;
}

namespace detail {

enum class InitKind { weight, gain, zero };

template <Real T>
Tensor<T> init_tensor(Shape shape, InitKind kind, Rng& rng) {
  if (kind == InitKind::gain) return Tensor<T>::full(std::move(shape), T(1)).set_requires_grad();
  if (kind == InitKind::zero) return Tensor<T>::zeros(std::move(shape)).set_requires_grad();
  std::vector<T> values(shape_numel(shape));
  for (auto& v : values) {
    T x;
    do {
      x = static_cast<T>(rng.truncated_normal(0.02, 2.0));
    } while (!(std::fabs(x) < static_cast<T>(0.04)));
    v = x;
  }
  Tensor<T> t(std::move(shape), std::move(values));
  t.set_requires_grad();
  return t;
}

template <Real T>
AttentionWeights<T> init_attention(std::size_t c, std::size_t heads, Rng& rng) {
  AttentionWeights<T> a;
  a.wq = init_tensor<T>({c, c}, InitKind::weight, rng);
  a.bq = init_tensor<T>({c}, InitKind::zero, rng);
  a.wk = init_tensor<T>({c, c}, InitKind::weight, rng);
  a.wv = init_tensor<T>({c, c}, InitKind::weight, rng);
  a.bv = init_tensor<T>({c}, InitKind::zero, rng);
  a.wo = init_tensor<T>({c, c}, InitKind::weight, rng);
  a.bo = init_tensor<T>({c}, InitKind::zero, rng);
  a.heads = heads;
  return a;
}

}  // namespace detail

/// Fresh trainable parameters: matrices and token embeddings from a normal
/// with std 0.02 truncated at two standard deviations, gains 1, biases 0.
template <Real T>
ProjectorParams<T> init_projector(const ParGoConfig& cfg, Rng rng) {
  cfg.validate();
  using detail::InitKind;
  const std::size_t c = cfg.c, f = cfg.ffn_mult * cfg.c;
  ProjectorParams<T> p;
  if (cfg.n_p) p.partial_tokens = detail::init_tensor<T>({cfg.n_p, c}, InitKind::weight, rng);
  if (cfg.n_g) p.global_tokens = detail::init_tensor<T>({cfg.n_g, c}, InitKind::weight, rng);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    LayerParams<T> layer;
    if (cfg.n_p) {
      CppParams<T> cpp;
      cpp.ln_gain = detail::init_tensor<T>({c}, InitKind::gain, rng);
      cpp.ln_bias = detail::init_tensor<T>({c}, InitKind::zero, rng);
      cpp.attn = detail::init_attention<T>(c, cfg.heads, rng);
      layer.cpp = std::move(cpp);
    }
    auto& g = layer.pgp;
    g.ln_q_gain = detail::init_tensor<T>({c}, InitKind::gain, rng);
    g.ln_q_bias = detail::init_tensor<T>({c}, InitKind::zero, rng);
    g.ln_kv_gain = detail::init_tensor<T>({c}, InitKind::gain, rng);
    g.ln_kv_bias = detail::init_tensor<T>({c}, InitKind::zero, rng);
    g.attn = detail::init_attention<T>(c, cfg.heads, rng);
    g.ln_ffn_gain = detail::init_tensor<T>({c}, InitKind::gain, rng);
    g.ln_ffn_bias = detail::init_tensor<T>({c}, InitKind::zero, rng);
    g.ffn_w1 = detail::init_tensor<T>({c, f}, InitKind::weight, rng);
    g.ffn_b1 = detail::init_tensor<T>({f}, InitKind::zero, rng);
    g.ffn_w2 = detail::init_tensor<T>({f, c}, InitKind::weight, rng);
    g.ffn_b2 = detail::init_tensor<T>({c}, InitKind::zero, rng);
    p.layers.push_back(std::move(layer));
  }
  p.final_gain = detail::init_tensor<T>({c}, InitKind::gain, rng);
  p.final_bias = detail::init_tensor<T>({c}, InitKind::zero, rng);
  return p;
}

/// Masks used by one projector configuration, built once and reused.
struct ProjectorMasks {
  AttentionMask pg;
  std::vector<AttentionMask> cpp;  // index l-1 for layer l; empty when n_p == 0

  explicit ProjectorMasks(const ParGoConfig& cfg) : pg(build_pg_mask(cfg.partition())) {
    if (cfg.n_p == 0) return;
    for (std::size_t l = 1; l <= cfg.layers; ++l) {
      cpp.push_back(cfg.cascade ? build_cpp_mask(cfg.cascade_spec(), l) : AttentionMask::full(cfg.n_p, cfg.n_p));
    }
  }
};

/// Pre-norm masked self-attention over the partial tokens with a residual:
/// x + MHSA(LN(x)).
template <Real T>
Tensor<T> cpp_block(const Tensor<T>& partial, const CppParams<T>& p, const AttentionMask& mask) {
  detail::require_rank2(partial, "cpp_block", "partial");
  mask.require_dims(partial.rows(), partial.rows());
  const auto h = layer_norm(partial, p.ln_gain, p.ln_bias);
  return add(partial, multi_head_attention(h, h, h, mask, p.attn));
}

/// The cross-attention term of the PGP block before its residual:
/// MHA(LN_q(tokens), LN_kv(f_v)) under the partial-global mask.
template <Real T>
Tensor<T> pgp_cross_attention(const Tensor<T>& tokens, const Tensor<T>& f_v, const PgpParams<T>& p,
                              const AttentionMask& pg_mask) {
  detail::require_rank2(tokens, "pgp_block", "tokens");
  detail::require_rank2(f_v, "pgp_block", "f_v");
  if (tokens.cols() != f_v.cols()) {
    throw ShapeError("pgp_block: tokens " + shape_str(tokens.shape()) + " and f_v " + shape_str(f_v.shape()) +
                     " differ in width");
  }
  pg_mask.require_dims(tokens.rows(), f_v.rows());
  const auto q = layer_norm(tokens, p.ln_q_gain, p.ln_q_bias);
  const auto kv = layer_norm(f_v, p.ln_kv_gain, p.ln_kv_bias);
  return multi_head_attention(q, kv, kv, pg_mask, p.attn);
}

/// Partial-global perception: masked cross-attention onto the visual features
/// with a residual, then a GELU feed-forward with a residual.
template <Real T>
Tensor<T> pgp_block(const Tensor<T>& tokens, const Tensor<T>& f_v, const PgpParams<T>& p,
                    const AttentionMask& pg_mask) {
  const auto h = add(tokens, pgp_cross_attention(tokens, f_v, p, pg_mask));
  const auto z = layer_norm(h, p.ln_ffn_gain, p.ln_ffn_bias);
  return add(h, linear(gelu(linear(z, p.ffn_w1, p.ffn_b1)), p.ffn_w2, p.ffn_b2));
}

template <Real T>
ProjectorOutput<T> forward(const Tensor<T>& f_v, const ProjectorParams<T>& params, const ParGoConfig& cfg,
                           const ProjectorMasks& masks) {
  detail::require_rank2(f_v, "forward", "f_v");
  if (f_v.rows() != cfg.n_v || f_v.cols() != cfg.c) {
    throw ShapeError("forward: f_v is " + shape_str(f_v.shape()) + " but config expects [" + std::to_string(cfg.n_v) +
                     ", " + std::to_string(cfg.c) + "]");
  }
  if (params.layers.size() != cfg.layers) throw ShapeError("forward: params have a different layer count");
  const std::size_t np = cfg.n_p, ng = cfg.n_g;
  Tensor<T> partial = params.partial_tokens;
  Tensor<T> global = params.global_tokens;
  Tensor<T> tokens;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const auto& layer = params.layers[l];
    if (np) partial = cpp_block(partial, *layer.cpp, masks.cpp[l]);
    tokens = np && ng ? concat_rows(partial, global) : (np ? partial : global);
    tokens = pgp_block(tokens, f_v, layer.pgp, masks.pg);
    if (l + 1 < cfg.layers && np && ng) {
      partial = slice_rows(tokens, 0, np);
      global = slice_rows(tokens, np, ng);
    } else if (np) {
      partial = tokens;
    } else {
      global = tokens;
    }
  }
  return {layer_norm(tokens, params.final_gain, params.final_bias)};
}

template <Real T>
ProjectorOutput<T> forward(const Tensor<T>& f_v, const ProjectorParams<T>& params, const ParGoConfig& cfg) {
  cfg.validate();
  return forward(f_v, params, cfg, ProjectorMasks(cfg));
}

}  // namespace pargo
