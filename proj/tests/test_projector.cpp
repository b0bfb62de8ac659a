#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "pargo/kernels.hpp"
#include "pargo/projector.hpp"
#include "pargo/projector_check.hpp"

using namespace pargo;

namespace {

Tensor<double> random_matrix(std::size_t r, std::size_t c, Rng& rng, double scale = 1.0) {
  std::vector<double> v(r * c);
  for (auto& x : v) x = scale * rng.normal();
  return Tensor<double>(Shape{r, c}, std::move(v));
}

ParGoConfig small_config(std::size_t n_v, std::size_t n_p, std::size_t n_g, std::size_t layers) {
  ParGoConfig cfg = tiny_config();
  cfg.n_v = n_v;
  cfg.n_p = n_p;
  cfg.n_g = n_g;
  cfg.layers = layers;
  return cfg;
}

// Push every weight away from the near-zero init so outputs depend visibly on
// every input.
void jitter(ProjectorParams<double>& p, Rng rng) {
  visit_params(p, [&](const std::string&, Tensor<double>& t) {
    for (auto& x : t.data()) x += 0.3 * rng.normal();
  });
}

std::vector<double> row(const Tensor<double>& t, std::size_t r) {
  return {t.data().begin() + r * t.cols(), t.data().begin() + (r + 1) * t.cols()};
}

}  // namespace

TEST(Init, ShapesMatchConfig) {
  const auto cfg = ParGoConfig::reference_default(16);
  const auto p = init_projector<float>(cfg, Rng(0));
  EXPECT_EQ(p.partial_tokens.shape(), (Shape{288, 16}));
  EXPECT_EQ(p.global_tokens.shape(), (Shape{16, 16}));
  ASSERT_EQ(p.layers.size(), 6u);
  for (const auto& layer : p.layers) {
    ASSERT_TRUE(layer.cpp.has_value());
    EXPECT_EQ(layer.pgp.ffn_w1.shape(), (Shape{16, 64}));
    EXPECT_EQ(layer.pgp.ffn_w2.shape(), (Shape{64, 16}));
  }
}

TEST(Init, WeightsInsideTruncationBoundGainsOneBiasesZero) {
  const auto p = init_projector<double>(small_config(16, 4, 2, 2), Rng(3));
  std::size_t weights = 0;
  visit_params(p, [&](const std::string& name, const Tensor<double>& t) {
    const bool gain = name.ends_with(".gain");
    const bool bias = name.ends_with(".bias") || name.ends_with(".bq") || name.ends_with(".bv") ||
                      name.ends_with(".bo") || name.ends_with(".b1") || name.ends_with(".b2");
    for (double x : t.data()) {
      if (gain) {
        EXPECT_EQ(x, 1.0) << name;
      } else if (bias) {
        EXPECT_EQ(x, 0.0) << name;
      } else {
        EXPECT_GT(x, -0.04) << name;
        EXPECT_LT(x, 0.04) << name;
        ++weights;
      }
    }
  });
  EXPECT_GT(weights, 1000u);
}

TEST(Init, SameSeedIsBitIdentical) {
  const auto cfg = small_config(16, 4, 2, 2);
  auto a = init_projector<double>(cfg, Rng(5));
  auto b = init_projector<double>(cfg, Rng(5));
  auto c = init_projector<double>(cfg, Rng(6));
  const auto la = param_list(a), lb = param_list(b), lc = param_list(c);
  ASSERT_EQ(la.size(), lb.size());
  bool any_diff = false;
  for (std::size_t i = 0; i < la.size(); ++i) {
    EXPECT_TRUE(std::equal(la[i].data().begin(), la[i].data().end(), lb[i].data().begin()));
    any_diff = any_diff || !std::equal(la[i].data().begin(), la[i].data().end(), lc[i].data().begin());
  }
  EXPECT_TRUE(any_diff);
}

TEST(Config, InvalidConfigsAreRejected) {
  auto cfg = small_config(16, 4, 2, 2);
  cfg.heads = 3;
  EXPECT_THROW(cfg.validate(), ConfigError);
  EXPECT_THROW((void)init_projector<double>(small_config(16, 3, 2, 3), Rng(0)), ConfigError);
  EXPECT_THROW((void)init_projector<double>(small_config(16, 4, 2, 3), Rng(0)), ConfigError);
  EXPECT_THROW((void)init_projector<double>(small_config(16, 0, 0, 1), Rng(0)), ConfigError);
}

TEST(Config, JsonRoundTrip) {
  auto cfg = ParGoConfig::reference_default(32);
  cfg.cascade = false;
  const nlohmann::json j = cfg;
  EXPECT_EQ(j.get<ParGoConfig>(), cfg);
  nlohmann::json bad = j;
  bad["typo"] = 1;
  EXPECT_THROW((void)bad.get<ParGoConfig>(), ConfigError);
}

TEST(CppBlock, SaturatedMaskEqualsUnmaskedSelfAttention) {
  Rng rng(1);
  auto p = init_projector<double>(small_config(16, 4, 2, 2), rng.split(0));
  jitter(p, rng.split(1));
  const auto x = random_matrix(4, 8, rng);
  const auto& cpp = *p.layers[1].cpp;
  const auto masked = cpp_block(x, cpp, build_cpp_mask({4, 2}, 2));
  const auto h = layer_norm(x, cpp.ln_gain, cpp.ln_bias);
  const auto ref = add(x, multi_head_attention(h, h, h, AttentionMask::full(4, 4), cpp.attn));
  for (std::size_t i = 0; i < masked.numel(); ++i) EXPECT_EQ(masked.data()[i], ref.data()[i]);
}

TEST(CppBlock, IdentityMaskMatchesPerRowOracle) {
  Rng rng(2);
  auto p = init_projector<double>(small_config(16, 4, 2, 4), rng.split(0));
  jitter(p, rng.split(1));
  const auto x = random_matrix(4, 8, rng);
  const auto& cpp = *p.layers[0].cpp;
  const auto out = cpp_block(x, cpp, build_cpp_mask({4, 4}, 1));
  // A single visible key gets probability 1: out_i = x_i + (LN(x_i) Wv + bv) Wo + bo.
  for (std::size_t i = 0; i < 4; ++i) {
    const auto xi = slice_rows(x, i, 1);
    const auto hi = layer_norm(xi, cpp.ln_gain, cpp.ln_bias);
    const auto ref = add(xi, linear(linear(hi, cpp.attn.wv, cpp.attn.bv), cpp.attn.wo, cpp.attn.bo));
    for (std::size_t d = 0; d < 8; ++d) EXPECT_NEAR(out(i, d), ref(0, d), 1e-12);
  }
}

TEST(CppBlock, ZeroOutputProjectionIsResidualIdentity) {
  Rng rng(3);
  auto p = init_projector<double>(small_config(16, 4, 2, 2), rng.split(0));
  auto cpp = *p.layers[0].cpp;
  cpp.attn.wo = Tensor<double>::zeros({8, 8});
  cpp.attn.bo = Tensor<double>::zeros({8});
  const auto x = random_matrix(4, 8, rng);
  const auto out = cpp_block(x, cpp, build_cpp_mask({4, 2}, 1));
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(out.data()[i], x.data()[i]);
}

TEST(PgpBlock, PartialRowsIgnoreOutOfWindowFeatures) {
  const auto cfg = small_config(16, 4, 2, 2);
  const auto mask = build_pg_mask(cfg.partition());
  for (std::uint64_t trial = 0; trial < 25; ++trial) {
    Rng rng(100 + trial);
    auto p = init_projector<double>(cfg, rng.split(0));
    jitter(p, rng.split(1));
    const auto tokens = random_matrix(6, 8, rng);
    const auto f_v = random_matrix(16, 8, rng);
    const auto base = pgp_block(tokens, f_v, p.layers[0].pgp, mask);
    const std::size_t i = rng.uniform_int(4);
    auto perturbed = f_v.clone();
    for (std::size_t r = 0; r < 16; ++r) {
      if (r / 4 == i) continue;
      for (std::size_t d = 0; d < 8; ++d) perturbed(r, d) = 50.0 * rng.normal();
    }
    const auto out = pgp_block(tokens, perturbed, p.layers[0].pgp, mask);
    EXPECT_EQ(row(out, i), row(base, i)) << "trial " << trial;
  }
}

TEST(PgpBlock, InvariantToPermutationWithinWindow) {
  const auto cfg = small_config(16, 4, 2, 2);
  const auto mask = build_pg_mask(cfg.partition());
  Rng rng(9);
  auto p = init_projector<double>(cfg, rng.split(0));
  jitter(p, rng.split(1));
  const auto tokens = random_matrix(6, 8, rng);
  const auto f_v = random_matrix(16, 8, rng);
  const auto base = pgp_block(tokens, f_v, p.layers[0].pgp, mask);
  auto permuted = f_v.clone();
  const std::vector<std::size_t> order{3, 0, 2, 1};  // window 1 holds rows 4..7
  for (std::size_t j = 0; j < 4; ++j)
    for (std::size_t d = 0; d < 8; ++d) permuted(4 + j, d) = f_v(4 + order[j], d);
  const auto out = pgp_block(tokens, permuted, p.layers[0].pgp, mask);
  for (std::size_t d = 0; d < 8; ++d) EXPECT_NEAR(out(1, d), base(1, d), 1e-12);
}

TEST(PgpBlock, GlobalRowsSeeEveryFeature) {
  const auto cfg = small_config(16, 4, 2, 2);
  const auto mask = build_pg_mask(cfg.partition());
  Rng rng(11);
  auto p = init_projector<double>(cfg, rng.split(0));
  jitter(p, rng.split(1));
  const auto tokens = random_matrix(6, 8, rng);
  const auto f_v = random_matrix(16, 8, rng);
  const auto base = pgp_block(tokens, f_v, p.layers[0].pgp, mask);
  for (std::size_t r = 0; r < 16; ++r) {
    auto perturbed = f_v.clone();
    for (std::size_t d = 0; d < 8; ++d) perturbed(r, d) += rng.normal();
    const auto out = pgp_block(tokens, perturbed, p.layers[0].pgp, mask);
    for (std::size_t g = 4; g < 6; ++g) EXPECT_NE(row(out, g), row(base, g)) << "feature " << r;
  }
}

TEST(PgpBlock, CrossAttentionMatchesDenseKernel) {
  const auto cfg = small_config(16, 4, 2, 2);
  const auto mask = build_pg_mask(cfg.partition());
  Rng rng(13);
  auto p = init_projector<double>(cfg, rng.split(0));
  jitter(p, rng.split(1));
  const auto tokens = random_matrix(6, 8, rng);
  const auto f_v = random_matrix(16, 8, rng);
  const auto& g = p.layers[0].pgp;
  const auto sub = pgp_cross_attention(tokens, f_v, g, mask);
  const auto dense = dense_masked_xattn(layer_norm(tokens, g.ln_q_gain, g.ln_q_bias),
                                        layer_norm(f_v, g.ln_kv_gain, g.ln_kv_bias), g.attn, mask);
  for (std::size_t i = 0; i < sub.numel(); ++i) EXPECT_NEAR(sub.data()[i], dense.data()[i], 1e-12);
}

TEST(Forward, ReferenceGeometryGives304Tokens) {
  const auto cfg = ParGoConfig::reference_default(16);
  const auto p = frozen_params(init_projector<float>(cfg, Rng(0)));
  Rng rng(1);
  std::vector<float> v(576 * 16);
  for (auto& x : v) x = static_cast<float>(rng.normal());
  const auto out = forward(Tensor<float>(Shape{576, 16}, std::move(v)), p, cfg);
  EXPECT_EQ(out.tokens.shape(), (Shape{304, 16}));
}

TEST(Forward, TokenCountIndependentOfFeatureCount) {
  for (std::size_t n_v : {4u, 8u, 32u}) {
    const auto cfg = small_config(n_v, 4, 2, 2);
    Rng rng(n_v);
    const auto out = forward(random_matrix(n_v, 8, rng), init_projector<double>(cfg, Rng(0)), cfg);
    EXPECT_EQ(out.tokens.rows(), 6u);
  }
}

TEST(Forward, GlobalOnlyIsUnmaskedResampler) {
  const auto cfg = small_config(16, 0, 3, 2);
  const ProjectorMasks masks(cfg);
  EXPECT_TRUE(masks.pg.all_true());
  EXPECT_TRUE(masks.cpp.empty());
  const auto p = init_projector<double>(cfg, Rng(0));
  for (const auto& layer : p.layers) EXPECT_FALSE(layer.cpp.has_value());
  EXPECT_FALSE(p.partial_tokens.defined());
  Rng rng(1);
  EXPECT_EQ(forward(random_matrix(16, 8, rng), p, cfg).tokens.shape(), (Shape{3, 8}));
}

TEST(Forward, PartialOnlyConfigRuns) {
  const auto cfg = small_config(16, 4, 0, 2);
  const auto p = init_projector<double>(cfg, Rng(0));
  EXPECT_FALSE(p.global_tokens.defined());
  Rng rng(1);
  EXPECT_EQ(forward(random_matrix(16, 8, rng), p, cfg).tokens.shape(), (Shape{4, 8}));
}

TEST(Forward, SaturatedCascadeKeepsParameterCount) {
  auto cfg = small_config(16, 4, 2, 2);
  const auto with = init_projector<double>(cfg, Rng(0));
  cfg.cascade = false;
  const auto without = init_projector<double>(cfg, Rng(0));
  EXPECT_EQ(param_count(with), param_count(without));
  for (const auto& m : ProjectorMasks(cfg).cpp) EXPECT_TRUE(m.all_true());
}

TEST(Forward, RejectsWrongFeatureShape) {
  const auto cfg = small_config(16, 4, 2, 2);
  Rng rng(0);
  EXPECT_THROW((void)forward(random_matrix(15, 8, rng), init_projector<double>(cfg, Rng(0)), cfg), ShapeError);
}

// With n_vis(1) = 1 the first CPP mask is the identity, so after one full layer
// partial token i has only ever read window i.
TEST(Forward, FirstLayerWithIdentityCascadeIsLocal) {
  const auto cfg = small_config(16, 4, 2, 4);
  const ProjectorMasks masks(cfg);
  ASSERT_EQ(masks.cpp[0], AttentionMask::identity(4));
  for (std::uint64_t trial = 0; trial < 20; ++trial) {
    Rng rng(500 + trial);
    auto p = init_projector<double>(cfg, rng.split(0));
    jitter(p, rng.split(1));
    auto layer_one = [&](const Tensor<double>& f_v) {
      const auto partial = cpp_block(p.partial_tokens, *p.layers[0].cpp, masks.cpp[0]);
      return pgp_block(concat_rows(partial, p.global_tokens), f_v, p.layers[0].pgp, masks.pg);
    };
    const auto f_v = random_matrix(16, 8, rng);
    const auto base = layer_one(f_v);
    const std::size_t i = rng.uniform_int(4);
    auto perturbed = f_v.clone();
    for (std::size_t r = 0; r < 16; ++r) {
      if (r / 4 == i) continue;
      for (std::size_t d = 0; d < 8; ++d) perturbed(r, d) = 10.0 * rng.normal();
    }
    EXPECT_EQ(row(layer_one(perturbed), i), row(base, i));
  }
}

TEST(Forward, GradientsMatchFiniteDifferences) {
  EXPECT_LT(projector_grad_check(tiny_config(), 0, 1e-5), 1e-5);
}

TEST(Params, CloneIsIndependent) {
  auto p = init_projector<double>(small_config(16, 4, 2, 2), Rng(0));
  auto q = clone_params(p);
  q.partial_tokens.data()[0] += 1.0;
  EXPECT_NE(q.partial_tokens.data()[0], p.partial_tokens.data()[0]);
  const auto f = frozen_params(p);
  EXPECT_FALSE(f.partial_tokens.requires_grad());
  EXPECT_TRUE(p.partial_tokens.requires_grad());
}
