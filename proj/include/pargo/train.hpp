#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "pargo/adam.hpp"
#include "pargo/checkpoint.hpp"
#include "pargo/projector.hpp"
#include "pargo/toy.hpp"

namespace pargo {

struct TrainConfig {
  ParGoConfig model;  // model.n_v must equal g * g
  Task task = Task::detail;
  std::size_t g = 8;
  std::size_t symbols = 8;  // K
  std::size_t dataset_size = 2000;
  std::uint64_t data_seed = 1;
  std::uint64_t encoder_seed = 2;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t batch_size = 16;
  std::size_t steps = 500;
  std::vector<std::uint64_t> seeds{0};
  double aux_detail_weight = 0;  // relation/global: weight of the dense per-cell symbol loss

  std::size_t classes() const { return task == Task::relation ? 2 : symbols; }

  void validate() const {
    model.validate();
    if (g < 2 || symbols < 2) throw ConfigError("train config: g and K must be at least 2");
    if (model.n_v != g * g) {
      throw ConfigError("train config: model.n_v=" + std::to_string(model.n_v) + " must equal g*g=" +
                        std::to_string(g * g));
    }
    if (dataset_size < 10) throw ConfigError("train config: dataset_size must be at least 10 (90/10 split)");
    if (batch_size == 0) throw ConfigError("train config: batch_size must be positive");
    if (!(lr > 0) || !(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1) || !(adam_eps > 0)) {
      throw ConfigError("train config: need lr > 0, betas in [0, 1), adam_eps > 0");
    }
    if (seeds.empty()) throw ConfigError("train config: seeds list must not be empty");
    if (!(aux_detail_weight >= 0) || !std::isfinite(aux_detail_weight)) {
      throw ConfigError("train config: aux_detail_weight must be finite and non-negative");
    }
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& tc) {
  j = nlohmann::json{{"model", tc.model},
                     {"task", task_name(tc.task)},
                     {"g", tc.g},
                     {"K", tc.symbols},
                     {"dataset_size", tc.dataset_size},
                     {"data_seed", tc.data_seed},
                     {"encoder_seed", tc.encoder_seed},
                     {"lr", tc.lr},
                     {"betas", {tc.beta1, tc.beta2}},
                     {"adam_eps", tc.adam_eps},
                     {"batch_size", tc.batch_size},
                     {"steps", tc.steps},
                     {"seeds", tc.seeds},
                     {"aux_detail_weight", tc.aux_detail_weight}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& tc) {
  static const char* const kKeys[] = {"model", "task",    "g",         "K",          "dataset_size",
                                      "data_seed", "encoder_seed", "lr", "betas",   "adam_eps",
                                      "batch_size", "steps", "seeds", "aux_detail_weight"};
  if (!j.is_object()) throw ConfigError("train config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (std::find(std::begin(kKeys), std::end(kKeys), key) == std::end(kKeys)) {
      throw ConfigError("train config: unknown key '" + key + "'");
    }
  }
  try {
    TrainConfig out;
    out.g = j.value("g", out.g);
    out.symbols = j.value("K", out.symbols);
    auto model = j.value("model", nlohmann::json::object());
    if (!model.contains("n_v")) model["n_v"] = out.g * out.g;
    out.model = model.get<ParGoConfig>();
    out.task = parse_task(j.value("task", std::string("detail")));
    out.dataset_size = j.value("dataset_size", out.dataset_size);
    out.data_seed = j.value("data_seed", out.data_seed);
    out.encoder_seed = j.value("encoder_seed", out.encoder_seed);
    out.lr = j.value("lr", out.lr);
    if (j.contains("betas")) {
      const auto& b = j.at("betas");
      if (!b.is_array() || b.size() != 2) throw ConfigError("train config: betas must be [beta1, beta2]");
      out.beta1 = b[0].get<double>();
      out.beta2 = b[1].get<double>();
    }
    out.adam_eps = j.value("adam_eps", out.adam_eps);
    out.batch_size = j.value("batch_size", out.batch_size);
    out.steps = j.value("steps", out.steps);
    out.seeds = j.value("seeds", out.seeds);
    out.aux_detail_weight = j.value("aux_detail_weight", out.aux_detail_weight);
    tc = out;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Readout head
//
// Stand-in for the language model. A cell question is answered by attending
// over the projector tokens with the frozen position code of the cell as the
// query and one learned key per token slot, then gating the pooled vector by
// the same position code and applying a linear classifier. The global task
// uses a learned query and no gate. Relation features are [z1 * z2, (z1 - z2)^2].
// The aux head classifies the symbol of every cell from the same features.

template <Real T>
struct Readout {
  Tensor<T> w_query;       // [c x c]
  Tensor<T> token_keys;    // [tokens x c]
  Tensor<T> global_query;  // [1 x c]
  Tensor<T> w_gate;        // [c x c]
  Tensor<T> b_gate;        // [c]
  Tensor<T> w_out;         // [features x classes]
  Tensor<T> b_out;         // [classes]
  Tensor<T> aux_w_out;     // [c x K]
  Tensor<T> aux_b_out;     // [K]
};

template <class R, class F>
void visit_readout(R& r, F&& fn) {
  fn(std::string("readout.w_query"), r.w_query);
  fn(std::string("readout.token_keys"), r.token_keys);
  fn(std::string("readout.global_query"), r.global_query);
  fn(std::string("readout.w_gate"), r.w_gate);
  fn(std::string("readout.b_gate"), r.b_gate);
  fn(std::string("readout.w_out"), r.w_out);
  fn(std::string("readout.b_out"), r.b_out);
  fn(std::string("readout.aux_w_out"), r.aux_w_out);
  fn(std::string("readout.aux_b_out"), r.aux_b_out);
}

template <Real T>
Readout<T> init_readout(std::size_t c, std::size_t tokens, Task task, std::size_t classes, std::size_t symbols, Rng rng) {
  auto matrix = [&](std::size_t r, std::size_t k, double std) {
    std::vector<T> v(r * k);
    for (auto& x : v) x = static_cast<T>(rng.truncated_normal(std, 2.0));
    return Tensor<T>(Shape{r, k}, std::move(v)).set_requires_grad();
  };
  const double proj_std = 1.0 / std::sqrt(static_cast<double>(c));
  Readout<T> r;
  r.w_query = matrix(c, c, proj_std);
  r.token_keys = matrix(tokens, c, 1.0);
  r.global_query = matrix(1, c, 1.0);
  r.w_gate = matrix(c, c, proj_std);
  r.b_gate = Tensor<T>::full({c}, T(1)).set_requires_grad();
  r.w_out = matrix(task == Task::relation ? 2 * c : c, classes, 0.02);
  r.b_out = Tensor<T>::zeros({classes}).set_requires_grad();
  r.aux_w_out = matrix(c, symbols, 0.02);
  r.aux_b_out = Tensor<T>::zeros({symbols}).set_requires_grad();
  return r;
}

/// Balanced training pairs for the relation task: every cell is paired with
/// one uniformly drawn other cell of the same symbol and one of a different
/// symbol (each when it exists), matching how evaluation pairs are drawn.
inline std::vector<std::array<std::size_t, 2>> relation_training_pairs(const GridSample& s, Rng& rng) {
  const std::size_t n = s.grid.size();
  std::vector<std::array<std::size_t, 2>> out;
  std::vector<std::size_t> same, other;
  for (std::size_t i = 0; i < n; ++i) {
    same.clear();
    other.clear();
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i) (s.grid[j] == s.grid[i] ? same : other).push_back(j);
    }
    if (!same.empty()) out.push_back({i, same[rng.uniform_int(same.size())]});
    if (!other.empty()) out.push_back({i, other[rng.uniform_int(other.size())]});
  }
  return out;
}

/// Projector + readout + frozen encoder for one task.
template <Real T>
class Pipeline {
 public:
  Pipeline(const TrainConfig& tc, ProjectorParams<T> params, Readout<T> readout)
      : tc_(tc),
        masks_(tc.model),
        encoder_(tc.encoder_seed, tc.g, tc.symbols, tc.model.c),
        params_(std::move(params)),
        readout_(std::move(readout)) {}

  const TrainConfig& config() const { return tc_; }
  const StubEncoder<T>& encoder() const { return encoder_; }
  const ProjectorParams<T>& params() const { return params_; }
  const Readout<T>& readout() const { return readout_; }

  std::vector<Tensor<T>> trainable() {
    auto out = param_list(params_);
    visit_readout(readout_, [&](const std::string&, Tensor<T>& t) { out.push_back(t); });
    return out;
  }

  /// Copy sharing nothing with this one and recording no gradients.
  Pipeline frozen() const {
    Readout<T> r = readout_;
    visit_readout(r, [](const std::string&, Tensor<T>& t) { t = t.detach(); });
    return Pipeline(tc_, frozen_params(params_), std::move(r));
  }

  /// 1 x classes logits for the sample's own question.
  Tensor<T> logits(const GridSample& s) const {
    const auto tokens = project(s);
    switch (tc_.task) {
      case Task::detail:
        return linear(cell_features(tokens, encoder_.position(s.detail_query)), readout_.w_out, readout_.b_out);
      case Task::global:
        return global_logits(tokens);
      case Task::relation: {
        const auto z1 = cell_features(tokens, encoder_.position(s.relation_query[0]));
        const auto z2 = cell_features(tokens, encoder_.position(s.relation_query[1]));
        return relation_logits(z1, z2);
      }
    }
    throw ConfigError("unknown task");
  }

  /// Training loss for one grid. Cell tasks are supervised densely: the detail
  /// task asks about every cell and the relation task about the balanced pairs
  /// of relation_training_pairs drawn from `rng`. The global task has one
  /// question per grid. Relation and global add aux_detail_weight times the
  /// dense per-cell symbol loss of the aux head.
  Tensor<T> sample_loss(const GridSample& s, Rng& rng) const {
    const auto tokens = project(s);
    const std::vector<std::size_t> symbols(s.grid.begin(), s.grid.end());
    auto with_aux = [&](Tensor<T> loss) {
      if (tc_.aux_detail_weight == 0) return loss;
      const auto z = cell_features(tokens, encoder_.positions());
      const auto aux = cross_entropy(linear(z, readout_.aux_w_out, readout_.aux_b_out), symbols);
      return add(loss, scale(aux, static_cast<T>(tc_.aux_detail_weight)));
    };
    switch (tc_.task) {
      case Task::detail: {
        const auto z = cell_features(tokens, encoder_.positions());
        return cross_entropy(linear(z, readout_.w_out, readout_.b_out), symbols);
      }
      case Task::global: {
        const std::size_t label = s.global_label;
        return with_aux(cross_entropy(global_logits(tokens), std::span<const std::size_t>(&label, 1)));
      }
      case Task::relation: {
        const auto pairs = relation_training_pairs(s, rng);
        const std::size_t n = s.grid.size();
        std::vector<T> pick1(pairs.size() * n, T(0)), pick2(pairs.size() * n, T(0));
        std::vector<std::size_t> labels(pairs.size());
        for (std::size_t p = 0; p < pairs.size(); ++p) {
          pick1[p * n + pairs[p][0]] = T(1);
          pick2[p * n + pairs[p][1]] = T(1);
          labels[p] = s.grid[pairs[p][0]] == s.grid[pairs[p][1]] ? 1 : 0;
        }
        const auto z = cell_features(tokens, encoder_.positions());
        const auto z1 = matmul(Tensor<T>(Shape{pairs.size(), n}, std::move(pick1)), z);
        const auto z2 = matmul(Tensor<T>(Shape{pairs.size(), n}, std::move(pick2)), z);
        return with_aux(cross_entropy(relation_logits(z1, z2), labels));
      }
    }
    throw ConfigError("unknown task");
  }

  /// Mean of sample_loss over the batch; gradients accumulate into the
  /// trainable tensors when they are tracked.
  double accumulate_batch(std::span<const GridSample* const> batch, Rng& rng) const {
    double total = 0;
    const T inv = T(1) / static_cast<T>(batch.size());
    for (const GridSample* s : batch) {
      const auto loss = sample_loss(*s, rng);
      total += static_cast<double>(loss.item());
      backward(scale(loss, inv));
    }
    const double mean = total / static_cast<double>(batch.size());
    if (!std::isfinite(mean)) throw NumericalError("training diverged: non-finite loss");
    return mean;
  }

  std::size_t predict(const GridSample& s) const {
    const auto l = logits(s);
    const auto d = l.data();
    return static_cast<std::size_t>(std::max_element(d.begin(), d.end()) - d.begin());
  }

 private:
  Tensor<T> project(const GridSample& s) const { return forward(encode(s, encoder_), params_, tc_.model, masks_).tokens; }

  Tensor<T> pool(const Tensor<T>& tokens, const Tensor<T>& queries) const {
    return attention(queries, readout_.token_keys, tokens, AttentionMask::full(queries.rows(), tokens.rows()), 1);
  }

  /// Gated pooled vector for each row of `positions` (m x c -> m x c).
  Tensor<T> cell_features(const Tensor<T>& tokens, const Tensor<T>& positions) const {
    const auto h = pool(tokens, linear(positions, readout_.w_query));
    return mul(h, linear(positions, readout_.w_gate, readout_.b_gate));
  }

  Tensor<T> global_logits(const Tensor<T>& tokens) const {
    return linear(pool(tokens, readout_.global_query), readout_.w_out, readout_.b_out);
  }

  Tensor<T> relation_logits(const Tensor<T>& z1, const Tensor<T>& z2) const {
    const auto diff = sub(z1, z2);
    return linear(concat_cols(mul(z1, z2), mul(diff, diff)), readout_.w_out, readout_.b_out);
  }

  TrainConfig tc_;
  ProjectorMasks masks_;
  StubEncoder<T> encoder_;
  ProjectorParams<T> params_;
  Readout<T> readout_;
};

/// Top-1 accuracy of an arbitrary predictor; ties in logits resolve to the
/// lowest class id inside the predictor.
template <class Predict>
double accuracy(Predict&& predict, std::span<const GridSample> samples, Task task) {
  if (samples.empty()) throw ConfigError("accuracy: empty dataset");
  std::size_t hits = 0;
  for (const auto& s : samples) hits += predict(s) == s.label(task) ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(samples.size());
}

template <Real T>
double evaluate(const Pipeline<T>& pipeline, std::span<const GridSample> samples) {
  const auto frozen = pipeline.frozen();
  return accuracy([&](const GridSample& s) { return frozen.predict(s); }, samples, pipeline.config().task);
}

template <Real T>
struct TrainResult {
  std::string run_id;
  std::uint64_t seed = 0;
  std::vector<nlohmann::json> metrics;  // one JSONL record per entry
  double final_val_acc = 0;
  ProjectorParams<T> params;
  Readout<T> readout;
  std::uint64_t encoder_hash = 0;
};

/// Order-sensitive FNV-1a over the raw bytes of the encoder tables.
template <Real T>
std::uint64_t encoder_fingerprint(const StubEncoder<T>& enc) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto* t : {&enc.embedding(), &enc.positions()}) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(t->data().data());
    for (std::size_t i = 0; i < t->numel() * sizeof(T); ++i) h = (h ^ bytes[i]) * 1099511628211ULL;
  }
  return h;
}

template <Real T>
Pipeline<T> make_pipeline(const TrainConfig& tc, std::uint64_t seed) {
  const Rng root(seed);
  return Pipeline<T>(tc, init_projector<T>(tc.model, root.split(1)),
                     init_readout<T>(tc.model.c, tc.model.tokens(), tc.task, tc.classes(), tc.symbols, root.split(2)));
}

/// Trains one run: Adam on the batch loss, minibatches drawn from a per-epoch
/// shuffle. Logs {"run","seed","config"} first, then {"run","step","loss"} for
/// each step and {"run","step","epoch","val_acc"} at step 0, every epoch end
/// and the last step.
template <Real T>
TrainResult<T> train_run(const TrainConfig& tc, std::uint64_t seed, const std::string& run_id) {
  tc.validate();
  if (tc.model.dtype != dtype_of<T>()) throw ConfigError("train: model dtype does not match the scalar type");
  auto data = split_dataset(gen_dataset(tc.data_seed, tc.dataset_size, tc.g, tc.symbols));
  Pipeline<T> pipe = make_pipeline<T>(tc, seed);
  const auto encoder_before = encoder_fingerprint(pipe.encoder());
  auto params = pipe.trainable();
  AdamState<T> state;
  const AdamOptions opt{tc.lr, tc.beta1, tc.beta2, tc.adam_eps};
  Rng order_rng = Rng(seed).split(3);
  Rng pair_rng = Rng(seed).split(4);

  TrainResult<T> out;
  out.run_id = run_id;
  out.seed = seed;
  out.metrics.push_back({{"run", run_id}, {"seed", seed}, {"config", tc}});
  const std::size_t n = data.train.size();
  const std::size_t per_epoch = (n + tc.batch_size - 1) / tc.batch_size;
  auto log_val = [&](std::size_t step) {
    out.final_val_acc = evaluate(pipe, data.val);
    out.metrics.push_back(
        {{"run", run_id}, {"step", step}, {"epoch", step / per_epoch}, {"val_acc", out.final_val_acc}});
  };
  log_val(0);

  std::vector<std::size_t> order(n);
  std::vector<const GridSample*> batch;
  for (std::size_t step = 0; step < tc.steps; ++step) {
    const std::size_t pos = step % per_epoch;
    if (pos == 0) {
      std::iota(order.begin(), order.end(), std::size_t{0});
      for (std::size_t i = n - 1; i > 0; --i) std::swap(order[i], order[order_rng.uniform_int(i + 1)]);
    }
    batch.clear();
    for (std::size_t i = pos * tc.batch_size; i < std::min(n, (pos + 1) * tc.batch_size); ++i) {
      batch.push_back(&data.train[order[i]]);
    }
    const double loss = pipe.accumulate_batch(batch, pair_rng);
    adam_step(std::span<Tensor<T>>(params), state, opt);
    for (auto& p : params) p.zero_grad();
    out.metrics.push_back({{"run", run_id}, {"step", step}, {"loss", loss}});
    if ((step + 1) % per_epoch == 0 || step + 1 == tc.steps) log_val(step + 1);
  }
  if (encoder_fingerprint(pipe.encoder()) != encoder_before) throw NumericalError("train: frozen encoder was modified");
  out.encoder_hash = encoder_before;
  out.params = pipe.params();
  out.readout = pipe.readout();
  return out;
}

inline std::string metrics_jsonl(const std::vector<nlohmann::json>& records) {
  std::string out;
  for (const auto& r : records) out += r.dump() + "\n";
  return out;
}

/// Writes projector + readout with the train config and final accuracy in the
/// metadata block.
template <Real T>
void save_trained(const TrainResult<T>& r, const TrainConfig& tc, const std::string& path) {
  NamedTensors<T> extra;
  visit_readout(r.readout, [&](const std::string& name, const Tensor<T>& t) { extra.emplace_back(name, t); });
  nlohmann::json meta{{"train", tc}, {"run", r.run_id}, {"seed", r.seed}, {"final_val_acc", r.final_val_acc}};
  save_checkpoint(r.params, tc.model, path, meta, extra);
}

/// Rebuilds the trained pipeline (including its frozen encoder) from a
/// checkpoint written by save_trained.
template <Real T>
Pipeline<T> load_pipeline(const std::string& path) {
  auto ck = load_checkpoint<T>(path);
  if (!ck.meta.contains("train")) throw CheckpointError("checkpoint has no training metadata (not a pipeline checkpoint)");
  TrainConfig tc;
  try {
    tc = ck.meta.at("train").template get<TrainConfig>();
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("corrupt checkpoint: ") + e.what());
  }
  if (!(tc.model == ck.config)) throw CheckpointError("corrupt checkpoint: model config and metadata disagree");
  Readout<T> readout;
  std::map<std::string, Tensor<T>> extra(ck.extra.begin(), ck.extra.end());
  const auto expect = init_readout<T>(tc.model.c, tc.model.tokens(), tc.task, tc.classes(), tc.symbols, Rng(0));
  visit_readout(readout, [&](const std::string& name, Tensor<T>& t) {
    auto it = extra.find(name);
    if (it == extra.end()) throw CheckpointError("corrupt checkpoint: missing tensor '" + name + "'");
    t = it->second;
  });
  auto check = [](const Tensor<T>& got, const Shape& want) {
    if (got.shape() != want) throw CheckpointError("corrupt checkpoint: readout shape mismatch");
  };
  std::vector<Shape> want;
  visit_readout(expect, [&](const std::string&, const Tensor<T>& t) { want.push_back(t.shape()); });
  std::size_t i = 0;
  visit_readout(readout, [&](const std::string&, const Tensor<T>& t) { check(t, want[i++]); });
  return Pipeline<T>(tc, std::move(ck.params), std::move(readout));
}

// ---------------------------------------------------------------------------
// Ablation

enum class Variant { global_only, partial_only, partial_global, partial_global_no_cpp };

inline std::string_view variant_name(Variant v) {
  switch (v) {
    case Variant::global_only: return "global_only";
    case Variant::partial_only: return "partial_only";
    case Variant::partial_global: return "partial_global";
    case Variant::partial_global_no_cpp: return "partial_global_no_cpp";
  }
  return "?";
}

inline Variant parse_variant(std::string_view s) {
  for (auto v : {Variant::global_only, Variant::partial_only, Variant::partial_global, Variant::partial_global_no_cpp}) {
    if (variant_name(v) == s) return v;
  }
  throw ConfigError("unknown ablation variant '" + std::string(s) + "'");
}

inline const std::vector<Variant>& all_variants() {
  static const std::vector<Variant> v{Variant::global_only, Variant::partial_only, Variant::partial_global,
                                      Variant::partial_global_no_cpp};
  return v;
}

/// Same token budget n_p + n_g as the base, rearranged per variant. The
/// no-CPP variant keeps every CPP layer and saturates its masks instead.
inline TrainConfig variant_config(const TrainConfig& base, Variant v) {
  if (base.model.n_p == 0 || base.model.n_g == 0) {
    throw ConfigError("ablate: base config needs both partial and global tokens");
  }
  TrainConfig tc = base;
  const std::size_t total = base.model.tokens();
  switch (v) {
    case Variant::global_only:
      tc.model.n_p = 0;
      tc.model.n_g = total;
      break;
    case Variant::partial_only:
      tc.model.n_p = total;
      tc.model.n_g = 0;
      break;
    case Variant::partial_global:
      break;
    case Variant::partial_global_no_cpp:
      tc.model.cascade = false;
      break;
  }
  try {
    tc.validate();
  } catch (const ConfigError& e) {
    throw ConfigError("ablate: variant " + std::string(variant_name(v)) + " is invalid for this budget: " + e.what());
  }
  return tc;
}

struct AblationRow {
  std::string variant;
  std::size_t n_p = 0;
  std::size_t n_g = 0;
  bool cpp = false;  // cascaded partial masks active
  std::uint64_t seed = 0;
  double val_acc = 0;
};

struct AblationTable {
  std::vector<AblationRow> rows;  // one per (variant, seed), variant-major
  std::vector<nlohmann::json> metrics;

  double mean_acc(std::string_view variant) const {
    double total = 0;
    std::size_t n = 0;
    for (const auto& r : rows) {
      if (r.variant == variant) {
        total += r.val_acc;
        ++n;
      }
    }
    if (n == 0) throw ConfigError("ablation table has no rows for '" + std::string(variant) + "'");
    return total / static_cast<double>(n);
  }

  /// CSV with header variant,n_p,n_g,cpp,seed,val_acc; per-seed rows followed
  /// by one "mean" row per variant.
  std::string csv() const {
    std::ostringstream os;
    os << "variant,n_p,n_g,cpp,seed,val_acc\n";
    char buf[32];
    for (const auto& r : rows) {
      std::snprintf(buf, sizeof(buf), "%.6f", r.val_acc);
      os << r.variant << ',' << r.n_p << ',' << r.n_g << ',' << (r.cpp ? 1 : 0) << ',' << r.seed << ',' << buf << '\n';
    }
    std::vector<std::string> seen;
    for (const auto& r : rows) {
      if (std::find(seen.begin(), seen.end(), r.variant) != seen.end()) continue;
      seen.push_back(r.variant);
      std::snprintf(buf, sizeof(buf), "%.6f", mean_acc(r.variant));
      os << r.variant << ',' << r.n_p << ',' << r.n_g << ',' << (r.cpp ? 1 : 0) << ",mean," << buf << '\n';
    }
    return os.str();
  }
};

/// Trains every (variant, seed) pair of the base config. Runs are independent
/// and may execute on `jobs` threads; results land in fixed slots, so the
/// table does not depend on scheduling.
template <Real T>
AblationTable ablate(const TrainConfig& base, const std::vector<Variant>& variants = all_variants(),
                     std::size_t jobs = 1) {
  base.validate();
  struct Job {
    Variant variant;
    TrainConfig tc;
    std::uint64_t seed;
  };
  std::vector<Job> work;
  for (auto v : variants) {
    const auto tc = variant_config(base, v);
    for (auto seed : base.seeds) work.push_back({v, tc, seed});
  }
  std::vector<AblationRow> rows(work.size());
  std::vector<std::vector<nlohmann::json>> metrics(work.size());
  std::vector<std::exception_ptr> errors(work.size());
  auto run = [&](std::size_t i) {
    try {
      const auto& job = work[i];
      const std::string id = std::string(variant_name(job.variant)) + "/seed" + std::to_string(job.seed);
      auto r = train_run<T>(job.tc, job.seed, id);
      rows[i] = {std::string(variant_name(job.variant)), job.tc.model.n_p, job.tc.model.n_g,
                 job.tc.model.n_p > 0 && job.tc.model.cascade, job.seed, r.final_val_acc};
      metrics[i] = std::move(r.metrics);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };
  jobs = std::max<std::size_t>(1, std::min(jobs, work.size()));
  if (jobs == 1) {
    for (std::size_t i = 0; i < work.size(); ++i) run(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < jobs; ++t) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < work.size(); i = next++) run(i);
      });
    }
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  AblationTable table;
  table.rows = std::move(rows);
  for (auto& m : metrics) table.metrics.insert(table.metrics.end(), m.begin(), m.end());
  return table;
}

}  // namespace pargo
