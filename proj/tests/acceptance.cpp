// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
// criterion fails. Timing limits are checked against wall-clock time.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "pargo/pargo.hpp"

using namespace pargo;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

TrainConfig load_config(const std::string& name) {
  std::ifstream is(std::string(PARGO_CONFIG_DIR) + "/" + name);
  if (!is) throw IoError("cannot open config " + name);
  auto tc = nlohmann::json::parse(is).get<TrainConfig>();
  tc.validate();
  return tc;
}

template <Real T>
Tensor<T> random_matrix(std::size_t r, std::size_t c, Rng& rng, double scale = 1.0) {
  std::vector<T> v(r * c);
  for (auto& x : v) x = static_cast<T>(scale * rng.normal());
  return Tensor<T>(Shape{r, c}, std::move(v));
}

// 1 -------------------------------------------------------------------------

Outcome mask_invariants() {
  const auto start = Clock::now();
  Rng rng(1);
  std::size_t tuples = 0;
  std::string first_failure;
  auto fail = [&](const std::string& what) {
    if (first_failure.empty()) first_failure = what;
  };
  while (tuples < 200) {
    const std::size_t d = 1 + rng.uniform_int(6);
    const std::size_t n_p = d * (1 + rng.uniform_int(10));
    const std::size_t n_v = n_p * (1 + rng.uniform_int(6));
    const std::size_t n_g = rng.uniform_int(6);
    const PartitionSpec ps{n_v, n_p, n_g};
    const auto pg = build_pg_mask(ps);
    for (std::size_t j = 0; j < n_v; ++j) {
      std::size_t hits = 0;
      for (std::size_t i = 0; i < n_p; ++i) hits += pg(i, j);
      if (hits != 1) fail("partition column " + std::to_string(j));
    }
    for (std::size_t i = 0; i < n_p; ++i)
      if (pg.row_count(i) != ps.window()) fail("partial row count");
    for (std::size_t i = n_p; i < n_p + n_g; ++i)
      if (pg.row_count(i) != n_v) fail("global row count");

    const CascadeSpec cs{n_p, d};
    AttentionMask prev;
    for (std::size_t l = 1; l <= d; ++l, ++tuples) {
      const auto m = build_cpp_mask(cs, l);
      for (std::size_t i = 0; i < n_p; ++i) {
        if (!m(i, i)) fail("self visibility");
        if (m.row_count(i) != cs.increment() * l) fail("cascade row count");
        if (l > 1) {
          for (std::size_t j = 0; j < n_p; ++j)
            if (prev(i, j) && !m(i, j)) fail("nesting");
        }
      }
      if (l == d && !m.all_true()) fail("terminal saturation");
      prev = m;
    }
  }
  const double secs = seconds_since(start);
  if (secs >= 1.0) fail("took " + fmt("%.3f", secs) + " s");
  return {first_failure.empty(), std::to_string(tuples) + " (n_v, n_p, n_g, d, l) tuples in " + fmt("%.3f", secs) +
                                     " s" + (first_failure.empty() ? "" : "; first failure: " + first_failure)};
}

// 2 -------------------------------------------------------------------------

Outcome reference_geometry() {
  const auto cfg = ParGoConfig::reference_default();
  const auto ps = cfg.partition();
  const auto cs = cfg.cascade_spec();
  std::vector<std::size_t> vis;
  for (std::size_t l = 1; l <= cfg.layers; ++l) vis.push_back(cs.visible(l));
  bool ok = ps.window() == 2 && cs.increment() == 48 &&
            vis == std::vector<std::size_t>{48, 96, 144, 192, 240, 288};
  for (std::size_t l = 1; l <= cfg.layers; ++l) {
    const auto m = build_cpp_mask(cs, l);
    for (std::size_t i = 0; i < cfg.n_p; ++i) ok = ok && m.row_count(i) == vis[l - 1];
  }
  Rng rng(0);
  const auto out = forward(random_matrix<float>(cfg.n_v, cfg.c, rng), frozen_params(init_projector<float>(cfg, Rng(1))), cfg);
  ok = ok && out.tokens.rows() == 304;
  std::ostringstream os;
  os << "n_s=" << ps.window() << " k=" << cs.increment() << " n_vis=(";
  for (std::size_t i = 0; i < vis.size(); ++i) os << (i ? "," : "") << vis[i];
  os << ") output rows=" << out.tokens.rows();
  return {ok, os.str()};
}

// 3 -------------------------------------------------------------------------

Outcome gradient_correctness() {
  const auto start = Clock::now();
  const double err = projector_grad_check(tiny_config(), 0, 1e-5);
  const double secs = seconds_since(start);
  return {err < 1e-5 && secs < 60, "max_rel_error=" + fmt("%.3e", err) + " in " + fmt("%.1f", secs) + " s"};
}

// 4 -------------------------------------------------------------------------

Outcome locality() {
  ParGoConfig cfg = tiny_config();
  const auto mask = build_pg_mask(cfg.partition());
  const std::size_t ns = cfg.partition().window();
  std::size_t identical = 0;
  const std::size_t trials = 25;
  for (std::uint64_t t = 0; t < trials; ++t) {
    Rng rng(1000 + t);
    auto p = init_projector<double>(cfg, rng.split(0));
    Rng jitter = rng.split(1);
    visit_params(p, [&](const std::string&, Tensor<double>& x) {
      for (auto& v : x.data()) v += 0.3 * jitter.normal();
    });
    const auto tokens = random_matrix<double>(cfg.tokens(), cfg.c, rng);
    const auto f_v = random_matrix<double>(cfg.n_v, cfg.c, rng);
    const auto& pgp = p.layers[0].pgp;
    const auto base = pgp_block(tokens, f_v, pgp, mask);
    auto perturbed = f_v.clone();
    const std::size_t i = rng.uniform_int(cfg.n_p);
    for (std::size_t r = 0; r < cfg.n_v; ++r) {
      if (r / ns == i) continue;
      for (std::size_t d = 0; d < cfg.c; ++d) perturbed(r, d) = 100.0 * rng.normal();
    }
    const auto out = pgp_block(tokens, perturbed, pgp, mask);
    identical += std::memcmp(&out(i, 0), &base(i, 0), cfg.c * sizeof(double)) == 0 ? 1 : 0;
  }
  return {identical == trials, std::to_string(identical) + "/" + std::to_string(trials) + " trials byte-identical"};
}

// 5 -------------------------------------------------------------------------

Outcome kernel_equivalence() {
  const auto start = Clock::now();
  Rng rng(5);
  double worst32 = 0, worst64 = 0;
  bool flops_ok = true;
  const std::size_t configs = 60;
  for (std::size_t t = 0; t < configs; ++t) {
    const std::size_t heads = 1 + rng.uniform_int(4);
    const std::size_t c = heads * (2 + rng.uniform_int(8));
    const std::size_t n_p = 1 + rng.uniform_int(16);
    const std::size_t n_v = n_p * (1 + rng.uniform_int(6));
    const std::size_t n_g = rng.uniform_int(5);
    const PartitionSpec spec{n_v, n_p, n_g};
    const auto mask = build_pg_mask(spec);
    {
      const auto tok = random_matrix<double>(n_p + n_g, c, rng);
      const auto fv = random_matrix<double>(n_v, c, rng);
      const auto w = detail::init_attention<double>(c, heads, rng);
      const auto a = dense_masked_xattn(tok, fv, w, mask), b = block_partial_xattn(tok, fv, w, spec);
      for (std::size_t i = 0; i < a.numel(); ++i) worst64 = std::max(worst64, std::fabs(a.data()[i] - b.data()[i]));
    }
    {
      const auto tok = random_matrix<float>(n_p + n_g, c, rng);
      const auto fv = random_matrix<float>(n_v, c, rng);
      const auto w = detail::init_attention<float>(c, heads, rng);
      const auto a = dense_masked_xattn(tok, fv, w, mask), b = block_partial_xattn(tok, fv, w, spec);
      for (std::size_t i = 0; i < a.numel(); ++i) {
        worst32 = std::max(worst32, static_cast<double>(std::fabs(a.data()[i] - b.data()[i])));
      }
    }
    const auto dense = dense_flops(spec, c, heads), block = block_flops(spec, c, heads);
    flops_ok = flops_ok && dense.score_av - block.score_av ==
                               2ULL * heads * n_p * (n_v - spec.window()) * (c / heads) * 2;
  }
  const double ratio = partial_score_flop_ratio({576, 288, 16}, 64, 4);
  const double secs = seconds_since(start);
  const bool ok = worst64 <= 1e-10 && worst32 <= 1e-5 && flops_ok && ratio == 288.0 && secs < 60;
  return {ok, std::to_string(configs) + " configs, max diff f64=" + fmt("%.2e", worst64) + " f32=" +
                  fmt("%.2e", worst32) + ", FLOP identity " + (flops_ok ? "exact" : "BROKEN") +
                  ", reference ratio=" + fmt("%g", ratio) + ", " + fmt("%.1f", secs) + " s"};
}

// 6, 7 ----------------------------------------------------------------------

std::size_t worker_count() { return std::max(1u, std::thread::hardware_concurrency()); }

AblationTable run_ablation(const TrainConfig& tc, const std::vector<Variant>& variants) {
  return tc.model.dtype == DType::float64 ? ablate<double>(tc, variants, worker_count())
                                          : ablate<float>(tc, variants, worker_count());
}

void print_table(const AblationTable& table) {
  std::istringstream is(table.csv());
  for (std::string line; std::getline(is, line);) std::cout << "    " << line << '\n';
}

Outcome detail_ordering() {
  const auto start = Clock::now();
  const auto tc = load_config("ci_detail.json");
  const auto table = run_ablation(tc, {Variant::global_only, Variant::partial_global});
  const double secs = seconds_since(start);
  print_table(table);
  const double go = table.mean_acc("global_only"), pg = table.mean_acc("partial_global");
  const double margin = 100.0 * (pg - go);
  return {margin >= 5.0 && secs <= 15 * 60,
          "detail task, mean val acc partial_global=" + fmt("%.4f", pg) + " global_only=" + fmt("%.4f", go) +
              ", margin " + fmt("%+.2f", margin) + " pts (need >= 5), " + fmt("%.0f", secs) + " s"};
}

Outcome cascade_non_inferiority() {
  const auto start = Clock::now();
  const auto tc = load_config("ci_relation.json");
  const auto table = run_ablation(tc, {Variant::partial_global, Variant::partial_global_no_cpp});
  const double secs = seconds_since(start);
  print_table(table);
  const double with = table.mean_acc("partial_global"), without = table.mean_acc("partial_global_no_cpp");
  const double delta = 100.0 * (with - without);
  return {delta >= -1.0, "relation task, mean val acc with cascade=" + fmt("%.4f", with) + " saturated=" +
                             fmt("%.4f", without) + ", delta " + fmt("%+.2f", delta) + " pts (need >= -1), " +
                             fmt("%.0f", secs) + " s"};
}

// 8, 9 ----------------------------------------------------------------------

std::string read_bytes(const fs::path& p) { return detail::read_file(p.string()); }

Outcome determinism(const fs::path& dir) {
  auto tc = load_config("ci_detail.json");
  tc.steps = 60;
  tc.dataset_size = 500;
  tc.seeds = {3};
  std::vector<std::string> metrics, ckpts;
  for (int rep = 0; rep < 2; ++rep) {
    const auto r = train_run<float>(tc, 3, "determinism");
    const auto path = dir / ("det_" + std::to_string(rep) + ".pargo");
    save_trained(r, tc, path.string());
    metrics.push_back(metrics_jsonl(r.metrics));
    ckpts.push_back(read_bytes(path));
  }
  const bool ok = metrics[0] == metrics[1] && ckpts[0] == ckpts[1];
  return {ok, "metrics " + std::string(metrics[0] == metrics[1] ? "identical" : "DIFFER") + " (" +
                  std::to_string(metrics[0].size()) + " bytes), checkpoints " +
                  (ckpts[0] == ckpts[1] ? "identical" : "DIFFER") + " (" + std::to_string(ckpts[0].size()) +
                  " bytes)"};
}

Outcome checkpoint_round_trip(const fs::path& dir) {
  const auto first = dir / "det_0.pargo";
  const auto loaded = load_checkpoint<float>(first.string());
  const auto second = dir / "roundtrip.pargo";
  save_checkpoint(loaded.params, loaded.config, second.string(), loaded.meta, loaded.extra);
  const auto a = read_bytes(first), b = read_bytes(second);
  return {a == b, "save -> load -> save: " + std::to_string(a.size()) + " vs " + std::to_string(b.size()) + " bytes, " +
                      (a == b ? "byte-identical" : "DIFFERENT")};
}

}  // namespace

int main() {
  const fs::path dir = fs::temp_directory_path() / "pargo_acceptance";
  fs::remove_all(dir);
  fs::create_directories(dir);

  struct Criterion {
    int id;
    std::string name;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria{
      {1, "mask invariants", mask_invariants},
      {2, "reference-configuration geometry", reference_geometry},
      {3, "gradient correctness", gradient_correctness},
      {4, "partial-token locality", locality},
      {5, "kernel equivalence", kernel_equivalence},
      {6, "partial+global beats global-only on detail", detail_ordering},
      {7, "cascade non-inferiority on relation", cascade_non_inferiority},
      {8, "determinism", [&] { return determinism(dir); }},
      {9, "checkpoint round trip", [&] { return checkpoint_round_trip(dir); }},
  };

  int failures = 0;
  for (const auto& c : criteria) {
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += o.pass ? 0 : 1;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << c.id << " (" << c.name << "): " << o.detail << std::endl;
  }
  fs::remove_all(dir);
  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures == 0 ? 0 : 1;
}
