// pargo: command-line front end for mask export, gradient checks, training,
// ablations, kernel benchmarks and checkpoint evaluation.
//
// Exit codes: 0 success, 2 usage error, 3 data/config error, 4 numerical
// failure. Failures print one JSON line {"error": kind, "message": ...} to
// stderr.

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "pargo/pargo.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace pargo;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitNumerical = 4;
constexpr double kGradCheckThreshold = 1e-5;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void fail_line(std::string_view kind, std::string_view message) {
  std::cerr << json{{"error", kind}, {"message", message}}.dump() << '\n';
}

std::string read_text(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open '" + path + "' for reading");
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!os) throw IoError("failed writing '" + path.string() + "'");
}

json read_json(const std::string& path) {
  try {
    return json::parse(read_text(path));
  } catch (const json::parse_error& e) {
    throw ConfigError("'" + path + "' is not valid JSON: " + e.what());
  }
}

/// --seed wins over PARGO_SEED; nullopt when neither is set.
std::optional<std::uint64_t> resolve_seed(const std::optional<std::uint64_t>& flag) {
  if (flag) return flag;
  const char* env = std::getenv("PARGO_SEED");
  if (env == nullptr || *env == '\0') return std::nullopt;
  std::uint64_t v = 0;
  const std::string s(env);
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) throw UsageError("PARGO_SEED='" + s + "' is not an unsigned integer");
  return v;
}

ParGoConfig load_model_config(const std::optional<std::string>& path, const ParGoConfig& fallback) {
  if (!path) return fallback;
  return read_json(*path).get<ParGoConfig>();
}

TrainConfig load_train_config(const std::string& path, const std::optional<std::uint64_t>& seed) {
  auto tc = read_json(path).get<TrainConfig>();
  if (seed) tc.seeds = {*seed};
  tc.validate();
  return tc;
}

// ---------------------------------------------------------------------------
// gen-masks

struct GenMasksArgs {
  std::optional<std::size_t> nv, np, ng, layers, layer;
  std::string format = "csv";
  std::optional<std::string> out;
  std::optional<std::uint64_t> seed;
};

int cmd_gen_masks(const GenMasksArgs& a) {
  const auto fmt = parse_mask_format(a.format);
  const bool want_cpp = a.layer.has_value();
  const bool want_pg = a.nv.has_value() || !want_cpp;
  if (!a.np) throw UsageError("gen-masks: --np is required");
  if (want_pg && !a.nv) throw UsageError("gen-masks: --nv is required for the partial-global mask");
  if (want_cpp && !a.layers) throw UsageError("gen-masks: --layers is required with --layer");

  json echo{{"format", a.format}};
  if (a.seed) echo["seed"] = *a.seed;
  std::vector<std::pair<std::string, AttentionMask>> masks;
  if (want_pg) {
    const PartitionSpec spec{*a.nv, *a.np, a.ng.value_or(0)};
    masks.emplace_back("pg", build_pg_mask(spec));
    echo["pg"] = {{"n_v", spec.n_v}, {"n_p", spec.n_p}, {"n_g", spec.n_g}, {"n_s", spec.window()},
                  {"rows", masks.back().second.rows()}, {"cols", masks.back().second.cols()}};
  }
  if (want_cpp) {
    const CascadeSpec spec{*a.np, *a.layers};
    masks.emplace_back("cpp_l" + std::to_string(*a.layer), build_cpp_mask(spec, *a.layer));
    echo["cpp"] = {{"n_p", spec.n_p}, {"layers", spec.layers}, {"layer", *a.layer}, {"k", spec.increment()},
                   {"n_vis", spec.visible(*a.layer)}};
  }

  if (!a.out) {
    if (masks.size() != 1) throw UsageError("gen-masks: writing two masks needs --out <directory>");
    std::cout << export_mask(masks[0].second, fmt);
    return 0;
  }
  if (masks.size() == 1) {
    const fs::path path(*a.out);
    write_text(path, export_mask(masks[0].second, fmt));
    write_text(path.string() + ".meta.json", echo.dump(2) + "\n");
    return 0;
  }
  const fs::path dir(*a.out);
  for (const auto& [name, mask] : masks) write_text(dir / (name + "." + a.format), export_mask(mask, fmt));
  write_text(dir / "meta.json", echo.dump(2) + "\n");
  return 0;
}

// ---------------------------------------------------------------------------
// gradcheck

int cmd_gradcheck(const std::optional<std::string>& config, double eps, const std::optional<std::string>& out,
                  const std::optional<std::uint64_t>& seed_flag) {
  const auto cfg = load_model_config(config, tiny_config());
  const std::uint64_t seed = resolve_seed(seed_flag).value_or(0);
  if (!(eps > 0)) throw ConfigError("gradcheck: --eps must be positive");
  const double err = projector_grad_check(cfg, seed, eps);
  const bool pass = err < kGradCheckThreshold;
  std::cout << "max_rel_error=" << err << '\n';
  if (out) {
    json report{{"max_rel_error", err}, {"eps", eps},   {"seed", seed},
                {"threshold", kGradCheckThreshold}, {"pass", pass}, {"config", cfg}};
    report["config"]["dtype"] = "float64";
    write_text(*out, report.dump(2) + "\n");
  }
  if (!pass) {
    fail_line("numerical", "gradcheck: max_rel_error " + std::to_string(err) + " is not below 1e-5");
    return kExitNumerical;
  }
  return 0;
}

// ---------------------------------------------------------------------------
// train

template <Real T>
int train_all(const TrainConfig& tc, const fs::path& out) {
  fs::create_directories(out);
  std::string jsonl;
  json runs = json::array();
  double total = 0;
  for (auto seed : tc.seeds) {
    const std::string run_id = "seed" + std::to_string(seed);
    const auto r = train_run<T>(tc, seed, run_id);
    jsonl += metrics_jsonl(r.metrics);
    const std::string ckpt = "ckpt_seed" + std::to_string(seed) + ".pargo";
    save_trained(r, tc, (out / ckpt).string());
    runs.push_back({{"run", run_id}, {"seed", seed}, {"final_val_acc", r.final_val_acc}, {"checkpoint", ckpt}});
    total += r.final_val_acc;
    std::cout << run_id << " final_val_acc=" << r.final_val_acc << '\n';
  }
  write_text(out / "metrics.jsonl", jsonl);
  const json summary{{"config", tc}, {"runs", runs}, {"mean_val_acc", total / static_cast<double>(tc.seeds.size())}};
  write_text(out / "summary.json", summary.dump(2) + "\n");
  return 0;
}

int cmd_train(const std::string& config, const std::string& out, const std::optional<std::uint64_t>& seed) {
  const auto tc = load_train_config(config, resolve_seed(seed));
  return tc.model.dtype == DType::float64 ? train_all<double>(tc, out) : train_all<float>(tc, out);
}

// ---------------------------------------------------------------------------
// ablate

std::vector<Variant> parse_variants(const std::string& list) {
  if (list.empty() || list == "all") return all_variants();
  std::vector<Variant> out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_variant(item));
  return out;
}

int cmd_ablate(const std::string& config, const std::string& out, std::size_t jobs, const std::string& variants,
               const std::optional<std::uint64_t>& seed) {
  const auto tc = load_train_config(config, resolve_seed(seed));
  const auto vs = parse_variants(variants);
  const auto table = tc.model.dtype == DType::float64 ? ablate<double>(tc, vs, jobs) : ablate<float>(tc, vs, jobs);
  const fs::path dir(out);
  write_text(dir / "ablation.csv", table.csv());
  write_text(dir / "metrics.jsonl", metrics_jsonl(table.metrics));
  json means = json::object();
  for (auto v : vs) means[std::string(variant_name(v))] = table.mean_acc(variant_name(v));
  json rows = json::array();
  for (const auto& r : table.rows) {
    rows.push_back({{"variant", r.variant}, {"n_p", r.n_p}, {"n_g", r.n_g}, {"cpp", r.cpp}, {"seed", r.seed},
                    {"val_acc", r.val_acc}});
  }
  write_text(dir / "summary.json", json{{"config", tc}, {"mean_val_acc", means}, {"rows", rows}}.dump(2) + "\n");
  std::cout << table.csv();
  return 0;
}

// ---------------------------------------------------------------------------
// bench

int cmd_bench(const std::optional<std::string>& config, std::size_t iters, std::size_t warmup,
              const std::optional<std::string>& out, const std::optional<std::uint64_t>& seed_flag) {
  const auto cfg = load_model_config(config, ParGoConfig::reference_default());
  const std::uint64_t seed = resolve_seed(seed_flag).value_or(0);
  const auto result = cfg.dtype == DType::float64 ? bench<double>(cfg, iters, warmup, seed)
                                                  : bench<float>(cfg, iters, warmup, seed);
  const double tol = cfg.dtype == DType::float64 ? 1e-10 : 1e-5;
  const std::string doc = to_json(result).dump(2) + "\n";
  if (out) {
    write_text(*out, doc);
  } else {
    std::cout << doc;
  }
  if (!(result.max_abs_diff <= tol)) {
    fail_line("numerical", "bench: block and dense kernels differ by " + std::to_string(result.max_abs_diff));
    return kExitNumerical;
  }
  return 0;
}

// ---------------------------------------------------------------------------
// eval

struct DataSpec {
  std::uint64_t data_seed = 0;
  std::size_t dataset_size = 0;
  std::string split = "val";  // val, train or all
};

DataSpec parse_data_spec(const json& j, const TrainConfig& tc) {
  static const char* const kKeys[] = {"data_seed", "dataset_size", "split"};
  if (!j.is_object()) throw ConfigError("eval data spec must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (std::find(std::begin(kKeys), std::end(kKeys), key) == std::end(kKeys)) {
      throw ConfigError("eval data spec: unknown key '" + key + "'");
    }
  }
  DataSpec d{tc.data_seed, tc.dataset_size, "val"};
  try {
    d.data_seed = j.value("data_seed", d.data_seed);
    d.dataset_size = j.value("dataset_size", d.dataset_size);
    d.split = j.value("split", d.split);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("eval data spec: ") + e.what());
  }
  if (d.split != "val" && d.split != "train" && d.split != "all") {
    throw ConfigError("eval data spec: split must be val, train or all");
  }
  return d;
}

template <Real T>
int eval_with(const std::string& ckpt, const std::optional<std::string>& data, const std::optional<std::string>& out,
              const std::optional<std::uint64_t>& seed) {
  const auto pipe = load_pipeline<T>(ckpt);
  const auto& tc = pipe.config();
  auto spec = parse_data_spec(data ? read_json(*data) : json::object(), tc);
  if (seed) spec.data_seed = *seed;
  auto all = gen_dataset(spec.data_seed, spec.dataset_size, tc.g, tc.symbols);
  std::vector<GridSample> samples;
  if (spec.split == "all") {
    samples = std::move(all);
  } else {
    auto split = split_dataset(std::move(all));
    samples = spec.split == "val" ? std::move(split.val) : std::move(split.train);
  }
  const double acc = evaluate(pipe, samples);
  const auto header = peek_checkpoint(ckpt);
  json report{{"task", task_name(tc.task)},
              {"accuracy", acc},
              {"samples", samples.size()},
              {"data", {{"data_seed", spec.data_seed}, {"dataset_size", spec.dataset_size}, {"split", spec.split}}},
              {"checkpoint", ckpt},
              {"config", tc}};
  if (header.meta.contains("final_val_acc")) report["train_final_val_acc"] = header.meta["final_val_acc"];
  std::cout << "accuracy=" << acc << '\n';
  if (out) write_text(*out, report.dump(2) + "\n");
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::optional<std::string>& data, const std::optional<std::string>& out,
             const std::optional<std::uint64_t>& seed_flag) {
  const auto seed = resolve_seed(seed_flag);
  return peek_checkpoint(ckpt).config.dtype == DType::float64 ? eval_with<double>(ckpt, data, out, seed)
                                                              : eval_with<float>(ckpt, data, out, seed);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ParGo partial-global projector toolkit"};
  app.require_subcommand(1);

  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_opt;
  auto add_common = [&](CLI::App* sub, bool out_required) {
    sub->add_option("--seed", seed, "Seed (overrides PARGO_SEED)");
    auto* o = sub->add_option("--out", out_opt, "Output path");
    if (out_required) o->required();
  };

  GenMasksArgs gm;
  auto* gen = app.add_subcommand("gen-masks", "Export the partial-global and/or cascaded partial mask");
  gen->add_option("--nv", gm.nv, "Visual feature count");
  gen->add_option("--np", gm.np, "Partial token count");
  gen->add_option("--ng", gm.ng, "Global token count (default 0)");
  gen->add_option("--layers", gm.layers, "Projector depth d");
  gen->add_option("--layer", gm.layer, "1-based layer of the cascaded mask to export");
  gen->add_option("--format", gm.format, "csv or pgm")->check(CLI::IsMember({"csv", "pgm"}));
  add_common(gen, false);

  std::optional<std::string> config;
  double eps = 1e-5;
  auto* gc = app.add_subcommand("gradcheck", "Central-difference check of the full projector in float64");
  gc->add_option("--config", config, "Projector config JSON (default: tiny config)");
  gc->add_option("--eps", eps, "Finite-difference step");
  add_common(gc, false);

  std::string config_req;
  auto* tr = app.add_subcommand("train", "Train the toy pipeline for every seed of a train config");
  tr->add_option("--config", config_req, "Train config JSON")->required();
  add_common(tr, true);

  std::size_t jobs = 1;
  std::string variants = "all";
  auto* ab = app.add_subcommand("ablate", "Train the ablation grid at a matched token budget");
  ab->add_option("--config", config_req, "Base train config JSON")->required();
  ab->add_option("--jobs", jobs, "Parallel runs")->check(CLI::PositiveNumber);
  ab->add_option("--variants", variants, "Comma list of global_only,partial_only,partial_global,partial_global_no_cpp");
  add_common(ab, true);

  std::size_t iters = 20, warmup = 3;
  auto* bn = app.add_subcommand("bench", "Time dense versus block partial cross-attention");
  bn->add_option("--config", config, "Projector config JSON (default: reference configuration)");
  bn->add_option("--iters", iters, "Timed calls")->check(CLI::PositiveNumber);
  bn->add_option("--warmup", warmup, "Untimed calls before timing");
  add_common(bn, false);

  std::string ckpt;
  std::optional<std::string> data;
  auto* ev = app.add_subcommand("eval", "Top-1 accuracy of a trained checkpoint");
  ev->add_option("--ckpt", ckpt, "Checkpoint written by train")->required();
  ev->add_option("--data", data, "Data spec JSON {data_seed, dataset_size, split}");
  add_common(ev, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    fail_line("usage", e.what());
    return kExitUsage;
  }

  try {
    gm.out = out_opt;
    gm.seed = seed;
    if (gen->parsed()) return cmd_gen_masks(gm);
    if (gc->parsed()) return cmd_gradcheck(config, eps, out_opt, seed);
    if (tr->parsed()) return cmd_train(config_req, *out_opt, seed);
    if (ab->parsed()) return cmd_ablate(config_req, *out_opt, jobs, variants, seed);
    if (bn->parsed()) return cmd_bench(config, iters, warmup, out_opt, seed);
    if (ev->parsed()) return cmd_eval(ckpt, data, out_opt, seed);
  } catch (const UsageError& e) {
    fail_line("usage", e.what());
    return kExitUsage;
  } catch (const NumericalError& e) {
    fail_line("numerical", e.what());
    return kExitNumerical;
  } catch (const Error& e) {
    fail_line("data", e.what());
    return kExitData;
  } catch (const fs::filesystem_error& e) {
    fail_line("data", e.what());
    return kExitData;
  }
  return kExitUsage;
}
