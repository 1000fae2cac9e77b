#pragma once

#include <glob.h>

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "dsrm/attack.hpp"
#include "dsrm/baselines.hpp"
#include "dsrm/data.hpp"
#include "dsrm/dsrm.hpp"
#include "dsrm/errors.hpp"
#include "dsrm/model.hpp"
#include "dsrm/report.hpp"

namespace dsrm {

/// Invalid experiment configuration; the message names the field.
struct ConfigError : InvalidArgument {
  using InvalidArgument::InvalidArgument;
};

namespace exit_code {
inline constexpr int ok = 0;
inline constexpr int internal = 1;
inline constexpr int user_error = 2;
inline constexpr int numeric = 3;
}  // namespace exit_code

// ---------------------------------------------------------------------------
// Configuration

struct DatasetBlock {
  std::string name;
  std::string generator;  // two_moons | token_task | empty for csv
  int n = 0;
  double noise = 0.0;
  int vocab_size = 0;
  int max_len = 0;
  std::uint64_t seed = 0;
  std::string csv_path;
  Modality schema = Modality::dense;
};

struct ErmMethod {
  SgdConfig sgd;
};
struct DsrmMethod {
  DsrmConfig cfg;
};
struct AdvMethod {
  AdvMode mode = AdvMode::pgd;
  AdvTrainConfig cfg;
};

using Method = std::variant<ErmMethod, DsrmMethod, AdvMethod>;

struct ExperimentConfig {
  DatasetBlock dataset;
  SplitSpec split;
  ModelSpec model;
  std::string method_name;  // erm | dsrm | pgd_at | freelb
  std::string label;        // report key; defaults to method_name
  Method method;
  std::vector<AttackConfig> attacks;
  int epochs = 8;
  std::vector<std::uint64_t> seeds;
  std::string output_dir = "out";
  nlohmann::json raw;
};

namespace detail {

inline void check_keys(const nlohmann::json& j, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [k, v] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || k == a;
    if (!ok) throw ConfigError(where + "." + k + ": unknown field");
  }
}

template <typename T>
T get(const nlohmann::json& j, const std::string& where, const char* key, std::optional<T> fallback = std::nullopt) {
  if (!j.contains(key)) {
    if (fallback) return *fallback;
    throw ConfigError(where + "." + key + ": required field missing");
  }
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(where + "." + key + ": wrong type");
  }
}

template <typename F>
void field(const std::string& name, F&& f) {
  try {
    f();
  } catch (const ConfigError&) {
    throw;
  } catch (const InvalidArgument& e) {
    throw ConfigError(name + ": " + e.what());
  }
}

}  // namespace detail

/// Parses and validates a JSON experiment file. Relative CSV paths resolve
/// against the directory of the config file.
inline ExperimentConfig parse_config(const nlohmann::json& j, const std::filesystem::path& base_dir = ".") {
  using detail::get;
  ExperimentConfig c;
  c.raw = j;
  detail::check_keys(j, "config", {"name", "dataset", "split", "model", "method", "attacks", "epochs", "seeds",
                                   "output_dir"});

  if (!j.contains("dataset")) throw ConfigError("dataset: required block missing");
  const auto& d = j.at("dataset");
  detail::check_keys(d, "dataset", {"name", "generator", "n", "noise", "vocab_size", "max_len", "seed", "csv", "schema"});
  c.dataset.seed = get<std::uint64_t>(d, "dataset", "seed", 0);
  if (d.contains("csv")) {
    if (d.contains("generator")) throw ConfigError("dataset: give either generator or csv, not both");
    auto p = std::filesystem::path(get<std::string>(d, "dataset", "csv"));
    if (p.is_relative()) p = base_dir / p;
    c.dataset.csv_path = p.string();
    if (!std::filesystem::exists(p)) throw ConfigError("dataset.csv: file not found: " + p.string());
    detail::field("dataset.schema", [&] { c.dataset.schema = modality_from_string(get<std::string>(d, "dataset", "schema", "dense")); });
    c.dataset.vocab_size = get<int>(d, "dataset", "vocab_size", 0);
    c.dataset.name = get<std::string>(d, "dataset", "name", p.stem().string());
  } else {
    c.dataset.generator = get<std::string>(d, "dataset", "generator");
    if (c.dataset.generator == "two_moons") {
      c.dataset.n = get<int>(d, "dataset", "n", 1000);
      c.dataset.noise = get<double>(d, "dataset", "noise", 0.25);
      if (c.dataset.n < 2 || c.dataset.n % 2) throw ConfigError("dataset.n: must be even and >= 2");
      if (c.dataset.noise < 0) throw ConfigError("dataset.noise: must be >= 0");
    } else if (c.dataset.generator == "token_task") {
      c.dataset.n = get<int>(d, "dataset", "n", 2000);
      c.dataset.vocab_size = get<int>(d, "dataset", "vocab_size", 50);
      c.dataset.max_len = get<int>(d, "dataset", "max_len", 16);
      if (c.dataset.n < 1) throw ConfigError("dataset.n: must be >= 1");
      if (c.dataset.vocab_size < 4) throw ConfigError("dataset.vocab_size: must be >= 4");
      if (c.dataset.max_len < 2) throw ConfigError("dataset.max_len: must be >= 2");
    } else {
      throw ConfigError("dataset.generator: unknown generator '" + c.dataset.generator + "'");
    }
    c.dataset.name = get<std::string>(d, "dataset", "name", c.dataset.generator);
  }

  const auto s = j.value("split", nlohmann::json::object());
  detail::check_keys(s, "split", {"valid_fraction", "test_fraction", "seed"});
  c.split = {get<double>(s, "split", "valid_fraction", 0.1), get<double>(s, "split", "test_fraction", 0.2),
             get<std::uint64_t>(s, "split", "seed", 0)};
  if (!(c.split.valid_fraction > 0 && c.split.test_fraction > 0 && c.split.valid_fraction + c.split.test_fraction < 1))
    throw ConfigError("split: fractions must be positive with valid_fraction + test_fraction < 1");

  if (!j.contains("model")) throw ConfigError("model: required block missing");
  const auto& m = j.at("model");
  detail::check_keys(m, "model", {"arch", "hidden_dim", "embed_dim"});
  detail::field("model.arch", [&] { c.model.arch = arch_from_string(get<std::string>(m, "model", "arch")); });
  c.model.hidden_dim = get<std::size_t>(m, "model", "hidden_dim", 16);
  c.model.embed_dim = get<std::size_t>(m, "model", "embed_dim", 8);
  const Modality data_modality = c.dataset.csv_path.empty()
                                     ? (c.dataset.generator == "token_task" ? Modality::tokens : Modality::dense)
                                     : c.dataset.schema;
  if (c.model.modality() != data_modality)
    throw ConfigError("model.arch: " + std::string(to_string(c.model.arch)) + " does not accept " +
                      to_string(data_modality) + " data");

  if (!j.contains("method")) throw ConfigError("method: required block missing");
  const auto& me = j.at("method");
  c.method_name = get<std::string>(me, "method", "name");
  c.label = get<std::string>(me, "method", "label", c.method_name);
  const double lr = get<double>(me, "method", "lr", 0.1);
  const auto bs = get<std::size_t>(me, "method", "batch_size", 16);
  if (!(lr > 0)) throw ConfigError("method.lr: must be > 0");
  if (bs < 1) throw ConfigError("method.batch_size: must be >= 1");
  if (c.method_name == "erm") {
    detail::check_keys(me, "method", {"name", "label", "lr", "batch_size"});
    c.method = ErmMethod{{lr, bs}};
  } else if (c.method_name == "dsrm") {
    detail::check_keys(me, "method", {"name", "label", "lr", "batch_size", "eta", "epsilon", "valid_batch",
                                      "constraint", "clamp_nonneg", "weight_mode"});
    DsrmConfig dc;
    dc.lr = lr;
    dc.batch_size = bs;
    dc.eta = get<double>(me, "method", "eta", 1.0);
    dc.epsilon = get<double>(me, "method", "epsilon", 1.0);
    dc.valid_batch = get<std::size_t>(me, "method", "valid_batch", 0);
    detail::field("method.constraint", [&] { dc.constraint = constraint_from_string(get<std::string>(me, "method", "constraint", "l2_ball")); });
    dc.clamp_nonneg = get<bool>(me, "method", "clamp_nonneg", true);
    detail::field("method.weight_mode", [&] { dc.weight_mode = weight_mode_from_string(get<std::string>(me, "method", "weight_mode", "ones")); });
    detail::field("method", [&] { dc.validate(); });
    c.method = DsrmMethod{dc};
  } else if (c.method_name == "pgd_at" || c.method_name == "freelb") {
    detail::check_keys(me, "method", {"name", "label", "lr", "batch_size", "radius", "steps", "step_size"});
    AdvMethod am;
    am.mode = c.method_name == "pgd_at" ? AdvMode::pgd : AdvMode::freelb;
    am.cfg.lr = lr;
    am.cfg.batch_size = bs;
    am.cfg.radius = get<double>(me, "method", "radius", 0.1);
    am.cfg.steps = get<int>(me, "method", "steps", 3);
    am.cfg.step_size = get<double>(me, "method", "step_size", 0.05);
    detail::field("method", [&] { am.cfg.validate(); });
    c.method = am;
  } else {
    throw ConfigError("method.name: unknown method '" + c.method_name + "' (expected erm, dsrm, pgd_at or freelb)");
  }

  if (j.contains("attacks")) {
    if (!j.at("attacks").is_array()) throw ConfigError("attacks: expected a list");
    std::size_t i = 0;
    for (const auto& a : j.at("attacks")) {
      const std::string where = "attacks[" + std::to_string(i++) + "]";
      detail::check_keys(a, where, {"kind", "eps", "steps", "step_size", "flip_budget", "candidates"});
      detail::field(where, [&] { c.attacks.push_back(attack_config_from_json(a)); });
      if (c.attacks.back().kind == AttackKind::greedy_flip && c.model.modality() != Modality::tokens)
        throw ConfigError(where + ".kind: greedy_flip needs a token model");
    }
  }

  c.epochs = get<int>(j, "config", "epochs", 8);
  if (c.epochs < 1) throw ConfigError("epochs: must be >= 1");
  c.seeds = get<std::vector<std::uint64_t>>(j, "config", "seeds", std::vector<std::uint64_t>{0});
  if (c.seeds.empty()) throw ConfigError("seeds: must be non-empty");
  c.output_dir = get<std::string>(j, "config", "output_dir", "out");
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config: '" + path + "' is not valid JSON: " + e.what());
  }
  return parse_config(j, std::filesystem::path(path).parent_path());
}

/// Command-line and environment overrides. Flags win over DSRM_SEED / DSRM_OUT.
struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
};

inline void apply_overrides(ExperimentConfig& c, const Overrides& o) {
  if (const char* env = std::getenv("DSRM_SEED"); env && *env) {
    try {
      c.seeds = {static_cast<std::uint64_t>(std::stoull(env))};
    } catch (const std::exception&) {
      throw ConfigError("DSRM_SEED: not an unsigned integer");
    }
  }
  if (const char* env = std::getenv("DSRM_OUT"); env && *env) c.output_dir = env;
  if (o.seed) c.seeds = {*o.seed};
  if (o.out) c.output_dir = *o.out;
}

inline Dataset build_dataset(const DatasetBlock& d) {
  if (!d.csv_path.empty()) return load_csv(d.csv_path, d.schema, d.vocab_size);
  if (d.generator == "two_moons") return gen_two_moons(d.n, d.noise, d.seed);
  return gen_token_task(d.n, d.vocab_size, d.max_len, d.seed);
}

inline TrainResult train_once(const ExperimentConfig& c, const Splits& splits, std::uint64_t seed,
                              std::ostream* step_log = nullptr) {
  TrainResult r = std::visit(
      [&](const auto& m) -> TrainResult {
        using T = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<T, ErmMethod>) return erm_train(c.model, splits, m.sgd, c.epochs, seed);
        else if constexpr (std::is_same_v<T, DsrmMethod>) return dsrm_train(c.model, splits, m.cfg, c.epochs, seed, step_log);
        else
          return m.mode == AdvMode::pgd ? pgd_at_train(c.model, splits, m.cfg, c.epochs, seed)
                                        : freelb_train(c.model, splits, m.cfg, c.epochs, seed);
      },
      c.method);
  r.report.method = c.label;
  r.report.dataset = c.dataset.name;
  r.report.config["experiment"] = c.raw;
  r.report.config["experiment"].erase("seeds");
  r.report.config["experiment"].erase("output_dir");
  return r;
}

inline std::string seed_file(const std::string& dir, const char* stem, std::uint64_t seed, const char* ext) {
  return (std::filesystem::path(dir) / (std::string(stem) + "_seed" + std::to_string(seed) + ext)).string();
}

inline void ensure_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory '" + dir + "': " + ec.message());
}

/// Maps library exceptions onto the exit-code contract.
template <typename F>
int guarded(std::ostream& err, F&& body) {
  try {
    return body();
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << '\n';
    return exit_code::numeric;
  } catch (const DegenerateInput& e) {
    err << "numeric error: " << e.what() << '\n';
    return exit_code::numeric;
  } catch (const InvalidArgument& e) {
    err << "error: " << e.what() << '\n';
    return exit_code::user_error;
  } catch (const ParseError& e) {
    err << "error: " << e.what() << '\n';
    return exit_code::user_error;
  } catch (const IoError& e) {
    err << "error: " << e.what() << '\n';
    return exit_code::user_error;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << '\n';
    return exit_code::internal;
  }
}

// ---------------------------------------------------------------------------
// Commands

/// Trains one model per seed. Writes params_seed{N}.json and
/// report_seed{N}.json (plus steps_seed{N}.jsonl for dsrm) under the output
/// directory.
inline int cmd_train(const std::string& config_path, const Overrides& o = {}, std::ostream& err = std::cerr) {
  return guarded(err, [&] {
    auto c = load_config(config_path);
    apply_overrides(c, o);
    if (const auto* am = std::get_if<AdvMethod>(&c.method))
      for (const auto& w : am->cfg.warnings()) err << "warning: " << w << '\n';
    const auto splits = split(build_dataset(c.dataset), c.split);
    ensure_dir(c.output_dir);
    for (auto seed : c.seeds) {
      std::ostringstream steps;
      const bool log_steps = std::holds_alternative<DsrmMethod>(c.method);
      auto r = train_once(c, splits, seed, log_steps ? &steps : nullptr);
      auto pj = params_to_json(Classifier(c.model.fitted_to(splits.train)).spec(), r.theta);
      pj["seed"] = seed;
      pj["method"] = c.label;
      write_file(seed_file(c.output_dir, "params", seed, ".json"), pj.dump(2) + "\n");
      emit(r.report, Format::json, seed_file(c.output_dir, "report", seed, ".json"));
      if (log_steps) write_file(seed_file(c.output_dir, "steps", seed, ".jsonl"), steps.str());
    }
    return exit_code::ok;
  });
}

/// Runs every configured attack on the test split against saved parameters
/// and records the metrics in report_seed{N}.json (replacing results for the
/// same attack label).
inline int cmd_attack(const std::string& params_path, const std::string& config_path, const Overrides& o = {},
                      bool write_trace = false, std::ostream& err = std::cerr) {
  return guarded(err, [&] {
    auto c = load_config(config_path);
    apply_overrides(c, o);
    if (c.attacks.empty()) throw ConfigError("attacks: at least one attack is required");

    std::ifstream in(params_path);
    if (!in) throw IoError("cannot open params '" + params_path + "'");
    nlohmann::json pj;
    try {
      in >> pj;
    } catch (const nlohmann::json::exception& e) {
      throw ParseError("'" + params_path + "': " + e.what());
    }
    LoadedParams lp;
    try {
      lp = params_from_json(pj);
    } catch (const ParseError& e) {
      throw ParseError("'" + params_path + "': " + e.what());
    }
    const std::uint64_t seed = pj.value("seed", c.seeds.front());

    const auto splits = split(build_dataset(c.dataset), c.split);
    const Classifier model(lp.spec);
    if (lp.spec != c.model.fitted_to(splits.test)) throw ConfigError("model: params do not match the configured model");

    ensure_dir(c.output_dir);
    const auto report_path = seed_file(c.output_dir, "report", seed, ".json");
    RunReport report;
    if (std::filesystem::exists(report_path)) {
      report = load_report(report_path);
    } else {
      report.method = pj.value("method", c.label);
      report.dataset = c.dataset.name;
      report.seed = seed;
    }
    std::ofstream trace;
    if (write_trace) {
      trace.open(seed_file(c.output_dir, "attack", seed, ".jsonl"), std::ios::trunc);
      if (!trace) throw IoError("cannot write attack trace");
    }
    for (const auto& a : c.attacks) {
      const auto m = evaluate_robustness(model, lp.params, splits.test, a, write_trace ? &trace : nullptr);
      const auto label = a.label();
      std::erase_if(report.attacks, [&](const AttackResult& r) { return r.attack == label; });
      report.attacks.push_back({label, a, m});
      err << label << ": clean " << m.clean_pct << "% aua " << m.aua_pct << "% suc " << m.suc_pct << "% queries "
          << m.mean_queries << '\n';
    }
    emit(report, Format::json, report_path);
    return exit_code::ok;
  });
}

inline const std::vector<std::string>& sweep_axes() {
  static const std::vector<std::string> axes{"epsilon", "eta", "radius", "steps"};
  return axes;
}

/// Retrains for each value of one hyperparameter and each seed, evaluating
/// the first configured attack. Writes sweep_{axis}.csv.
inline int cmd_sweep(const std::string& config_path, const std::string& axis, std::vector<double> values,
                     const Overrides& o = {}, std::ostream& err = std::cerr) {
  return guarded(err, [&] {
    if (std::find(sweep_axes().begin(), sweep_axes().end(), axis) == sweep_axes().end())
      throw ConfigError("axis: unknown sweep axis '" + axis + "' (expected epsilon, eta, radius or steps)");
    auto c = load_config(config_path);
    apply_overrides(c, o);
    if (values.empty()) throw ConfigError("values: at least one value is required");
    if (c.attacks.empty()) throw ConfigError("attacks: a sweep needs at least one attack");
    std::vector<double> unique;
    for (double v : values) {
      if (std::find(unique.begin(), unique.end(), v) != unique.end()) {
        err << "warning: duplicate sweep value " << v << " ignored\n";
        continue;
      }
      unique.push_back(v);
    }
    const bool dsrm_axis = axis == "epsilon" || axis == "eta";
    if (dsrm_axis && !std::holds_alternative<DsrmMethod>(c.method))
      throw ConfigError("axis: " + axis + " sweeps need method.name = dsrm");
    if (!dsrm_axis && !std::holds_alternative<AdvMethod>(c.method))
      throw ConfigError("axis: " + axis + " sweeps need method.name = pgd_at or freelb");
    for (double v : unique) {
      if (axis == "steps" && (v < 1 || v != std::floor(v))) throw ConfigError("values: steps must be integers >= 1");
      if (axis != "steps" && !(v >= 0)) throw ConfigError("values: must be non-negative");
    }

    const auto splits = split(build_dataset(c.dataset), c.split);
    std::vector<SweepRow> rows;
    for (auto seed : c.seeds) {
      for (double v : unique) {
        ExperimentConfig run = c;
        if (auto* dm = std::get_if<DsrmMethod>(&run.method)) {
          (axis == "epsilon" ? dm->cfg.epsilon : dm->cfg.eta) = v;
          detail::field("values", [&] { dm->cfg.validate(); });
        } else if (auto* am = std::get_if<AdvMethod>(&run.method)) {
          if (axis == "radius") am->cfg.radius = v;
          else am->cfg.steps = static_cast<int>(v);
        }
        const auto r = train_once(run, splits, seed);
        rows.push_back(evaluate_run(c.model, splits, r, v, c.attacks.front()));
      }
    }
    ensure_dir(c.output_dir);
    write_file((std::filesystem::path(c.output_dir) / ("sweep_" + axis + ".csv")).string(), sweep_to_csv(rows));
    return exit_code::ok;
  });
}

inline std::vector<std::string> expand_glob(const std::string& pattern) {
  glob_t g{};
  std::vector<std::string> out;
  if (::glob(pattern.c_str(), 0, nullptr, &g) == 0)
    for (std::size_t i = 0; i < g.gl_pathc; ++i) out.emplace_back(g.gl_pathv[i]);
  ::globfree(&g);
  std::sort(out.begin(), out.end());
  return out;
}

/// Builds the comparison table from every report matching `pattern` and
/// writes comparison.csv (or comparison.json) under `out_dir`.
inline int cmd_report(const std::string& pattern, const std::string& out_dir, Format format = Format::csv,
                      std::ostream& err = std::cerr) {
  return guarded(err, [&] {
    const auto files = expand_glob(pattern);
    if (files.empty()) throw ConfigError("reports: no files match '" + pattern + "'");
    std::vector<RunReport> reports;
    for (const auto& f : files) reports.push_back(load_report(f));
    const auto table = compare(reports);
    ensure_dir(out_dir);
    const char* name = format == Format::csv ? "comparison.csv" : "comparison.json";
    emit(table, format, (std::filesystem::path(out_dir) / name).string());
    return exit_code::ok;
  });
}

}  // namespace dsrm
