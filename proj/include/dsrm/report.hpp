#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "dsrm/attack.hpp"
#include "dsrm/data.hpp"
#include "dsrm/errors.hpp"
#include "dsrm/model.hpp"

namespace dsrm {

inline constexpr int kReportSchemaVersion = 1;

/// Hardware-independent cost: one unit = one example through one forward or
/// one backward pass. Only training passes are counted; evaluation for
/// reports and attacks is not.
struct PassLedger {
  std::uint64_t forward_units = 0;
  std::uint64_t backward_units = 0;

  std::uint64_t total() const { return forward_units + backward_units; }
  PassLedger& operator+=(const PassLedger& o) {
    forward_units += o.forward_units;
    backward_units += o.backward_units;
    return *this;
  }
  bool operator==(const PassLedger&) const = default;
};

struct EpochRecord {
  int epoch = 0;
  double train_loss_mean = 0.0;
  double test_loss_mean = 0.0;
  double test_loss_var = 0.0;  // population variance of per-example test losses

  bool operator==(const EpochRecord&) const = default;
};

struct AttackResult {
  std::string attack;  // AttackConfig::label()
  AttackConfig config;
  RobustnessMetrics metrics;
};

struct RunReport {
  std::string method;
  std::string dataset;
  nlohmann::json config = nlohmann::json::object();
  std::uint64_t seed = 0;
  std::vector<EpochRecord> epochs;
  std::vector<AttackResult> attacks;
  PassLedger passes;
  double wall_ms = 0.0;
};

struct LossStats {
  double mean = 0.0;
  double var = 0.0;
};

/// Two-pass mean and population variance.
inline LossStats loss_stats(std::span<const double> xs) {
  require(!xs.empty(), "loss_stats: empty input");
  double s = 0.0;
  for (double x : xs) s += x;
  const double mean = s / static_cast<double>(xs.size());
  double ss = 0.0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  return {mean, ss / static_cast<double>(xs.size())};
}

inline void record_epoch(RunReport& report, const Classifier& model, const ParamVector& theta, const Dataset& train,
                         const Dataset& test) {
  require(!train.empty() && !test.empty(), "record_epoch: empty dataset");
  const auto tr = model.per_sample_losses(theta, train.examples);
  const auto te = model.per_sample_losses(theta, test.examples);
  const auto ts = loss_stats(te);
  report.epochs.push_back({static_cast<int>(report.epochs.size()) + 1, loss_stats(tr).mean, ts.mean, ts.var});
}

// ---------------------------------------------------------------------------
// JSON

inline nlohmann::json to_json(const RunReport& r) {
  nlohmann::json epochs = nlohmann::json::array();
  for (const auto& e : r.epochs)
    epochs.push_back({{"epoch", e.epoch},
                      {"train_loss_mean", e.train_loss_mean},
                      {"test_loss_mean", e.test_loss_mean},
                      {"test_loss_var", e.test_loss_var}});
  nlohmann::json attacks = nlohmann::json::array();
  for (const auto& a : r.attacks)
    attacks.push_back({{"attack", a.attack}, {"config", to_json(a.config)}, {"metrics", to_json(a.metrics)}});
  return {{"schema_version", kReportSchemaVersion},
          {"method", r.method},
          {"dataset", r.dataset},
          {"config", r.config},
          {"seed", r.seed},
          {"epochs", epochs},
          {"attacks", attacks},
          {"forward_units", r.passes.forward_units},
          {"backward_units", r.passes.backward_units},
          {"wall_ms", r.wall_ms}};
}

inline RunReport report_from_json(const nlohmann::json& j) {
  try {
    require<ParseError>(j.at("schema_version").get<int>() == kReportSchemaVersion, "unsupported report schema_version");
    RunReport r;
    r.method = j.at("method").get<std::string>();
    r.dataset = j.at("dataset").get<std::string>();
    r.config = j.at("config");
    r.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& e : j.at("epochs"))
      r.epochs.push_back({e.at("epoch").get<int>(), e.at("train_loss_mean").get<double>(),
                          e.at("test_loss_mean").get<double>(), e.at("test_loss_var").get<double>()});
    for (const auto& a : j.at("attacks"))
      r.attacks.push_back({a.at("attack").get<std::string>(), attack_config_from_json(a.at("config")),
                           metrics_from_json(a.at("metrics"))});
    r.passes = {j.at("forward_units").get<std::uint64_t>(), j.at("backward_units").get<std::uint64_t>()};
    r.wall_ms = j.at("wall_ms").get<double>();
    for (std::size_t i = 0; i < r.epochs.size(); ++i)
      require<ParseError>(r.epochs[i].epoch == static_cast<int>(i) + 1, "report epochs are not contiguous from 1");
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("malformed report: ") + e.what());
  } catch (const InvalidArgument& e) {
    throw ParseError(std::string("malformed report: ") + e.what());
  }
}

inline RunReport load_report(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("'" + path + "': " + e.what());
  }
  try {
    return report_from_json(j);
  } catch (const ParseError& e) {
    throw ParseError("'" + path + "': " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Comparison table

struct ComparisonRow {
  std::string method, dataset, attack;
  double clean_pct = 0.0, aua_pct = 0.0, suc_pct = 0.0, mean_queries = 0.0;
  double forward_units = 0.0, backward_units = 0.0;
  std::size_t n_seeds = 0;
  bool best_aua = false, best_suc = false;

  double cost_units() const { return forward_units + backward_units; }
};

struct ComparisonTable {
  std::vector<ComparisonRow> rows;
};

inline constexpr const char* kNoAttack = "none";

/// One row per (method, dataset, attack), metrics averaged over seeds. Rows
/// are sorted by method, dataset, attack. Within each (dataset, attack) the
/// highest Aua% and lowest Suc% are marked; ties mark every tied row.
inline ComparisonTable compare(std::span<const RunReport> reports) {
  using Key = std::tuple<std::string, std::string, std::string>;
  struct Acc {
    ComparisonRow row;
    std::set<std::uint64_t> seeds;
  };
  std::map<Key, Acc> acc;
  auto add = [&](const RunReport& r, const std::string& attack, const RobustnessMetrics* m) {
    auto& a = acc[{r.method, r.dataset, attack}];
    if (!a.seeds.insert(r.seed).second)
      throw InvalidArgument("duplicate report for method=" + r.method + " dataset=" + r.dataset +
                            " attack=" + attack + " seed=" + std::to_string(r.seed));
    a.row.method = r.method;
    a.row.dataset = r.dataset;
    a.row.attack = attack;
    if (m) {
      a.row.clean_pct += m->clean_pct;
      a.row.aua_pct += m->aua_pct;
      a.row.suc_pct += m->suc_pct;
      a.row.mean_queries += m->mean_queries;
    }
    a.row.forward_units += static_cast<double>(r.passes.forward_units);
    a.row.backward_units += static_cast<double>(r.passes.backward_units);
  };
  for (const auto& r : reports) {
    if (r.attacks.empty()) add(r, kNoAttack, nullptr);
    std::set<std::string> seen;
    for (const auto& a : r.attacks) {
      require(seen.insert(a.attack).second, "report for " + r.method + " lists attack " + a.attack + " twice");
      add(r, a.attack, &a.metrics);
    }
  }

  ComparisonTable t;
  for (auto& [key, a] : acc) {
    const double n = static_cast<double>(a.seeds.size());
    auto row = a.row;
    row.n_seeds = a.seeds.size();
    row.clean_pct /= n;
    row.aua_pct /= n;
    row.suc_pct /= n;
    row.mean_queries /= n;
    row.forward_units /= n;
    row.backward_units /= n;
    t.rows.push_back(std::move(row));
  }
  std::map<std::pair<std::string, std::string>, std::pair<double, double>> best;  // (max aua, min suc)
  for (const auto& r : t.rows) {
    if (r.attack == kNoAttack) continue;
    auto [it, fresh] = best.try_emplace({r.dataset, r.attack}, r.aua_pct, r.suc_pct);
    if (!fresh) {
      it->second.first = std::max(it->second.first, r.aua_pct);
      it->second.second = std::min(it->second.second, r.suc_pct);
    }
  }
  for (auto& r : t.rows) {
    if (r.attack == kNoAttack) continue;
    const auto& b = best.at({r.dataset, r.attack});
    r.best_aua = r.aua_pct == b.first;
    r.best_suc = r.suc_pct == b.second;
  }
  return t;
}

// ---------------------------------------------------------------------------
// Emission

enum class Format { csv, json };

inline Format format_from_string(const std::string& s) {
  if (s == "csv") return Format::csv;
  if (s == "json") return Format::json;
  throw InvalidArgument("unknown format '" + s + "' (expected csv or json)");
}

inline std::string fmt_num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.15g", v);
  return buf;
}

inline const std::vector<std::string>& comparison_columns() {
  static const std::vector<std::string> cols{"schema_version", "method",        "dataset",        "attack",
                                             "clean_pct",      "aua_pct",       "suc_pct",        "mean_queries",
                                             "forward_units",  "backward_units", "cost_units",    "n_seeds",
                                             "best_aua",       "best_suc"};
  return cols;
}

inline const std::vector<std::string>& epoch_columns() {
  static const std::vector<std::string> cols{"schema_version", "epoch", "train_loss_mean", "test_loss_mean",
                                             "test_loss_var"};
  return cols;
}

inline std::string join(const std::vector<std::string>& xs) {
  std::string s;
  for (std::size_t i = 0; i < xs.size(); ++i) s += (i ? "," : "") + xs[i];
  return s;
}

inline std::string to_csv(const ComparisonTable& t) {
  std::ostringstream os;
  os << join(comparison_columns()) << '\n';
  for (const auto& r : t.rows)
    os << kReportSchemaVersion << ',' << r.method << ',' << r.dataset << ',' << r.attack << ',' << fmt_num(r.clean_pct)
       << ',' << fmt_num(r.aua_pct) << ',' << fmt_num(r.suc_pct) << ',' << fmt_num(r.mean_queries) << ','
       << fmt_num(r.forward_units) << ',' << fmt_num(r.backward_units) << ',' << fmt_num(r.cost_units()) << ','
       << r.n_seeds << ',' << (r.best_aua ? 1 : 0) << ',' << (r.best_suc ? 1 : 0) << '\n';
  return os.str();
}

inline nlohmann::json to_json(const ComparisonTable& t) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : t.rows)
    rows.push_back({{"method", r.method},
                    {"dataset", r.dataset},
                    {"attack", r.attack},
                    {"clean_pct", r.clean_pct},
                    {"aua_pct", r.aua_pct},
                    {"suc_pct", r.suc_pct},
                    {"mean_queries", r.mean_queries},
                    {"forward_units", r.forward_units},
                    {"backward_units", r.backward_units},
                    {"cost_units", r.cost_units()},
                    {"n_seeds", r.n_seeds},
                    {"best_aua", r.best_aua},
                    {"best_suc", r.best_suc}});
  return {{"schema_version", kReportSchemaVersion}, {"rows", rows}};
}

/// Loss curves of one run, one line per epoch.
inline std::string to_csv(const RunReport& r) {
  std::ostringstream os;
  os << join(epoch_columns()) << '\n';
  for (const auto& e : r.epochs)
    os << kReportSchemaVersion << ',' << e.epoch << ',' << fmt_num(e.train_loss_mean) << ','
       << fmt_num(e.test_loss_mean) << ',' << fmt_num(e.test_loss_var) << '\n';
  return os.str();
}

inline void write_file(const std::string& path, const std::string& contents) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << contents;
  if (!out) throw IoError("write failed for '" + path + "'");
}

inline void emit(const RunReport& r, Format f, const std::string& path) {
  write_file(path, f == Format::json ? to_json(r).dump(2) + "\n" : to_csv(r));
}

inline void emit(const ComparisonTable& t, Format f, const std::string& path) {
  write_file(path, f == Format::json ? to_json(t).dump(2) + "\n" : to_csv(t));
}

// ---------------------------------------------------------------------------
// Sweep tables

struct SweepRow {
  double param_value = 0.0;
  RobustnessMetrics metrics;
  PassLedger passes;
  double wall_ms = 0.0;
  std::uint64_t seed = 0;
};

inline const std::vector<std::string>& sweep_columns() {
  static const std::vector<std::string> cols{"schema_version", "param_value", "clean_pct",     "aua_pct",
                                             "suc_pct",        "mean_queries", "forward_units", "backward_units",
                                             "wall_ms",        "seed"};
  return cols;
}

inline std::string sweep_to_csv(std::span<const SweepRow> rows) {
  std::ostringstream os;
  os << join(sweep_columns()) << '\n';
  for (const auto& r : rows)
    os << kReportSchemaVersion << ',' << fmt_num(r.param_value) << ',' << fmt_num(r.metrics.clean_pct) << ','
       << fmt_num(r.metrics.aua_pct) << ',' << fmt_num(r.metrics.suc_pct) << ',' << fmt_num(r.metrics.mean_queries)
       << ',' << r.passes.forward_units << ',' << r.passes.backward_units << ',' << fmt_num(r.wall_ms) << ','
       << r.seed << '\n';
  return os.str();
}

}  // namespace dsrm
