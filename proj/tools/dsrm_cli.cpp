// Command-line front end: train, attack, sweep, report.
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dsrm/experiment.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Distribution shift risk minimization experiments"};
  app.require_subcommand(1);

  std::string config, params, pattern, axis, out, report_out = ".", format = "csv";
  std::vector<double> values;
  std::optional<std::uint64_t> seed;
  bool trace = false;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config, "JSON experiment config")->required()->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "Run a single seed (overrides DSRM_SEED and the config)");
    sub->add_option("--out", out, "Output directory (overrides DSRM_OUT and the config)");
  };

  auto* train = app.add_subcommand("train", "Train one model per seed");
  add_common(train);

  auto* attack = app.add_subcommand("attack", "Attack saved parameters and record metrics");
  add_common(attack);
  attack->add_option("--params", params, "params_seed{N}.json from train")->required();
  attack->add_flag("--trace", trace, "Write per-example attack_seed{N}.jsonl");

  auto* sweep = app.add_subcommand("sweep", "Retrain across one hyperparameter");
  add_common(sweep);
  sweep->add_option("--axis", axis, "epsilon | eta | radius | steps")->required();
  sweep->add_option("--values", values, "Values to sweep")->required()->delimiter(',');

  auto* report = app.add_subcommand("report", "Aggregate run reports into a comparison table");
  report->add_option("--reports", pattern, "Glob matching report JSON files")->required();
  report->add_option("--out", report_out, "Output directory")->capture_default_str();
  report->add_option("--format", format, "csv | json")->check(CLI::IsMember({"csv", "json"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : dsrm::exit_code::user_error;
  }

  dsrm::Overrides o;
  o.seed = seed;
  if (!out.empty()) o.out = out;

  if (*train) return dsrm::cmd_train(config, o);
  if (*attack) return dsrm::cmd_attack(params, config, o, trace);
  if (*sweep) return dsrm::cmd_sweep(config, axis, values, o);
  return dsrm::cmd_report(pattern, report_out, dsrm::format_from_string(format));
}
