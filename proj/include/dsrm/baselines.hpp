#pragma once

#include <chrono>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "dsrm/attack.hpp"
#include "dsrm/data.hpp"
#include "dsrm/errors.hpp"
#include "dsrm/model.hpp"
#include "dsrm/report.hpp"
#include "dsrm/training.hpp"

namespace dsrm {

/// l2-bounded perturbation of the feature vector (dense input, or pooled
/// embedding for token models), found by `steps` normalized ascent steps from
/// delta = 0.
struct AdvTrainConfig {
  double radius = 0.0;
  int steps = 1;
  double step_size = 0.05;
  double lr = 0.1;
  std::size_t batch_size = 16;

  void validate() const {
    require(radius >= 0.0 && std::isfinite(radius), "adv: radius must be >= 0");
    require(steps >= 1, "adv: steps must be >= 1");
    require(step_size > 0.0, "adv: step_size must be > 0");
    require(lr > 0.0, "adv: lr must be > 0");
    require(batch_size >= 1, "adv: batch_size must be >= 1");
  }

  /// Non-fatal configuration issues.
  std::vector<std::string> warnings() const {
    std::vector<std::string> w;
    if (step_size * steps < radius)
      w.push_back("step_size * steps < radius: the perturbation cannot reach the ball boundary");
    return w;
  }
};

inline nlohmann::json to_json(const AdvTrainConfig& c) {
  return {{"radius", c.radius}, {"steps", c.steps}, {"step_size", c.step_size}, {"lr", c.lr},
          {"batch_size", c.batch_size}};
}

inline PassLedger erm_step_cost(std::size_t b) { return {b, b}; }
inline PassLedger pgd_step_cost(std::size_t b, int steps) {
  const auto k = static_cast<std::uint64_t>(steps + 1);
  return {k * b, k * b};
}
inline PassLedger freelb_step_cost(std::size_t b, int steps) {
  const auto k = static_cast<std::uint64_t>(steps);
  return {k * b, k * b};
}

inline TrainResult erm_train(const ModelSpec& spec, const Splits& splits, const SgdConfig& cfg, int epochs,
                             std::uint64_t seed) {
  cfg.validate();
  const Classifier model(spec.fitted_to(splits.train));
  auto result = run_training(model, splits, cfg.batch_size, epochs, seed, "erm",
                             [&](ParamVector& theta, const Batch& batch) {
                               const std::vector<double> ones(batch.size(), 1.0);
                               const auto g = model.grad_weighted(theta, batch, ones);
                               sgd_apply(theta, g, cfg.lr / static_cast<double>(batch.size()));
                               return erm_step_cost(batch.size());
                             });
  result.report.config = {{"method", "erm"}, {"model", to_json(model.spec())}, {"sgd", to_json(cfg)}, {"epochs", epochs}};
  return result;
}

/// Inner maximization for one example. Returns delta with ||delta|| <= radius.
inline std::vector<double> inner_maximize(const Classifier& model, const ParamVector& theta, const Example& ex,
                                          const AdvTrainConfig& cfg) {
  std::vector<double> delta(model.feature_dim(), 0.0);
  for (int s = 0; s < cfg.steps; ++s) {
    const auto g = model.input_grad(theta, ex, delta);
    const double gn = detail::norm2(g);
    if (gn >= 1e-12)
      for (std::size_t j = 0; j < delta.size(); ++j) delta[j] += cfg.step_size * g[j] / gn;
    detail::project_l2(delta, cfg.radius);
  }
  return delta;
}

/// K-step PGD adversarial training: descend on the loss at x + delta*.
inline TrainResult pgd_at_train(const ModelSpec& spec, const Splits& splits, const AdvTrainConfig& cfg, int epochs,
                                std::uint64_t seed) {
  cfg.validate();
  const Classifier model(spec.fitted_to(splits.train));
  auto result = run_training(model, splits, cfg.batch_size, epochs, seed, "pgd_at",
                             [&](ParamVector& theta, const Batch& batch) {
                               std::vector<double> g(model.param_count(), 0.0), scratch(model.param_count());
                               for (const auto& ex : batch) {
                                 const auto delta = inner_maximize(model, theta, ex, cfg);
                                 model.backward(theta, ex, delta, scratch, {});
                                 for (std::size_t j = 0; j < g.size(); ++j) g[j] += 1.0 * scratch[j];
                               }
                               sgd_apply(theta, g, cfg.lr / static_cast<double>(batch.size()));
                               return pgd_step_cost(batch.size(), cfg.steps);
                             });
  result.report.config = {{"method", "pgd_at"}, {"model", to_json(model.spec())}, {"adv", to_json(cfg)}, {"epochs", epochs}};
  return result;
}

/// FreeLB-style gradient for one example: the mean of the parameter gradients
/// taken at each ascent iterate delta_0 = 0, ..., delta_{K-1}. Each backward
/// also yields the feature gradient for the next ascent step.
inline std::vector<double> freelb_example_grad(const Classifier& model, const ParamVector& theta, const Example& ex,
                                               const AdvTrainConfig& cfg) {
  std::vector<double> acc(model.param_count(), 0.0), pg(model.param_count()), fg(model.feature_dim());
  std::vector<double> delta(model.feature_dim(), 0.0);
  for (int t = 0; t < cfg.steps; ++t) {
    model.backward(theta, ex, delta, pg, fg);
    for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += pg[j];
    if (t + 1 == cfg.steps) break;
    const double gn = detail::norm2(fg);
    if (gn >= 1e-12)
      for (std::size_t j = 0; j < delta.size(); ++j) delta[j] += cfg.step_size * fg[j] / gn;
    detail::project_l2(delta, cfg.radius);
  }
  if (cfg.steps > 1)
    for (auto& v : acc) v /= static_cast<double>(cfg.steps);
  return acc;
}

inline TrainResult freelb_train(const ModelSpec& spec, const Splits& splits, const AdvTrainConfig& cfg, int epochs,
                                std::uint64_t seed) {
  cfg.validate();
  const Classifier model(spec.fitted_to(splits.train));
  auto result = run_training(model, splits, cfg.batch_size, epochs, seed, "freelb",
                             [&](ParamVector& theta, const Batch& batch) {
                               std::vector<double> g(model.param_count(), 0.0);
                               for (const auto& ex : batch) {
                                 const auto eg = freelb_example_grad(model, theta, ex, cfg);
                                 for (std::size_t j = 0; j < g.size(); ++j) g[j] += 1.0 * eg[j];
                               }
                               sgd_apply(theta, g, cfg.lr / static_cast<double>(batch.size()));
                               return freelb_step_cost(batch.size(), cfg.steps);
                             });
  result.report.config = {{"method", "freelb"}, {"model", to_json(model.spec())}, {"adv", to_json(cfg)}, {"epochs", epochs}};
  return result;
}

enum class AdvMode { pgd, freelb };

inline SweepRow evaluate_run(const ModelSpec& spec, const Splits& splits, const TrainResult& run, double value,
                             const AttackConfig& attack) {
  const Classifier model(spec.fitted_to(splits.train));
  return {value, evaluate_robustness(model, run.theta, splits.test, attack), run.report.passes, run.report.wall_ms,
          run.report.seed};
}

/// Adversarial training at each radius, evaluated under `attack`.
inline std::vector<SweepRow> sweep_radius(const ModelSpec& spec, const Splits& splits, const AdvTrainConfig& base,
                                          std::span<const double> radii, const AttackConfig& attack, int epochs,
                                          std::uint64_t seed, AdvMode mode = AdvMode::pgd) {
  std::vector<SweepRow> rows;
  for (double r : radii) {
    auto cfg = base;
    cfg.radius = r;
    const auto run = mode == AdvMode::pgd ? pgd_at_train(spec, splits, cfg, epochs, seed)
                                          : freelb_train(spec, splits, cfg, epochs, seed);
    rows.push_back(evaluate_run(spec, splits, run, r, attack));
  }
  return rows;
}

inline std::vector<SweepRow> sweep_steps(const ModelSpec& spec, const Splits& splits, const AdvTrainConfig& base,
                                         std::span<const int> steps_list, const AttackConfig& attack, int epochs,
                                         std::uint64_t seed, AdvMode mode = AdvMode::pgd) {
  std::vector<SweepRow> rows;
  for (int k : steps_list) {
    auto cfg = base;
    cfg.steps = k;
    const auto run = mode == AdvMode::pgd ? pgd_at_train(spec, splits, cfg, epochs, seed)
                                          : freelb_train(spec, splits, cfg, epochs, seed);
    rows.push_back(evaluate_run(spec, splits, run, k, attack));
  }
  return rows;
}

}  // namespace dsrm
