#pragma once

#include <chrono>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "dsrm/data.hpp"
#include "dsrm/errors.hpp"
#include "dsrm/model.hpp"
#include "dsrm/report.hpp"
#include "dsrm/rng.hpp"

namespace dsrm {

/// Plain minibatch SGD settings shared by every trainer.
struct SgdConfig {
  double lr = 0.1;
  std::size_t batch_size = 16;

  void validate() const {
    require(lr > 0.0 && std::isfinite(lr), "lr must be > 0");
    require(batch_size >= 1, "batch_size must be >= 1");
  }
};

inline nlohmann::json to_json(const SgdConfig& c) { return {{"lr", c.lr}, {"batch_size", c.batch_size}}; }

struct TrainResult {
  ParamVector theta;
  RunReport report;
};

/// theta -= scale * g
inline void sgd_apply(ParamVector& theta, std::span<const double> g, double scale) {
  for (std::size_t j = 0; j < theta.values.size(); ++j) theta.values[j] -= scale * g[j];
}

inline void check_finite(std::span<const double> v, const char* what) {
  for (double x : v)
    if (!std::isfinite(x)) throw NumericError(std::string("non-finite value in ") + what);
}

/// Runs `epochs` passes over `splits.train` in shuffled minibatches and
/// records loss statistics after each epoch. The batch order depends only on
/// (seed, batch_size), so trainers that share a seed see identical batches.
/// `step(theta, batch)` updates theta in place and returns its pass cost.
template <typename StepFn>
TrainResult run_training(const Classifier& model, const Splits& splits, std::size_t batch_size, int epochs,
                         std::uint64_t seed, std::string method, StepFn&& step) {
  require(epochs >= 1, "epochs must be >= 1");
  require(batch_size >= 1, "batch_size must be >= 1");
  splits.train.validate();
  splits.test.validate();
  const auto t0 = std::chrono::steady_clock::now();

  TrainResult out{model.init_params(seed), {}};
  out.report.method = std::move(method);
  out.report.seed = seed;

  Rng order_rng = Rng::stream(seed, 20);
  std::vector<std::size_t> order(splits.train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (int epoch = 1; epoch <= epochs; ++epoch) {
    order_rng.shuffle(std::span(order));
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
      const std::size_t end = std::min(order.size(), start + batch_size);
      Batch batch;
      batch.reserve(end - start);
      for (std::size_t k = start; k < end; ++k) batch.push_back(splits.train.examples[order[k]]);
      out.report.passes += step(out.theta, batch);
      check_finite(out.theta.values, "parameters");
    }
    record_epoch(out.report, model, out.theta, splits.train, splits.test);
  }
  out.report.wall_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

}  // namespace dsrm
