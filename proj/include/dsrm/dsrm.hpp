#pragma once

#include <cmath>
#include <cstdint>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "dsrm/attack.hpp"
#include "dsrm/data.hpp"
#include "dsrm/dist_shift.hpp"
#include "dsrm/errors.hpp"
#include "dsrm/model.hpp"
#include "dsrm/report.hpp"
#include "dsrm/training.hpp"

namespace dsrm {

enum class WeightMode { ones, uniform };
enum class Constraint { none, l2_ball, loss_truncation };

inline const char* to_string(WeightMode m) { return m == WeightMode::ones ? "ones" : "uniform"; }
inline const char* to_string(Constraint c) {
  switch (c) {
    case Constraint::none: return "none";
    case Constraint::l2_ball: return "l2_ball";
    case Constraint::loss_truncation: return "loss_truncation";
  }
  return "?";
}

inline WeightMode weight_mode_from_string(const std::string& s) {
  if (s == "ones") return WeightMode::ones;
  if (s == "uniform") return WeightMode::uniform;
  throw InvalidArgument("unknown weight_mode '" + s + "'");
}

inline Constraint constraint_from_string(const std::string& s) {
  if (s == "none") return Constraint::none;
  if (s == "l2_ball") return Constraint::l2_ball;
  if (s == "loss_truncation") return Constraint::loss_truncation;
  throw InvalidArgument("unknown constraint '" + s + "'");
}

/// Default perturbation thresholds.
inline const std::vector<double>& default_epsilon_grid() {
  static const std::vector<double> grid{0.8, 1.0, 1.2, 1.5};
  return grid;
}

struct DsrmConfig {
  double lr = 0.1;            // step size on the batch-mean objective
  double eta = 1.0;           // weight ascent step
  double epsilon = 1.0;       // l2 radius or loss threshold, depending on constraint
  std::size_t batch_size = 16;
  std::size_t valid_batch = 0;  // 0 = twice the training batch
  Constraint constraint = Constraint::l2_ball;
  bool clamp_nonneg = true;
  WeightMode weight_mode = WeightMode::ones;

  std::size_t effective_valid_batch() const { return valid_batch > 0 ? valid_batch : 2 * batch_size; }

  void validate() const {
    require(lr > 0.0 && std::isfinite(lr), "dsrm: lr must be > 0");
    require(eta >= 0.0 && std::isfinite(eta), "dsrm: eta must be >= 0");
    require(constraint == Constraint::none || (epsilon > 0.0 && std::isfinite(epsilon)),
            "dsrm: epsilon must be > 0");
    require(batch_size >= 1, "dsrm: batch_size must be >= 1");
  }
};

inline nlohmann::json to_json(const DsrmConfig& c) {
  return {{"lr", c.lr},
          {"eta", c.eta},
          {"epsilon", c.epsilon},
          {"batch_size", c.batch_size},
          {"valid_batch", c.effective_valid_batch()},
          {"constraint", to_string(c.constraint)},
          {"clamp_nonneg", c.clamp_nonneg},
          {"weight_mode", to_string(c.weight_mode)}};
}

// ---------------------------------------------------------------------------
// Weights

using WeightVector = std::vector<double>;

inline WeightVector init_weights(std::size_t n, WeightMode mode) {
  require(n >= 1, "init_weights: n must be >= 1");
  return WeightVector(n, mode == WeightMode::ones ? 1.0 : 1.0 / static_cast<double>(n));
}

/// Total mass of the initial weights: the weighted objective divided by it is
/// the batch-mean loss.
inline double base_mass(std::size_t n, WeightMode mode) {
  return mode == WeightMode::ones ? static_cast<double>(n) : 1.0;
}

/// w^T G, accumulated in row order.
inline std::vector<double> weighted_rows(const GradMatrix& G, std::span<const double> w) {
  require(w.size() == G.rows, "weighted_rows: weight length does not match gradient rows");
  std::vector<double> g(G.cols, 0.0);
  for (std::size_t i = 0; i < G.rows; ++i) {
    const auto r = G.row(i);
    for (std::size_t j = 0; j < G.cols; ++j) g[j] += w[i] * r[j];
  }
  return g;
}

// ---------------------------------------------------------------------------
// Algorithm steps

/// theta* = theta - alpha * grad(w^T L)
inline ParamVector virtual_step(const Classifier& model, const ParamVector& theta, std::span<const Example> batch,
                                std::span<const double> w, double alpha) {
  require(w.size() == batch.size(), "virtual_step: weight length does not match batch");
  const auto g = model.grad_weighted(theta, batch, w);
  check_finite(g, "virtual step gradient");
  ParamVector next = theta;
  sgd_apply(next, g, alpha);
  return next;
}

/// Gradient of the mean validation loss at theta* w.r.t. the train weights,
/// for theta* = theta - alpha * sum_i w_i grad L_i(theta):
///   g_i = -alpha * <grad L_valid(theta*), grad L_i(theta)>.
inline std::vector<double> hypergradient(const Classifier& model, const GradMatrix& train_grads,
                                         const ParamVector& theta_star, std::span<const Example> valid, double alpha) {
  require(!valid.empty(), "hypergradient: empty validation batch");
  require(train_grads.cols == model.param_count(), "hypergradient: gradient matrix has wrong width");
  const std::vector<double> vw(valid.size(), 1.0 / static_cast<double>(valid.size()));
  const auto gv = model.grad_weighted(theta_star, valid, vw);
  std::vector<double> g(train_grads.rows, 0.0);
  for (std::size_t i = 0; i < train_grads.rows; ++i) {
    const auto r = train_grads.row(i);
    double dot = 0.0;
    for (std::size_t j = 0; j < r.size(); ++j) dot += gv[j] * r[j];
    g[i] = -alpha * dot;
  }
  return g;
}

inline std::vector<double> hypergradient(const Classifier& model, const ParamVector& theta,
                                         const ParamVector& theta_star, std::span<const Example> train,
                                         std::span<const Example> valid, double alpha) {
  return hypergradient(model, model.per_sample_grads(theta, train), theta_star, valid, alpha);
}

/// Weight ascent w_n = w + eta * g, then optional clamping at zero, then the
/// configured constraint around `w_base`:
///  - l2_ball: radial scaling so that ||w_n - w_base||_2 <= epsilon;
///  - loss_truncation: the offset w_n - w_base is scaled by the largest
///    t in [0,1] keeping (w_n . losses) / mass(w_base) <= epsilon.
/// `losses` is only needed for loss_truncation.
inline WeightVector perturb_weights(std::span<const double> w, std::span<const double> g, double eta,
                                    const DsrmConfig& cfg, std::span<const double> w_base,
                                    std::span<const double> losses = {}) {
  require(g.size() == w.size() && w_base.size() == w.size(), "perturb_weights: length mismatch");
  WeightVector wn(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) wn[i] = w[i] + eta * g[i];
  if (cfg.clamp_nonneg)
    for (auto& v : wn) v = std::max(0.0, v);

  if (cfg.constraint == Constraint::l2_ball) {
    std::vector<double> d(wn.size());
    for (std::size_t i = 0; i < wn.size(); ++i) d[i] = wn[i] - w_base[i];
    if (detail::norm2(d) > cfg.epsilon) {
      double scale = cfg.epsilon / detail::norm2(d);
      for (;;) {
        for (std::size_t i = 0; i < wn.size(); ++i) wn[i] = w_base[i] + scale * d[i];
        if (l2_shift(wn, w_base) <= cfg.epsilon) break;
        scale = std::nextafter(scale, 0.0);
      }
    }
  } else if (cfg.constraint == Constraint::loss_truncation) {
    require(losses.size() == w.size(), "perturb_weights: loss_truncation needs per-sample losses");
    double mass = 0.0, base = 0.0, slope = 0.0;
    for (std::size_t i = 0; i < wn.size(); ++i) {
      mass += w_base[i];
      base += w_base[i] * losses[i];
      slope += (wn[i] - w_base[i]) * losses[i];
    }
    base /= mass;
    slope /= mass;
    double t = 1.0;
    if (slope > 0.0 && base + slope > cfg.epsilon) t = std::clamp((cfg.epsilon - base) / slope, 0.0, 1.0);
    if (t < 1.0)
      for (std::size_t i = 0; i < wn.size(); ++i) wn[i] = w_base[i] + t * (wn[i] - w_base[i]);
  }
  return wn;
}

/// Worst-case distribution under a first-order expansion in an l2 ball:
/// P0 + eps * L / ||L||_2. Not renormalized.
inline std::vector<double> closed_form_shift(std::span<const double> losses, double eps, std::span<const double> p0) {
  require(losses.size() == p0.size(), "closed_form_shift: length mismatch");
  const double n = detail::norm2(losses);
  if (!(n > 0.0)) throw DegenerateInput("closed_form_shift: zero loss vector has no direction");
  std::vector<double> out(p0.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = eps * losses[i] / n + p0[i];
  return out;
}

// ---------------------------------------------------------------------------
// Training step

inline constexpr int kStepStatsSchemaVersion = 1;

struct StepStats {
  double weighted_loss_before = 0.0;  // batch-mean loss under the initial weights
  double weighted_loss_after = 0.0;   // same, under the perturbed weights
  double valid_loss = 0.0;            // mean validation loss at the virtual parameters
  double hypergrad_norm = 0.0;
  double shift_l2 = 0.0;              // ||w_n - w_base||_2
  double shift_tv = 0.0;              // TV between the normalized w_n and w_base
  double weight_sum = 0.0;
  PassLedger passes;
};

inline nlohmann::json to_json(const StepStats& s, std::uint64_t step) {
  return {{"schema_version", kStepStatsSchemaVersion},
          {"step", step},
          {"weighted_loss_before", s.weighted_loss_before},
          {"weighted_loss_after", s.weighted_loss_after},
          {"valid_loss", s.valid_loss},
          {"hypergrad_norm", s.hypergrad_norm},
          {"shift_l2", s.shift_l2},
          {"shift_tv", s.shift_tv},
          {"weight_sum", s.weight_sum},
          {"forward_units", s.passes.forward_units},
          {"backward_units", s.passes.backward_units}};
}

/// Pass cost of one DSRM step: one per-sample forward/backward on the train
/// batch (its gradient rows serve the virtual step, the hypergradient and the
/// final update) plus one forward/backward on the validation batch at the
/// virtual parameters.
inline PassLedger dsrm_step_cost(std::size_t train_batch, std::size_t valid_batch) {
  return {train_batch + valid_batch, train_batch + valid_batch};
}

struct StepResult {
  ParamVector theta;
  StepStats stats;
  WeightVector weights;  // perturbed weights used for the update
};

/// One iteration of the distribution-shift update: virtual SGD step under the
/// initial weights, hypergradient of the validation loss w.r.t. the weights,
/// constrained weight ascent, and the real SGD step under the perturbed
/// weights. The step size applied to sum_i w_i grad L_i is lr / mass(w_base),
/// so that eta = 0 is exactly a batch-mean SGD step.
inline StepResult dsrm_train_step(const Classifier& model, const ParamVector& theta, std::span<const Example> batch,
                                  ValidSampler& valid_source, const DsrmConfig& cfg) {
  cfg.validate();
  require(!batch.empty(), "dsrm_train_step: empty batch");
  const std::size_t b = batch.size();
  const std::size_t m = cfg.effective_valid_batch();
  require(m <= valid_source.capacity(), "dsrm_train_step: validation set smaller than valid_batch");

  const WeightVector w = init_weights(b, cfg.weight_mode);
  const double mass = base_mass(b, cfg.weight_mode);
  const double alpha = cfg.lr / mass;

  std::vector<double> losses;
  const GradMatrix G = model.per_sample_grads(theta, batch, &losses);
  check_finite(G.data, "per-sample gradients");

  ParamVector theta_star = theta;
  sgd_apply(theta_star, weighted_rows(G, w), alpha);

  const Batch valid = valid_source.next(m);
  const auto g = hypergradient(model, G, theta_star, valid, alpha);
  check_finite(g, "hypergradient");

  WeightVector wn = perturb_weights(w, g, cfg.eta, cfg, w, losses);
  check_finite(wn, "perturbed weights");

  StepResult out{theta, {}, wn};
  sgd_apply(out.theta, weighted_rows(G, wn), alpha);

  auto& s = out.stats;
  for (std::size_t i = 0; i < b; ++i) {
    s.weighted_loss_before += w[i] * losses[i];
    s.weighted_loss_after += wn[i] * losses[i];
    s.weight_sum += wn[i];
  }
  s.weighted_loss_before /= mass;
  s.weighted_loss_after /= mass;
  for (double v : model.per_sample_losses(theta_star, valid)) s.valid_loss += v;
  s.valid_loss /= static_cast<double>(valid.size());
  s.hypergrad_norm = detail::norm2(g);
  s.shift_l2 = l2_shift(wn, w);
  if (s.weight_sum > 0.0) {
    std::vector<double> p(b), q(b, 1.0 / static_cast<double>(b));
    for (std::size_t i = 0; i < b; ++i) p[i] = wn[i] / s.weight_sum;
    double acc = 0.0;
    for (std::size_t i = 0; i < b; ++i) acc += std::abs(p[i] - q[i]);
    s.shift_tv = 0.5 * acc;
  }
  s.passes = dsrm_step_cost(b, m);
  return out;
}

/// Full training loop. Batches follow the shared trainer schedule, so a run
/// with eta = 0 retraces ERM with the same seed. Step statistics are written
/// as JSON lines to `step_log` when given.
inline TrainResult dsrm_train(const ModelSpec& spec, const Splits& splits, const DsrmConfig& cfg, int epochs,
                              std::uint64_t seed, std::ostream* step_log = nullptr) {
  cfg.validate();
  splits.valid.validate();
  const Classifier model(spec.fitted_to(splits.train));
  ValidSampler valid_source(splits.valid, seed);
  require(cfg.effective_valid_batch() <= valid_source.capacity(), "dsrm: validation set smaller than valid_batch");
  std::uint64_t step_no = 0;
  auto result = run_training(model, splits, cfg.batch_size, epochs, seed, "dsrm",
                             [&](ParamVector& theta, const Batch& batch) {
                               auto r = dsrm_train_step(model, theta, batch, valid_source, cfg);
                               theta = std::move(r.theta);
                               if (step_log) *step_log << to_json(r.stats, ++step_no).dump() << '\n';
                               return r.stats.passes;
                             });
  result.report.config = {{"method", "dsrm"}, {"model", to_json(model.spec())}, {"dsrm", to_json(cfg)}, {"epochs", epochs}};
  return result;
}

}  // namespace dsrm
