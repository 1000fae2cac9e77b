#pragma once

#include <cmath>
#include <cstdio>
#include <limits>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "dsrm/data.hpp"
#include "dsrm/errors.hpp"
#include "dsrm/model.hpp"

namespace dsrm {

enum class AttackKind { fgsm, pgd, greedy_flip };

inline const char* to_string(AttackKind k) {
  switch (k) {
    case AttackKind::fgsm: return "fgsm";
    case AttackKind::pgd: return "pgd";
    case AttackKind::greedy_flip: return "greedy_flip";
  }
  return "?";
}

inline AttackKind attack_kind_from_string(const std::string& s) {
  if (s == "fgsm") return AttackKind::fgsm;
  if (s == "pgd") return AttackKind::pgd;
  if (s == "greedy_flip") return AttackKind::greedy_flip;
  throw InvalidArgument("unknown attack kind '" + s + "'");
}

struct AttackConfig {
  AttackKind kind = AttackKind::pgd;
  double eps = 0.0;
  int steps = 1;
  double step_size = 0.0;  // <= 0 selects 2.5 * eps / steps
  int flip_budget = 1;
  int candidates = 0;  // greedy_flip candidate tokens 1..candidates; 0 = whole vocabulary

  double effective_step() const { return step_size > 0.0 ? step_size : 2.5 * eps / steps; }

  void validate() const {
    require(eps >= 0.0 && std::isfinite(eps), "attack: eps must be >= 0");
    require(steps >= 1, "attack: steps must be >= 1");
    require(step_size >= 0.0, "attack: step_size must be positive (or 0 for the default)");
    require(flip_budget >= 0, "attack: flip_budget must be >= 0");
    require(candidates >= 0, "attack: candidates must be >= 0");
  }

  std::string label() const {
    char buf[96];
    if (kind == AttackKind::greedy_flip) std::snprintf(buf, sizeof buf, "greedy_flip(budget=%d)", flip_budget);
    else if (kind == AttackKind::fgsm) std::snprintf(buf, sizeof buf, "fgsm(eps=%g)", eps);
    else std::snprintf(buf, sizeof buf, "pgd(eps=%g,steps=%d)", eps, steps);
    return buf;
  }
};

struct AttackOutcome {
  std::int64_t id = 0;
  bool originally_correct = false;
  bool success = false;  // implies originally_correct
  int queries = 1;
  int final_prediction = 0;
  double delta_norm = 0.0;  // continuous attacks; token edits for greedy_flip
  int rounds = 0;           // greedy_flip scan rounds
  int commits = 0;          // greedy_flip committed replacements
};

enum class SucDenominator { clean_correct, all };

struct RobustnessMetrics {
  double clean_pct = 0.0;
  double aua_pct = 0.0;
  double suc_pct = 0.0;
  double mean_queries = 0.0;
  std::size_t n_evaluated = 0;

  bool operator==(const RobustnessMetrics&) const = default;
};

namespace detail {

inline double norm2(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

/// Radial projection onto the l2 ball of radius r; returns the final norm.
inline double project_l2(std::span<double> v, double r) {
  const double n = norm2(v);
  if (n <= r) return n;
  if (r <= 0.0) {
    std::fill(v.begin(), v.end(), 0.0);
    return 0.0;
  }
  double scale = r / n;
  for (;;) {
    std::vector<double> t(v.begin(), v.end());
    for (auto& x : t) x *= scale;
    if (norm2(t) <= r) {
      std::copy(t.begin(), t.end(), v.begin());
      return norm2(v);
    }
    scale = std::nextafter(scale, 0.0);
  }
}

}  // namespace detail

/// Single normalized gradient step of length eps in feature space.
inline std::vector<double> fgsm(const Classifier& model, const ParamVector& theta, const Example& ex, double eps) {
  auto h = model.features(theta, ex);
  const auto g = model.input_grad(theta, ex);
  const double gn = detail::norm2(g);
  if (gn < 1e-12 || eps == 0.0) return h;
  for (std::size_t j = 0; j < h.size(); ++j) h[j] += eps * g[j] / gn;
  return h;
}

/// Iterated normalized ascent with l2 projection onto the eps-ball. Queries:
/// one initial prediction, one per ascent step, one final prediction.
/// Misclassified examples are skipped after the first query.
inline AttackOutcome pgd_attack(const Classifier& model, const ParamVector& theta, const Example& ex,
                                const AttackConfig& cfg, std::vector<double>* delta_out = nullptr) {
  cfg.validate();
  AttackOutcome out;
  out.id = ex.id;
  const auto h0 = model.features(theta, ex);
  const int pred0 = model.predict_features(theta, h0);
  out.originally_correct = pred0 == ex.label;
  out.final_prediction = pred0;
  out.queries = 1;
  std::vector<double> delta(h0.size(), 0.0);
  if (out.originally_correct) {
    const double step = cfg.effective_step();
    for (int s = 0; s < cfg.steps; ++s) {
      const auto g = model.input_grad(theta, ex, delta);
      ++out.queries;
      const double gn = detail::norm2(g);
      if (gn >= 1e-12)
        for (std::size_t j = 0; j < delta.size(); ++j) delta[j] += step * g[j] / gn;
      detail::project_l2(delta, cfg.eps);
    }
    std::vector<double> h = h0;
    for (std::size_t j = 0; j < h.size(); ++j) h[j] += delta[j];
    out.final_prediction = model.predict_features(theta, h);
    ++out.queries;
    out.success = out.final_prediction != ex.label;
    out.delta_norm = detail::norm2(delta);
  }
  if (delta_out) *delta_out = std::move(delta);
  return out;
}

inline AttackOutcome fgsm_attack(const Classifier& model, const ParamVector& theta, const Example& ex,
                                 const AttackConfig& cfg) {
  AttackOutcome out;
  out.id = ex.id;
  const int pred0 = model.predict(theta, ex);
  out.originally_correct = pred0 == ex.label;
  out.final_prediction = pred0;
  out.queries = 1;
  if (!out.originally_correct) return out;
  const auto h0 = model.features(theta, ex);
  const auto h = fgsm(model, theta, ex, cfg.eps);
  out.queries += 2;  // gradient + final prediction
  out.final_prediction = model.predict_features(theta, h);
  out.success = out.final_prediction != ex.label;
  std::vector<double> d(h.size());
  for (std::size_t j = 0; j < h.size(); ++j) d[j] = h[j] - h0[j];
  out.delta_norm = detail::norm2(d);
  return out;
}

/// Greedy token replacement. Each round queries every (non-pad position,
/// candidate token) pair once and commits the pair with the largest loss if
/// it beats the current loss; a commit costs one confirmation query. Stops on
/// a prediction flip, when no pair improves the loss, or when the budget is
/// spent. Hence queries = 1 + rounds * L * c + commits.
inline AttackOutcome greedy_flip(const Classifier& model, const ParamVector& theta, const Example& ex,
                                 const AttackConfig& cfg) {
  cfg.validate();
  require(model.spec().modality() == Modality::tokens, "greedy_flip requires a token model");
  model.check_example(ex);
  AttackOutcome out;
  out.id = ex.id;
  const int pred0 = model.predict(theta, ex);
  out.originally_correct = pred0 == ex.label;
  out.final_prediction = pred0;
  out.queries = 1;
  if (!out.originally_correct || cfg.flip_budget == 0) return out;

  const int V = model.spec().vocab_size;
  const int n_cand = cfg.candidates > 0 ? std::min(cfg.candidates, V - 1) : V - 1;
  std::vector<std::size_t> positions;
  for (std::size_t p = 0; p < ex.tokens.size(); ++p)
    if (ex.tokens[p] != kPadToken) positions.push_back(p);

  Example cur = ex;
  double cur_loss = model.loss(theta, cur);
  for (int round = 0; round < cfg.flip_budget; ++round) {
    ++out.rounds;
    double best_loss = -std::numeric_limits<double>::infinity();
    std::size_t best_pos = 0;
    std::int32_t best_tok = 0;
    for (auto p : positions) {
      const std::int32_t keep = cur.tokens[p];
      for (std::int32_t c = 1; c <= n_cand; ++c) {
        cur.tokens[p] = c;
        const double l = model.loss(theta, cur);
        ++out.queries;
        if (l > best_loss) {
          best_loss = l;
          best_pos = p;
          best_tok = c;
        }
      }
      cur.tokens[p] = keep;
    }
    if (!(best_loss > cur_loss)) break;
    cur.tokens[best_pos] = best_tok;
    cur_loss = best_loss;
    ++out.commits;
    out.final_prediction = model.predict(theta, cur);
    ++out.queries;
    if (out.final_prediction != ex.label) {
      out.success = true;
      break;
    }
  }
  double edits = 0.0;
  for (std::size_t p = 0; p < ex.tokens.size(); ++p) edits += cur.tokens[p] != ex.tokens[p];
  out.delta_norm = edits;
  return out;
}

inline AttackOutcome run_attack(const Classifier& model, const ParamVector& theta, const Example& ex,
                                const AttackConfig& cfg) {
  switch (cfg.kind) {
    case AttackKind::fgsm: return fgsm_attack(model, theta, ex, cfg);
    case AttackKind::pgd: return pgd_attack(model, theta, ex, cfg);
    case AttackKind::greedy_flip: return greedy_flip(model, theta, ex, cfg);
  }
  throw InvalidArgument("unknown attack kind");
}

/// Clean% and Aua% are over all outcomes; Suc% is flipped / clean-correct by
/// default (0 when nothing was clean-correct); mean_queries averages the
/// attacked (clean-correct) outcomes.
inline RobustnessMetrics aggregate_outcomes(std::span<const AttackOutcome> outcomes,
                                            SucDenominator denom = SucDenominator::clean_correct) {
  require(!outcomes.empty(), "no attack outcomes to aggregate");
  std::size_t correct = 0, flipped = 0;
  double queries = 0.0;
  for (const auto& o : outcomes) {
    if (!o.originally_correct) continue;
    ++correct;
    flipped += o.success;
    queries += o.queries;
  }
  const double n = static_cast<double>(outcomes.size());
  RobustnessMetrics m;
  m.n_evaluated = outcomes.size();
  m.clean_pct = 100.0 * static_cast<double>(correct) / n;
  m.aua_pct = 100.0 * static_cast<double>(correct - flipped) / n;
  const double base = denom == SucDenominator::clean_correct ? static_cast<double>(correct) : n;
  m.suc_pct = base > 0.0 ? 100.0 * static_cast<double>(flipped) / base : 0.0;
  m.mean_queries = correct > 0 ? queries / static_cast<double>(correct) : 0.0;
  return m;
}

inline nlohmann::json trace_json(const AttackOutcome& o) {
  return {{"id", o.id}, {"success", o.success}, {"queries", o.queries}, {"delta_norm", o.delta_norm}};
}

/// Attacks every example of `test`; per-example traces go to `trace` as
/// JSON lines when given.
inline RobustnessMetrics evaluate_robustness(const Classifier& model, const ParamVector& theta, const Dataset& test,
                                             const AttackConfig& cfg, std::ostream* trace = nullptr,
                                             SucDenominator denom = SucDenominator::clean_correct) {
  require(!test.empty(), "evaluate_robustness: empty test set");
  cfg.validate();
  std::vector<AttackOutcome> outcomes;
  outcomes.reserve(test.size());
  for (const auto& ex : test.examples) {
    outcomes.push_back(run_attack(model, theta, ex, cfg));
    if (trace) *trace << trace_json(outcomes.back()).dump() << '\n';
  }
  return aggregate_outcomes(outcomes, denom);
}

inline nlohmann::json to_json(const AttackConfig& c) {
  return {{"kind", to_string(c.kind)},       {"eps", c.eps},
          {"steps", c.steps},                {"step_size", c.step_size},
          {"flip_budget", c.flip_budget},    {"candidates", c.candidates}};
}

inline AttackConfig attack_config_from_json(const nlohmann::json& j) {
  AttackConfig c;
  c.kind = attack_kind_from_string(j.at("kind").get<std::string>());
  c.eps = j.value("eps", 0.0);
  c.steps = j.value("steps", 1);
  c.step_size = j.value("step_size", 0.0);
  c.flip_budget = j.value("flip_budget", 1);
  c.candidates = j.value("candidates", 0);
  c.validate();
  return c;
}

inline nlohmann::json to_json(const RobustnessMetrics& m) {
  return {{"clean_pct", m.clean_pct},       {"aua_pct", m.aua_pct},
          {"suc_pct", m.suc_pct},           {"mean_queries", m.mean_queries},
          {"n_evaluated", m.n_evaluated}};
}

inline RobustnessMetrics metrics_from_json(const nlohmann::json& j) {
  return {j.at("clean_pct").get<double>(), j.at("aua_pct").get<double>(), j.at("suc_pct").get<double>(),
          j.at("mean_queries").get<double>(), j.at("n_evaluated").get<std::size_t>()};
}

}  // namespace dsrm
