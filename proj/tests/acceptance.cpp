// Acceptance checks on the toy tasks. Prints one PASS/FAIL line per
// criterion and exits non-zero if any fails.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>

#include "dsrm/baselines.hpp"
#include "dsrm/dsrm.hpp"
#include "dsrm/experiment.hpp"
#include "oracles.hpp"

using namespace dsrm;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

double mean_loss(const Classifier& m, const ParamVector& theta, std::span<const Example> b) {
  double s = 0.0;
  for (double v : m.per_sample_losses(theta, b)) s += v;
  return s / static_cast<double>(b.size());
}

// Shared experimental setting for the trend criteria.
constexpr std::uint64_t kSeeds[] = {1, 2, 3};
constexpr int kEpochs = 8;
const SplitSpec kSplit{0.1, 0.2, 3};

Splits moons_task() { return split(gen_two_moons(1000, 0.25, 7), kSplit); }
Splits token_task() { return split(gen_token_task(2000, 50, 16, 11), kSplit); }

const ModelSpec kMoonsModel{Arch::mlp1, 0, 0, 0, 16, 2};
const ModelSpec kTokenModel{Arch::embed_bag, 0, 0, 8, 0, 2};

AttackConfig pgd_eval() {
  AttackConfig a;
  a.kind = AttackKind::pgd;
  a.eps = 0.7;
  a.steps = 10;
  return a;
}

DsrmConfig dsrm_cfg(double lr, double eps) {
  DsrmConfig c;
  c.lr = lr;
  c.eta = 1e5;
  c.epsilon = eps;
  c.constraint = Constraint::l2_ball;
  c.weight_mode = WeightMode::uniform;
  return c;
}

struct Averaged {
  double clean = 0, aua = 0, test_var = 0;
};

Averaged average(const ModelSpec& spec, const Splits& sp, const std::function<TrainResult(std::uint64_t)>& train) {
  Averaged a;
  for (auto seed : kSeeds) {
    const auto r = train(seed);
    const auto row = evaluate_run(spec, sp, r, 0.0, pgd_eval());
    a.clean += row.metrics.clean_pct / 3.0;
    a.aua += row.metrics.aua_pct / 3.0;
    a.test_var += r.report.epochs.back().test_loss_var / 3.0;
  }
  return a;
}

// ---------------------------------------------------------------------------

Outcome hypergradient_exactness() {
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed + 1000);
    const std::size_t d = 1 + rng.below(10), n = 1 + rng.below(32);
    const Classifier m(ModelSpec{Arch::softmax_linear, d, 0, 0, 0, 2});
    auto theta = m.init_params(seed);
    oracle::randomize(theta, rng);
    const auto train = oracle::random_dense(n, d, 2, rng), valid = oracle::random_dense(2 * n, d, 2, rng);
    const auto w = init_weights(n, seed % 2 ? WeightMode::ones : WeightMode::uniform);
    const double alpha = 0.1;
    const auto ts = virtual_step(m, theta, train.examples, w, alpha);
    const auto g = hypergradient(m, theta, ts, train.examples, valid.examples, alpha);
    const auto fd = oracle::central_diff(
        [&](const std::vector<double>& wv) {
          return mean_loss(m, virtual_step(m, theta, train.examples, wv, alpha), valid.examples);
        },
        w);
    worst = std::max(worst, oracle::max_rel_err(g, fd));
  }
  const double secs = seconds_since(t0);
  return {worst < 1e-6 && secs < 5.0, fmt("max rel err %.3g (< 1e-6), %.2f s (< 5 s)", worst, secs)};
}

Outcome model_gradients() {
  const auto t0 = std::chrono::steady_clock::now();
  double worst_param = 0.0, worst_input = 0.0;
  for (auto arch : {Arch::softmax_linear, Arch::mlp1, Arch::embed_bag}) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      Rng rng(seed + 2000);
      ModelSpec spec;
      spec.arch = arch;
      spec.hidden_dim = 5;
      spec.embed_dim = 4;
      const auto ds =
          arch == Arch::embed_bag ? oracle::random_tokens(4, 12, 7, 3, rng) : oracle::random_dense(4, 4, 3, rng);
      const Classifier m(spec.fitted_to(ds));
      auto theta = m.init_params(seed);
      oracle::randomize(theta, rng);
      const auto G = m.per_sample_grads(theta, ds.examples);
      for (std::size_t i = 0; i < ds.size(); ++i) {
        const auto& ex = ds.examples[i];
        const auto fd = oracle::central_diff(
            [&](const std::vector<double>& v) {
              ParamVector t = theta;
              t.values = v;
              return m.loss(t, ex);
            },
            theta.values);
        worst_param = std::max(worst_param, oracle::max_rel_err(G.row(i), fd));
        const auto h0 = m.features(theta, ex);
        const auto fdi = oracle::central_diff(
            [&](const std::vector<double>& h) { return m.loss_from_features(theta, h, ex.label); }, h0);
        worst_input = std::max(worst_input, oracle::max_rel_err(m.input_grad(theta, ex), fdi));
      }
    }
  }
  const double secs = seconds_since(t0);
  return {worst_param < 1e-4 && worst_input < 1e-4 && secs < 10.0,
          fmt("param grad rel err %.3g, input grad rel err %.3g (< 1e-4), %.2f s (< 10 s)", worst_param, worst_input,
              secs)};
}

Outcome reductions() {
  const auto sp = split(gen_two_moons(400, 0.25, 5), {0.2, 0.2, 1});
  const ModelSpec spec{Arch::mlp1, 0, 0, 0, 8, 2};
  double dsrm_gap = 0.0, pgd_gap = 0.0, freelb_gap = 0.0;
  for (int epochs = 1; epochs <= 3; ++epochs) {
    const auto erm = erm_train(spec, sp, {0.2, 16}, epochs, 9);
    DsrmConfig dc = dsrm_cfg(0.2, 0.3);
    dc.eta = 0.0;
    for (auto mode : {WeightMode::ones, WeightMode::uniform}) {
      dc.weight_mode = mode;
      dsrm_gap = std::max(dsrm_gap, oracle::max_abs_diff(dsrm_train(spec, sp, dc, epochs, 9).theta.values,
                                                         erm.theta.values));
    }
    AdvTrainConfig ac;
    ac.lr = 0.2;
    ac.radius = 0.0;
    ac.steps = 5;
    pgd_gap = std::max(pgd_gap, oracle::max_abs_diff(pgd_at_train(spec, sp, ac, epochs, 9).theta.values,
                                                     erm.theta.values));
    ac.radius = 0.5;
    ac.steps = 1;
    freelb_gap = std::max(freelb_gap, oracle::max_abs_diff(freelb_train(spec, sp, ac, epochs, 9).theta.values,
                                                           erm.theta.values));
  }
  const bool ok = dsrm_gap <= 1e-12 && pgd_gap <= 1e-12 && freelb_gap <= 1e-12;
  return {ok, fmt("max |theta - theta_erm| after epochs 1..3: dsrm(eta=0) %.3g, pgd_at(radius=0) %.3g, "
                  "freelb(K=1) %.3g (<= 1e-12)",
                  dsrm_gap, pgd_gap, freelb_gap)};
}

Outcome shift_bounds() {
  const auto sp = moons_task();
  const Classifier m(kMoonsModel.fitted_to(sp.train));
  DsrmConfig c = dsrm_cfg(1.0, 0.06);
  ValidSampler vs(sp.valid, 4);
  Rng rng(4);
  auto theta = m.init_params(4);
  std::size_t violations = 0, binding = 0;
  for (int step = 0; step < 500; ++step) {
    const Batch batch = sample_batch(sp.train, c.batch_size, rng);
    auto r = dsrm_train_step(m, theta, batch, vs, c);
    const double shift = l2_shift(r.weights, init_weights(batch.size(), c.weight_mode));
    violations += !(shift <= c.epsilon);
    binding += shift > 0.5 * c.epsilon;
    theta = std::move(r.theta);
  }
  Rng lr(5);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + lr.below(50);
    const auto L = oracle::random_vector(n, lr, 0.0, 5.0);
    const double eps = lr.uniform(0.01, 2.0);
    const auto p0 = init_weights(n, WeightMode::uniform);
    worst = std::max(worst, std::abs(l2_shift(closed_form_shift(L, eps, p0), p0) - eps));
  }
  return {violations == 0 && worst <= 1e-12,
          fmt("%zu/500 steps exceed eps (%zu steps used > eps/2); closed form | |P_f - P_0| - eps | max %.3g "
              "(<= 1e-12)",
              violations, binding, worst)};
}

Outcome ascent() {
  const auto sp = moons_task();
  const Classifier m(kMoonsModel.fitted_to(sp.train));
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    DsrmConfig c;
    c.eta = 1e-3;
    c.constraint = Constraint::none;
    c.lr = 0.5;
    c.weight_mode = seed % 2 ? WeightMode::ones : WeightMode::uniform;
    Rng rng(seed);
    auto theta = m.init_params(seed);
    oracle::randomize(theta, rng);
    const Batch batch = sample_batch(sp.train, 16, rng);
    const Batch valid = sample_batch(sp.valid, 32, rng);
    const auto w = init_weights(16, c.weight_mode);
    const double alpha = c.lr / base_mass(16, c.weight_mode);
    const auto ts = virtual_step(m, theta, batch, w, alpha);
    const auto g = hypergradient(m, theta, ts, batch, valid, alpha);
    const auto wn = perturb_weights(w, g, c.eta, c, w);
    const double drop = mean_loss(m, ts, valid) - mean_loss(m, virtual_step(m, theta, batch, wn, alpha), valid);
    worst = std::max(worst, drop);
  }
  return {worst <= 1e-9, fmt("largest validation-loss decrease %.3g (<= 1e-9)", worst)};
}

struct TrendRuns {
  Averaged moons_erm, moons_dsrm, tok_erm, tok_dsrm;
  double secs = 0;
};

TrendRuns run_trend() {
  const auto t0 = std::chrono::steady_clock::now();
  TrendRuns t;
  const auto ms = moons_task();
  t.moons_erm = average(kMoonsModel, ms, [&](auto s) { return erm_train(kMoonsModel, ms, {1.0, 16}, kEpochs, s); });
  t.moons_dsrm = average(kMoonsModel, ms,
                         [&](auto s) { return dsrm_train(kMoonsModel, ms, dsrm_cfg(1.0, 0.06), kEpochs, s); });
  const auto ts = token_task();
  t.tok_erm = average(kTokenModel, ts, [&](auto s) { return erm_train(kTokenModel, ts, {0.5, 16}, kEpochs, s); });
  t.tok_dsrm =
      average(kTokenModel, ts, [&](auto s) { return dsrm_train(kTokenModel, ts, dsrm_cfg(0.5, 0.3), kEpochs, s); });
  t.secs = seconds_since(t0);
  return t;
}

Outcome robustness_trend(const TrendRuns& t) {
  auto ok = [](const Averaged& e, const Averaged& d) {
    return e.aua >= 20 && e.aua <= 60 && d.aua >= e.aua + 5 && e.clean - d.clean <= 3;
  };
  const bool pass = ok(t.moons_erm, t.moons_dsrm) && ok(t.tok_erm, t.tok_dsrm) && t.secs < 120;
  return {pass, fmt("moons: ERM clean %.2f aua %.2f, DSRM clean %.2f aua %.2f; tokens: ERM clean %.2f aua %.2f, "
                    "DSRM clean %.2f aua %.2f; %.1f s (< 120 s)",
                    t.moons_erm.clean, t.moons_erm.aua, t.moons_dsrm.clean, t.moons_dsrm.aua, t.tok_erm.clean,
                    t.tok_erm.aua, t.tok_dsrm.clean, t.tok_dsrm.aua, t.secs)};
}

Outcome epsilon_trend() {
  const auto ts = token_task();
  const std::vector<double> grid{0.1, 0.3, 1.0, 3.0, 6.0};
  std::vector<Averaged> rows;
  for (double eps : grid)
    rows.push_back(
        average(kTokenModel, ts, [&](auto s) { return dsrm_train(kTokenModel, ts, dsrm_cfg(0.5, eps), kEpochs, s); }));
  std::size_t best = 0;
  for (std::size_t i = 1; i < rows.size(); ++i)
    if (rows[i].aua > rows[best].aua) best = i;
  std::string aua;
  for (const auto& r : rows) aua += fmt(" %.2f", r.aua);
  const bool pass = best > 0 && best + 1 < rows.size() && rows.back().clean <= rows.front().clean;
  return {pass, fmt("eps {0.1,0.3,1,3,6} aua%s, argmax eps %g; clean %.2f at eps 0.1, %.2f at eps 6", aua.c_str(),
                    grid[best], rows.front().clean, rows.back().clean)};
}

Outcome steps_trend() {
  const auto ts = token_task();
  const std::vector<int> ks{1, 3, 5, 10, 20};
  std::vector<double> aua, clean;
  for (int k : ks) {
    AdvTrainConfig c;
    c.lr = 0.5;
    c.radius = 0.1;
    c.step_size = 0.01;
    c.steps = k;
    const auto a = average(kTokenModel, ts, [&](auto s) { return pgd_at_train(kTokenModel, ts, c, kEpochs, s); });
    aua.push_back(a.aua);
    clean.push_back(a.clean);
  }
  const auto peak = static_cast<std::size_t>(std::max_element(aua.begin(), aua.end()) - aua.begin());
  bool rising = true;
  for (std::size_t i = 1; i <= peak; ++i) rising = rising && aua[i] >= aua[i - 1];
  std::string s, cs;
  for (double a : aua) s += fmt(" %.2f", a);
  for (double c : clean) cs += fmt(" %.2f", c);
  return {rising && ks[peak] >= 3, fmt("K {1,3,5,10,20} aua%s (clean%s), peak at K=%d", s.c_str(), cs.c_str(), ks[peak])};
}

Outcome cost_ordering() {
  const std::size_t b = 16;
  const auto erm = erm_step_cost(b), dsrm = dsrm_step_cost(b, b), freelb = freelb_step_cost(b, 3),
             pgd = pgd_step_cost(b, 7);
  const bool steps_ok = erm.total() < dsrm.total() && dsrm.total() < freelb.total() && freelb.total() < pgd.total();

  // whole-run ledgers, same data, batch and epochs
  const auto sp = split(gen_two_moons(400, 0.25, 5), {0.2, 0.2, 1});
  const ModelSpec spec{Arch::mlp1, 0, 0, 0, 8, 2};
  DsrmConfig dc = dsrm_cfg(0.2, 0.3);
  dc.valid_batch = b;
  AdvTrainConfig ac;
  ac.radius = 0.5;
  ac.steps = 3;
  const auto run_erm = erm_train(spec, sp, {0.2, b}, 1, 1).report.passes.total();
  const auto run_dsrm = dsrm_train(spec, sp, dc, 1, 1).report.passes.total();
  const auto run_freelb = freelb_train(spec, sp, ac, 1, 1).report.passes.total();
  ac.steps = 7;
  const auto run_pgd = pgd_at_train(spec, sp, ac, 1, 1).report.passes.total();
  const bool runs_ok = run_erm < run_dsrm && run_dsrm < run_freelb && run_freelb < run_pgd;
  return {steps_ok && runs_ok,
          fmt("per step (b=16): ERM %llu < DSRM %llu < FreeLB-3 %llu < PGD-7 %llu; one epoch: %llu < %llu < %llu < %llu",
              (unsigned long long)erm.total(), (unsigned long long)dsrm.total(), (unsigned long long)freelb.total(),
              (unsigned long long)pgd.total(), (unsigned long long)run_erm, (unsigned long long)run_dsrm,
              (unsigned long long)run_freelb, (unsigned long long)run_pgd)};
}

Outcome loss_variance(const TrendRuns& t) {
  return {t.tok_dsrm.test_var <= t.tok_erm.test_var,
          fmt("token task final-epoch test-loss variance: DSRM %.5f, ERM %.5f", t.tok_dsrm.test_var,
              t.tok_erm.test_var)};
}

Outcome metrics_definitions() {
  const oracle::MetricsFixture f;
  AttackConfig c;
  c.eps = 1.0;
  c.steps = 5;
  const auto r = evaluate_robustness(f.model, f.theta, f.test, c);
  const bool fixture_ok = r.clean_pct == 80.0 && r.aua_pct == 20.0 && r.suc_pct == 75.0;

  Rng rng(77);
  int mismatches = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const auto tc = oracle::random_token_case(rng);
    AttackConfig g;
    g.kind = AttackKind::greedy_flip;
    g.flip_budget = static_cast<int>(rng.below(5));
    g.candidates = static_cast<int>(rng.below(static_cast<std::uint64_t>(tc.model.spec().vocab_size)));
    const int cands = g.candidates > 0 ? g.candidates : tc.model.spec().vocab_size - 1;
    const auto o = greedy_flip(tc.model, tc.theta, tc.ex, g);
    const auto ref = oracle::brute_greedy(tc.model, tc.theta, tc.ex, g.flip_budget, cands);
    const int L = static_cast<int>(oracle::content_len(tc.ex));
    mismatches += o.queries != ref.queries || o.queries != 1 + o.rounds * L * cands + o.commits;
  }
  return {fixture_ok && mismatches == 0,
          fmt("fixture clean %g aua %g suc %g (80/20/75); greedy_flip query mismatches %d/50", r.clean_pct, r.aua_pct,
              r.suc_pct, mismatches)};
}

Outcome determinism() {
  namespace fs = std::filesystem;
  const auto dir = fs::temp_directory_path() / "dsrm_acceptance_det";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const nlohmann::json cfg = {
      {"dataset", {{"generator", "token_task"}, {"n", 400}, {"vocab_size", 50}, {"max_len", 16}, {"seed", 11}}},
      {"split", {{"valid_fraction", 0.1}, {"test_fraction", 0.2}, {"seed", 3}}},
      {"model", {{"arch", "embed_bag"}, {"embed_dim", 8}}},
      {"method", {{"name", "dsrm"}, {"lr", 0.5}, {"eta", 1e5}, {"epsilon", 0.3}, {"weight_mode", "uniform"}}},
      {"epochs", 2},
      {"seeds", {5}}};
  const auto path = (dir / "config.json").string();
  std::ofstream(path) << cfg.dump(2);
  std::vector<std::string> dumps;
  std::ostringstream err;
  for (const char* run : {"a", "b"}) {
    Overrides o;
    o.out = (dir / run).string();
    if (cmd_train(path, o, err) != exit_code::ok) return {false, "cmd_train failed: " + err.str()};
    auto j = to_json(load_report(seed_file(*o.out, "report", 5, ".json")));
    j.erase("wall_ms");
    std::ifstream p(seed_file(*o.out, "params", 5, ".json"));
    std::stringstream ps;
    ps << p.rdbuf();
    dumps.push_back(j.dump() + ps.str());
  }
  fs::remove_all(dir);
  return {dumps[0] == dumps[1], dumps[0] == dumps[1] ? "two runs identical apart from wall_ms"
                                                     : "reports differ between runs"};
}

}  // namespace

int main() {
  int failed = 0;
  auto report = [&](int n, const Outcome& o) {
    std::printf("%s criterion %d: %s\n", o.pass ? "PASS" : "FAIL", n, o.detail.c_str());
    std::fflush(stdout);
    failed += !o.pass;
  };
  auto run = [&](int n, const std::function<Outcome()>& f) {
    try {
      report(n, f());
    } catch (const std::exception& e) {
      report(n, {false, std::string("exception: ") + e.what()});
    }
  };
  run(1, hypergradient_exactness);
  run(2, model_gradients);
  run(3, reductions);
  run(4, shift_bounds);
  run(5, ascent);
  TrendRuns trend;
  bool have_trend = false;
  run(6, [&] {
    trend = run_trend();
    have_trend = true;
    return robustness_trend(trend);
  });
  run(7, epsilon_trend);
  run(8, steps_trend);
  run(9, cost_ordering);
  run(10, [&] { return have_trend ? loss_variance(trend) : Outcome{false, "trend runs unavailable"}; });
  run(11, metrics_definitions);
  run(12, determinism);
  std::printf("%d of 12 criteria failed\n", failed);
  return failed == 0 ? 0 : 1;
}
