#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "dsrm/report.hpp"
#include "oracles.hpp"

using namespace dsrm;

namespace {

RunReport make_report(std::string method, std::uint64_t seed, double aua, double suc, PassLedger passes) {
  RunReport r;
  r.method = std::move(method);
  r.dataset = "moons";
  r.seed = seed;
  r.passes = passes;
  r.epochs = {{1, 0.7, 0.71, 0.02}, {2, 0.5, 0.52, 0.015}};
  AttackConfig c;
  c.eps = 0.5;
  c.steps = 10;
  RobustnessMetrics m{90.0, aua, suc, 12.0, 100};
  r.attacks.push_back({c.label(), c, m});
  return r;
}

std::string tmp(const std::string& name) { return (std::filesystem::temp_directory_path() / name).string(); }

}  // namespace

TEST(LossStats, MatchesNaiveOracle) {
  Rng rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    const auto xs = oracle::random_vector(1 + rng.below(200), rng, 0.0, 10.0);
    const auto s = loss_stats(xs);
    long double m = 0, sq = 0;
    for (double x : xs) {
      m += x;
      sq += static_cast<long double>(x) * x;
    }
    m /= xs.size();
    const long double var = sq / xs.size() - m * m;
    EXPECT_NEAR(s.mean, static_cast<double>(m), 1e-12);
    EXPECT_NEAR(s.var, static_cast<double>(var), 1e-10 * std::max(1.0, static_cast<double>(var)));
    EXPECT_GE(s.var, 0.0);
  }
  const std::vector<double> same(7, 3.25);
  EXPECT_EQ(loss_stats(same).var, 0.0);
  EXPECT_THROW(loss_stats(std::vector<double>{}), InvalidArgument);
}

TEST(RecordEpoch, IdentitiesAndErrors) {
  Rng rng(2);
  const auto ds = oracle::random_dense(20, 3, 2, rng);
  const Classifier m(ModelSpec{Arch::softmax_linear, 3, 0, 0, 0, 2});
  auto theta = m.init_params(1);
  RunReport r;
  record_epoch(r, m, theta, ds, ds);
  record_epoch(r, m, m.zeros(), ds, ds);
  ASSERT_EQ(r.epochs.size(), 2u);
  EXPECT_EQ(r.epochs[0].epoch, 1);
  EXPECT_EQ(r.epochs[1].epoch, 2);
  EXPECT_NEAR(r.epochs[0].train_loss_mean, r.epochs[0].test_loss_mean, 1e-12);
  EXPECT_EQ(r.epochs[1].test_loss_var, 0.0);  // zero params: every loss is ln 2
  EXPECT_THROW(record_epoch(r, m, theta, ds, ds.like()), InvalidArgument);
}

TEST(Compare, SingleReportIsBest) {
  const std::vector<RunReport> rs{make_report("dsrm", 1, 40, 50, {10, 10})};
  const auto t = compare(rs);
  ASSERT_EQ(t.rows.size(), 1u);
  EXPECT_TRUE(t.rows[0].best_aua);
  EXPECT_TRUE(t.rows[0].best_suc);
}

TEST(Compare, TiesMarkAllRows) {
  const std::vector<RunReport> rs{make_report("erm", 1, 40, 50, {10, 10}), make_report("dsrm", 1, 40, 45, {30, 30})};
  const auto t = compare(rs);
  ASSERT_EQ(t.rows.size(), 2u);
  EXPECT_EQ(t.rows[0].method, "dsrm");  // ordered by method name
  EXPECT_TRUE(t.rows[0].best_aua && t.rows[1].best_aua);
  EXPECT_TRUE(t.rows[0].best_suc);
  EXPECT_FALSE(t.rows[1].best_suc);
}

TEST(Compare, AveragesSeedsAndRejectsDuplicates) {
  std::vector<RunReport> rs{make_report("erm", 1, 40, 50, {10, 10}), make_report("erm", 2, 30, 60, {10, 10})};
  const auto t = compare(rs);
  ASSERT_EQ(t.rows.size(), 1u);
  EXPECT_EQ(t.rows[0].aua_pct, 35.0);
  EXPECT_EQ(t.rows[0].n_seeds, 2u);
  rs.push_back(make_report("erm", 2, 30, 60, {10, 10}));
  EXPECT_THROW(compare(rs), InvalidArgument);
}

TEST(Compare, CostColumnFollowsLedgers) {
  const std::vector<RunReport> rs{make_report("erm", 1, 30, 60, {100, 100}),
                                  make_report("dsrm", 1, 40, 50, {300, 300}),
                                  make_report("pgd7", 1, 45, 40, {800, 800})};
  const auto t = compare(rs);
  std::map<std::string, double> cost;
  for (const auto& r : t.rows) cost[r.method] = r.cost_units();
  EXPECT_LT(cost["erm"], cost["dsrm"]);
  EXPECT_LT(cost["dsrm"], cost["pgd7"]);
  EXPECT_EQ(compare(rs).rows.size(), t.rows.size());
  EXPECT_EQ(to_csv(compare(rs)), to_csv(t));
}

TEST(Compare, ReportWithoutAttacks) {
  auto r = make_report("erm", 1, 0, 0, {1, 1});
  r.attacks.clear();
  const auto t = compare(std::vector<RunReport>{r});
  ASSERT_EQ(t.rows.size(), 1u);
  EXPECT_EQ(t.rows[0].attack, "none");
}

TEST(Emit, JsonRoundTrip) {
  auto r = make_report("dsrm", 3, 41.5, 52.25, {123, 456});
  r.config = {{"lr", 0.1}};
  r.wall_ms = 12.5;
  r.epochs[0].test_loss_mean = 0.1 + 0.2;
  const auto path = tmp("dsrm_report_roundtrip.json");
  emit(r, Format::json, path);
  const auto back = load_report(path);
  EXPECT_EQ(to_json(back).dump(), to_json(r).dump());
  EXPECT_EQ(back.epochs, r.epochs);
  EXPECT_EQ(back.attacks[0].metrics, r.attacks[0].metrics);
}

TEST(Emit, CsvHeaders) {
  const std::string cmp = to_csv(ComparisonTable{});
  EXPECT_EQ(cmp,
            "schema_version,method,dataset,attack,clean_pct,aua_pct,suc_pct,mean_queries,forward_units,"
            "backward_units,cost_units,n_seeds,best_aua,best_suc\n");
  const auto rep = to_csv(make_report("erm", 1, 40, 50, {10, 10}));
  EXPECT_EQ(rep.substr(0, rep.find('\n')), "schema_version,epoch,train_loss_mean,test_loss_mean,test_loss_var");
  EXPECT_EQ(sweep_to_csv(std::vector<SweepRow>{}),
            "schema_version,param_value,clean_pct,aua_pct,suc_pct,mean_queries,forward_units,backward_units,"
            "wall_ms,seed\n");
}

TEST(Emit, CsvKeepsPrecision) {
  const auto csv = to_csv(compare(std::vector<RunReport>{make_report("erm", 1, 100.0 / 3.0, 50, {10, 10})}));
  EXPECT_NE(csv.find("33.3333333333333"), std::string::npos) << csv;
}

TEST(Emit, UnwritablePath) {
  EXPECT_THROW(emit(make_report("erm", 1, 1, 1, {}), Format::json, "/nonexistent/dir/r.json"), IoError);
}

TEST(Load, RejectsMalformed) {
  const auto bad = tmp("dsrm_bad_report.json");
  std::ofstream(bad) << "{\"schema_version\": 1, \"method\": \"erm\"}";
  try {
    load_report(bad);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("dsrm_bad_report.json"), std::string::npos);
  }
  auto j = to_json(make_report("erm", 1, 1, 1, {}));
  j["epochs"][0]["epoch"] = 5;
  EXPECT_THROW(report_from_json(j), ParseError);
  const auto garbage = tmp("dsrm_garbage.json");
  std::ofstream(garbage) << "not json";
  EXPECT_THROW(load_report(garbage), ParseError);
}
