// Trains ERM, DSRM and PGD-AT on the synthetic token task and prints the
// comparison table as CSV.
//
//   compare_methods [epochs] [seed]

#include <cstdlib>
#include <iostream>
#include <vector>

#include "dsrm/baselines.hpp"
#include "dsrm/dsrm.hpp"

using namespace dsrm;

int main(int argc, char** argv) {
  const int epochs = argc > 1 ? std::atoi(argv[1]) : 8;
  const std::uint64_t seed = argc > 2 ? std::strtoull(argv[2], nullptr, 10) : 1;

  const auto splits = split(gen_token_task(2000, 50, 16, 11), {0.1, 0.2, 3});
  const ModelSpec spec{Arch::embed_bag, 0, 0, 8, 0, 2};

  AttackConfig attack;
  attack.kind = AttackKind::pgd;
  attack.eps = 0.7;
  attack.steps = 10;

  DsrmConfig dc;
  dc.lr = 0.5;
  dc.eta = 1e5;
  dc.epsilon = 0.3;
  dc.weight_mode = WeightMode::uniform;

  AdvTrainConfig ac;
  ac.lr = 0.5;
  ac.radius = 0.1;
  ac.steps = 10;
  ac.step_size = 0.01;

  std::vector<TrainResult> runs;
  runs.push_back(erm_train(spec, splits, {0.5, 16}, epochs, seed));
  runs.push_back(dsrm_train(spec, splits, dc, epochs, seed));
  runs.push_back(pgd_at_train(spec, splits, ac, epochs, seed));

  const Classifier model(spec.fitted_to(splits.train));
  std::vector<RunReport> reports;
  for (auto& r : runs) {
    r.report.dataset = "token_task";
    r.report.attacks.push_back({attack.label(), attack, evaluate_robustness(model, r.theta, splits.test, attack)});
    reports.push_back(r.report);
  }
  std::cout << to_csv(compare(reports));
}
