// Generate data, train a one-expert deferral net for a few epochs, print branch metrics.
#include <iostream>

#include "dseg/trainer.hpp"

int main() {
  using namespace dseg;
  DatasetSpec spec;
  spec.count = 40;
  spec.noise_sigma = 0.5;
  const Split split = split_by_id(generate(spec));

  TrainingConfig cfg;
  cfg.experts = standard_pool("comparative").select({"1"}).experts;
  cfg.learning_rate = 1e-2;
  cfg.max_epochs = 5;
  cfg.patience_dsc = cfg.patience_rho = 5;
  cfg.seed = 3;

  const TrainResult res = train_fresh(split.train, split.val, cfg, [](const EpochRecord& e) {
    std::cout << "epoch " << e.epoch << "  loss " << e.train.total << "  val System DSC " << e.val.system_dsc()
              << '\n';
  });
  const EvalResult ev = evaluate(res.net, split.val, cfg.experts, cfg.seed);
  for (std::size_t b = 0; b < 3; ++b)
    std::cout << branch_names()[b] << " DSC " << ev.summary.get(b, 0).mean << " (n=" << ev.summary.get(b, 0).n
              << ")\n";
  std::cout << "rho_1 " << ev.summary.workload[0].mean << '\n';
}
