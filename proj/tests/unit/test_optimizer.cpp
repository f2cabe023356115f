#include <gtest/gtest.h>

#include <cmath>

#include "dseg/optimizer.hpp"

using namespace dseg;

namespace {

DeferralNet::Params filled(const DeferralNet& net, double v) {
  DeferralNet::Params g;
  for (std::size_t k = 0; k < kParamCount; ++k) g[k] = ValueGrid(net.params()[k].shape(), v);
  return g;
}

}  // namespace

TEST(AdamW, FirstStepMovesBySignTimesLr) {
  DeferralNet net = init(1, NetShape{1, 4, 2, 4, 4});
  const DeferralNet before = net;
  AdamW opt(net, AdamWConfig{0.9, 0.999, 1e-8, 0.0});
  opt.step(net, filled(net, 0.3), 1e-2);
  for (std::size_t k = 0; k < kParamCount; ++k)
    for (std::size_t i = 0; i < net.params()[k].size(); ++i)
      EXPECT_NEAR(net.params()[k][i], before.params()[k][i] - 1e-2, 1e-9);
  EXPECT_EQ(opt.steps(), 1u);
}

TEST(AdamW, MatchesScalarRecurrence) {
  DeferralNet net(NetShape{1, 1, 1, 4, 4});
  net.param(kSegB)[0] = 0.5;
  const AdamWConfig cfg{0.9, 0.999, 1e-8, 0.01};
  AdamW opt(net, cfg);
  double p = 0.5, m = 0.0, v = 0.0;
  const double grads[] = {0.2, -0.1, 0.4, 0.05};
  for (int t = 1; t <= 4; ++t) {
    DeferralNet::Params g = filled(net, 0.0);
    g[kSegB][0] = grads[t - 1];
    opt.step(net, g, 0.05);
    m = 0.9 * m + 0.1 * grads[t - 1];
    v = 0.999 * v + 0.001 * grads[t - 1] * grads[t - 1];
    const double mh = m / (1 - std::pow(0.9, t)), vh = v / (1 - std::pow(0.999, t));
    p -= 0.05 * (0.01 * p + mh / (std::sqrt(vh) + 1e-8));
    EXPECT_NEAR(net.param(kSegB)[0], p, 1e-14);
  }
}

TEST(AdamW, ZeroLearningRateIsIdentity) {
  DeferralNet net = init(2, NetShape{2, 4, 2, 4, 4});
  const DeferralNet before = net;
  AdamW opt(net, AdamWConfig{});
  opt.step(net, filled(net, 1.0), 0.0);
  EXPECT_EQ(net, before);
}

TEST(AdamW, DecoupledDecayWithZeroGradient) {
  DeferralNet net = init(3, NetShape{1, 4, 2, 4, 4});
  const DeferralNet before = net;
  AdamW opt(net, AdamWConfig{0.9, 0.999, 1e-8, 0.1});
  opt.step(net, filled(net, 0.0), 0.5);
  for (std::size_t i = 0; i < net.param(kEnc1W).size(); ++i)
    EXPECT_NEAR(net.param(kEnc1W)[i], before.param(kEnc1W)[i] * (1 - 0.05), 1e-15);
}

TEST(AdamW, GradientShapeMismatchRejected) {
  DeferralNet net = init(3, NetShape{1, 4, 2, 4, 4});
  AdamW opt(net, AdamWConfig{});
  DeferralNet::Params g = filled(net, 0.0);
  g[kRouteW] = ValueGrid(1, 1, 1);
  EXPECT_THROW(opt.step(net, g, 0.1), ShapeError);
}

TEST(StepLR, DecaysEveryStepEpochs) {
  const StepLR s{1e-4, 0.8, 2};
  EXPECT_EQ(s.at(0), 1e-4);
  EXPECT_EQ(s.at(1), 1e-4);
  EXPECT_NEAR(s.at(2), 0.8e-4, 1e-18);
  EXPECT_NEAR(s.at(5), 0.64e-4, 1e-18);
  EXPECT_THROW((StepLR{1e-4, 0.8, 0}.at(1)), ConfigError);
}
