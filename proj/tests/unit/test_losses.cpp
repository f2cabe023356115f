#include <gtest/gtest.h>

#include <cmath>

#include "dseg/losses.hpp"
#include "dseg/rng.hpp"
#include "oracle/gradcheck.hpp"
#include "oracle/reference.hpp"

using namespace dseg;

namespace {

ValueGrid pixel(std::vector<double> v) {
  const std::size_t n = v.size();
  return ValueGrid(Shape{n, 1, 1}, std::move(v));
}

BinaryGrid bit(bool v) { return BinaryGrid(1, 1, v ? 1 : 0); }

struct RandomCase {
  std::size_t J, h, w;
  ValueGrid seg, logits, dmap;
  BinaryGrid truth;
  std::vector<BinaryGrid> experts;
};

RandomCase random_case(std::size_t J, std::size_t h, std::size_t w, std::uint64_t seed) {
  Rng rng(seed);
  RandomCase c{J, h, w, ValueGrid(1, h, w), ValueGrid(J + 1, h, w), ValueGrid(1, h, w), BinaryGrid(h, w), {}};
  for (double& v : c.seg.data()) v = 0.05 + 0.9 * uniform01(rng);
  for (double& v : c.logits.data()) v = 4.0 * uniform01(rng) - 2.0;
  for (double& v : c.dmap.data()) v = 0.05 + 0.9 * uniform01(rng);
  for (std::size_t i = 0; i < c.truth.size(); ++i) c.truth.set(i, uniform01(rng) < 0.5);
  for (std::size_t j = 0; j < J; ++j) {
    BinaryGrid m(h, w);
    for (std::size_t i = 0; i < m.size(); ++i) m.set(i, uniform01(rng) < 0.7 ? c.truth[i] != 0 : c.truth[i] == 0);
    c.experts.push_back(m);
  }
  return c;
}

std::vector<int> ints(const BinaryGrid& g) { return {g.data().begin(), g.data().end()}; }

LossConfig two_expert_cfg() {
  LossConfig cfg;
  cfg.lb_upper = {0.6, 0.2};
  cfg.lb_lower = {0.4, 0.1};
  return cfg;
}

}  // namespace

TEST(DcLoss, SinglePixelExpertAndModelCorrect) {
  Tape t;
  Var l = dc_loss(t.constant(pixel({0.9})), t.constant(pixel({0.0, 0.0})), bit(true), {bit(true)});
  EXPECT_NEAR(l.value().item(), 1.4916, 1e-4);
  EXPECT_NEAR(l.value().item(), 2 * std::log(2.0) - std::log(0.9), 1e-12);
}

TEST(DcLoss, SinglePixelExpertAndModelWrong) {
  Tape t;
  Var l = dc_loss(t.constant(pixel({0.4})), t.constant(pixel({0.0, 0.0})), bit(true), {bit(false)});
  const double expect = std::log(0.5) - std::log(0.4);
  EXPECT_NEAR(l.value().item(), expect, 1e-12);
  // With seg 0.5 the model is counted as correct (threshold at >= 0.5).
  Var at_half = dc_loss(t.constant(pixel({0.5})), t.constant(pixel({0.0, 0.0})), bit(true), {bit(false)});
  EXPECT_NEAR(at_half.value().item(), std::log(0.5) - std::log(0.5) - std::log(0.5), 1e-12);
}

TEST(DcLoss, ZeroWhenExpertAndModelWrongAtHalfRouting) {
  // Routing and segmentation terms cancel: +ln 0.5 from the wrong expert, -ln 0.5 from BCE.
  Tape t;
  Var seg = t.constant(pixel({0.5}));
  const ValueGrid w = dc_routing_weights(seg.value(), bit(true), {bit(false)});
  EXPECT_EQ(w[0], -1.0);
  EXPECT_EQ(w[1], 1.0);
  ValueGrid probs = pixel({0.5, 0.5});
  Var routing_only = scale(sum(mul_const(log_clamped(t.constant(probs)), pixel({0.0, 1.0}))), 1.0);
  Var bce = bce_mean(seg, ValueGrid(1, 1, 1, 1.0));
  EXPECT_NEAR(routing_only.value().item() + bce.value().item(), 0.0, 1e-6);
}

TEST(DcLoss, RoutingTermsMatchSurrogateWhenExpertCorrect) {
  Rng rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    const double f_model = 4 * uniform01(rng) - 2, f_defer = 4 * uniform01(rng) - 2;
    const double seg = 0.6 + 0.3 * uniform01(rng);
    Tape t;
    Var l = dc_loss(t.constant(pixel({seg})), t.constant(pixel({f_model, f_defer})), bit(true), {bit(true)});
    const double routing = l.value().item() + std::log(seg);
    const std::vector<double> cls{-80.0, f_model}, def{f_defer};
    EXPECT_NEAR(routing, sm_loss_reference(cls, def, 1, {1}), 1e-10);
  }
}

TEST(SmLossReference, HandValuesAndShiftInvariance) {
  const std::vector<double> zeros2{0.0, 0.0}, zero1{0.0};
  EXPECT_NEAR(sm_loss_reference(zeros2, zero1, 1, {1}), 2 * std::log(3.0), 1e-12);
  EXPECT_NEAR(sm_loss_reference(zeros2, zero1, 1, {1}), 2.1972, 1e-4);
  EXPECT_NEAR(sm_loss_reference(zeros2, zero1, 1, {0}), 1.0986, 1e-4);
  const std::vector<double> a{0.3, -1.2, 2.0}, d{0.7, -0.1};
  const double base = sm_loss_reference(a, d, 2, {2, 0});
  std::vector<double> a2 = a, d2 = d;
  for (double& v : a2) v += 3.25;
  for (double& v : d2) v += 3.25;
  EXPECT_NEAR(sm_loss_reference(a2, d2, 2, {2, 0}), base, 1e-12);
  EXPECT_THROW(sm_loss_reference(a, d, 2, {2}), ShapeError);
}

TEST(DcLoss, ErrorsOnExpertCountMismatch) {
  Tape t;
  EXPECT_THROW(dc_loss(t.constant(pixel({0.5})), t.constant(pixel({0.0, 0.0, 0.0})), bit(true), {bit(true)}),
               ShapeError);
  EXPECT_THROW(dc_loss_from_probs(t.constant(pixel({0.5})), t.constant(pixel({1.0})), bit(true), {}), ConfigError);
}

TEST(DcLoss, LowerBoundFromClamp) {
  const RandomCase c = random_case(3, 4, 4, 9);
  ValueGrid extreme = c.logits;
  for (std::size_t i = 0; i < extreme.size(); ++i) extreme[i] = i % 3 == 0 ? 60.0 : -60.0;
  Tape t;
  Var l = dc_loss(t.constant(c.seg), t.constant(extreme), c.truth, c.experts);
  EXPECT_GE(l.value().item(), -3.0 * -std::log(kProbClamp));
}

TEST(ScLoss, SinglePixelHandValue) {
  Tape t;
  LossConfig cfg;
  Var l = sc_loss(t.constant(pixel({0.5})), t.constant(pixel({0.3, 0.7})), cfg);
  EXPECT_NEAR(l.value().item(), 0.7631, 1e-4);
  EXPECT_NEAR(l.value().item(), -std::log(0.5) + 0.5 * 0.04 + 0.05, 1e-12);
}

TEST(ScLoss, PerfectAgreementHitsClampFloor) {
  Tape t;
  LossConfig cfg;
  cfg.beta2 = 0.0;
  Var l = sc_loss(t.constant(pixel({1.0})), t.constant(pixel({0.0, 1.0})), cfg);
  EXPECT_NEAR(l.value().item(), -std::log(1.0 - kProbClamp), 1e-12);
}

TEST(ScLoss, PureBceLimitIsZero) {
  Tape t;
  LossConfig cfg;
  cfg.beta1 = cfg.beta2 = 0.0;
  Var l = sc_loss(t.constant(pixel({1e-12})), t.constant(pixel({0.9, 0.1})), cfg);
  EXPECT_LT(l.value().item(), 1e-6);
}

TEST(LbPenalty, HingeArithmetic) {
  Tape t;
  const LossConfig cfg;
  Var probs = t.constant(pixel({0.35, 0.40, 0.05, 0.20}));
  const LbResult r = lb_penalty(std::span<const Var>(&probs, 1), cfg);
  EXPECT_NEAR(r.penalty.value().item(), 0.10, 1e-12);
  ASSERT_EQ(r.workload.rho.size(), 3u);
  EXPECT_NEAR(r.workload.rho[0], 0.40, 1e-15);
}

TEST(LbPenalty, InteriorIsZeroWithZeroGradient) {
  Tape t;
  Var probs = t.variable(pixel({0.4, 0.25, 0.15, 0.2}));
  const LbResult r = lb_penalty(std::span<const Var>(&probs, 1), LossConfig{});
  EXPECT_EQ(r.penalty.value().item(), 0.0);
  t.backward(r.penalty);
  for (double g : probs.grad().data()) EXPECT_EQ(g, 0.0);
}

TEST(LbPenalty, MeanOfFourPixels) {
  Tape t;
  ValueGrid p(2, 2, 2);
  for (std::size_t i = 0; i < 4; ++i) p[i] = 1.0;
  p[0] = 0.0;
  p[4] = 1.0;
  LossConfig cfg;
  cfg.lb_upper = {1.0};
  cfg.lb_lower = {0.0};
  Var v = t.constant(p);
  EXPECT_NEAR(lb_penalty(std::span<const Var>(&v, 1), cfg).workload.rho[0], 0.25, 1e-15);
}

TEST(LbPenalty, GradientSignsPerRegime) {
  Tape t;
  const std::size_t H = 2, W = 3, B = 2;
  std::vector<Var> batch;
  for (std::size_t b = 0; b < B; ++b) {
    ValueGrid p(4, H, W);
    for (std::size_t i = 0; i < H * W; ++i) {
      p[0 * 6 + i] = 0.3;
      p[1 * 6 + i] = 0.5;   // above u = 0.35
      p[2 * 6 + i] = 0.05;  // below l = 0.10
      p[3 * 6 + i] = 0.15;  // inside [0.10, 0.30]
    }
    batch.push_back(t.variable(p));
  }
  const LbResult r = lb_penalty(batch, LossConfig{});
  t.backward(r.penalty);
  const double s = 1.0 / static_cast<double>(B * H * W);
  for (const Var& v : batch)
    for (std::size_t i = 0; i < H * W; ++i) {
      EXPECT_EQ(v.grad()[0 * 6 + i], 0.0);
      EXPECT_NEAR(v.grad()[1 * 6 + i], s, 1e-15);
      EXPECT_NEAR(v.grad()[2 * 6 + i], -s, 1e-15);
      EXPECT_EQ(v.grad()[3 * 6 + i], 0.0);
    }
}

TEST(LbPenalty, BoundsDimensionMismatchIsConfigError) {
  Tape t;
  Var v = t.constant(pixel({0.5, 0.5}));
  EXPECT_THROW(lb_penalty(std::span<const Var>(&v, 1), LossConfig{}), ConfigError);
}

TEST(Oracle, TwoByTwoTwoExpertsMatchOutOfTape) {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const RandomCase c = random_case(2, 2, 2, seed);
    const LossConfig cfg = two_expert_cfg();
    Tape t;
    Var seg = t.constant(c.seg), logits = t.constant(c.logits), dmap = t.constant(c.dmap);
    Var probs = channel_softmax(logits);
    const double dc = dc_loss(seg, logits, c.truth, c.experts).value().item();
    const double sc = sc_loss(dmap, probs, cfg).value().item();
    const double lb = lb_penalty(std::span<const Var>(&probs, 1), cfg).penalty.value().item();
    const ref::Vec p = ref::softmax(ref::flat(c.logits), 3, 4);
    std::vector<std::vector<int>> ex;
    for (const auto& m : c.experts) ex.push_back(ints(m));
    const ref::Vec segv = ref::flat(c.seg);
    EXPECT_NEAR(dc, ref::dc(segv, p, ints(c.truth), ex, ref::model_correct(segv, ints(c.truth))), 1e-10);
    EXPECT_NEAR(sc, ref::sc(ref::flat(c.dmap), p, 3, ref::pseudo(p, 3, 4), cfg.beta1, cfg.beta2), 1e-10);
    EXPECT_NEAR(lb, ref::lb(ref::rho({p}, 3, 4), cfg.lb_lower, cfg.lb_upper), 1e-10);
  }
}

TEST(TotalLoss, DegenerateWeightsGiveDc) {
  const RandomCase c = random_case(3, 4, 4, 21);
  LossConfig cfg;
  cfg.lambda1 = cfg.lambda2 = 0.0;
  Tape t;
  ForwardVars v{t.constant(c.seg), t.constant(c.logits), t.constant(c.dmap), t.constant(ValueGrid(1, 4, 4))};
  std::vector<BinaryGrid> truths{c.truth};
  std::vector<std::vector<BinaryGrid>> experts{c.experts};
  const TotalLoss tl = total_loss(std::span<const ForwardVars>(&v, 1), truths, experts, cfg);
  EXPECT_EQ(tl.breakdown.total, tl.breakdown.dc);
}

TEST(TotalLoss, BreakdownIdentityWithDefaults) {
  const RandomCase c = random_case(3, 5, 5, 22);
  const LossConfig cfg;
  Tape t;
  ForwardVars v{t.constant(c.seg), t.constant(c.logits), t.constant(c.dmap), t.constant(ValueGrid(1, 5, 5))};
  std::vector<BinaryGrid> truths{c.truth};
  std::vector<std::vector<BinaryGrid>> experts{c.experts};
  const LossBreakdown b = total_loss(std::span<const ForwardVars>(&v, 1), truths, experts, cfg).breakdown;
  EXPECT_NEAR(b.total, b.dc + b.sc + 5.0 * b.lb, 1e-10);
  EXPECT_EQ(b.lb_weight, 5.0);
}

TEST(TotalLoss, SingleExpertLbReportedButUnweighted) {
  const RandomCase c = random_case(1, 4, 4, 23);
  LossConfig cfg = resolve_bounds(LossConfig{}, 1, false);
  Tape t;
  ForwardVars v{t.constant(c.seg), t.constant(c.logits), t.constant(c.dmap), t.constant(ValueGrid(1, 4, 4))};
  std::vector<BinaryGrid> truths{c.truth};
  std::vector<std::vector<BinaryGrid>> experts{c.experts};
  LossBreakdown b = total_loss(std::span<const ForwardVars>(&v, 1), truths, experts, cfg).breakdown;
  EXPECT_NEAR(b.total, b.dc + b.sc, 1e-12);
  EXPECT_EQ(b.lb_weight, 0.0);
  cfg.lb_single_expert = true;
  b = total_loss(std::span<const ForwardVars>(&v, 1), truths, experts, cfg).breakdown;
  EXPECT_NEAR(b.total, b.dc + b.sc + 5.0 * b.lb, 1e-12);
}

TEST(TotalLoss, MatchesOutOfTapeOnRandomNet) {
  const gradcheck::Problem p = gradcheck::make_problem(4);
  double tape_value = 0.0;
  gradcheck::tape_gradient(p, gradcheck::Which::Total, &tape_value);
  EXPECT_NEAR(tape_value, gradcheck::reference_loss(p, p.net, gradcheck::Which::Total, nullptr), 1e-10);
}

TEST(TotalLoss, BoundsMismatchIsConfigError) {
  const RandomCase c = random_case(2, 3, 3, 24);
  Tape t;
  ForwardVars v{t.constant(c.seg), t.constant(c.logits), t.constant(c.dmap), t.constant(ValueGrid(1, 3, 3))};
  std::vector<BinaryGrid> truths{c.truth};
  std::vector<std::vector<BinaryGrid>> experts{c.experts};
  EXPECT_THROW(total_loss(std::span<const ForwardVars>(&v, 1), truths, experts, LossConfig{}), ConfigError);
}

TEST(Losses, PermutationEquivariantInExperts) {
  const RandomCase c = random_case(3, 4, 4, 25);
  const std::size_t perm[3] = {2, 0, 1};
  LossConfig cfg;
  LossConfig pc = cfg;
  RandomCase q = c;
  const std::size_t P = 16;
  for (std::size_t j = 0; j < 3; ++j) {
    q.experts[j] = c.experts[perm[j]];
    pc.lb_upper[j] = cfg.lb_upper[perm[j]];
    pc.lb_lower[j] = cfg.lb_lower[perm[j]];
    for (std::size_t i = 0; i < P; ++i) q.logits[(j + 1) * P + i] = c.logits[(perm[j] + 1) * P + i];
  }
  auto eval = [](const RandomCase& r, const LossConfig& k) {
    Tape t;
    ForwardVars v{t.constant(r.seg), t.constant(r.logits), t.constant(r.dmap), t.constant(ValueGrid(1, 4, 4))};
    std::vector<BinaryGrid> truths{r.truth};
    std::vector<std::vector<BinaryGrid>> experts{r.experts};
    return total_loss(std::span<const ForwardVars>(&v, 1), truths, experts, k).breakdown;
  };
  const LossBreakdown a = eval(c, cfg), b = eval(q, pc);
  EXPECT_NEAR(a.dc, b.dc, 1e-12);
  EXPECT_NEAR(a.sc, b.sc, 1e-12);
  EXPECT_NEAR(a.lb, b.lb, 1e-12);
}

TEST(LossConfig, ValidationAndDefaults) {
  LossConfig c;
  EXPECT_NO_THROW(c.validate());
  c.lambda1 = -1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = LossConfig{};
  c.lb_lower[0] = 0.5;
  EXPECT_THROW(c.validate(), ConfigError);
  c = LossConfig{};
  c.lb_upper.pop_back();
  EXPECT_THROW(c.validate(), ConfigError);
  const auto [l5, u5] = default_bounds(5);
  ASSERT_EQ(l5.size(), 5u);
  EXPECT_NEAR(l5[0], 0.07, 1e-12);
  EXPECT_NEAR(u5[0], 0.18, 1e-12);
  const LossConfig r = resolve_bounds(LossConfig{}, 5, false);
  EXPECT_EQ(r.lb_upper.size(), 5u);
  LossConfig ex;
  ex.lb_upper = {0.9, 0.9};
  ex.lb_lower = {0.0, 0.0};
  EXPECT_EQ(resolve_bounds(ex, 2, true).lb_upper, ex.lb_upper);
}

TEST(Gradients, EachLossMatchesFiniteDifferences) {
  const gradcheck::Problem p = gradcheck::make_problem(2);
  for (auto which : {gradcheck::Which::DC, gradcheck::Which::SC, gradcheck::Which::LB}) {
    const gradcheck::Report r = gradcheck::check(p, which);
    EXPECT_LT(r.max_rel, 1e-4) << gradcheck::name(which) << " " << r.worst;
  }
}
