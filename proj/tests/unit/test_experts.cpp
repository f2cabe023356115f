#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "dseg/experts.hpp"
#include "dseg/synthdata.hpp"

using namespace dseg;

namespace {

struct Tally {
  double agree[3] = {0, 0, 0};
  double total[3] = {0, 0, 0};
};

// Region index: 0 = FG, 1 = BG, 2 = boundary band.
Tally tally(const ExpertProfile& p, std::size_t samples, std::uint64_t seed) {
  DatasetSpec spec;
  spec.count = samples;
  Tally t;
  std::size_t k = 0;
  for (const Sample& s : generate(spec)) {
    const auto set = simulate(s.mask, s.band, {p}, derive_seed(seed, {k++}));
    for (std::size_t i = 0; i < s.mask.size(); ++i) {
      const int r = s.band[i] ? 2 : (s.mask[i] ? 0 : 1);
      t.total[r] += 1;
      t.agree[r] += set.predictions[0][i] == s.mask[i];
    }
  }
  return t;
}

}  // namespace

TEST(Simulate, PerfectExpertReproducesTruth) {
  const Sample s = generate_one(DatasetSpec{}, 0);
  const auto set = simulate(s.mask, s.band, {{"p", 1.0, 1.0, 1.0}}, 3);
  EXPECT_EQ(set.predictions[0], s.mask);
}

TEST(Simulate, AdversarialExpertReproducesComplement) {
  const Sample s = generate_one(DatasetSpec{}, 1);
  const auto set = simulate(s.mask, s.band, {{"a", 0.0, 0.0, 0.0}}, 3);
  for (std::size_t i = 0; i < s.mask.size(); ++i) EXPECT_NE(set.predictions[0][i], s.mask[i]);
}

TEST(Simulate, RegionAgreementWithinThreeSigma) {
  const ExpertProfile p = standard_pool("comparative").experts[0];
  const Tally t = tally(p, 40, 17);
  const double acc[3] = {p.fg_acc, p.bg_acc, p.bd_param};
  for (int r = 0; r < 3; ++r) {
    ASSERT_GE(t.total[r], 1e4) << "region " << r;
    const double sigma = std::sqrt(acc[r] * (1 - acc[r]) / t.total[r]);
    EXPECT_NEAR(t.agree[r] / t.total[r], acc[r], 3 * sigma) << "region " << r;
  }
}

TEST(Simulate, EdgeBoostDegradesBand) {
  ExpertProfile p{"e", 0.9, 0.95, 0.3, BoundaryMode::EdgeBoost};
  EXPECT_NEAR(p.accuracy(true, true), 0.6, 1e-12);
  EXPECT_NEAR(p.accuracy(true, false), 0.65, 1e-12);
  EXPECT_EQ(p.accuracy(false, true), 0.9);
  ExpertProfile q{"q", 0.1, 0.2, 0.5, BoundaryMode::EdgeBoost};
  EXPECT_EQ(q.accuracy(true, true), 0.0);
  const Tally t = tally(p, 12, 4);
  for (int r = 0; r < 3; ++r) ASSERT_GT(t.total[r], 0);
  EXPECT_LT(t.agree[2] / t.total[2], t.agree[0] / t.total[0]);
}

TEST(Simulate, DeterministicPerSeedAndIndependentStreams) {
  const Sample s = generate_one(DatasetSpec{}, 2);
  const auto pool = standard_pool("comparative").experts;
  const auto a = simulate(s.mask, s.band, pool, 9), b = simulate(s.mask, s.band, pool, 9);
  for (std::size_t j = 0; j < pool.size(); ++j) EXPECT_EQ(a.predictions[j], b.predictions[j]);
  EXPECT_NE(simulate(s.mask, s.band, pool, 10).predictions[0], a.predictions[0]);
  const auto first = simulate(s.mask, s.band, {pool[0]}, 9);
  EXPECT_EQ(first.predictions[0], a.predictions[0]);
}

TEST(Simulate, ShapeAndProfileErrors) {
  EXPECT_THROW(simulate(BinaryGrid(4, 4), BinaryGrid(4, 5), {{"x", 1, 1, 1}}, 0), ShapeError);
  EXPECT_THROW(simulate(BinaryGrid(4, 4), BinaryGrid(4, 4), {}, 0), ConfigError);
}

TEST(Profile, ValidationRanges) {
  EXPECT_NO_THROW((ExpertProfile{"ok", 0.0, 1.0, 1.0}.validate()));
  EXPECT_THROW((ExpertProfile{"bad", 1.1, 1.0, 1.0}.validate()), ConfigError);
  EXPECT_THROW((ExpertProfile{"bad", 1.0, -0.1, 1.0}.validate()), ConfigError);
  EXPECT_THROW((ExpertProfile{"bad", 1.0, 1.0, 0.6, BoundaryMode::EdgeBoost}.validate()), ConfigError);
  EXPECT_NO_THROW((ExpertProfile{"ok", 1.0, 1.0, 0.5, BoundaryMode::EdgeBoost}.validate()));
}

TEST(Pools, TabulatedValues) {
  const auto cmp = standard_pool("comparative");
  ASSERT_EQ(cmp.experts.size(), 3u);
  EXPECT_EQ(cmp.mode, BoundaryMode::IndependentAccuracy);
  EXPECT_EQ(cmp.experts[1], (ExpertProfile{"2", 0.85, 0.99, 0.94, BoundaryMode::IndependentAccuracy}));
  const auto sc = standard_pool("scalability");
  ASSERT_EQ(sc.experts.size(), 5u);
  EXPECT_EQ(sc.experts[3], (ExpertProfile{"E4", 0.90, 0.97, 0.10, BoundaryMode::EdgeBoost}));
  const auto co = standard_pool("complementary");
  ASSERT_EQ(co.experts.size(), 7u);
  EXPECT_EQ(co.experts[6], (ExpertProfile{"E7", 0.97, 0.99, 0.03, BoundaryMode::EdgeBoost}));
  EXPECT_THROW(standard_pool("nope"), ConfigError);
  for (const auto& n : standard_pool_names())
    for (const auto& e : standard_pool(n).experts) EXPECT_NO_THROW(e.validate());
}

TEST(Pools, SelectAndJsonRoundTrip) {
  const auto co = standard_pool("complementary");
  const auto sub = co.select({"E3", "E1"});
  ASSERT_EQ(sub.experts.size(), 2u);
  EXPECT_EQ(sub.experts[0].name, "E3");
  EXPECT_EQ(sub.experts[1].name, "E1");
  EXPECT_THROW(co.select({"E9"}), ConfigError);
  const auto path = std::filesystem::temp_directory_path() / "dseg_test_pool.json";
  save_pool(path, co);
  const ExpertPool back = load_pool(path);
  EXPECT_EQ(back.name, co.name);
  EXPECT_EQ(back.mode, co.mode);
  EXPECT_EQ(back.experts, co.experts);
  std::filesystem::remove(path);
  EXPECT_THROW(nlohmann::json::parse(R"({"experts":[]})").get<ExpertPool>(), ConfigError);
  EXPECT_THROW(nlohmann::json::parse(R"({"mode":"x","experts":[{"fg":1,"bg":1,"bd":1}]})").get<ExpertPool>(),
               ConfigError);
}
