#include <gtest/gtest.h>

#include "dseg/grid.hpp"
#include "dseg/pgm.hpp"
#include "dseg/rng.hpp"

using namespace dseg;

TEST(ValueGrid, LengthMustMatchShape) {
  EXPECT_THROW(ValueGrid(Shape{1, 2, 2}, std::vector<double>(3)), ShapeError);
  ValueGrid g(Shape{2, 2, 3}, std::vector<double>(12, 1.5));
  EXPECT_EQ(g.plane(), 6u);
  EXPECT_EQ(g.channel(1).size(), 6u);
  EXPECT_THROW(g.item(), ShapeError);
}

TEST(ValueGrid, ChannelMajorIndexing) {
  ValueGrid g(2, 2, 2);
  g.at(1, 0, 1) = 7.0;
  EXPECT_EQ(g[5], 7.0);
  EXPECT_EQ(g.channel(1)[1], 7.0);
}

TEST(BinaryGrid, ThresholdIsInclusiveAtHalf) {
  ValueGrid p(Shape{1, 1, 3}, {0.49, 0.5, 0.9});
  BinaryGrid m = threshold(p);
  EXPECT_EQ(m[0], 0);
  EXPECT_EQ(m[1], 1);
  EXPECT_EQ(m[2], 1);
  EXPECT_EQ(m.count(), 2u);
}

TEST(BinaryGrid, IntersectionRequiresSameShape) {
  BinaryGrid a(2, 2, 1), b(2, 3);
  EXPECT_THROW(a & b, ShapeError);
  BinaryGrid c(2, 2);
  c.set(3, true);
  EXPECT_EQ((a & c).count(), 1u);
}

TEST(Dihedral, QuarterTurnMovesCornersCounterClockwise) {
  ValueGrid g(1, 3, 3);
  g.at(0, 0, 2) = 1.0;  // top-right
  ValueGrid r = apply(Dihedral{1, false}, g);
  EXPECT_EQ(r.at(0, 0, 0), 1.0);  // top-left after a ccw turn
  ValueGrid f = apply(Dihedral{0, true}, g);
  EXPECT_EQ(f.at(0, 0, 0), 1.0);
}

TEST(Dihedral, GroupIdentities) {
  ValueGrid g(2, 4, 4);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = static_cast<double>(i);
  ValueGrid r = g;
  for (int k = 0; k < 4; ++k) r = apply(Dihedral{1, false}, r);
  EXPECT_EQ(r, g);
  EXPECT_EQ(apply(Dihedral{0, true}, apply(Dihedral{0, true}, g)), g);
  BinaryGrid m(4, 4);
  m.set(1, 2, true);
  BinaryGrid mr = apply(Dihedral{3, true}, m);
  EXPECT_EQ(mr.count(), 1u);
}

TEST(Dihedral, OddTurnsNeedSquareGrid) {
  EXPECT_THROW(apply(Dihedral{1, false}, ValueGrid(1, 2, 3)), ShapeError);
  EXPECT_NO_THROW(apply(Dihedral{2, true}, ValueGrid(1, 2, 3)));
}

TEST(Pgm, EncodeDecodeRoundTrip) {
  pgm::Image img{2, 3, {0, 10, 20, 128, 200, 255}};
  const std::string bytes = pgm::encode(img);
  EXPECT_EQ(bytes.substr(0, 11), "P5\n3 2\n255\n");
  pgm::Image back = pgm::decode(bytes);
  EXPECT_EQ(back.height, 2u);
  EXPECT_EQ(back.width, 3u);
  EXPECT_EQ(back.pixels, img.pixels);
}

TEST(Pgm, DecodeRejectsGarbage) {
  EXPECT_THROW(pgm::decode("P2\n1 1\n255\n0"), DataError);
  EXPECT_THROW(pgm::decode("P5\n2 2\n255\nab"), DataError);
}

TEST(Pgm, MaskThresholdAt128) {
  pgm::Image img{1, 3, {127, 128, 255}};
  BinaryGrid m = pgm::to_mask(img);
  EXPECT_EQ(m[0], 0);
  EXPECT_EQ(m[1], 1);
  EXPECT_EQ(m[2], 1);
}

TEST(Base64, KnownVectors) {
  EXPECT_EQ(pgm::base64("Man"), "TWFu");
  EXPECT_EQ(pgm::base64("Ma"), "TWE=");
  EXPECT_EQ(pgm::base64("M"), "TQ==");
  EXPECT_EQ(pgm::unbase64("TWFu"), "Man");
  std::string bin;
  for (int i = 0; i < 256; ++i) bin.push_back(static_cast<char>(i));
  EXPECT_EQ(pgm::unbase64(pgm::base64(bin)), bin);
}

TEST(Rng, Fnv1aKnownValue) {
  EXPECT_EQ(fnv1a(""), 0xcbf29ce484222325ULL);
  EXPECT_EQ(fnv1a("a"), 0xaf63dc4c8601ec8cULL);
}

TEST(Rng, DerivedSeedsAreStableAndDistinct) {
  EXPECT_EQ(derive_seed(5, {1, 2}), derive_seed(5, {1, 2}));
  EXPECT_NE(derive_seed(5, {1, 2}), derive_seed(5, {2, 1}));
  EXPECT_NE(derive_seed(5, {1}), derive_seed(6, {1}));
  Rng r(1);
  for (int i = 0; i < 1000; ++i) {
    const double u = uniform01(r);
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
  }
}
