#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "bevkd/grid.hpp"
#include "bevkd/rng.hpp"
#include "bevkd/types.hpp"

namespace bevkd {
namespace {

constexpr double kPi = std::numbers::pi;

TEST(BevGrid, WorldToCellExamples) {
  const BevGrid g(10, 10, 0.0, 10.0, 0.0, 10.0);
  auto a = g.world_to_cell(0.5, 0.5);
  EXPECT_NEAR(a.row, 0.0, 1e-12);
  EXPECT_NEAR(a.col, 0.0, 1e-12);
  auto b = g.world_to_cell(9.5, 9.5);
  EXPECT_NEAR(b.row, 9.0, 1e-12);
  EXPECT_NEAR(b.col, 9.0, 1e-12);
  auto c = g.world_to_cell(5.5, 0.5);
  EXPECT_NEAR(c.row, 0.0, 1e-12);
  EXPECT_NEAR(c.col, 5.0, 1e-12);
}

TEST(BevGrid, RoundTripOn1000RandomPoints) {
  const BevGrid g(64, 48, -32.0, 32.0, -20.0, 28.0);
  Rng rng(7);
  for (int i = 0; i < 1000; ++i) {
    const double x = rng.uniform(g.x_min(), g.x_max());
    const double y = rng.uniform(g.y_min(), g.y_max());
    const CellCoord cc = g.world_to_cell(x, y);
    const WorldPoint p = g.cell_to_world(cc.row, cc.col);
    EXPECT_NEAR(p.x, x, 1e-9);
    EXPECT_NEAR(p.y, y, 1e-9);
    const CellCoord back = g.world_to_cell(p.x, p.y);
    EXPECT_NEAR(back.row, cc.row, 1e-9);
    EXPECT_NEAR(back.col, cc.col, 1e-9);
  }
}

TEST(BevGrid, RejectsDegenerateGrids) {
  EXPECT_THROW(BevGrid(0, 4, 0, 1, 0, 1), std::invalid_argument);
  EXPECT_THROW(BevGrid(4, 0, 0, 1, 0, 1), std::invalid_argument);
  EXPECT_THROW(BevGrid(4, 4, 1, 1, 0, 1), std::invalid_argument);
  EXPECT_THROW(BevGrid(4, 4, 0, 1, 2, 1), std::invalid_argument);
}

TEST(BevGrid, OutOfBoundsGivesFractionalCoordinates) {
  const BevGrid g(10, 10, 0.0, 10.0, 0.0, 10.0);
  auto c = g.world_to_cell(-1.5, 12.5);
  EXPECT_NEAR(c.col, -2.0, 1e-12);
  EXPECT_NEAR(c.row, 12.0, 1e-12);
  EXPECT_FALSE(g.contains(-1.5, 12.5));
}

TEST(NormalizeYaw, Examples) {
  EXPECT_EQ(normalize_yaw(0.0), 0.0);
  EXPECT_DOUBLE_EQ(normalize_yaw(kPi), -kPi);
  EXPECT_DOUBLE_EQ(normalize_yaw(3.0 * kPi), -kPi);
  EXPECT_DOUBLE_EQ(normalize_yaw(-kPi), -kPi);
  EXPECT_THROW(normalize_yaw(std::nan("")), std::invalid_argument);
  EXPECT_THROW(normalize_yaw(INFINITY), std::invalid_argument);
}

TEST(NormalizeYaw, RangeAndCongruenceProperty) {
  Rng rng(11);
  for (int i = 0; i < 1000; ++i) {
    const double t = rng.uniform(-50.0, 50.0);
    const double y = normalize_yaw(t);
    EXPECT_GE(y, -kPi);
    EXPECT_LT(y, kPi);
    const double k = (t - y) / (2.0 * kPi);
    EXPECT_NEAR(k, std::round(k), 1e-9);
  }
}

TEST(BevBox, ValidationAndArrayRoundTrip) {
  const BevBox b = BevBox::make(1, 2, 0.5, 1.8, 4.2, 1.5, 4.0, 0.3, -0.2, 2);
  EXPECT_LT(b.yaw, kPi);
  EXPECT_NO_THROW(b.validate());
  EXPECT_EQ(BevBox::from_array(b.to_array()), b);
  EXPECT_THROW(BevBox::make(0, 0, 0, 0.0, 1, 1, 0, 0, 0, 0), std::invalid_argument);
  BevBox bad = b;
  bad.class_id = 4;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
}

TEST(BevBox, NormalizedVector) {
  const BevBox b = BevBox::make(8, -16, 1, 2, 4, 1.5, kPi / 2, 0, 0, 0);
  const auto v = normalized_box_vector(b, 64.0);
  EXPECT_DOUBLE_EQ(v[0], 0.125);
  EXPECT_DOUBLE_EQ(v[1], -0.25);
  EXPECT_DOUBLE_EQ(v[4], 4.0 / 64.0);
  EXPECT_NEAR(v[6], 1.0, 1e-15);
  EXPECT_NEAR(v[7], 0.0, 1e-15);
}

TEST(ClassDistribution, RejectsInvalidVectors) {
  EXPECT_NO_THROW(ClassDistribution({0.25, 0.25, 0.5}));
  EXPECT_THROW(ClassDistribution({0.5, 0.6}), std::invalid_argument);
  EXPECT_THROW(ClassDistribution({1.2, -0.2}), std::invalid_argument);
  EXPECT_THROW(ClassDistribution({}), std::invalid_argument);
  EXPECT_NO_THROW(ClassDistribution({0.5, 0.5 + 5e-7}));
}

TEST(ClassDistribution, ArgmaxAndForeground) {
  const ClassDistribution d({0.1, 0.3, 0.2, 0.4});
  EXPECT_EQ(d.argmax(), 3u);
  EXPECT_EQ(d.argmax_foreground(3), 1u);
  EXPECT_DOUBLE_EQ(d.max_foreground(3), 0.3);
  EXPECT_EQ(ClassDistribution::one_hot(4, 2).probs(), (std::vector<double>{0, 0, 1, 0}));
}

TEST(PredictionSet, RequiresEqualLengths) {
  PredictionSet p;
  p.boxes.push_back(BevBox{});
  p.class_dists.push_back(ClassDistribution::one_hot(5, 0));
  p.embeddings.push_back({1.0, 2.0});
  EXPECT_THROW(p.validate(), std::invalid_argument);
  p.reference_points.push_back({0, 0});
  EXPECT_NO_THROW(p.validate());
  p.boxes.push_back(BevBox{});
  p.class_dists.push_back(ClassDistribution::one_hot(5, 0));
  p.embeddings.push_back({1.0});
  p.reference_points.push_back({0, 0});
  EXPECT_THROW(p.validate(), std::invalid_argument);
}

TEST(FeatureMap, ShapeAndFiniteness) {
  Tape tape;
  const BevGrid g(2, 3, 0, 3, 0, 2);
  FeatureMap m(g, tape.constant(Tensor({2, 3, 4}, 1.0)));
  EXPECT_EQ(m.channels, 4u);
  EXPECT_EQ(m.cells().shape(), (Shape{6, 4}));
  EXPECT_THROW(FeatureMap(g, tape.constant(Tensor({3, 2, 4}))), std::invalid_argument);
  Tensor bad({2, 3, 1}, 0.0);
  bad.data[3] = std::nan("");
  EXPECT_THROW(FeatureMap(g, tape.constant(bad)), std::invalid_argument);
}

TEST(DistillConfig, DefaultsAndRanges) {
  const DistillConfig c;
  EXPECT_EQ(c.sigma, 2.0);
  EXPECT_EQ(c.gamma, 0.5);
  EXPECT_EQ(c.alpha, 1.0);
  EXPECT_EQ(c.beta, 0.25);
  EXPECT_EQ(c.tau, 0.07);
  EXPECT_EQ(c.lambda_feat, 1.0);
  EXPECT_TRUE(c.include_positive_in_denominator);
  EXPECT_TRUE(c.use_contrastive_cls);
  EXPECT_NO_THROW(c.validate());
  for (auto mutate : std::vector<void (*)(DistillConfig&)>{
           [](DistillConfig& d) { d.sigma = 0; }, [](DistillConfig& d) { d.gamma = 1.5; },
           [](DistillConfig& d) { d.alpha = -1; }, [](DistillConfig& d) { d.beta = -0.1; },
           [](DistillConfig& d) { d.tau = 0; }, [](DistillConfig& d) { d.lambda_feat = -2; }}) {
    DistillConfig d;
    mutate(d);
    EXPECT_THROW(d.validate(), std::invalid_argument);
  }
}

TEST(Rng, StateRoundTripAndDeterminism) {
  Rng a(42);
  for (int i = 0; i < 10; ++i) a.normal();
  const std::string s = a.state();
  Rng b(0);
  b.set_state(s);
  for (int i = 0; i < 20; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
  Rng c(5), d(5);
  std::vector<int> v1{1, 2, 3, 4, 5, 6}, v2 = v1;
  c.shuffle(v1);
  d.shuffle(v2);
  EXPECT_EQ(v1, v2);
  EXPECT_THROW(b.set_state("garbage"), std::invalid_argument);
}

}  // namespace
}  // namespace bevkd
