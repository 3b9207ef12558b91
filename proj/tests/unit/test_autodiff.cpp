#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <numeric>

#include "bevkd/autodiff.hpp"
#include "bevkd/grid.hpp"
#include "bevkd/rng.hpp"
#include "gradcheck.hpp"

namespace bevkd {
namespace {

using testing::check_gradients;
using testing::kFdTolerance;
using testing::random_tensor;

// Contracts any output with fixed random weights so every element matters.
Var contract(Tape&, const Var& out, std::uint64_t seed) {
  Rng rng(seed);
  Tensor w = random_tensor(rng, out.shape());
  return ad::sum(ad::mul_const(out, w));
}

// Entries with magnitude in [0.05, 1] and random sign: keeps kinked ops away
// from their kink.
Tensor away_from_zero(Rng& rng, Shape shape) {
  Tensor t(std::move(shape));
  for (auto& v : t.data) v = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.05, 1.0);
  return t;
}

struct OpCase {
  const char* name;
  std::function<std::vector<Tensor>(Rng&)> inputs;
  std::function<Var(Tape&, const std::vector<Var>&)> build;
};

std::vector<OpCase> op_cases() {
  auto two = [](Shape s) {
    return [s](Rng& r) { return std::vector<Tensor>{random_tensor(r, s), random_tensor(r, s)}; };
  };
  auto one = [](Shape s, double lo = -1.0, double hi = 1.0) {
    return [s, lo, hi](Rng& r) { return std::vector<Tensor>{random_tensor(r, s, lo, hi)}; };
  };
  auto one_kinked = [](Shape s) { return [s](Rng& r) { return std::vector<Tensor>{away_from_zero(r, s)}; }; };
  return {
      {"add", two({3, 4}), [](Tape& t, auto& v) { return contract(t, ad::add(v[0], v[1]), 1); }},
      {"sub", two({3, 4}), [](Tape& t, auto& v) { return contract(t, ad::sub(v[0], v[1]), 2); }},
      {"mul", two({3, 4}), [](Tape& t, auto& v) { return contract(t, ad::mul(v[0], v[1]), 3); }},
      {"scale", one({5}), [](Tape& t, auto& v) { return contract(t, ad::scale(v[0], -2.5), 4); }},
      {"add_scalar", one({5}), [](Tape& t, auto& v) { return contract(t, ad::add_scalar(v[0], 3.0), 5); }},
      {"exp", one({2, 3}), [](Tape& t, auto& v) { return contract(t, ad::exp(v[0]), 6); }},
      {"log", one({2, 3}, 0.2, 2.0), [](Tape& t, auto& v) { return contract(t, ad::log(v[0]), 7); }},
      {"log_clamped", one({2, 3}, 0.2, 2.0),
       [](Tape& t, auto& v) { return contract(t, ad::log_clamped(v[0], 1e-12), 8); }},
      {"abs", one_kinked({2, 3}), [](Tape& t, auto& v) { return contract(t, ad::abs(v[0]), 9); }},
      {"relu", one_kinked({2, 3}), [](Tape& t, auto& v) { return contract(t, ad::relu(v[0]), 10); }},
      {"sigmoid", one({2, 3}, -3.0, 3.0), [](Tape& t, auto& v) { return contract(t, ad::sigmoid(v[0]), 11); }},
      {"mul_const", one({4}),
       [](Tape&, auto& v) { return ad::sum(ad::mul_const(v[0], Tensor({4}, {1.5, -2.0, 0.25, 3.0}))); }},
      {"add_const", one({4}),
       [](Tape& t, auto& v) { return contract(t, ad::add_const(v[0], Tensor({4}, {1.0, 2.0, 3.0, 4.0})), 12); }},
      {"sum", one({3, 2}), [](Tape&, auto& v) { return ad::sum(ad::mul(v[0], v[0])); }},
      {"mean", one({3, 2}), [](Tape&, auto& v) { return ad::mean(ad::exp(v[0])); }},
      {"dot", two({6}), [](Tape&, auto& v) { return ad::dot(v[0], v[1]); }},
      {"sum_scalars", two({1}),
       [](Tape& t, auto& v) {
         std::vector<Var> terms{ad::mul(v[0], v[1]), ad::exp(v[0]), t.constant(Tensor::scalar(2.0))};
         return ad::sum_scalars(t, terms);
       }},
      {"matmul", [](Rng& r) { return std::vector<Tensor>{random_tensor(r, {3, 4}), random_tensor(r, {4, 2})}; },
       [](Tape& t, auto& v) { return contract(t, ad::matmul(v[0], v[1]), 13); }},
      {"add_row_bias", [](Rng& r) { return std::vector<Tensor>{random_tensor(r, {3, 4}), random_tensor(r, {4})}; },
       [](Tape& t, auto& v) { return contract(t, ad::add_row_bias(v[0], v[1]), 14); }},
      {"softmax_rows", one({3, 5}, -3.0, 3.0),
       [](Tape& t, auto& v) { return contract(t, ad::softmax_rows(v[0]), 15); }},
      {"log_softmax_rows", one({3, 5}, -3.0, 3.0),
       [](Tape& t, auto& v) { return contract(t, ad::log_softmax_rows(v[0]), 16); }},
      {"row_l2_norm", one({4, 3}), [](Tape& t, auto& v) { return contract(t, ad::row_l2_norm(v[0]), 17); }},
      {"normalize_rows", one({4, 3}), [](Tape& t, auto& v) { return contract(t, ad::normalize_rows(v[0]), 18); }},
      {"concat_cols", [](Rng& r) { return std::vector<Tensor>{random_tensor(r, {3, 2}), random_tensor(r, {3, 4})}; },
       [](Tape& t, auto& v) { return contract(t, ad::concat_cols(v[0], v[1]), 19); }},
      {"slice_cols", one({3, 5}), [](Tape& t, auto& v) { return contract(t, ad::slice_cols(v[0], 1, 4), 20); }},
      {"gather_rows", one({4, 3}),
       [](Tape& t, auto& v) {
         std::vector<std::size_t> rows{2, 0, 2};
         return contract(t, ad::gather_rows(v[0], rows), 21);
       }},
      {"element", one({3, 3}), [](Tape&, auto& v) { return ad::exp(ad::element(v[0], 1, 2)); }},
      {"reshape", one({2, 6}), [](Tape& t, auto& v) { return contract(t, ad::reshape(v[0], {3, 4}), 22); }},
      {"transpose", one({2, 5}), [](Tape& t, auto& v) { return contract(t, ad::transpose(v[0]), 23); }},
      {"conv2d",
       [](Rng& r) {
         return std::vector<Tensor>{random_tensor(r, {5, 4, 2}), random_tensor(r, {3, 3, 2, 3}),
                                    random_tensor(r, {3})};
       },
       [](Tape& t, auto& v) { return contract(t, ad::conv2d(v[0], v[1], v[2], 1), 24); }},
      {"conv2d_dilated",
       [](Rng& r) {
         return std::vector<Tensor>{random_tensor(r, {5, 5, 2}), random_tensor(r, {3, 3, 2, 2}),
                                    random_tensor(r, {2})};
       },
       [](Tape& t, auto& v) { return contract(t, ad::conv2d(v[0], v[1], v[2], 2), 25); }},
      {"bilinear_sample", one({4, 5, 3}),
       [](Tape& t, auto& v) {
         const BevGrid grid(4, 5, 0.0, 5.0, 0.0, 4.0);
         const std::vector<std::pair<double, double>> pts{{1.3, 2.2}, {0.1, 3.9}, {4.7, 0.6}, {9.0, -3.0}};
         return contract(t, ad::bilinear_sample(v[0], grid, pts), 26);
       }},
      {"contrastive_rows", one({4, 4}, -3.0, 3.0),
       [](Tape& t, auto& v) { return contract(t, ad::contrastive_rows(v[0], true), 27); }},
      {"contrastive_rows_excl", one({4, 4}, -3.0, 3.0),
       [](Tape& t, auto& v) { return contract(t, ad::contrastive_rows(v[0], false), 28); }},
      {"focal_heatmap_loss", one({3, 4, 1}, -4.0, 4.0),
       [](Tape&, auto& v) {
         const Tensor target({3, 4, 1}, {1.0, 0.6, 0.1, 0.0, 0.0, 0.9, 1.0, 0.3, 0.0, 0.0, 0.05, 0.7});
         return ad::focal_heatmap_loss(v[0], target);
       }},
  };
}

TEST(Autodiff, EveryOpMatchesFiniteDifferencesOn100Inputs) {
  for (const auto& op : op_cases()) {
    Rng rng(mix_seed(1234, std::hash<std::string>{}(op.name)));
    for (int trial = 0; trial < 100; ++trial) {
      const auto res = check_gradients(op.build, op.inputs(rng));
      ASSERT_LE(res.max_rel_error, kFdTolerance) << op.name << " trial " << trial << ": " << res.describe();
    }
  }
}

TEST(Autodiff, ConstantsReceiveNoGradient) {
  Tape tape;
  Var a = tape.leaf(Tensor({2}, {1.0, 2.0}));
  Var c = tape.constant(Tensor({2}, {3.0, 4.0}));
  Var loss = ad::dot(a, c);
  EXPECT_TRUE(loss.requires_grad());
  tape.backward(loss);
  EXPECT_EQ(a.grad(), (std::vector<double>{3.0, 4.0}));
  EXPECT_TRUE(c.grad().empty());
}

TEST(Autodiff, BackwardTwiceGivesSameGradients) {
  Tape tape;
  Var a = tape.leaf(Tensor({3}, {0.5, -1.0, 2.0}));
  Var loss = ad::sum(ad::exp(a));
  tape.backward(loss);
  const auto g1 = a.grad();
  tape.backward(loss);
  EXPECT_EQ(g1, a.grad());
}

TEST(Autodiff, SoftmaxRowsSumToOne) {
  Tape tape;
  Var s = ad::softmax_rows(tape.constant(Tensor({2, 3}, {1000.0, 0.0, -1000.0, 0.1, 0.2, 0.3})));
  for (std::size_t r = 0; r < 2; ++r) {
    double total = 0.0;
    for (std::size_t c = 0; c < 3; ++c) total += s.value().data[r * 3 + c];
    EXPECT_NEAR(total, 1.0, 1e-12);
  }
  EXPECT_DOUBLE_EQ(s.value().data[0], 1.0);
}

TEST(Autodiff, NormalizeRowsUnitLengthAndZeroRowConvention) {
  Tape tape;
  Var n = ad::normalize_rows(tape.constant(Tensor({2, 3}, {3.0, 4.0, 0.0, 0.0, 0.0, 0.0})));
  EXPECT_EQ(n.value().data, (std::vector<double>{0.6, 0.8, 0.0, 1.0, 0.0, 0.0}));
}

TEST(Autodiff, Conv2dHandComputedValue) {
  Tape tape;
  // 3x3 single-channel input, 3x3 all-ones kernel: center output sums all inputs.
  Tensor in({3, 3, 1});
  std::iota(in.data.begin(), in.data.end(), 1.0);
  Var out = ad::conv2d(tape.constant(in), tape.constant(Tensor({3, 3, 1, 1}, 1.0)),
                       tape.constant(Tensor({1}, 0.5)));
  EXPECT_DOUBLE_EQ(out.value().data[4], 45.5);
  EXPECT_DOUBLE_EQ(out.value().data[0], 1.0 + 2.0 + 4.0 + 5.0 + 0.5);
}

TEST(Autodiff, BilinearSampleExactAtCentersAndMidpoint) {
  Tape tape;
  const BevGrid grid(2, 2, 0.0, 2.0, 0.0, 2.0);
  // cells (0,0)=0 (0,1)=0 (1,0)=4 (1,1)=4
  Var map = tape.constant(Tensor({2, 2, 1}, {0.0, 0.0, 4.0, 4.0}));
  const std::vector<std::pair<double, double>> pts{{0.5, 1.5}, {1.0, 1.0}, {-50.0, 50.0}};
  Var s = ad::bilinear_sample(map, grid, pts);
  EXPECT_DOUBLE_EQ(s.value().data[0], 4.0);
  EXPECT_DOUBLE_EQ(s.value().data[1], 2.0);
  EXPECT_DOUBLE_EQ(s.value().data[2], 4.0);
}

TEST(Autodiff, FocalHeatmapLossHandValues) {
  Tape t;
  // Logit 0 gives p = 1/2: a positive costs (1/2)^2 ln 2, a plain negative the same.
  const Var x = t.constant(Tensor({2}, {0.0, 0.0}));
  EXPECT_NEAR(ad::focal_heatmap_loss(x, Tensor({2}, {1.0, 0.0})).item(), 0.5 * std::log(2.0), 1e-15);
  // Negative at target 0.5 is damped by (1 - 0.5)^4; no positives means divide by 1.
  EXPECT_NEAR(ad::focal_heatmap_loss(x, Tensor({2}, {0.5, 0.0})).item(), (1.0 / 16 + 1) * 0.25 * std::log(2.0),
              1e-15);
  // Large logits stay finite.
  const Var big = t.constant(Tensor({2}, {800.0, -800.0}));
  EXPECT_TRUE(std::isfinite(ad::focal_heatmap_loss(big, Tensor({2}, {0.0, 1.0})).item()));
  EXPECT_THROW(ad::focal_heatmap_loss(x, Tensor({3}, 0.0)), std::invalid_argument);
}

TEST(Autodiff, RejectsShapeMismatches) {
  Tape tape;
  Var a = tape.leaf(Tensor({2, 3}));
  Var b = tape.leaf(Tensor({3, 2}));
  EXPECT_THROW(ad::add(a, b), std::invalid_argument);
  EXPECT_THROW(ad::matmul(a, a), std::invalid_argument);
  EXPECT_THROW(tape.backward(a), std::invalid_argument);
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1.0}), std::invalid_argument);
}

}  // namespace
}  // namespace bevkd
