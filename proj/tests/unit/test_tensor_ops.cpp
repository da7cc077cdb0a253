#include <gtest/gtest.h>

#include <cmath>
#include <algorithm>
#include <functional>
#include <numeric>
#include <random>

#include "ctscan/ops.hpp"
#include "ctscan/tensor.hpp"
#include "support/test_support.hpp"

using namespace ctscan;
using testing_support::check_gradients;
using testing_support::random_like;

namespace {

using TD = Tensor<double>;

TD make(Shape s, std::vector<double> v, bool rg = false) { return TD::from(std::move(s), std::move(v), rg); }

std::vector<double> values(const TD& t) { return {t.data().begin(), t.data().end()}; }

// Reduce y to a scalar through fixed random weights so every output element
// contributes a distinct coefficient.
TD project(const TD& y, const TD& r) { return sum(mul(y, r)); }

constexpr int kTrials = 100;
constexpr double kOpTolerance = 1e-5;

std::size_t dim(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

}  // namespace

TEST(Tensor, RejectsShapeMismatchAndZeroDims) {
  EXPECT_THROW(make({2, 2}, {1, 2, 3}), DimensionError);
  EXPECT_THROW(make({0, 2}, {}), DimensionError);
}

TEST(Tensor, GradBufferPresentOnlyWhenRequested) {
  auto a = make({2}, {1, 2}, true);
  auto b = make({2}, {1, 2}, false);
  EXPECT_TRUE(a.has_grad());
  EXPECT_FALSE(b.has_grad());
}

TEST(Matmul, HandExample) {
  auto c = matmul(make({2, 2}, {1, 2, 3, 4}), make({2, 2}, {5, 6, 7, 8}));
  EXPECT_EQ(values(c), (std::vector<double>{19, 22, 43, 50}));
}

TEST(Matmul, IdentityLeavesInputUnchanged) {
  std::mt19937_64 rng(1);
  auto a = random_like({3, 4}, rng);
  std::vector<double> eye(16, 0.0);
  for (int i = 0; i < 4; ++i) eye[i * 5] = 1.0;
  EXPECT_EQ(values(matmul(a, make({4, 4}, eye))), values(a));
}

TEST(Matmul, InnerDimensionMismatch) {
  EXPECT_THROW(matmul(make({2, 3}, std::vector<double>(6, 1)), make({2, 2}, std::vector<double>(4, 1))), DimensionError);
}

TEST(Matmul, GradientOfSumIsOnesTimesBTransposed) {
  std::mt19937_64 rng(2);
  auto a = random_like({3, 4}, rng, -1, 1, true);
  auto b = random_like({4, 2}, rng);
  backward(sum(matmul(a, b)));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t t = 0; t < 4; ++t) EXPECT_NEAR(a.grad()[i * 4 + t], b[t * 2] + b[t * 2 + 1], 1e-12);
  auto r = check_gradients([&] { return sum(matmul(a, b)); }, {a});
  EXPECT_LE(r.worst, 1e-6) << r.where;
}

TEST(Matmul, FiniteDifferenceTrials) {
  std::mt19937_64 rng(3);
  for (int t = 0; t < kTrials; ++t) {
    const std::size_t m = dim(rng, 1, 4), k = dim(rng, 1, 4), n = dim(rng, 1, 4);
    auto a = random_like({m, k}, rng, -1, 1, true);
    auto b = random_like({k, n}, rng, -1, 1, true);
    auto r = random_like({m, n}, rng);
    auto res = check_gradients([&] { return project(matmul(a, b), r); }, {a, b});
    ASSERT_LE(res.worst, kOpTolerance) << "trial " << t << " " << res.where;
  }
}

TEST(Bmm, FiniteDifferenceTrialsBothLayouts) {
  std::mt19937_64 rng(4);
  for (int t = 0; t < kTrials; ++t) {
    const bool tb = t % 2 == 1;
    const std::size_t g = dim(rng, 1, 3), m = dim(rng, 1, 3), k = dim(rng, 1, 3), n = dim(rng, 1, 3);
    auto a = random_like({g, m, k}, rng, -1, 1, true);
    auto b = random_like(tb ? Shape{g, n, k} : Shape{g, k, n}, rng, -1, 1, true);
    auto r = random_like({g, m, n}, rng);
    auto res = check_gradients([&] { return project(bmm(a, b, tb), r); }, {a, b});
    ASSERT_LE(res.worst, kOpTolerance) << "trial " << t << " " << res.where;
  }
}

TEST(Softmax, UniformOnEqualInputs) {
  auto y = softmax(make({3}, {0, 0, 0}), 0);
  for (double v : y.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(Softmax, KnownValues) {
  auto y = softmax(make({3}, {1, 2, 3}), 0);
  EXPECT_NEAR(y[0], 0.09003, 1e-5);
  EXPECT_NEAR(y[1], 0.24473, 1e-5);
  EXPECT_NEAR(y[2], 0.66524, 1e-5);
}

TEST(Softmax, ShiftInvariant) {
  auto a = softmax(make({4}, {0.3, -1.2, 2.0, 0.0}), 0);
  auto b = softmax(make({4}, {100.3, 98.8, 102.0, 100.0}), 0);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

TEST(Softmax, RowsSumToOneForLargeInputs) {
  std::mt19937_64 rng(5);
  for (int t = 0; t < 200; ++t) {
    auto x = random_like({3, 5, 4}, rng, -500, 500);
    for (std::size_t axis = 0; axis < 3; ++axis) {
      auto y = softmax(x, axis);
      const Shape& s = y.shape();
      const std::size_t stride = axis == 2 ? 1 : axis == 1 ? s[2] : s[1] * s[2];
      for (std::size_t i = 0; i < y.numel(); ++i) {
        if ((i / stride) % s[axis] != 0) continue;
        double total = 0.0;
        for (std::size_t j = 0; j < s[axis]; ++j) total += y[i + j * stride];
        ASSERT_NEAR(total, 1.0, 1e-9);
      }
    }
  }
}

TEST(Softmax, FiniteDifferenceTrials) {
  std::mt19937_64 rng(6);
  for (int t = 0; t < kTrials; ++t) {
    const Shape s{dim(rng, 1, 3), dim(rng, 2, 4), dim(rng, 1, 3)};
    const std::size_t axis = dim(rng, 0, 2);
    auto x = random_like(s, rng, -2, 2, true);
    auto r = random_like(s, rng);
    auto res = check_gradients([&] { return project(softmax(x, axis), r); }, {x});
    ASSERT_LE(res.worst, kOpTolerance) << "trial " << t << " " << res.where;
  }
}

TEST(LeakyRelu, Definition) {
  auto y = leaky_relu(make({3}, {2, -3, 0}), 0.01);
  EXPECT_DOUBLE_EQ(y[0], 2.0);
  EXPECT_DOUBLE_EQ(y[1], -0.03);
  EXPECT_DOUBLE_EQ(y[2], 0.0);
}

TEST(LeakyRelu, SlopeOneIsIdentity) {
  std::mt19937_64 rng(7);
  auto x = random_like({10}, rng, -5, 5);
  EXPECT_EQ(values(leaky_relu(x, 1.0)), values(x));
}

TEST(LeakyRelu, SubgradientAtZeroIsOne) {
  auto x = make({1}, {0.0}, true);
  backward(sum(leaky_relu(x, 0.01)));
  EXPECT_DOUBLE_EQ(x.grad()[0], 1.0);
}

TEST(LeakyRelu, RejectsSlopeOutsideRange) {
  EXPECT_THROW(leaky_relu(make({1}, {1.0}), 0.0), ParameterError);
  EXPECT_THROW(leaky_relu(make({1}, {1.0}), 1.5), ParameterError);
}

TEST(LeakyRelu, FiniteDifferenceTrialsAwayFromZero) {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> mag(0.05, 2.0);
  for (int t = 0; t < kTrials; ++t) {
    const std::size_t n = dim(rng, 1, 8);
    std::vector<double> v(n);
    for (double& x : v) x = (rng() & 1 ? 1 : -1) * mag(rng);
    auto x = make({n}, v, true);
    auto r = random_like({n}, rng);
    auto res = check_gradients([&] { return project(leaky_relu(x, 0.01), r); }, {x});
    ASSERT_LE(res.worst, kOpTolerance) << "trial " << t;
  }
}

TEST(LayerNorm, ConstantRowMapsToBias) {
  auto y = layer_norm(make({3}, {5, 5, 5}), make({3}, {1, 1, 1}), make({3}, {0, 0, 0}));
  for (double v : y.data()) EXPECT_DOUBLE_EQ(v, 0.0);
}

TEST(LayerNorm, PopulationVariance) {
  auto y = layer_norm(make({2}, {1, 3}), make({2}, {1, 1}), make({2}, {0, 0}));
  EXPECT_NEAR(y[0], -1.0, 1e-5);
  EXPECT_NEAR(y[1], 1.0, 1e-5);
}

TEST(LayerNorm, FiniteDifferenceTrials) {
  std::mt19937_64 rng(9);
  for (int t = 0; t < kTrials; ++t) {
    const std::size_t rows = dim(rng, 1, 3), d = dim(rng, 2, 6);
    auto x = random_like({rows, d}, rng, -2, 2, true);
    auto g = random_like({d}, rng, 0.5, 1.5, true);
    auto b = random_like({d}, rng, -0.5, 0.5, true);
    auto r = random_like({rows, d}, rng);
    auto res = check_gradients([&] { return project(layer_norm(x, g, b), r); }, {x, g, b});
    ASSERT_LE(res.worst, kOpTolerance) << "trial " << t << " " << res.where;
  }
}

TEST(Conv2d, OneByOneIdentityKernel) {
  std::mt19937_64 rng(10);
  auto x = random_like({1, 5, 5}, rng);
  auto y = conv2d(x, make({1, 1, 1, 1}, {1.0}), TD{}, 1, 0);
  EXPECT_EQ(y.shape(), (Shape{1, 5, 5}));
  EXPECT_EQ(values(y), values(x));
}

TEST(Conv2d, AllOnesCounts) {
  auto y = conv2d(make({1, 3, 3}, std::vector<double>(9, 1.0)), make({1, 1, 3, 3}, std::vector<double>(9, 1.0)), TD{}, 1, 0);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 1}));
  EXPECT_DOUBLE_EQ(y[0], 9.0);
}

TEST(Conv2d, KernelLargerThanPaddedInput) {
  EXPECT_THROW(conv2d(make({1, 2, 2}, std::vector<double>(4, 1.0)), make({1, 1, 3, 3}, std::vector<double>(9, 1.0)), TD{}, 1, 0),
               DimensionError);
}

TEST(Conv2d, OutputSizeFormula) {
  auto y = conv2d(TD::zeros({2, 1, 64, 64}), TD::zeros({8, 1, 3, 3}), TD::zeros({8}), 2, 1);
  EXPECT_EQ(y.shape(), (Shape{2, 8, 32, 32}));
}

TEST(Conv2d, GradientOnTwoChannelFiveByFive) {
  std::mt19937_64 rng(11);
  auto x = random_like({2, 5, 5}, rng, -1, 1, true);
  auto k = random_like({3, 2, 3, 3}, rng, -1, 1, true);
  auto b = random_like({3}, rng, -1, 1, true);
  auto r = random_like({3, 5, 5}, rng);
  auto res = check_gradients([&] { return project(conv2d(x, k, b, 1, 1), r); }, {x, k, b});
  EXPECT_LE(res.worst, 1e-6) << res.where;
}

TEST(Conv2d, FiniteDifferenceTrials) {
  std::mt19937_64 rng(12);
  for (int t = 0; t < kTrials; ++t) {
    const std::size_t n = dim(rng, 1, 2), ci = dim(rng, 1, 2), co = dim(rng, 1, 3);
    const std::size_t h = dim(rng, 3, 6), w = dim(rng, 3, 6), stride = dim(rng, 1, 2), pad = dim(rng, 0, 1);
    auto x = random_like({n, ci, h, w}, rng, -1, 1, true);
    auto k = random_like({co, ci, 3, 3}, rng, -1, 1, true);
    auto b = random_like({co}, rng, -1, 1, true);
    const Shape out = conv2d(x, k, b, stride, pad).shape();
    auto r = random_like(out, rng);
    auto res = check_gradients([&] { return project(conv2d(x, k, b, stride, pad), r); }, {x, k, b});
    ASSERT_LE(res.worst, kOpTolerance) << "trial " << t << " " << res.where;
  }
}

TEST(CrossEntropy, UniformLogits) {
  EXPECT_NEAR(cross_entropy(make({1, 2}, {0, 0}), {0}).item(), std::log(2.0), 1e-12);
}

TEST(CrossEntropy, SaturatedLogitsStayFinite) {
  const double l = cross_entropy(make({1, 2}, {1000, -1000}), {0}).item();
  EXPECT_TRUE(std::isfinite(l));
  EXPECT_NEAR(l, 0.0, 1e-12);
}

TEST(CrossEntropy, GradientIsSoftmaxMinusOnehot) {
  std::mt19937_64 rng(13);
  for (int t = 0; t < kTrials; ++t) {
    const std::size_t n = dim(rng, 1, 5);
    auto z = random_like({n, 2}, rng, -3, 3, true);
    std::vector<int> y(n);
    for (int& v : y) v = static_cast<int>(rng() & 1);
    backward(cross_entropy(z, y));
    for (std::size_t i = 0; i < n; ++i) {
      const double e0 = std::exp(z[i * 2]), e1 = std::exp(z[i * 2 + 1]);
      for (int j = 0; j < 2; ++j) {
        const double p = (j == 0 ? e0 : e1) / (e0 + e1);
        ASSERT_NEAR(z.grad()[i * 2 + j], (p - (y[i] == j ? 1.0 : 0.0)) / static_cast<double>(n), 1e-12);
      }
    }
    auto res = check_gradients([&] { return cross_entropy(z, y); }, {z});
    ASSERT_LE(res.worst, kOpTolerance);
  }
}

TEST(ElementwiseAndShapeOps, FiniteDifferenceTrials) {
  std::mt19937_64 rng(14);
  for (int t = 0; t < kTrials; ++t) {
    const std::size_t a0 = dim(rng, 1, 3), a1 = dim(rng, 2, 4), a2 = dim(rng, 1, 3);
    auto x = random_like({a0, a1, a2}, rng, -1, 1, true);
    auto y = random_like({a0, a1, a2}, rng, -1, 1, true);
    auto bias = random_like({a2}, rng, -1, 1, true);
    auto col = random_like({a1, 1}, rng, -1, 1, true);
    auto r = random_like({a0, a1, a2}, rng);
    struct Case {
      const char* name;
      std::function<TD()> f;
      std::vector<TD> leaves;
    };
    const std::size_t start = dim(rng, 0, a1 - 1);
    const std::size_t len = dim(rng, 1, a1 - start);
    auto rs = random_like({a0, len, a2}, rng);
    auto rp = random_like({a2, a0, a1}, rng);
    auto rm = random_like({a0, a2}, rng);
    const Case cases[] = {
        {"add", [&] { return project(add(x, y), r); }, {x, y}},
        {"add-broadcast-suffix", [&] { return project(add(x, bias), r); }, {x, bias}},
        {"add-broadcast-column", [&] { return project(add(x, col), r); }, {x, col}},
        {"mul", [&] { return project(mul(x, y), r); }, {x, y}},
        {"scale", [&] { return project(scale(x, 0.37), r); }, {x}},
        {"reshape", [&] { return project(reshape(x, {a0 * a1 * a2}), reshape(r, {a0 * a1 * a2})); }, {x}},
        {"permute", [&] { return project(permute(x, {2, 0, 1}), rp); }, {x}},
        {"slice", [&] { return project(slice(x, 1, start, len), rs); }, {x}},
        {"mean", [&] { return project(mean(x, 1), rm); }, {x}},
    };
    for (const auto& c : cases) {
      auto res = check_gradients(c.f, c.leaves);
      ASSERT_LE(res.worst, kOpTolerance) << c.name << " trial " << t << " " << res.where;
    }
  }
}

TEST(Linear, FiniteDifferenceTrials) {
  std::mt19937_64 rng(15);
  for (int t = 0; t < kTrials; ++t) {
    const std::size_t g = dim(rng, 1, 2), n = dim(rng, 1, 3), in = dim(rng, 1, 4), out = dim(rng, 1, 4);
    auto x = random_like({g, n, in}, rng, -1, 1, true);
    auto w = random_like({in, out}, rng, -1, 1, true);
    auto b = random_like({out}, rng, -1, 1, true);
    auto r = random_like({g, n, out}, rng);
    auto res = check_gradients([&] { return project(linear(x, w, b), r); }, {x, w, b});
    ASSERT_LE(res.worst, kOpTolerance) << "trial " << t;
  }
}

TEST(Backward, SumGivesOnes) {
  auto x = make({4}, {1, -2, 3, 0.5}, true);
  backward(sum(x));
  for (double g : x.grad()) EXPECT_DOUBLE_EQ(g, 1.0);
}

TEST(Backward, ParameterUsedTwiceAccumulatesBothPaths) {
  auto x = make({2}, {1.5, -0.5}, true);
  auto r1 = make({2}, {2.0, 3.0}), r2 = make({2}, {-1.0, 4.0});
  backward(add(sum(mul(x, r1)), sum(mul(x, r2))));
  EXPECT_DOUBLE_EQ(x.grad()[0], 1.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], 7.0);
}

TEST(Backward, GradientsAccumulateAcrossCalls) {
  auto x = make({1}, {2.0}, true);
  backward(sum(x));
  backward(sum(x));
  EXPECT_DOUBLE_EQ(x.grad()[0], 2.0);
  x.zero_grad();
  EXPECT_DOUBLE_EQ(x.grad()[0], 0.0);
}

TEST(Backward, UnusedParameterGradientStaysExactlyZero) {
  auto used = make({2}, {1, 2}, true);
  auto unused = make({2}, {3, 4}, true);
  backward(sum(mul(used, used)));
  EXPECT_EQ(unused.grad()[0], 0.0);
  EXPECT_EQ(unused.grad()[1], 0.0);
}

TEST(Backward, NonScalarLossIsAContractError) {
  auto x = make({2}, {1, 2}, true);
  EXPECT_THROW(backward(scale(x, 2.0)), ContractError);
}

TEST(Tape, TopologicalOrderVisitsEachNodeOnce) {
  auto x = make({2}, {1, 2}, true);
  auto y = mul(x, x);
  auto z = add(y, y);
  auto loss = sum(z);
  auto tape = Tape<double>::record(loss);
  const auto& nodes = tape.nodes();
  for (std::size_t i = 0; i < nodes.size(); ++i)
    for (const auto& in : nodes[i]->inputs) {
      const auto pos = std::find(nodes.begin(), nodes.end(), in.get()) - nodes.begin();
      EXPECT_LT(static_cast<std::size_t>(pos), i);
    }
  EXPECT_EQ(tape.count("mul"), 1u);
  EXPECT_EQ(tape.count("add"), 1u);
}

TEST(Forward, NonFiniteResultRaisesNumericError) {
  auto big = make({1}, {1e308});
  EXPECT_THROW(scale(big, 10.0), NumericError);
}

TEST(Forward, RepeatedEvaluationIsBitIdentical) {
  std::mt19937_64 rng(16);
  auto x = random_like({2, 3, 7, 7}, rng);
  auto k = random_like({4, 3, 3, 3}, rng);
  auto a = values(softmax(conv2d(x, k, TD{}, 2, 1), 1));
  auto b = values(softmax(conv2d(x, k, TD{}, 2, 1), 1));
  EXPECT_EQ(a, b);
}
