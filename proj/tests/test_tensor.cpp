#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "cct/grad_check.hpp"
#include "cct/ops.hpp"
#include "test_util.hpp"

namespace cct {
namespace {

using testing::make;
using testing::random_tensor;
using TD = Tensor<double>;
using GD = Graph<double>;

constexpr double kH = 1e-5;
constexpr double kTol = 1e-4;

TEST(Tensor, ShapeAndDataInvariants) {
  TD t({2, 3});
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_EQ(t.dim(-1), 3u);
  EXPECT_THROW(TD({2, 3}, std::vector<double>(5)), ShapeError);
  EXPECT_THROW(TD(Shape{2, 0}), ShapeError);
  EXPECT_EQ(t.grad().size(), t.numel());
}

TEST(Tensor, SerializationRoundTripIsBitExact) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    CounterRng r(seed, 9);
    Shape s;
    const auto rank = 1 + r.below(4);
    for (std::size_t i = 0; i < rank; ++i) s.push_back(1 + r.below(5));
    auto t = random_tensor<double>(s, seed, -1e6, 1e6);
    std::stringstream ss;
    write_tensor(ss, t);
    EXPECT_EQ(ss.str().size(), serialized_size(s, DType::f64));
    auto back = read_tensor<double>(ss, DType::f64);
    ASSERT_EQ(back.shape(), s);
    EXPECT_EQ(std::memcmp(back.data().data(), t.data().data(), t.numel() * sizeof(double)), 0);
  }
  auto f = random_tensor<float>({3, 2}, 4);
  std::stringstream ss;
  write_tensor(ss, f);
  auto bytes = ss.str();
  // rank then dims, little-endian u32
  EXPECT_EQ(static_cast<unsigned char>(bytes[0]), 2);
  EXPECT_EQ(static_cast<unsigned char>(bytes[4]), 3);
  EXPECT_EQ(static_cast<unsigned char>(bytes[8]), 2);
  EXPECT_EQ(bytes.size(), 12u + 6 * 4);
  auto back = read_tensor<float>(ss, DType::f32);
  EXPECT_EQ(back.vec(), f.vec());
}

TEST(Tensor, TruncatedPayloadThrows) {
  auto t = random_tensor<double>({4, 4}, 1);
  std::stringstream ss;
  write_tensor(ss, t);
  std::string s = ss.str();
  std::stringstream cut(s.substr(0, s.size() - 3));
  EXPECT_THROW(read_tensor<double>(cut, DType::f64), FormatError);
}

// ---------------------------------------------------------------- matmul

TEST(Matmul, Examples) {
  GD g(false);
  auto a = make({2, 2}, {1, 2, 3, 4});
  auto id = make({2, 2}, {1, 0, 0, 1});
  EXPECT_EQ(ops::matmul(g, id, a).vec(), a.vec());
  auto b = make({2, 2}, {5, 6, 7, 8});
  EXPECT_EQ(ops::matmul(g, a, b).vec(), (std::vector<double>{19, 22, 43, 50}));
  auto z = ops::matmul(g, TD::zeros({2, 3}), random_tensor({3, 4}, 3));
  EXPECT_EQ(z.shape(), (Shape{2, 4}));
  for (double v : z.data()) EXPECT_EQ(v, 0.0);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  GD g;
  try {
    ops::matmul(g, TD({2, 3}), TD({4, 2}));
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("[2,3]"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("[4,2]"), std::string::npos);
  }
  EXPECT_THROW(ops::matmul(g, TD({2, 2, 3}), TD({3, 3, 2})), ShapeError);
}

TEST(Matmul, IdentityIsExactForIntegerValues) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    CounterRng r(s, 0);
    const std::size_t n = 1 + r.below(6), m = 1 + r.below(6);
    TD a({n, m});
    for (auto& v : a.data()) v = static_cast<double>(static_cast<int>(r.below(200)) - 100);
    TD id({n, n});
    for (std::size_t i = 0; i < n; ++i) id[i * n + i] = 1;
    GD g(false);
    EXPECT_EQ(ops::matmul(g, id, a).vec(), a.vec());
  }
}

TEST(Matmul, GradientsAllBroadcastModes) {
  struct Case {
    Shape a, b;
  };
  for (const Case& c : {Case{{3, 4}, {4, 2}}, Case{{2, 3, 4}, {4, 5}}, Case{{2, 3, 4}, {2, 4, 2}},
                        Case{{3, 4}, {2, 4, 2}}, Case{{2, 2, 3, 4}, {2, 2, 4, 3}}}) {
    auto a = random_tensor(c.a, 11);
    auto b = random_tensor(c.b, 12);
    GD probe(false);
    auto out_shape = ops::matmul(probe, a, b).shape();
    auto mix = random_tensor(out_shape, 14);
    auto rep = grad_check<double>(
        [&](GD& g) { return ops::sum(g, ops::mul(g, ops::matmul(g, a, b), mix)); }, {a, b}, kH, kTol);
    EXPECT_TRUE(rep.passed) << shape_str(c.a) << "x" << shape_str(c.b) << " err " << rep.max_rel_error;
    EXPECT_EQ(rep.excluded, 0u);
  }
}

// ---------------------------------------------------------------- conv2d

TEST(Conv2d, Examples) {
  GD g(false);
  auto x = random_tensor({2, 3, 5, 4}, 1);
  // 1x1 identity kernel per channel
  TD k({3, 3, 1, 1});
  for (std::size_t c = 0; c < 3; ++c) k[c * 3 + c] = 1;
  EXPECT_EQ(ops::conv2d(g, x, k, TD(), 1, 0).vec(), x.vec());

  auto img = make({1, 1, 2, 2}, {1, 2, 3, 4});
  auto diag = make({1, 1, 2, 2}, {1, 0, 0, 1});
  auto y = ops::conv2d(g, img, diag, TD(), 1, 0);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_EQ(y[0], 5.0);

  auto zero = ops::conv2d(g, x, TD::zeros({4, 3, 3, 3}), TD(), 1, 1);
  for (double v : zero.data()) EXPECT_EQ(v, 0.0);
}

TEST(Conv2d, CrossCorrelationConvention) {
  GD g(false);
  // kernel [[1,2],[3,4]] over [[1,0],[0,0]] picks kernel(0,0), no flip
  auto img = make({1, 1, 2, 2}, {1, 0, 0, 0});
  auto k = make({1, 1, 2, 2}, {1, 2, 3, 4});
  EXPECT_EQ(ops::conv2d(g, img, k, TD(), 1, 0)[0], 1.0);
}

TEST(Conv2d, KernelLargerThanPaddedInputThrows) {
  GD g;
  EXPECT_THROW(ops::conv2d(g, TD({1, 1, 2, 2}), TD({1, 1, 5, 5}), TD(), 1, 1), ShapeError);
  EXPECT_NO_THROW(ops::conv2d(g, TD({1, 1, 2, 2}), TD({1, 1, 4, 4}), TD(), 1, 1));
}

TEST(Conv2d, OutputShapeFormulaSweep) {
  GD g(false);
  for (std::size_t H = 1; H <= 7; ++H)
    for (std::size_t W = 1; W <= 7; W += 2)
      for (std::size_t k = 1; k <= 4; ++k)
        for (std::size_t s = 1; s <= 3; ++s)
          for (std::size_t p = 0; p <= 2; ++p) {
            if (k > H + 2 * p || k > W + 2 * p) continue;
            auto y = ops::conv2d(g, TD({1, 2, H, W}, 1.0), TD({3, 2, k, k}, 1.0), TD(), s, p);
            EXPECT_EQ(y.dim(2), (H + 2 * p - k) / s + 1);
            EXPECT_EQ(y.dim(3), (W + 2 * p - k) / s + 1);
          }
}

TEST(Conv2d, GradientMatchesFiniteDifferences) {
  for (auto [s, p] : {std::pair<std::size_t, std::size_t>{1, 1}, {2, 0}, {2, 1}}) {
    auto x = random_tensor({2, 2, 5, 6}, 21);
    auto w = random_tensor({3, 2, 3, 3}, 22);
    auto b = random_tensor({3}, 23);
    GD probe(false);
    auto mix = random_tensor(ops::conv2d(probe, x, w, b, s, p).shape(), 24);
    auto rep = grad_check<double>(
        [&](GD& g) { return ops::sum(g, ops::mul(g, ops::conv2d(g, x, w, b, s, p), mix)); }, {x, w, b}, kH, kTol);
    EXPECT_TRUE(rep.passed) << rep.max_rel_error;
    EXPECT_EQ(rep.excluded, 0u);
  }
}

// ---------------------------------------------------------------- maxpool

TEST(Maxpool, Examples) {
  GD g(false);
  auto x = random_tensor({1, 2, 3, 3}, 5);
  EXPECT_EQ(ops::maxpool2d(g, x, 1, 1).vec(), x.vec());
  auto y = ops::maxpool2d(g, make({1, 1, 2, 2}, {1, 2, 3, 4}), 2, 2);
  EXPECT_EQ(y.vec(), std::vector<double>{4});
  EXPECT_THROW(ops::maxpool2d(g, TD({1, 1, 2, 2}), 3, 1), ShapeError);
}

TEST(Maxpool, TieRoutesGradientToFirstOccurrence) {
  auto x = TD({1, 1, 2, 2}, 7.0);
  x.set_requires_grad();
  GD g;
  auto y = ops::maxpool2d(g, x, 2, 2);
  EXPECT_EQ(y[0], 7.0);
  backward(ops::sum(g, y), g);
  EXPECT_EQ(x.grad()[0], 1.0);
  EXPECT_EQ(x.grad()[1], 0.0);
  EXPECT_EQ(x.grad()[2], 0.0);
  EXPECT_EQ(x.grad()[3], 0.0);
  // every coordinate of a full tie sits on a kink
  auto rep = grad_check<double>(
      [&](GD& gg, const TD& t) { return ops::sum(gg, ops::maxpool2d(gg, t, 2, 2)); }, TD({1, 1, 2, 2}, 7.0), kH,
      kTol);
  EXPECT_EQ(rep.excluded, 4u);
}

TEST(Maxpool, GradientMatchesFiniteDifferences) {
  auto x = random_tensor({2, 2, 6, 5}, 31);
  auto rep = grad_check<double>(
      [&](GD& g) { return ops::sum(g, ops::mul(g, ops::maxpool2d(g, x, 3, 2), random_tensor({2, 2, 2, 2}, 32))); },
      {x}, kH, kTol);
  EXPECT_TRUE(rep.passed) << rep.max_rel_error;
}

// ---------------------------------------------------------------- relu / gelu

TEST(Relu, Examples) {
  GD g(false);
  EXPECT_EQ(ops::relu(g, make({3}, {-1, 0, 2})).vec(), (std::vector<double>{0, 0, 2}));
  auto neg = ops::relu(g, random_tensor({10}, 3, -5, -0.1));
  for (double v : neg.data()) EXPECT_EQ(v, 0.0);
}

TEST(Relu, GradientOfSum) {
  auto x = make({2}, {-1, 2});
  x.set_requires_grad();
  GD g;
  backward(ops::sum(g, ops::relu(g, x)), g);
  EXPECT_EQ(x.grad()[0], 0.0);
  EXPECT_EQ(x.grad()[1], 1.0);
  auto rep = grad_check<double>([](GD& gg, const TD& t) { return ops::sum(gg, ops::relu(gg, t)); },
                                make({2}, {-1, 2}), kH, kTol);
  EXPECT_TRUE(rep.passed);
  EXPECT_LT(rep.max_rel_error, 1e-9);
}

TEST(Relu, KinkCoordinateExcluded) {
  auto rep = grad_check<double>([](GD& gg, const TD& t) { return ops::sum(gg, ops::relu(gg, t)); },
                                make({3}, {-0.5, 0.0, 0.75}), kH, kTol);
  EXPECT_EQ(rep.excluded, 1u);
  EXPECT_EQ(rep.checked, 2u);
  EXPECT_TRUE(rep.passed);
}

TEST(Gelu, GradientMatchesFiniteDifferences) {
  auto x = random_tensor({3, 4}, 41);
  auto rep = grad_check<double>(
      [&](GD& g) { return ops::sum(g, ops::mul(g, ops::gelu(g, x), random_tensor({3, 4}, 42))); }, {x}, kH, kTol);
  EXPECT_TRUE(rep.passed) << rep.max_rel_error;
}

// ---------------------------------------------------------------- softmax

TEST(Softmax, Examples) {
  GD g(false);
  auto u = ops::softmax(g, TD({3}), 0);
  for (double v : u.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
  auto p = ops::softmax(g, make({3}, {1, 2, 3}), 0);
  // e^x / sum e^x evaluated directly
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  EXPECT_NEAR(p[0], std::exp(1.0) / z, 1e-12);
  EXPECT_NEAR(p[0], 0.09003, 1e-5);
  EXPECT_NEAR(p[1], 0.24473, 1e-5);
  EXPECT_NEAR(p[2], 0.66524, 1e-5);
  auto a = ops::softmax(g, make({2}, {0.3, 1.7}), 0);
  auto b = ops::softmax(g, make({2}, {100.3, 101.7}), 0);
  EXPECT_NEAR(a[0], b[0], 1e-12);
}

TEST(Softmax, SlicesSumToOneAndArePositive) {
  GD g(false);
  for (std::uint64_t s = 0; s < 50; ++s) {
    auto x = random_tensor({3, 4, 5}, s, -30, 30);
    for (int axis : {0, 1, 2, -1}) {
      auto y = ops::softmax(g, x, axis);
      const std::size_t ax = axis < 0 ? 2 : static_cast<std::size_t>(axis);
      const Shape& sh = x.shape();
      for (std::size_t i = 0; i < sh[0]; ++i)
        for (std::size_t j = 0; j < sh[1]; ++j)
          for (std::size_t k = 0; k < sh[2]; ++k) {
            std::size_t idx[3] = {i, j, k};
            if (idx[ax] != 0) continue;
            double total = 0;
            for (std::size_t t = 0; t < sh[ax]; ++t) {
              idx[ax] = t;
              const double v = y[(idx[0] * sh[1] + idx[1]) * sh[2] + idx[2]];
              EXPECT_GT(v, 0.0);
              total += v;
            }
            EXPECT_NEAR(total, 1.0, 1e-6);
          }
    }
  }
}

TEST(Softmax, GradientMatchesFiniteDifferences) {
  for (int axis : {0, 1, -1}) {
    auto x = random_tensor({3, 4, 2}, 51);
    auto mix = random_tensor({3, 4, 2}, 52);
    auto rep = grad_check<double>([&](GD& g) { return ops::sum(g, ops::mul(g, ops::softmax(g, x, axis), mix)); },
                                  {x}, kH, kTol);
    EXPECT_TRUE(rep.passed) << axis << " " << rep.max_rel_error;
  }
}

// ---------------------------------------------------------------- layernorm

TEST(Layernorm, Examples) {
  GD g(false);
  auto c = ops::layernorm(g, TD({2, 4}, 3.5), TD::ones({4}), TD::zeros({4}), 1e-5);
  for (double v : c.data()) EXPECT_EQ(v, 0.0);
  auto bias = make({4}, {1, -2, 3, 0.5});
  auto y = ops::layernorm(g, random_tensor({3, 4}, 2), TD::zeros({4}), bias, 1e-5);
  for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_EQ(y[i], bias[i % 4]);
  auto n = ops::layernorm(g, random_tensor({5, 8}, 3), TD::ones({8}), TD::zeros({8}), 0.0);
  for (std::size_t r = 0; r < 5; ++r) {
    double m = 0, v = 0;
    for (std::size_t j = 0; j < 8; ++j) m += n[r * 8 + j];
    m /= 8;
    for (std::size_t j = 0; j < 8; ++j) v += (n[r * 8 + j] - m) * (n[r * 8 + j] - m);
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(v / 8, 1.0, 1e-12);
  }
}

TEST(Layernorm, GradientOnRandomFourVector) {
  auto x = random_tensor({4}, 61);
  auto gain = random_tensor({4}, 62);
  auto bias = random_tensor({4}, 63);
  auto mix = random_tensor({4}, 64);
  auto rep = grad_check<double>(
      [&](GD& g) { return ops::sum(g, ops::mul(g, ops::layernorm(g, x, gain, bias, 1e-5), mix)); },
      {x, gain, bias}, kH, kTol);
  EXPECT_TRUE(rep.passed) << rep.max_rel_error;
  auto x2 = random_tensor({3, 2, 6}, 65);
  auto g2 = random_tensor({6}, 66), b2 = random_tensor({6}, 67), m2 = random_tensor({3, 2, 6}, 68);
  rep = grad_check<double>([&](GD& g) { return ops::sum(g, ops::mul(g, ops::layernorm(g, x2, g2, b2, 1e-5), m2)); },
                           {x2, g2, b2}, kH, kTol);
  EXPECT_TRUE(rep.passed) << rep.max_rel_error;
}

// ---------------------------------------------------------------- layout ops

TEST(Layout, PermuteMatchesIndexFormulaAndGradient) {
  auto x = random_tensor({2, 3, 4}, 71);
  GD g(false);
  auto y = ops::permute(g, x, {2, 0, 1});
  ASSERT_EQ(y.shape(), (Shape{4, 2, 3}));
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 3; ++j)
      for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(y[(k * 2 + i) * 3 + j], x[(i * 3 + j) * 4 + k]);
  auto mix = random_tensor({4, 2, 3}, 72);
  auto rep = grad_check<double>(
      [&](GD& gg) { return ops::sum(gg, ops::mul(gg, ops::permute(gg, x, {2, 0, 1}), mix)); }, {x}, kH, kTol);
  EXPECT_TRUE(rep.passed);
  EXPECT_THROW(ops::reshape(g, x, {5, 5}), ShapeError);
}

TEST(Add, SuffixBroadcastGradient) {
  auto a = random_tensor({2, 3, 4}, 81);
  auto b = random_tensor({3, 4}, 82);
  auto c = random_tensor({4}, 83);
  auto mix = random_tensor({2, 3, 4}, 84);
  auto rep = grad_check<double>(
      [&](GD& g) { return ops::sum(g, ops::mul(g, ops::add(g, ops::add(g, a, b), c), mix)); }, {a, b, c}, kH, kTol);
  EXPECT_TRUE(rep.passed) << rep.max_rel_error;
  GD g;
  EXPECT_THROW(ops::add(g, a, TD({3})), ShapeError);
}

TEST(Dropout, DeterministicPerKeyAndScaled) {
  GD g(false);
  auto x = TD({1000}, 1.0);
  auto a = ops::dropout(g, x, 0.25, 7, 3);
  auto b = ops::dropout(g, x, 0.25, 7, 3);
  auto c = ops::dropout(g, x, 0.25, 7, 4);
  EXPECT_EQ(a.vec(), b.vec());
  EXPECT_NE(a.vec(), c.vec());
  std::size_t kept = 0;
  for (double v : a.data()) {
    EXPECT_TRUE(v == 0.0 || std::abs(v - 1.0 / 0.75) < 1e-12);
    kept += v != 0.0;
  }
  EXPECT_NEAR(static_cast<double>(kept) / 1000.0, 0.75, 0.05);
  EXPECT_TRUE(ops::dropout(g, x, 0.0, 1, 1).same_storage(x));
}

// ---------------------------------------------------------------- backward

TEST(Backward, SumGivesOnes) {
  auto x = random_tensor({2, 3}, 91);
  x.set_requires_grad();
  GD g;
  backward(ops::sum(g, x), g);
  for (double v : x.grad()) EXPECT_EQ(v, 1.0);
}

TEST(Backward, SquareGivesTwiceX) {
  auto x = make({2}, {1, 2});
  x.set_requires_grad();
  GD g;
  backward(ops::sum(g, ops::mul(g, x, x)), g);
  EXPECT_EQ(x.grad()[0], 2.0);
  EXPECT_EQ(x.grad()[1], 4.0);
}

TEST(Backward, UnusedLeafStaysZero) {
  auto x = random_tensor({3}, 1);
  auto unused = random_tensor({3}, 2);
  x.set_requires_grad();
  unused.set_requires_grad();
  GD g;
  backward(ops::sum(g, x), g);
  for (double v : unused.grad()) EXPECT_EQ(v, 0.0);
}

TEST(Backward, NonScalarLossThrows) {
  auto x = random_tensor({3}, 1);
  x.set_requires_grad();
  GD g;
  auto y = ops::relu(g, x);
  EXPECT_THROW(backward(y, g), ShapeError);
}

TEST(Backward, FanOutAccumulates) {
  // loss = sum(relu(x)) + sum(x * c): grad = mask + c
  auto x = random_tensor({6}, 101);
  auto c = random_tensor({6}, 102);
  x.set_requires_grad();
  GD g;
  auto loss = ops::add(g, ops::sum(g, ops::relu(g, x)), ops::sum(g, ops::mul(g, x, c)));
  backward(loss, g);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_DOUBLE_EQ(x.grad()[i], (x[i] > 0 ? 1.0 : 0.0) + c[i]);
}

TEST(Backward, EachOpVisitedOnce) {
  auto x = random_tensor({4}, 1);
  x.set_requires_grad();
  GD g;
  auto y = ops::mul(g, x, x);
  auto loss = ops::sum(g, y);
  EXPECT_EQ(g.size(), 2u);
  EXPECT_EQ(g.op_name(0), "mul");
  EXPECT_EQ(g.op_name(1), "sum");
  backward(loss, g);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(x.grad()[i], 2 * x[i]);
}

TEST(GradCheck, LinearFunctionIsExact) {
  // integer inputs and a power-of-two step make every difference exact
  auto x = make({4}, {1, -3, 7, 2});
  auto rep = grad_check<double>([](GD& g, const TD& t) { return ops::sum(g, t); }, x, 1.0 / 1024, kTol);
  EXPECT_EQ(rep.max_rel_error, 0.0);
  auto r2 = grad_check<double>([](GD& g, const TD& t) { return ops::sum(g, t); }, random_tensor({10}, 3), kH, kTol);
  EXPECT_LT(r2.max_rel_error, 1e-9);
}

TEST(CrossEntropy, GradientIsSoftmaxMinusOneHotOverBatch) {
  auto z = random_tensor({4, 3}, 111);
  std::vector<int> y{0, 2, 1, 2};
  auto rep = grad_check<double>([&](GD& g) { return ops::cross_entropy(g, z, y); }, {z}, kH, 1e-6);
  EXPECT_TRUE(rep.passed) << rep.max_rel_error;
  GD g(false);
  EXPECT_THROW(ops::cross_entropy(g, z, std::vector<int>{0, 3, 1, 1}), ValueError);
}

}  // namespace
}  // namespace cct
