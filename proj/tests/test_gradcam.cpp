#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>

#include "cct/gradcam.hpp"
#include "model_util.hpp"
#include "test_util.hpp"

namespace cct {
namespace {

using testing::random_tensor;
using testing::randomize;
using testing::tiny_config;

CctParams<double> random_params(const CctConfig& c, std::uint64_t seed) {
  auto p = init_params<double>(c, seed);
  randomize(p, seed);
  return p;
}

double logit_of(const Tensor<double>& a, const CctParams<double>& p, const CctConfig& c, int target) {
  Graph<double> g(false);
  return forward_from_features(g, a, p, c).logits[static_cast<std::size_t>(target)];
}

TEST(GradCam, FeatureGradientMatchesFiniteDifferences) {
  auto c = tiny_config();
  c.encoder_layers = 2;
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto p = random_params(c, seed);
    Graph<double> nog(false);
    const auto a = tokenizer_features(nog, random_tensor<double>({1, 2, 8, 8}, seed + 10, 0, 1), p, c);
    for (int target = 0; target < 2; ++target) {
      const auto grad = logit_feature_gradient(a, p, c, target);
      ASSERT_EQ(grad.shape(), a.shape());
      double worst = 0;
      for (std::size_t i = 0; i < a.numel(); ++i) {
        Tensor<double> hi = a.clone(), lo = a.clone();
        const double h = 1e-6;
        hi[i] += h;
        lo[i] -= h;
        const double fd = (logit_of(hi, p, c, target) - logit_of(lo, p, c, target)) / (2 * h);
        const double rel = std::abs(fd - grad[i]) / std::max({std::abs(fd), std::abs(grad[i]), 1e-6});
        worst = std::max(worst, rel);
      }
      EXPECT_LT(worst, 1e-3) << "seed " << seed << " target " << target;
    }
  }
}

TEST(GradCam, ContractShapeRangeAndNormalization) {
  const auto c = tiny_config();
  const auto p = random_params(c, 4);
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto x = random_tensor<double>({1, 2, 8, 8}, 100 + s, 0, 1);
    for (int target : {-1, 0, 1}) {
      const auto hm = grad_cam(x, p, c, target);
      ASSERT_EQ(hm.height, 8u);
      ASSERT_EQ(hm.width, 8u);
      ASSERT_EQ(hm.values.size(), 64u);
      const auto [lo, hi] = std::minmax_element(hm.values.begin(), hm.values.end());
      EXPECT_GE(*lo, 0.0);
      EXPECT_TRUE(*hi == 1.0 || *hi == 0.0);
      if (*hi == 1.0) EXPECT_EQ(*lo, 0.0);
      EXPECT_EQ(hm.target_class, target < 0 ? hm.predicted_class : target);
      EXPECT_NEAR(hm.probabilities[0] + hm.probabilities[1], 1.0, 1e-12);
    }
  }
}

TEST(GradCam, ZeroHeadGivesDegenerateZeros) {
  const auto c = tiny_config();
  auto p = random_params(c, 5);
  for (auto& v : p.head_weight.data()) v = 0.0;
  const auto hm = grad_cam(random_tensor<double>({1, 2, 8, 8}, 6, 0, 1), p, c, 1);
  for (double v : hm.values) EXPECT_EQ(v, 0.0);
}

TEST(GradCam, InvariantToTargetBiasShift) {
  const auto c = tiny_config();
  auto p = random_params(c, 7);
  const auto x = random_tensor<double>({1, 2, 8, 8}, 8, 0, 1);
  const auto a = grad_cam(x, p, c, 1);
  p.head_bias[1] += 3.25;
  const auto b = grad_cam(x, p, c, 1);
  for (std::size_t i = 0; i < a.values.size(); ++i) EXPECT_NEAR(a.values[i], b.values[i], 1e-6);
}

TEST(GradCam, Errors) {
  const auto c = tiny_config();
  auto p = random_params(c, 9);
  const auto x = random_tensor<double>({1, 2, 8, 8}, 1, 0, 1);
  EXPECT_THROW(grad_cam(x, p, c, 2), ValueError);
  EXPECT_THROW(grad_cam(random_tensor<double>({2, 2, 8, 8}, 1), p, c, 0), ShapeError);
  p.pos_embedding[0] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(grad_cam(x, p, c, 0), ValueError);
}

TEST(PoolAttentionMap, UniformAndOneHot) {
  const auto c = tiny_config();  // 4x4 grid
  const auto u = pool_attention_map(Tensor<double>({1, 16}, 1.0 / 16), c);
  for (double v : u.values) EXPECT_EQ(v, 0.0);

  Tensor<double> w({1, 16}, 0.0);
  w[1 * 4 + 2] = 1.0;  // grid cell (1, 2) covers pixels y 2..3, x 4..5
  double sum = 0;
  for (double v : w.data()) sum += v;
  EXPECT_EQ(sum, 1.0);
  const auto hm = pool_attention_map(w, c);
  const auto peak = std::max_element(hm.values.begin(), hm.values.end()) - hm.values.begin();
  const auto py = static_cast<std::size_t>(peak) / 8, px = static_cast<std::size_t>(peak) % 8;
  EXPECT_TRUE(py >= 2 && py <= 3 && px >= 4 && px <= 5) << py << "," << px;
  EXPECT_EQ(hm.values[static_cast<std::size_t>(peak)], 1.0);
  EXPECT_EQ(hm.at(7, 0), 0.0);
  EXPECT_THROW(pool_attention_map(Tensor<double>({1, 15}, 0.1), c), ShapeError);
}

TEST(Overlay, BlendEndpointsAndConvexity) {
  ImageU8 img(4, 5, 1);
  Heatmap hm;
  hm.height = 4;
  hm.width = 5;
  for (std::size_t i = 0; i < 20; ++i) {
    img.data[i] = static_cast<std::uint8_t>(i * 12);
    hm.values.push_back(static_cast<double>(i) / 19.0);
  }
  const auto a0 = overlay(img, hm, 0.0);
  const auto a1 = overlay(img, hm, 1.0);
  const auto ah = overlay(img, hm, 0.3);
  for (std::size_t i = 0; i < 20; ++i) {
    const Rgb c = colormap(hm.values[i]);
    for (std::size_t k = 0; k < 3; ++k) {
      EXPECT_EQ(a0.data[i * 3 + k], img.data[i]);
      EXPECT_EQ(a1.data[i * 3 + k], c[k]);
      EXPECT_EQ(ah.data[i * 3 + k], saturate_u8(0.7 * img.data[i] + 0.3 * c[k]));
    }
  }
  EXPECT_THROW(overlay(ImageU8(4, 4, 1), hm, 0.5), ShapeError);
  EXPECT_THROW(overlay(img, hm, 1.5), ValueError);
}

TEST(Overlay, JetTable) {
  EXPECT_EQ(kJet[0], (Rgb{0, 0, 128}));
  EXPECT_EQ(kJet[255], (Rgb{128, 0, 0}));
  EXPECT_EQ(kJet[128][1], 255);  // green peaks mid-scale
  // blue falls and red rises across the upper and lower halves
  for (std::size_t i = 1; i < 256; ++i) {
    if (i > 96) EXPECT_LE(kJet[i][2], kJet[i - 1][2]);
    if (i < 160) EXPECT_GE(kJet[i][0], kJet[i - 1][0]);
  }
  const auto g = heatmap_gray(Heatmap{2, 1, {0.0, 1.0}});
  EXPECT_EQ(g.data, (std::vector<std::uint8_t>{0, 255}));
}

}  // namespace
}  // namespace cct
