#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "cct/preprocess.hpp"
#include "cct/rng.hpp"

namespace cct {
namespace {

ImageU8 random_image(std::size_t h, std::size_t w, std::uint64_t seed, int lo = 0, int hi = 255) {
  ImageU8 img(h, w, 1);
  CounterRng r(seed, 77);
  for (auto& v : img.data) v = static_cast<std::uint8_t>(lo + static_cast<int>(r.below(static_cast<std::uint64_t>(hi - lo + 1))));
  return img;
}

/// Global mid-rank histogram equalization by direct pairwise counting.
ImageU8 brute_force_global_equalization(const ImageU8& img) {
  ImageU8 out(img.height, img.width, 1);
  const double n = static_cast<double>(img.data.size());
  for (std::size_t i = 0; i < img.data.size(); ++i) {
    double less = 0, equal = 0;
    for (std::uint8_t other : img.data) {
      less += other < img.data[i];
      equal += other == img.data[i];
    }
    const double v = 256.0 * (less + 0.5 * equal) / n - 0.5;
    out.data[i] = v <= 0 ? 0 : v >= 255 ? 255 : static_cast<std::uint8_t>(std::floor(v + 0.5));
  }
  return out;
}

TEST(Clahe, ConstantImagePassesThroughWithinOneLevel) {
  for (int value : {0, 1, 37, 128, 200, 254, 255}) {
    for (auto [h, w, t] : {std::tuple<std::size_t, std::size_t, std::size_t>{64, 64, 8}, {37, 53, 4}, {16, 9, 3}}) {
      ImageU8 img(h, w, 1, static_cast<std::uint8_t>(value));
      ClaheParams p;
      p.tiles_x = p.tiles_y = t;
      auto out = clahe(img, p);
      for (auto v : out.data) EXPECT_LE(std::abs(int(v) - value), 1) << value;
      // all pixels equal each other as well
      EXPECT_EQ(*std::min_element(out.data.begin(), out.data.end()),
                *std::max_element(out.data.begin(), out.data.end()));
    }
  }
}

TEST(Clahe, SingleTileUnboundedEqualsGlobalEqualizationOracle) {
  for (std::uint64_t s = 0; s < 50; ++s) {
    CounterRng r(s, 1);
    const std::size_t h = 8 + r.below(57), w = 8 + r.below(57);
    const int lo = static_cast<int>(r.below(100));
    const int hi = lo + 1 + static_cast<int>(r.below(static_cast<std::uint64_t>(255 - lo)));
    auto img = random_image(h, w, s, lo, hi);
    ClaheParams p;
    p.tiles_x = p.tiles_y = 1;
    p.clip_limit = ClaheParams::unbounded;
    EXPECT_EQ(clahe(img, p).data, brute_force_global_equalization(img).data) << "seed " << s;
  }
}

TEST(Clahe, ClipLimitBoundOnTwoValuedImage) {
  ImageU8 img(64, 64, 1, 50);
  CounterRng r(3, 3);
  for (auto& v : img.data) v = r.uniform() < 0.1 ? 200 : 50;
  ClaheParams p;
  p.clip_limit = 2.0;
  const auto hists = clahe_tile_histograms(img, p);
  ASSERT_EQ(hists.size(), 64u);
  for (const auto& h : hists) {
    const double uniform = 64.0 / 256.0;  // 8x8 tiles
    double total = 0;
    for (double v : h) {
      EXPECT_LE(v, 2.0 * uniform + 1e-12);
      total += v;
    }
    EXPECT_NEAR(total, 64.0, 1e-9);
  }
  // uneven tiles: last row/column absorbs the remainder
  auto odd = random_image(50, 45, 9, 40, 60);
  const auto oh = clahe_tile_histograms(odd, p);
  double mass = 0;
  for (std::size_t t = 0; t < oh.size(); ++t) {
    double tile_total = 0;
    for (double v : oh[t]) tile_total += v;
    const double uniform = tile_total / 256.0;
    for (double v : oh[t]) EXPECT_LE(v, 2.0 * uniform + 1e-9);
    mass += tile_total;
  }
  EXPECT_NEAR(mass, 50.0 * 45.0, 1e-6);
}

TEST(Clahe, OutputStaysInRangeAndPreservesSize) {
  auto img = random_image(40, 30, 5);
  auto out = clahe(img, ClaheParams{});
  EXPECT_EQ(out.height, 40u);
  EXPECT_EQ(out.width, 30u);
  EXPECT_EQ(out.data.size(), img.data.size());
}

TEST(Clahe, RejectsColorAndOversizedGrid) {
  EXPECT_THROW(clahe(ImageU8(16, 16, 3), ClaheParams{}), ValueError);
  ClaheParams p;
  p.tiles_x = 20;
  EXPECT_THROW(clahe(ImageU8(16, 16, 1), p), ValueError);
  p = {};
  p.clip_limit = 0.5;
  EXPECT_THROW(clahe(ImageU8(16, 16, 1), p), ValueError);
}

TEST(Clahe, UniformHistogramIsFixedPoint) {
  std::vector<double> h(256, 4.0);
  auto lut = equalization_lut(h, 1024.0);
  for (int v = 0; v < 256; ++v) EXPECT_EQ(lut[static_cast<std::size_t>(v)], v);
}

TEST(BenGraham, ConstantImageBecomesGamma) {
  ImageU8 img(20, 30, 1, 77);
  auto out = ben_graham(img, BenGrahamParams{});
  for (auto v : out.data) EXPECT_EQ(v, 128);
  ImageU8 rgb(10, 10, 3, 200);
  for (auto v : ben_graham(rgb, BenGrahamParams{}).data) EXPECT_EQ(v, 128);
}

TEST(BenGraham, AlphaZeroGivesConstantGamma) {
  BenGrahamParams p;
  p.alpha = 0;
  p.gamma = 90;
  auto out = ben_graham(random_image(17, 23, 4), p);
  for (auto v : out.data) EXPECT_EQ(v, 90);
}

TEST(BenGraham, LargeSigmaSubtractsImageMean) {
  // a blur much wider than the image approaches the image mean, so the
  // bright pixel maps to alpha * (value - mean) + gamma
  ImageU8 img(16, 16, 1, 10);
  img.at(7, 9) = 50;
  BenGrahamParams p;
  p.sigma = 500.0;
  p.alpha = 2.0;
  const double mean = (255.0 * 10 + 50) / 256.0;
  auto out = ben_graham(img, p);
  EXPECT_NEAR(out.at(7, 9), 2.0 * (50 - mean) + 128, 1.0);
  EXPECT_NEAR(out.at(0, 0), 2.0 * (10 - mean) + 128, 1.0);
}

TEST(BenGraham, DefaultSigmaIsWidthOverThirty) {
  BenGrahamParams p;
  EXPECT_DOUBLE_EQ(p.sigma_for(300), 10.0);
  EXPECT_DOUBLE_EQ(p.beta_value(), -4.0);
  p.sigma = -1.0;
  EXPECT_THROW(p.validate(), ValueError);
}

TEST(Fuse, ShapeAndChannels) {
  auto a = random_image(6, 7, 1);
  auto b = random_image(6, 7, 2);
  auto t = fuse<double>(a, b);
  EXPECT_EQ(t.shape(), (Shape{2, 6, 7}));
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    EXPECT_EQ(t[i], a.data[i] / 255.0);
    EXPECT_EQ(t[42 + i], b.data[i] / 255.0);
  }
  auto same = fuse<double>(a, a);
  for (std::size_t i = 0; i < 42; ++i) EXPECT_EQ(same[i], same[42 + i]);
  EXPECT_THROW(fuse<double>(a, random_image(6, 8, 1)), ValueError);
}

TEST(Resize, Examples) {
  auto img = random_image(9, 11, 3);
  EXPECT_EQ(resize(img, 9, 11), img);
  ImageU8 two(2, 2, 1);
  two.at(1, 0) = two.at(1, 1) = 255;
  auto one = resize(two, 1, 1);
  EXPECT_NEAR(one.data[0], 128, 1);
  for (auto [h, w] : {std::pair<std::size_t, std::size_t>{1, 1}, {5, 3}, {40, 70}}) {
    auto c = resize(ImageU8(13, 17, 1, 99), h, w);
    for (auto v : c.data) EXPECT_EQ(v, 99);
  }
  EXPECT_THROW(resize(img, 0, 4), ValueError);
}

TEST(Pipeline, FusionChannelsAndConstantImage) {
  PreprocessConfig cfg;
  cfg.output_size = 32;
  ImageU8 flat(64, 64, 1, 100);
  auto t = preprocess_pipeline<double>(flat, cfg);
  ASSERT_EQ(t.shape(), (Shape{2, 32, 32}));
  const double c0 = t[0];
  EXPECT_LE(std::abs(c0 * 255.0 - 100.0), 1.0 + 1e-9);
  for (std::size_t i = 0; i < 32 * 32; ++i) {
    EXPECT_EQ(t[i], c0);
    EXPECT_DOUBLE_EQ(t[1024 + i], 128.0 / 255.0);
  }
}

TEST(Pipeline, FusionOffIsResizedClahe) {
  PreprocessConfig cfg;
  cfg.fusion = false;
  cfg.output_size = 24;
  ImageU8 rgb(48, 40, 3);
  CounterRng r(5, 5);
  for (auto& v : rgb.data) v = static_cast<std::uint8_t>(r.below(256));
  auto t = preprocess_pipeline<double>(rgb, cfg);
  ASSERT_EQ(t.shape(), (Shape{1, 24, 24}));
  auto expect = resize(clahe(to_gray(rgb), cfg.clahe), 24, 24);
  for (std::size_t i = 0; i < expect.data.size(); ++i) EXPECT_EQ(t[i], expect.data[i] / 255.0);
}

TEST(Pipeline, Deterministic) {
  auto img = random_image(70, 50, 8);
  PreprocessConfig cfg;
  EXPECT_EQ(preprocess_pipeline<double>(img, cfg).vec(), preprocess_pipeline<double>(img, cfg).vec());
}

TEST(Png, RoundTripGrayAndRgb) {
  const auto dir = std::filesystem::temp_directory_path() / "cct_png_test";
  std::filesystem::create_directories(dir);
  auto gray = random_image(13, 21, 1);
  write_png(dir / "g.png", gray);
  EXPECT_EQ(read_png(dir / "g.png"), gray);
  ImageU8 rgb(5, 4, 3);
  CounterRng r(1, 1);
  for (auto& v : rgb.data) v = static_cast<std::uint8_t>(r.below(256));
  write_png(dir / "c.png", rgb);
  EXPECT_EQ(read_png(dir / "c.png"), rgb);
  EXPECT_TRUE(probe_png(dir / "c.png"));
  {
    std::FILE* f = std::fopen((dir / "bad.png").c_str(), "wb");
    std::fputs("not a png", f);
    std::fclose(f);
  }
  EXPECT_FALSE(probe_png(dir / "bad.png"));
  EXPECT_THROW(read_png(dir / "bad.png"), IoError);
  EXPECT_THROW(read_png(dir / "missing.png"), IoError);
  std::filesystem::remove_all(dir);
}

TEST(Gray, LuminanceWeights) {
  ImageU8 rgb(1, 3, 3);
  rgb.data = {255, 0, 0, 0, 255, 0, 0, 0, 255};
  auto g = to_gray(rgb);
  EXPECT_EQ(g.data, (std::vector<std::uint8_t>{76, 150, 29}));
}

}  // namespace
}  // namespace cct
