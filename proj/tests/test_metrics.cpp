#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "cct/metrics.hpp"
#include "cct/rng.hpp"

namespace cct {
namespace {

namespace fs = std::filesystem;

TEST(Confusion, HandCountsAndErrors) {
  EXPECT_EQ(confusion_matrix({0, 0, 1}, {0, 1, 1}, 2), (ConfusionMatrix{{1, 1}, {0, 1}}));
  EXPECT_EQ(confusion_matrix({}, {}, 3), ConfusionMatrix(3, std::vector<std::uint64_t>(3, 0)));
  EXPECT_EQ(confusion_matrix({0, 1, 1, 2}, {0, 1, 1, 2}, 3), (ConfusionMatrix{{1, 0, 0}, {0, 2, 0}, {0, 0, 1}}));
  EXPECT_THROW(confusion_matrix({0}, {0, 1}, 2), ValueError);
  EXPECT_THROW(confusion_matrix({0, 2}, {0, 1}, 2), ValueError);
  EXPECT_THROW(confusion_matrix({-1}, {0}, 2), ValueError);
}

TEST(Prf1, ReferenceExample) {
  auto r = prf1_report({{8, 2}, {1, 9}});
  EXPECT_NEAR(r.per_class[0].precision, 8.0 / 9.0, 1e-15);
  EXPECT_NEAR(r.per_class[0].recall, 0.8, 1e-15);
  EXPECT_NEAR(r.per_class[0].f1, 2 * (8.0 / 9) * 0.8 / (8.0 / 9 + 0.8), 1e-15);
  EXPECT_NEAR(r.per_class[0].precision, 0.8889, 5e-5);
  EXPECT_NEAR(r.per_class[0].f1, 0.8421, 5e-5);
  EXPECT_EQ(r.per_class[1].support, 10u);
  EXPECT_DOUBLE_EQ(r.accuracy, 0.85);
  EXPECT_NEAR(r.hamming_loss, 0.15, 1e-15);
  EXPECT_TRUE(r.warnings.empty());

  auto d = prf1_report({{5, 0, 0}, {0, 3, 0}, {0, 0, 7}});
  for (const auto& m : d.per_class) {
    EXPECT_EQ(m.precision, 1.0);
    EXPECT_EQ(m.recall, 1.0);
    EXPECT_EQ(m.f1, 1.0);
  }
  EXPECT_EQ(d.macro_avg.f1, 1.0);
  EXPECT_EQ(d.weighted_avg.precision, 1.0);
}

TEST(Prf1, ZeroDenominatorsAreFlagged) {
  // class 2 has no samples and is never predicted
  auto r = prf1_report({{3, 1, 0}, {2, 4, 0}, {0, 0, 0}}, {"a", "b", "c"});
  EXPECT_TRUE(r.per_class[2].recall_undefined);
  EXPECT_TRUE(r.per_class[2].precision_undefined);
  EXPECT_TRUE(r.per_class[2].f1_undefined);
  EXPECT_EQ(r.per_class[2].recall, 0.0);
  EXPECT_FALSE(r.warnings.empty());
  EXPECT_NE(r.warnings[0].find("'c'"), std::string::npos);
  EXPECT_FALSE(r.per_class[0].recall_undefined);
  const auto j = report_to_json(r);
  EXPECT_EQ(j["per_class"][2]["undefined"].size(), 3u);
  EXPECT_THROW(prf1_report({{1, 2}}), ValueError);
}

TEST(Hamming, Examples) {
  EXPECT_EQ(hamming_loss({0, 1, 2}, {0, 1, 2}), 0.0);
  EXPECT_EQ(hamming_loss({0, 0}, {1, 1}), 1.0);
  EXPECT_EQ(hamming_loss({0, 1, 1, 0}, {0, 1, 0, 0}), 0.25);
  EXPECT_THROW(hamming_loss({}, {}), ValueError);
  EXPECT_THROW(hamming_loss({0}, {}), ValueError);
}

// Independent recompute from raw pairs, one definition at a time.
struct Brute {
  std::vector<double> p, r, f;
  std::vector<double> support;
};

Brute brute(const std::vector<int>& t, const std::vector<int>& y, int n) {
  Brute b;
  for (int c = 0; c < n; ++c) {
    double tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < t.size(); ++i) {
      tp += t[i] == c && y[i] == c;
      fp += t[i] != c && y[i] == c;
      fn += t[i] == c && y[i] != c;
    }
    const double p = tp + fp > 0 ? tp / (tp + fp) : 0.0;
    const double r = tp + fn > 0 ? tp / (tp + fn) : 0.0;
    b.p.push_back(p);
    b.r.push_back(r);
    b.f.push_back(p + r > 0 ? 2 * p * r / (p + r) : 0.0);
    b.support.push_back(tp + fn);
  }
  return b;
}

TEST(Prf1, MatchesBruteForceOnRandomInstances) {
  CounterRng rng(2024, 0);
  for (int inst = 0; inst < 1000; ++inst) {
    const int n = 2 + static_cast<int>(rng.below(3));
    const std::size_t len = 1 + rng.below(60);
    std::vector<int> t(len), y(len);
    for (std::size_t i = 0; i < len; ++i) {
      t[i] = static_cast<int>(rng.below(n));
      y[i] = rng.uniform() < 0.6 ? t[i] : static_cast<int>(rng.below(n));
    }
    std::vector<std::string> names;
    for (int c = 0; c < n; ++c) names.push_back("c" + std::to_string(c));
    const auto r = evaluate_predictions(t, y, names);
    const auto b = brute(t, y, n);
    double macro[3] = {}, weighted[3] = {}, correct = 0;
    for (std::size_t i = 0; i < len; ++i) correct += t[i] == y[i];
    for (int c = 0; c < n; ++c) {
      ASSERT_NEAR(r.per_class[c].precision, b.p[c], 1e-12);
      ASSERT_NEAR(r.per_class[c].recall, b.r[c], 1e-12);
      ASSERT_NEAR(r.per_class[c].f1, b.f[c], 1e-12);
      ASSERT_EQ(static_cast<double>(r.per_class[c].support), b.support[c]);
      macro[0] += b.p[c] / n;
      macro[1] += b.r[c] / n;
      macro[2] += b.f[c] / n;
      weighted[0] += b.p[c] * b.support[c] / len;
      weighted[1] += b.r[c] * b.support[c] / len;
      weighted[2] += b.f[c] * b.support[c] / len;
    }
    ASSERT_NEAR(r.macro_avg.precision, macro[0], 1e-12);
    ASSERT_NEAR(r.macro_avg.recall, macro[1], 1e-12);
    ASSERT_NEAR(r.macro_avg.f1, macro[2], 1e-12);
    ASSERT_NEAR(r.weighted_avg.precision, weighted[0], 1e-12);
    ASSERT_NEAR(r.weighted_avg.recall, weighted[1], 1e-12);
    ASSERT_NEAR(r.weighted_avg.f1, weighted[2], 1e-12);
    ASSERT_NEAR(r.accuracy, correct / len, 1e-12);
    // weighted recall is accuracy for single-label problems
    ASSERT_NEAR(r.weighted_avg.recall, r.accuracy, 1e-12);
    ASSERT_NEAR(r.accuracy + r.hamming_loss, 1.0, 1e-12);
    std::uint64_t total = 0;
    for (const auto& row : r.confusion) {
      for (auto v : row) total += v;
    }
    ASSERT_EQ(total, len);
  }
}

TEST(Prf1, RelabelingPermutesRows) {
  const std::vector<int> t{0, 0, 1, 2, 2, 2, 1, 0, 1}, y{0, 1, 1, 2, 0, 2, 2, 0, 1};
  const std::vector<int> perm{2, 0, 1};
  std::vector<int> tp, yp;
  for (int v : t) tp.push_back(perm[v]);
  for (int v : y) yp.push_back(perm[v]);
  const auto a = evaluate_predictions(t, y, {"x", "y", "z"});
  std::vector<std::string> names(3);
  names[perm[0]] = "x";
  names[perm[1]] = "y";
  names[perm[2]] = "z";
  const auto b = evaluate_predictions(tp, yp, names);
  for (int c = 0; c < 3; ++c) {
    EXPECT_EQ(b.class_names[perm[c]], a.class_names[c]);
    EXPECT_NEAR(b.per_class[perm[c]].f1, a.per_class[c].f1, 1e-15);
    EXPECT_NEAR(b.per_class[perm[c]].precision, a.per_class[c].precision, 1e-15);
  }
  EXPECT_NEAR(a.macro_avg.f1, b.macro_avg.f1, 1e-15);
  EXPECT_NEAR(a.macro_avg.recall, b.macro_avg.recall, 1e-15);
}

TEST(PixelStats, Examples) {
  auto s = image_pixel_stats(ImageU8(3, 4, 1, 128));
  EXPECT_NEAR(s.mean, 0.50196, 1e-5);
  EXPECT_EQ(s.mean, s.max);
  EXPECT_EQ(s.min, s.max);
  ImageU8 two(2, 2, 1, 0);
  two.data[3] = 255;
  s = image_pixel_stats(two);
  EXPECT_EQ(s.min, 0.0);
  EXPECT_EQ(s.max, 1.0);
  EXPECT_LE(s.min, s.mean);
  EXPECT_LE(s.mean, s.max);

  const fs::path dir = fs::temp_directory_path() / "cct_pixel_stats";
  fs::remove_all(dir);
  fs::create_directories(dir);
  write_png(dir / "black.png", ImageU8(4, 4, 1, 0));
  write_png(dir / "white.png", ImageU8(4, 4, 1, 255));
  const auto st = pixel_stats({"black.png", "white.png"}, {0, 0}, dir);
  EXPECT_DOUBLE_EQ((st[0].mean + st[1].mean) / 2.0, 0.5);
  write_pixel_stats_csv(st, dir / "stats.csv");
  std::ifstream is(dir / "stats.csv");
  std::string header, row;
  std::getline(is, header);
  std::getline(is, row);
  EXPECT_EQ(header, "path,label,mean,max,min");
  EXPECT_EQ(row, "black.png,0,0,0,0");
  try {
    pixel_stats({"missing.png"}, {0}, dir);
    FAIL();
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("missing.png"), std::string::npos);
  }
  fs::remove_all(dir);
}

TEST(PixelStats, SilvermanKde) {
  const std::vector<double> x{0.1, 0.2, 0.25, 0.4, 0.7};
  // sd = 0.2318, IQR/1.34 = 0.1493 -> 0.9 * 0.1493 * 5^-0.2
  double m = 0;
  for (double v : x) m += v / 5;
  double var = 0;
  for (double v : x) var += (v - m) * (v - m) / 4;
  const double iqr = (0.4 - 0.2) / 1.34;
  EXPECT_NEAR(silverman_bandwidth(x), 0.9 * std::min(std::sqrt(var), iqr) * std::pow(5.0, -0.2), 1e-12);
  EXPECT_EQ(silverman_bandwidth({0.3, 0.3}), 1e-3);

  // density integrates to 1 over a wide grid
  const double h = silverman_bandwidth(x);
  double area = 0;
  const double lo = -1, hi = 2, step = 1e-3;
  for (double at = lo; at < hi; at += step) area += gaussian_kde(x, h, at) * step;
  EXPECT_NEAR(area, 1.0, 1e-6);

  const fs::path p = fs::temp_directory_path() / "cct_kde.csv";
  std::vector<PixelStats> st{{"a", 0, 0.2, 0.9, 0.0}, {"b", 0, 0.3, 0.8, 0.1}, {"c", 1, 0.5, 1.0, 0.2}};
  write_pixel_kde_csv(st, {"h", "d"}, p, 11);
  std::ifstream is(p);
  std::string line;
  std::size_t rows = 0;
  while (std::getline(is, line)) ++rows;
  EXPECT_EQ(rows, 1u + 3 * 2 * 11);
  fs::remove(p);
}

}  // namespace
}  // namespace cct
