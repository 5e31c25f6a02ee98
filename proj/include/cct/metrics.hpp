#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <numbers>
#include <string>
#include <vector>

#include "cct/errors.hpp"
#include "cct/image.hpp"

namespace cct {

using ConfusionMatrix = std::vector<std::vector<std::uint64_t>>;

inline ConfusionMatrix confusion_matrix(const std::vector<int>& truth, const std::vector<int>& pred, std::size_t n) {
  if (truth.size() != pred.size()) {
    throw ValueError("confusion_matrix: " + std::to_string(truth.size()) + " labels vs " +
                     std::to_string(pred.size()) + " predictions");
  }
  ConfusionMatrix m(n, std::vector<std::uint64_t>(n, 0));
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const int t = truth[i], p = pred[i];
    if (t < 0 || p < 0 || static_cast<std::size_t>(t) >= n || static_cast<std::size_t>(p) >= n) {
      throw ValueError("confusion_matrix: label pair (" + std::to_string(t) + "," + std::to_string(p) +
                       ") outside [0," + std::to_string(n) + ")");
    }
    ++m[static_cast<std::size_t>(t)][static_cast<std::size_t>(p)];
  }
  return m;
}

inline double hamming_loss(const std::vector<int>& truth, const std::vector<int>& pred) {
  if (truth.size() != pred.size()) throw ValueError("hamming_loss: length mismatch");
  if (truth.empty()) throw ValueError("hamming_loss: empty input");
  std::size_t miss = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) miss += truth[i] != pred[i];
  return static_cast<double>(miss) / static_cast<double>(truth.size());
}

struct ClassMetrics {
  double precision = 0, recall = 0, f1 = 0;
  std::uint64_t support = 0;
  // set when the metric's denominator was zero and it was reported as 0
  bool precision_undefined = false, recall_undefined = false, f1_undefined = false;
};

struct AverageMetrics {
  double precision = 0, recall = 0, f1 = 0;
};

struct EvalReport {
  std::vector<std::string> class_names;
  ConfusionMatrix confusion;
  std::vector<ClassMetrics> per_class;
  AverageMetrics macro_avg, weighted_avg;
  double accuracy = 0;
  double hamming_loss = 0;
  std::uint64_t total = 0;
  std::vector<std::string> warnings;
};

/// Per-class precision/recall/F1 from a confusion matrix (rows true, cols
/// predicted). Zero denominators give 0 plus a flag and a warning. Macro
/// averages include every class; weighted averages use row supports.
inline EvalReport prf1_report(const ConfusionMatrix& cm, std::vector<std::string> class_names = {}) {
  const std::size_t n = cm.size();
  for (const auto& row : cm) {
    if (row.size() != n) throw ValueError("prf1_report: confusion matrix must be square");
  }
  if (class_names.empty()) {
    for (std::size_t c = 0; c < n; ++c) class_names.push_back(std::to_string(c));
  }
  if (class_names.size() != n) throw ValueError("prf1_report: class name count does not match matrix");

  EvalReport r;
  r.class_names = std::move(class_names);
  r.confusion = cm;
  std::uint64_t diag = 0;
  for (std::size_t c = 0; c < n; ++c) {
    diag += cm[c][c];
    for (std::size_t p = 0; p < n; ++p) r.total += cm[c][p];
  }
  for (std::size_t c = 0; c < n; ++c) {
    ClassMetrics m;
    std::uint64_t col = 0;
    for (std::size_t k = 0; k < n; ++k) {
      m.support += cm[c][k];
      col += cm[k][c];
    }
    const double tp = static_cast<double>(cm[c][c]);
    const std::string& name = r.class_names[c];
    if (col == 0) {
      m.precision_undefined = true;
      r.warnings.push_back("class '" + name + "' was never predicted; precision set to 0");
    } else {
      m.precision = tp / static_cast<double>(col);
    }
    if (m.support == 0) {
      m.recall_undefined = true;
      r.warnings.push_back("class '" + name + "' has zero support; recall set to 0");
    } else {
      m.recall = tp / static_cast<double>(m.support);
    }
    if (m.precision + m.recall == 0.0) {
      m.f1_undefined = true;
    } else {
      m.f1 = 2.0 * m.precision * m.recall / (m.precision + m.recall);
    }
    r.per_class.push_back(m);
  }
  if (n > 0) {
    for (const auto& m : r.per_class) {
      r.macro_avg.precision += m.precision / static_cast<double>(n);
      r.macro_avg.recall += m.recall / static_cast<double>(n);
      r.macro_avg.f1 += m.f1 / static_cast<double>(n);
    }
  }
  if (r.total > 0) {
    const double tot = static_cast<double>(r.total);
    for (const auto& m : r.per_class) {
      const double w = static_cast<double>(m.support) / tot;
      r.weighted_avg.precision += w * m.precision;
      r.weighted_avg.recall += w * m.recall;
      r.weighted_avg.f1 += w * m.f1;
    }
    r.accuracy = static_cast<double>(diag) / tot;
    r.hamming_loss = 1.0 - r.accuracy;
  } else {
    r.warnings.push_back("empty confusion matrix; accuracy undefined");
  }
  return r;
}

inline EvalReport evaluate_predictions(const std::vector<int>& truth, const std::vector<int>& pred,
                                       const std::vector<std::string>& class_names) {
  auto r = prf1_report(confusion_matrix(truth, pred, class_names.size()), class_names);
  // exact count, rather than 1 - accuracy
  if (!truth.empty()) r.hamming_loss = hamming_loss(truth, pred);
  return r;
}

inline nlohmann::json report_to_json(const EvalReport& r) {
  using nlohmann::json;
  json per = json::array();
  for (std::size_t c = 0; c < r.per_class.size(); ++c) {
    const auto& m = r.per_class[c];
    json undefined = json::array();
    if (m.precision_undefined) undefined.push_back("precision");
    if (m.recall_undefined) undefined.push_back("recall");
    if (m.f1_undefined) undefined.push_back("f1");
    per.push_back({{"class", r.class_names[c]},
                   {"precision", m.precision},
                   {"recall", m.recall},
                   {"f1", m.f1},
                   {"support", m.support},
                   {"undefined", undefined}});
  }
  auto avg = [](const AverageMetrics& a) { return json{{"precision", a.precision}, {"recall", a.recall}, {"f1", a.f1}}; };
  return {{"class_names", r.class_names}, {"confusion", r.confusion}, {"per_class", per},
          {"macro_avg", avg(r.macro_avg)},  {"weighted_avg", avg(r.weighted_avg)},
          {"accuracy", r.accuracy},         {"hamming_loss", r.hamming_loss},
          {"total", r.total},               {"warnings", r.warnings}};
}

inline void write_confusion_csv(const EvalReport& r, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write '" + path.string() + "'");
  os << "true\\pred";
  for (const auto& n : r.class_names) os << ',' << n;
  os << '\n';
  for (std::size_t c = 0; c < r.confusion.size(); ++c) {
    os << r.class_names[c];
    for (auto v : r.confusion[c]) os << ',' << v;
    os << '\n';
  }
  if (!os) throw IoError("write failed for '" + path.string() + "'");
}

// ---------------------------------------------------------------------------
// Pixel distribution statistics
// ---------------------------------------------------------------------------

struct PixelStats {
  std::string path;
  int label = 0;
  double mean = 0, max = 0, min = 0;
};

/// Mean, max and min of the grayscale image scaled to [0,1].
inline PixelStats image_pixel_stats(const ImageU8& img) {
  const ImageU8 gray = to_gray(img);
  if (gray.data.empty()) throw ValueError("pixel stats of an empty image");
  std::uint64_t sum = 0;
  std::uint8_t lo = 255, hi = 0;
  for (auto v : gray.data) {
    sum += v;
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  PixelStats s;
  s.mean = static_cast<double>(sum) / static_cast<double>(gray.data.size()) / 255.0;
  s.max = hi / 255.0;
  s.min = lo / 255.0;
  return s;
}

/// Reads every image in order; an unreadable file raises an IoError naming it.
inline std::vector<PixelStats> pixel_stats(const std::vector<std::filesystem::path>& files,
                                           const std::vector<int>& labels, const std::filesystem::path& root = {}) {
  if (files.size() != labels.size()) throw ValueError("pixel_stats: file and label counts differ");
  std::vector<PixelStats> out;
  for (std::size_t i = 0; i < files.size(); ++i) {
    const auto full = root.empty() ? files[i] : root / files[i];
    ImageU8 img;
    try {
      img = read_png(full);
    } catch (const Error& e) {
      throw IoError("cannot read image '" + full.string() + "': " + e.what());
    }
    auto s = image_pixel_stats(img);
    s.path = files[i].generic_string();
    s.label = labels[i];
    out.push_back(std::move(s));
  }
  return out;
}

inline void write_pixel_stats_csv(const std::vector<PixelStats>& stats, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write '" + path.string() + "'");
  os << "path,label,mean,max,min\n";
  char buf[96];
  for (const auto& s : stats) {
    std::snprintf(buf, sizeof buf, ",%d,%.10g,%.10g,%.10g\n", s.label, s.mean, s.max, s.min);
    os << s.path << buf;
  }
  if (!os) throw IoError("write failed for '" + path.string() + "'");
}

/// Silverman's rule of thumb, 0.9 min(sd, IQR/1.34) n^(-1/5). Falls back to
/// whichever spread is nonzero, and to 1e-3 for constant samples.
inline double silverman_bandwidth(std::vector<double> x) {
  if (x.empty()) throw ValueError("bandwidth of an empty sample");
  const double n = static_cast<double>(x.size());
  double mean = 0;
  for (double v : x) mean += v / n;
  double var = 0;
  for (double v : x) var += (v - mean) * (v - mean);
  const double sd = x.size() > 1 ? std::sqrt(var / (n - 1)) : 0.0;
  std::sort(x.begin(), x.end());
  auto quantile = [&](double q) {
    const double pos = q * (n - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, x.size() - 1);
    return x[lo] + (pos - static_cast<double>(lo)) * (x[hi] - x[lo]);
  };
  const double iqr = (quantile(0.75) - quantile(0.25)) / 1.34;
  double spread = std::min(sd, iqr);
  if (spread <= 0) spread = std::max(sd, iqr);
  if (spread <= 0) return 1e-3;
  return 0.9 * spread * std::pow(n, -0.2);
}

inline double gaussian_kde(const std::vector<double>& x, double bandwidth, double at) {
  double acc = 0;
  for (double v : x) {
    const double z = (at - v) / bandwidth;
    acc += std::exp(-0.5 * z * z);
  }
  return acc / (static_cast<double>(x.size()) * bandwidth * std::sqrt(2.0 * std::numbers::pi));
}

/// Density of each statistic per class on `points` evenly spaced values in
/// [0,1]: CSV `statistic,class,bandwidth,x,density`.
inline void write_pixel_kde_csv(const std::vector<PixelStats>& stats, const std::vector<std::string>& class_names,
                                const std::filesystem::path& path, std::size_t points = 201) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write '" + path.string() + "'");
  os << "statistic,class,bandwidth,x,density\n";
  const char* names[3] = {"mean", "max", "min"};
  char buf[128];
  for (int k = 0; k < 3; ++k) {
    for (std::size_t c = 0; c < class_names.size(); ++c) {
      std::vector<double> x;
      for (const auto& s : stats) {
        if (s.label == static_cast<int>(c)) x.push_back(k == 0 ? s.mean : k == 1 ? s.max : s.min);
      }
      if (x.empty()) continue;
      const double h = silverman_bandwidth(x);
      for (std::size_t i = 0; i < points; ++i) {
        const double at = points > 1 ? static_cast<double>(i) / static_cast<double>(points - 1) : 0.0;
        std::snprintf(buf, sizeof buf, ",%.10g,%.10g,%.10g\n", h, at, gaussian_kde(x, h, at));
        os << names[k] << ',' << class_names[c] << buf;
      }
    }
  }
  if (!os) throw IoError("write failed for '" + path.string() + "'");
}

}  // namespace cct
