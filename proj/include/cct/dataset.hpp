#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <numeric>
#include <string>
#include <vector>

#include "cct/errors.hpp"
#include "cct/filters.hpp"
#include "cct/image.hpp"
#include "cct/preprocess.hpp"
#include "cct/rng.hpp"
#include "cct/tensor.hpp"

namespace cct {

namespace fs = std::filesystem;

/// Folder name -> label. An empty `folders` map means every subfolder of the
/// root becomes its own class, in sorted order.
struct ClassMap {
  std::vector<std::string> class_names;
  std::map<std::string, int> folders;

  /// Normal vs. everything else.
  static ClassMap binary() {
    return {{"healthy", "diseased"}, {{"Normal", 0}, {"COVID", 1}, {"Viral Pneumonia", 1}, {"Lung_Opacity", 1}}};
  }
  static ClassMap four_class() {
    return {{"Normal", "COVID", "Lung_Opacity", "Viral Pneumonia"},
            {{"Normal", 0}, {"COVID", 1}, {"Lung_Opacity", 2}, {"Viral Pneumonia", 3}}};
  }
  static ClassMap folders_as_classes() { return {}; }

  static ClassMap preset(const std::string& name) {
    if (name == "binary") return binary();
    if (name == "four_class") return four_class();
    if (name == "folders") return folders_as_classes();
    throw ValueError("unknown class map '" + name + "' (expected binary, four_class or folders)");
  }
};

enum class Split { train, val, test };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

inline Split split_from_name(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw FormatError("unknown split '" + s + "'");
}

struct ManifestEntry {
  std::string path;  // relative to the manifest root, '/'-separated
  int label = 0;
  std::string class_name;
  Split split = Split::train;

  bool operator==(const ManifestEntry&) const = default;
};

struct DatasetManifest {
  std::string root;
  std::vector<std::string> class_names;
  std::vector<ManifestEntry> entries;
  std::uint64_t seed = 0;
  std::vector<std::string> skipped;   // unreadable files
  std::vector<std::string> warnings;  // not serialized

  std::vector<std::size_t> indices(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < entries.size(); ++i) {
      if (entries[i].split == s) out.push_back(i);
    }
    return out;
  }

  bool operator==(const DatasetManifest& o) const {
    return root == o.root && class_names == o.class_names && entries == o.entries && seed == o.seed &&
           skipped == o.skipped;
  }
};

namespace detail {

inline bool has_png_extension(const fs::path& p) {
  std::string e = p.extension().string();
  std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return e == ".png";
}

}  // namespace detail

/// Enumerates `<root>/<Class>/**/*.png`. Directories named `masks` are not
/// descended into (the radiography release ships lung masks beside the
/// images). Files that fail to decode are recorded in `skipped`.
inline DatasetManifest scan_folder(const fs::path& root, const ClassMap& map) {
  if (!fs::is_directory(root)) throw IoError("dataset root '" + root.string() + "' is not a directory");
  DatasetManifest m;
  m.root = root.string();

  std::vector<std::string> subdirs;
  for (const auto& d : fs::directory_iterator(root)) {
    if (d.is_directory()) subdirs.push_back(d.path().filename().string());
  }
  std::sort(subdirs.begin(), subdirs.end());

  std::map<std::string, int> folders = map.folders;
  m.class_names = map.class_names;
  if (folders.empty()) {
    for (const auto& s : subdirs) {
      folders[s] = static_cast<int>(m.class_names.size());
      m.class_names.push_back(s);
    }
  }
  for (const auto& [folder, label] : folders) {
    if (label < 0 || static_cast<std::size_t>(label) >= m.class_names.size()) {
      throw ValueError("class map label " + std::to_string(label) + " for '" + folder + "' out of range");
    }
  }

  for (const auto& s : subdirs) {
    auto it = folders.find(s);
    if (it == folders.end()) {
      m.warnings.push_back("ignoring folder '" + s + "' (not in class map)");
      continue;
    }
    const fs::path dir = root / s;
    for (auto rit = fs::recursive_directory_iterator(dir); rit != fs::recursive_directory_iterator(); ++rit) {
      if (rit->is_directory() && rit->path().filename() == "masks") {
        rit.disable_recursion_pending();
        continue;
      }
      if (!rit->is_regular_file() || !detail::has_png_extension(rit->path())) continue;
      const std::string rel = fs::relative(rit->path(), root).generic_string();
      if (!probe_png(rit->path())) {
        m.skipped.push_back(rel);
        m.warnings.push_back("skipping unreadable image '" + rel + "'");
        continue;
      }
      m.entries.push_back({rel, it->second, m.class_names[static_cast<std::size_t>(it->second)], Split::train});
    }
  }
  std::sort(m.entries.begin(), m.entries.end(), [](const auto& a, const auto& b) { return a.path < b.path; });
  std::sort(m.skipped.begin(), m.skipped.end());

  std::vector<std::size_t> per_class(m.class_names.size(), 0);
  for (const auto& e : m.entries) ++per_class[static_cast<std::size_t>(e.label)];
  for (std::size_t c = 0; c < per_class.size(); ++c) {
    if (per_class[c] == 0) {
      throw ValueError("class '" + m.class_names[c] + "' has no readable images under '" + root.string() + "'");
    }
  }
  return m;
}

/// Seeded Fisher-Yates permutation of [0, n).
inline std::vector<std::size_t> seeded_permutation(std::size_t n, std::uint64_t seed, std::uint64_t stream) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), 0);
  CounterRng r(seed, stream);
  for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[r.below(i)]);
  return p;
}

struct SplitFractions {
  double train = 0.8, val = 0.1, test = 0.1;
};

/// Stratified split. Per class: seeded shuffle, then val takes
/// floor(f_val*n) and test takes floor((f_val+f_test)*n) - floor(f_val*n);
/// the remainder goes to train. Cumulative flooring keeps every split within
/// one sample of its requested share.
inline DatasetManifest split(DatasetManifest m, SplitFractions f, std::uint64_t seed) {
  if (f.train < 0 || f.val < 0 || f.test < 0 || std::abs(f.train + f.val + f.test - 1.0) > 1e-9) {
    throw ValueError("split fractions must be nonnegative and sum to 1");
  }
  m.seed = seed;
  for (std::size_t c = 0; c < m.class_names.size(); ++c) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < m.entries.size(); ++i) {
      if (static_cast<std::size_t>(m.entries[i].label) == c) idx.push_back(i);
    }
    const auto perm = seeded_permutation(idx.size(), seed, c);
    const double n = static_cast<double>(idx.size());
    const auto n_val = static_cast<std::size_t>(std::floor(f.val * n + 1e-9));
    const auto n_test = static_cast<std::size_t>(std::floor((f.val + f.test) * n + 1e-9)) - n_val;
    for (std::size_t k = 0; k < idx.size(); ++k) {
      auto& e = m.entries[idx[perm[k]]];
      e.split = k < n_val ? Split::val : k < n_val + n_test ? Split::test : Split::train;
    }
    if (f.val > 0 && n_val == 0) {
      m.warnings.push_back("class '" + m.class_names[c] + "' has no samples in the validation split");
    }
  }
  return m;
}

inline nlohmann::json manifest_to_json(const DatasetManifest& m) {
  nlohmann::json j;
  j["root"] = m.root;
  j["class_names"] = m.class_names;
  j["seed"] = m.seed;
  j["skipped"] = m.skipped;
  auto& e = j["entries"] = nlohmann::json::array();
  for (const auto& x : m.entries) {
    e.push_back({{"path", x.path}, {"label", x.label}, {"class_name", x.class_name}, {"split", split_name(x.split)}});
  }
  return j;
}

inline DatasetManifest manifest_from_json(const nlohmann::json& j) {
  try {
    DatasetManifest m;
    m.root = j.at("root").get<std::string>();
    m.class_names = j.at("class_names").get<std::vector<std::string>>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.skipped = j.at("skipped").get<std::vector<std::string>>();
    for (const auto& x : j.at("entries")) {
      ManifestEntry e{x.at("path").get<std::string>(), x.at("label").get<int>(), x.at("class_name").get<std::string>(),
                      split_from_name(x.at("split").get<std::string>())};
      if (e.label < 0 || static_cast<std::size_t>(e.label) >= m.class_names.size()) {
        throw FormatError("manifest label out of range for '" + e.path + "'");
      }
      m.entries.push_back(std::move(e));
    }
    return m;
  } catch (const nlohmann::json::exception& ex) {
    throw FormatError(std::string("malformed manifest: ") + ex.what());
  }
}

inline void save_manifest(const DatasetManifest& m, const fs::path& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write manifest '" + path.string() + "'");
  os << manifest_to_json(m).dump(2) << '\n';
}

inline DatasetManifest load_manifest(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read manifest '" + path.string() + "'");
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& ex) {
    throw FormatError("manifest '" + path.string() + "' is not valid JSON: " + ex.what());
  }
  return manifest_from_json(j);
}

// ---------------------------------------------------------------------------
// Synthetic blob dataset
// ---------------------------------------------------------------------------

/// Ground truth of a synthetic image. Quadrants: 0 top-left, 1 top-right,
/// 2 bottom-left, 3 bottom-right.
struct BlobInfo {
  bool present = false;
  int quadrant = -1;
  double center_y = 0, center_x = 0;
  double sigma = 0, amplitude = 0;
};

struct SyntheticDataset {
  std::size_t size = 0;
  std::vector<ImageU8> images;
  std::vector<int> labels;
  std::vector<BlobInfo> blobs;
  std::vector<std::string> class_names{"healthy", "diseased"};
};

inline bool in_quadrant(int q, std::size_t size, double y, double x) {
  const double half = 0.5 * static_cast<double>(size);
  const bool bottom = q >= 2, right = q % 2 == 1;
  return (bottom ? y >= half : y < half) && (right ? x >= half : x < half);
}

/// Image i < n is class 0, image n + i is class 1. Each image is a smooth
/// field (bilinear upsampling of a 5x5 grid of random levels) plus mild
/// pixel noise; class 1 adds a bright Gaussian blob inside a random quadrant.
inline SyntheticDataset synth_generate(std::size_t n_per_class, std::size_t size, std::uint64_t seed) {
  if (n_per_class < 1) throw ValueError("synthetic dataset needs at least one image per class");
  if (size < 16) throw ValueError("synthetic image size must be >= 16");
  SyntheticDataset ds;
  ds.size = size;
  constexpr std::size_t grid = 5;
  const double s = static_cast<double>(size);
  for (std::size_t i = 0; i < 2 * n_per_class; ++i) {
    const int label = i < n_per_class ? 0 : 1;
    CounterRng r(seed, i);
    std::vector<double> coarse(grid * grid);
    for (auto& v : coarse) v = r.uniform(70.0, 150.0);
    std::vector<double> field(size * size);
    resize_plane(coarse.data(), grid, grid, field.data(), size, size, [](double v) { return v; });

    BlobInfo b;
    if (label == 1) {
      b.present = true;
      b.quadrant = static_cast<int>(r.below(4));
      b.sigma = r.uniform(s / 32.0, s / 16.0);
      b.amplitude = r.uniform(60.0, 90.0);
      const double lo = s / 8.0, hi = s / 2.0 - s / 8.0;
      b.center_y = r.uniform(lo, hi) + (b.quadrant >= 2 ? s / 2.0 : 0.0);
      b.center_x = r.uniform(lo, hi) + (b.quadrant % 2 == 1 ? s / 2.0 : 0.0);
    }
    ImageU8 img(size, size, 1);
    for (std::size_t y = 0; y < size; ++y) {
      for (std::size_t x = 0; x < size; ++x) {
        double v = field[y * size + x] + r.uniform(-4.0, 4.0);
        if (b.present) {
          // pixel centers at +0.5
          const double dy = static_cast<double>(y) + 0.5 - b.center_y, dx = static_cast<double>(x) + 0.5 - b.center_x;
          v += b.amplitude * std::exp(-0.5 * (dy * dy + dx * dx) / (b.sigma * b.sigma));
        }
        img.at(y, x) = saturate_u8(v);
      }
    }
    ds.images.push_back(std::move(img));
    ds.labels.push_back(label);
    ds.blobs.push_back(b);
  }
  return ds;
}

/// Writes `<dir>/<class>/<index>.png`, the layout scan_folder reads.
inline void write_synthetic(const SyntheticDataset& ds, const fs::path& dir) {
  for (const auto& c : ds.class_names) fs::create_directories(dir / c);
  for (std::size_t i = 0; i < ds.images.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "%06zu.png", i);
    write_png(dir / ds.class_names[static_cast<std::size_t>(ds.labels[i])] / name, ds.images[i]);
  }
}

// ---------------------------------------------------------------------------
// Preprocessed tensors and batching
// ---------------------------------------------------------------------------

/// Preprocessed model inputs [C,H,W] with labels.
template <Scalar T>
struct TensorDataset {
  std::vector<Tensor<T>> inputs;
  std::vector<int> labels;
  std::vector<std::string> ids;

  std::size_t size() const { return inputs.size(); }

  TensorDataset subset(const std::vector<std::size_t>& idx) const {
    TensorDataset out;
    for (std::size_t i : idx) {
      out.inputs.push_back(inputs.at(i));
      out.labels.push_back(labels.at(i));
      out.ids.push_back(ids.at(i));
    }
    return out;
  }
};

template <Scalar T>
TensorDataset<T> preprocess_synthetic(const SyntheticDataset& ds, const PreprocessConfig& cfg) {
  TensorDataset<T> out;
  for (std::size_t i = 0; i < ds.images.size(); ++i) {
    out.inputs.push_back(preprocess_pipeline<T>(ds.images[i], cfg));
    out.labels.push_back(ds.labels[i]);
    out.ids.push_back("synthetic/" + std::to_string(i));
  }
  return out;
}

template <Scalar T>
TensorDataset<T> load_split(const DatasetManifest& m, Split s, const PreprocessConfig& cfg) {
  TensorDataset<T> out;
  for (std::size_t i : m.indices(s)) {
    const auto& e = m.entries[i];
    out.inputs.push_back(preprocess_pipeline<T>(read_png(fs::path(m.root) / e.path), cfg));
    out.labels.push_back(e.label);
    out.ids.push_back(e.path);
  }
  return out;
}

/// Index batches for one epoch: a permutation keyed by seed xor epoch, cut
/// into chunks of batch_size with a final partial chunk.
inline std::vector<std::vector<std::size_t>> batch_indices(std::size_t n, std::size_t batch_size, std::uint64_t seed,
                                                           std::uint64_t epoch) {
  if (batch_size < 1) throw ValueError("batch_size must be >= 1");
  const auto order = seeded_permutation(n, seed ^ epoch, 0);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; i += batch_size) {
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + batch_size)));
  }
  return out;
}

/// Stacks [C,H,W] tensors into [B,C,H,W].
template <Scalar T>
Tensor<T> stack(const std::vector<Tensor<T>>& xs) {
  if (xs.empty()) throw ValueError("cannot stack an empty batch");
  Shape s = xs[0].shape();
  std::vector<T> data;
  data.reserve(xs.size() * xs[0].numel());
  for (const auto& x : xs) {
    if (x.shape() != s) throw ShapeError("stack: mixed shapes " + shape_str(s) + " and " + shape_str(x.shape()));
    data.insert(data.end(), x.data().begin(), x.data().end());
  }
  s.insert(s.begin(), xs.size());
  return Tensor<T>(std::move(s), std::move(data));
}

template <Scalar T>
struct Batch {
  Tensor<T> x;  // [B,C,H,W]
  std::vector<int> y;
  std::vector<std::size_t> index;  // positions in the source dataset
};

template <Scalar T>
std::vector<Batch<T>> batches(const TensorDataset<T>& ds, std::size_t batch_size, std::uint64_t seed,
                              std::uint64_t epoch) {
  std::vector<Batch<T>> out;
  for (auto& idx : batch_indices(ds.size(), batch_size, seed, epoch)) {
    Batch<T> b;
    std::vector<Tensor<T>> xs;
    for (std::size_t i : idx) {
      xs.push_back(ds.inputs[i]);
      b.y.push_back(ds.labels[i]);
    }
    b.x = stack(xs);
    b.index = std::move(idx);
    out.push_back(std::move(b));
  }
  return out;
}

}  // namespace cct
