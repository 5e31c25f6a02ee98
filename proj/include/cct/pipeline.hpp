#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "cct/config.hpp"
#include "cct/dataset.hpp"
#include "cct/gradcam.hpp"
#include "cct/metrics.hpp"
#include "cct/train.hpp"

/// Run-level glue shared by the CLI and the acceptance driver: loading the
/// configured data, producing evaluation artifacts, scoring Grad-CAM
/// localization on the synthetic set.
namespace cct {

/// Fails with ValueError when the configured dataset root or manifest does
/// not exist, so a bad path is reported before any work starts.
inline void check_data_sources(const DataConfig& d) {
  if (d.source == "folder" && !fs::is_directory(d.root)) {
    throw ValueError("dataset root '" + d.root + "' does not exist or is not a directory");
  }
  if (d.source == "manifest" && !fs::is_regular_file(d.manifest)) {
    throw ValueError("dataset manifest '" + d.manifest + "' does not exist");
  }
}

template <Scalar T>
struct RunData {
  DatasetManifest manifest;
  TensorDataset<T> train, val, test;
  /// Source images and blob truth when the source is synthetic; entry i of
  /// the manifest is image i.
  std::optional<SyntheticDataset> synthetic;

  const TensorDataset<T>* val_or_null() const { return val.size() ? &val : nullptr; }
};

/// Manifest of the configured source with its split assignment. A manifest
/// source keeps the split stored in the file.
inline DatasetManifest run_manifest(const RunConfig& cfg, const SyntheticDataset* synth = nullptr) {
  const DataConfig& d = cfg.data;
  check_data_sources(d);
  DatasetManifest m;
  if (d.source == "synthetic") {
    if (!synth) throw ValueError("synthetic source needs the generated dataset");
    m.root = "synthetic";
    m.class_names = synth->class_names;
    for (std::size_t i = 0; i < synth->images.size(); ++i) {
      const int y = synth->labels[i];
      m.entries.push_back({"synthetic/" + std::to_string(i), y, synth->class_names[static_cast<std::size_t>(y)]});
    }
    m = split(std::move(m), d.split, cfg.seed);
  } else if (d.source == "folder") {
    m = split(scan_folder(d.root, ClassMap::preset(d.class_map)), d.split, cfg.seed);
  } else {
    m = load_manifest(d.manifest);
  }
  if (m.class_names.size() != cfg.model.num_classes) {
    throw ValueError("dataset has " + std::to_string(m.class_names.size()) + " classes but model.num_classes is " +
                     std::to_string(cfg.model.num_classes));
  }
  return m;
}

template <Scalar T>
RunData<T> load_run_data(const RunConfig& cfg) {
  RunData<T> r;
  if (cfg.data.source == "synthetic") {
    r.synthetic = synth_generate(cfg.data.synthetic_per_class, cfg.data.synthetic_size, cfg.seed);
    r.manifest = run_manifest(cfg, &*r.synthetic);
    const auto all = preprocess_synthetic<T>(*r.synthetic, cfg.preprocess);
    r.train = all.subset(r.manifest.indices(Split::train));
    r.val = all.subset(r.manifest.indices(Split::val));
    r.test = all.subset(r.manifest.indices(Split::test));
  } else {
    r.manifest = run_manifest(cfg);
    r.train = load_split<T>(r.manifest, Split::train, cfg.preprocess);
    r.val = load_split<T>(r.manifest, Split::val, cfg.preprocess);
    r.test = load_split<T>(r.manifest, Split::test, cfg.preprocess);
  }
  if (r.train.size() == 0) throw ValueError("the training split is empty");
  return r;
}

/// Split used for the final report: test when present, else val, else train.
template <Scalar T>
std::pair<Split, const TensorDataset<T>*> report_split(const RunData<T>& d) {
  if (d.test.size()) return {Split::test, &d.test};
  if (d.val.size()) return {Split::val, &d.val};
  return {Split::train, &d.train};
}

template <Scalar T>
EvalReport evaluate_report(const CctParams<T>& params, const TensorDataset<T>& ds, const CctConfig& cfg,
                           const std::vector<std::string>& class_names) {
  const EvalResult e = evaluate_split(params, ds, cfg);
  return evaluate_predictions(ds.labels, e.predictions, class_names);
}

/// report.json (the report plus `extra` fields) and confusion.csv.
inline void write_eval_artifacts(const EvalReport& rep, const json& extra, const fs::path& dir) {
  fs::create_directories(dir);
  json j = report_to_json(rep);
  for (const auto& [k, v] : extra.items()) j[k] = v;
  std::ofstream os(dir / "report.json");
  if (!os) throw IoError("cannot write '" + (dir / "report.json").string() + "'");
  os << j.dump(2) << "\n";
  if (!os) throw IoError("failed writing '" + (dir / "report.json").string() + "'");
  write_confusion_csv(rep, dir / "confusion.csv");
}

/// Mean heatmap value inside and outside a quadrant of a square map.
inline std::pair<double, double> quadrant_means(const Heatmap& hm, int quadrant) {
  double in = 0, out = 0;
  std::size_t n_in = 0, n_out = 0;
  for (std::size_t y = 0; y < hm.height; ++y) {
    for (std::size_t x = 0; x < hm.width; ++x) {
      // pixel centers
      if (in_quadrant(quadrant, hm.height, static_cast<double>(y) + 0.5, static_cast<double>(x) + 0.5)) {
        in += hm.at(y, x);
        ++n_in;
      } else {
        out += hm.at(y, x);
        ++n_out;
      }
    }
  }
  return {n_in ? in / static_cast<double>(n_in) : 0.0, n_out ? out / static_cast<double>(n_out) : 0.0};
}

struct LocalizationResult {
  std::size_t evaluated = 0;  // correctly classified diseased images
  std::size_t localized = 0;  // inside mean > outside mean
  double fraction() const { return evaluated ? static_cast<double>(localized) / static_cast<double>(evaluated) : 0.0; }
};

/// Grad-CAM on every correctly classified blob image of the validation split,
/// scored against the quadrant the blob was drawn in.
template <Scalar T>
LocalizationResult gradcam_localization(const CctParams<T>& params, const RunConfig& cfg, const RunData<T>& data) {
  if (!data.synthetic) throw ValueError("localization needs the synthetic dataset");
  LocalizationResult r;
  const auto idx = data.manifest.indices(Split::val);
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const BlobInfo& blob = data.synthetic->blobs[idx[k]];
    if (!blob.present) continue;
    const Tensor<T>& x = data.val.inputs[k];
    Shape s{1};
    for (auto d : x.shape()) s.push_back(d);
    const Heatmap hm = grad_cam(Tensor<T>(s, x.data()), params, cfg.model, data.val.labels[k]);
    if (hm.predicted_class != data.val.labels[k]) continue;
    ++r.evaluated;
    const auto [in, out] = quadrant_means(hm, blob.quadrant);
    r.localized += in > out;
  }
  return r;
}

}  // namespace cct
