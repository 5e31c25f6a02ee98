#include <CLI11.hpp>

#include <cctype>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "cct/cct.hpp"

namespace fs = std::filesystem;
using namespace cct;

namespace {

void log(const std::string& msg) { std::cerr << msg << "\n"; }

/// Resolves `p` against the output directory and refuses anything that
/// escapes it.
fs::path inside(const fs::path& out_dir, const fs::path& p) {
  const fs::path base = fs::weakly_canonical(fs::absolute(out_dir));
  const fs::path full = fs::weakly_canonical(p.is_absolute() ? p : base / p);
  const auto rel = full.lexically_relative(base);
  if (rel.empty() || *rel.begin() == "..") {
    throw ValueError("'" + p.string() + "' lies outside --out-dir '" + out_dir.string() + "'");
  }
  return full;
}

RunConfig config_or_default(const std::string& path) {
  if (path.empty()) {
    RunConfig c;
    c.augment.seed = c.seed;
    c.validate();
    return c;
  }
  return load_run_config(path);
}

std::string fixed4(double v) {
  char b[32];
  std::snprintf(b, sizeof b, "%.4f", v);
  return b;
}

void write_json(const json& j, const fs::path& path) {
  std::ofstream os(path);
  os << j.dump(2) << "\n";
  if (!os) throw IoError("cannot write '" + path.string() + "'");
}

/// [C,H,W] in [0,1] as a gray image with the channels side by side.
template <Scalar T>
ImageU8 tiled(const Tensor<T>& t) {
  const std::size_t C = t.dim(0), H = t.dim(1), W = t.dim(2);
  ImageU8 img(H, W * C, 1);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t x = 0; x < W; ++x) img.at(y, c * W + x) = saturate_u8(255.0 * t[(c * H + y) * W + x]);
    }
  }
  return img;
}

std::vector<fs::path> png_inputs(const fs::path& p) {
  if (fs::is_regular_file(p)) return {p};
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(p)) {
    if (e.is_regular_file() && detail::has_png_extension(e.path())) out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  if (out.empty()) throw ValueError("no PNG files in '" + p.string() + "'");
  return out;
}

// --- preprocess ------------------------------------------------------------

struct PreprocessArgs {
  std::string input, out_dir, config, dump;
};

int cmd_preprocess(const PreprocessArgs& a) {
  const RunConfig cfg = config_or_default(a.config);
  const auto files = png_inputs(a.input);
  fs::create_directories(a.out_dir);
  std::optional<fs::path> dump;
  if (!a.dump.empty()) {
    dump = inside(a.out_dir, a.dump);
    fs::create_directories(*dump);
  }
  for (const auto& f : files) {
    const auto st = preprocess_stages<float>(read_png(f), cfg.preprocess);
    const std::string stem = f.stem().string();
    write_png(fs::path(a.out_dir) / (stem + ".png"), tiled(st.tensor));
    if (dump) {
      write_png(*dump / (stem + ".clahe.png"), st.clahe);
      if (!st.ben_graham.empty()) write_png(*dump / (stem + ".bg.png"), st.ben_graham);
    }
  }
  log("preprocessed " + std::to_string(files.size()) + " image(s) into " + a.out_dir);
  return 0;
}

// --- augment-preview -------------------------------------------------------

struct AugmentArgs {
  std::string image, out_dir, config;
  std::size_t count = 8;
};

int cmd_augment_preview(const AugmentArgs& a) {
  const RunConfig cfg = config_or_default(a.config);
  const auto x = preprocess_pipeline<float>(read_png(a.image), cfg.preprocess);
  fs::create_directories(a.out_dir);
  const std::string stem = fs::path(a.image).stem().string();
  write_png(fs::path(a.out_dir) / (stem + ".orig.png"), tiled(x));
  for (std::size_t k = 0; k < a.count; ++k) {
    char name[64];
    std::snprintf(name, sizeof name, ".aug%03zu.png", k);
    write_png(fs::path(a.out_dir) / (stem + name), tiled(sample_augment(x, cfg.augment, k)));
  }
  log("wrote " + std::to_string(a.count) + " augmented preview(s) to " + a.out_dir);
  return 0;
}

// --- dataset ---------------------------------------------------------------

struct DatasetArgs {
  std::string root, class_map = "binary", manifest, out_dir;
  std::vector<double> fractions{0.8, 0.1, 0.1};
  std::uint64_t seed = 42;
  std::size_t per_class = 250, size = 64;
};

void summarize(const DatasetManifest& m) {
  for (std::size_t c = 0; c < m.class_names.size(); ++c) {
    std::size_t n[3] = {};
    for (const auto& e : m.entries) {
      if (static_cast<std::size_t>(e.label) == c) ++n[static_cast<int>(e.split)];
    }
    log("  " + m.class_names[c] + ": train " + std::to_string(n[0]) + ", val " + std::to_string(n[1]) + ", test " +
        std::to_string(n[2]));
  }
  for (const auto& s : m.skipped) log("  skipped unreadable file " + s);
  for (const auto& w : m.warnings) log("  warning: " + w);
}

int cmd_dataset_scan(const DatasetArgs& a) {
  if (!fs::is_directory(a.root)) throw ValueError("dataset root '" + a.root + "' is not a directory");
  const auto m = scan_folder(a.root, ClassMap::preset(a.class_map));
  fs::create_directories(a.out_dir);
  save_manifest(m, fs::path(a.out_dir) / "manifest.json");
  log("scanned " + std::to_string(m.entries.size()) + " image(s)");
  summarize(m);
  return 0;
}

int cmd_dataset_synth(const DatasetArgs& a) {
  const auto ds = synth_generate(a.per_class, a.size, a.seed);
  write_synthetic(ds, a.out_dir);
  json blobs = json::array();
  for (std::size_t i = 0; i < ds.images.size(); ++i) {
    const BlobInfo& b = ds.blobs[i];
    char name[32];
    std::snprintf(name, sizeof name, "%06zu.png", i);
    blobs.push_back({{"path", ds.class_names[static_cast<std::size_t>(ds.labels[i])] + "/" + name},
                     {"label", ds.labels[i]},
                     {"quadrant", b.quadrant},
                     {"center_y", b.center_y},
                     {"center_x", b.center_x},
                     {"sigma", b.sigma}});
  }
  write_json(blobs, fs::path(a.out_dir) / "blobs.json");
  log("wrote " + std::to_string(ds.images.size()) + " synthetic image(s) to " + a.out_dir);
  return 0;
}

int cmd_dataset_split(const DatasetArgs& a) {
  if (a.fractions.size() != 3) throw ValueError("--fractions takes three values: train val test");
  if (!fs::is_regular_file(a.manifest)) throw ValueError("manifest '" + a.manifest + "' does not exist");
  const auto m = split(load_manifest(a.manifest), {a.fractions[0], a.fractions[1], a.fractions[2]}, a.seed);
  fs::create_directories(a.out_dir);
  save_manifest(m, fs::path(a.out_dir) / "manifest.json");
  summarize(m);
  return 0;
}

// --- train -----------------------------------------------------------------

struct TrainArgs {
  std::string config, out_dir, resume;
};

/// A resumed run may extend the epoch budget or patience; everything else
/// must match the checkpoint.
void check_resume_compatible(const RunConfig& ckpt, const RunConfig& cfg) {
  RunConfig a = ckpt, b = cfg;
  a.optimizer.epochs = b.optimizer.epochs;
  a.optimizer.early_stop_patience = b.optimizer.early_stop_patience;
  const json ja = to_json(a), jb = to_json(b);
  if (ja == jb) return;
  for (const auto& [k, v] : jb.items()) {
    if (ja.at(k) != v) throw ValueError("--config differs from the checkpoint in section '" + k + "'");
  }
  throw ValueError("--config differs from the checkpoint");
}

template <Scalar T>
int train_typed(RunConfig cfg, const TrainArgs& a, bool have_config) {
  const fs::path out(a.out_dir);
  TrainState<T> state;
  if (!a.resume.empty()) {
    auto ck = load_checkpoint<T>(a.resume);
    if (have_config) {
      check_resume_compatible(ck.config, cfg);
    } else {
      cfg = ck.config;
    }
    state = std::move(ck.state);
    log("resuming from epoch " + std::to_string(state.epoch));
  } else {
    state = init_state<T>(cfg.model, cfg.seed);
  }
  const auto data = load_run_data<T>(cfg);
  log("data: train " + std::to_string(data.train.size()) + ", val " + std::to_string(data.val.size()) + ", test " +
      std::to_string(data.test.size()));

  fs::create_directories(out);
  if (a.resume.empty()) fs::remove(out / "ckpt_best.cct");  // stale from an earlier run
  save_manifest(data.manifest, out / "manifest.json");
  write_json(to_json(cfg), out / "config.json");

  TrainRunOptions<T> opt;
  opt.out_dir = out;
  auto t0 = std::chrono::steady_clock::now();
  opt.on_epoch = [&](const TrainState<T>& s) {
    const auto t1 = std::chrono::steady_clock::now();
    const auto& h = s.history.back();
    char line[200];
    std::snprintf(line, sizeof line, "epoch %llu/%zu  loss %.4f  acc %.4f  val_loss %.4f  val_acc %.4f  (%.1f s)",
                  static_cast<unsigned long long>(s.epoch), cfg.optimizer.epochs, h.train_loss, h.train_acc,
                  h.val_loss, h.val_acc, std::chrono::duration<double>(t1 - t0).count());
    log(line);
    t0 = t1;
    return false;
  };
  run_training(state, cfg, data.train, data.val_or_null(), opt);

  const bool have_best = fs::exists(out / "ckpt_best.cct");
  const CctParams<T> params = have_best ? load_checkpoint<T>(out / "ckpt_best.cct").state.params : state.params;
  const auto [split_id, ds] = report_split(data);
  const EvalReport rep = evaluate_report(params, *ds, cfg.model, data.manifest.class_names);
  write_eval_artifacts(rep,
                       {{"split", split_name(split_id)},
                        {"checkpoint", have_best ? "ckpt_best.cct" : "ckpt_last.cct"},
                        {"epochs_trained", state.epoch},
                        {"best_epoch", state.best_epoch}},
                       out);
  log("final " + std::string(split_name(split_id)) + " accuracy " + fixed4(rep.accuracy) + ", macro F1 " + fixed4(rep.macro_avg.f1));
  return 0;
}

int cmd_train(const TrainArgs& a) {
  if (a.config.empty() && a.resume.empty()) throw ValueError("train needs --config or --resume");
  RunConfig cfg;
  int precision = 0;
  if (!a.config.empty()) {
    cfg = load_run_config(a.config);
    check_data_sources(cfg.data);
    precision = cfg.model.precision;
  }
  if (!a.resume.empty()) {
    if (!fs::is_regular_file(a.resume)) throw ValueError("--resume checkpoint '" + a.resume + "' does not exist");
    const int ck = checkpoint_dtype(a.resume) == DType::f32 ? 32 : 64;
    if (precision && precision != ck) throw ValueError("--config precision differs from the checkpoint");
    precision = ck;
  }
  return precision == 64 ? train_typed<double>(cfg, a, !a.config.empty())
                         : train_typed<float>(cfg, a, !a.config.empty());
}

// --- eval ------------------------------------------------------------------

struct EvalArgs {
  std::string ckpt, out_dir, config, split;
};

template <Scalar T>
int eval_typed(const EvalArgs& a) {
  auto ck = load_checkpoint<T>(a.ckpt);
  RunConfig cfg = ck.config;
  if (!a.config.empty()) {
    cfg = load_run_config(a.config);
    if (to_json(cfg.model) != to_json(ck.config.model)) throw ValueError("--config model differs from the checkpoint");
  }
  const auto data = load_run_data<T>(cfg);
  auto [split_id, ds] = report_split(data);
  if (!a.split.empty()) {
    split_id = split_from_name(a.split);
    ds = split_id == Split::train ? &data.train : split_id == Split::val ? &data.val : &data.test;
    if (ds->size() == 0) throw ValueError("split '" + a.split + "' is empty");
  }
  const EvalReport rep = evaluate_report(ck.state.params, *ds, cfg.model, data.manifest.class_names);
  write_eval_artifacts(rep, {{"split", split_name(split_id)}, {"checkpoint", a.ckpt}}, a.out_dir);
  for (const auto& w : rep.warnings) log("warning: " + w);
  log(std::string(split_name(split_id)) + " accuracy " + fixed4(rep.accuracy) + ", macro F1 " + fixed4(rep.macro_avg.f1) +
      ", hamming loss " + fixed4(rep.hamming_loss));
  return 0;
}

int cmd_eval(const EvalArgs& a) {
  if (!a.split.empty() && a.split != "train" && a.split != "val" && a.split != "test") {
    throw ValueError("--split must be train, val or test");
  }
  if (!a.config.empty()) check_data_sources(load_run_config(a.config).data);
  return checkpoint_dtype(a.ckpt) == DType::f64 ? eval_typed<double>(a) : eval_typed<float>(a);
}

// --- stats -----------------------------------------------------------------

struct StatsArgs {
  std::string config, root, class_map = "binary", out_dir;
  std::size_t points = 201;
};

int cmd_stats(const StatsArgs& a) {
  if (a.config.empty() == a.root.empty()) throw ValueError("stats needs exactly one of --config or --root");
  std::vector<PixelStats> stats;
  std::vector<std::string> names;
  if (!a.root.empty()) {
    if (!fs::is_directory(a.root)) throw ValueError("dataset root '" + a.root + "' is not a directory");
    const auto m = scan_folder(a.root, ClassMap::preset(a.class_map));
    std::vector<fs::path> files;
    std::vector<int> labels;
    for (const auto& e : m.entries) {
      files.push_back(e.path);
      labels.push_back(e.label);
    }
    stats = pixel_stats(files, labels, m.root);
    names = m.class_names;
  } else {
    const RunConfig cfg = load_run_config(a.config);
    if (cfg.data.source == "synthetic") {
      const auto ds = synth_generate(cfg.data.synthetic_per_class, cfg.data.synthetic_size, cfg.seed);
      for (std::size_t i = 0; i < ds.images.size(); ++i) {
        PixelStats s = image_pixel_stats(ds.images[i]);
        s.path = "synthetic/" + std::to_string(i);
        s.label = ds.labels[i];
        stats.push_back(s);
      }
      names = ds.class_names;
    } else {
      const auto m = run_manifest(cfg);
      std::vector<fs::path> files;
      std::vector<int> labels;
      for (const auto& e : m.entries) {
        files.push_back(e.path);
        labels.push_back(e.label);
      }
      stats = pixel_stats(files, labels, m.root);
      names = m.class_names;
    }
  }
  fs::create_directories(a.out_dir);
  write_pixel_stats_csv(stats, fs::path(a.out_dir) / "pixel_stats.csv");
  write_pixel_kde_csv(stats, names, fs::path(a.out_dir) / "pixel_kde.csv", a.points);
  log("pixel statistics for " + std::to_string(stats.size()) + " image(s) written to " + a.out_dir);
  return 0;
}

// --- explain ---------------------------------------------------------------

struct ExplainArgs {
  std::string image, ckpt, target = "auto", out;
  double alpha = 0.4;
};

template <Scalar T>
int explain_typed(const ExplainArgs& a, int target) {
  const auto ck = load_checkpoint<T>(a.ckpt);
  const CctConfig& mc = ck.config.model;
  if (target >= static_cast<int>(mc.num_classes)) {
    throw ValueError("--class " + std::to_string(target) + " outside [0," + std::to_string(mc.num_classes) + ")");
  }
  const ImageU8 img = read_png(a.image);
  const Tensor<T> x = preprocess_pipeline<T>(img, ck.config.preprocess);
  Shape s{1};
  for (auto d : x.shape()) s.push_back(d);
  const Heatmap hm = grad_cam(Tensor<T>(s, x.data()), ck.state.params, mc, target);
  const Heatmap full = resize_heatmap(hm, img.height, img.width);

  const fs::path out(a.out);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  const fs::path overlay_path = out.parent_path() / (out.stem().string() + ".overlay.png");
  const fs::path sidecar = out.parent_path() / (out.stem().string() + ".json");
  write_png(out, heatmap_color(full));
  write_png(overlay_path, overlay(img, full, a.alpha));
  write_json({{"image", a.image},
              {"checkpoint", a.ckpt},
              {"predicted_class", hm.predicted_class},
              {"target_class", hm.target_class},
              {"probabilities", hm.probabilities},
              {"layer", hm.source},
              {"heatmap", out.filename().string()},
              {"overlay", overlay_path.filename().string()}},
             sidecar);
  log("predicted class " + std::to_string(hm.predicted_class) + ", explained class " +
      std::to_string(hm.target_class) + "; wrote " + out.string());
  return 0;
}

int cmd_explain(const ExplainArgs& a) {
  int target = -1;
  if (a.target != "auto") {
    try {
      std::size_t used = 0;
      target = std::stoi(a.target, &used);
      if (used != a.target.size() || target < 0) throw std::invalid_argument("");
    } catch (const std::exception&) {
      throw ValueError("--class must be 'auto' or a nonnegative integer, got '" + a.target + "'");
    }
  }
  if (!(a.alpha >= 0.0 && a.alpha <= 1.0)) throw ValueError("--alpha must lie in [0,1]");
  return checkpoint_dtype(a.ckpt) == DType::f64 ? explain_typed<double>(a, target) : explain_typed<float>(a, target);
}

// --- selftest --------------------------------------------------------------

int cmd_selftest() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto results = selftest::run_all();
  const double total = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::size_t failed = 0;
  for (const auto& r : results) {
    std::printf("%-4s  %-32s %7.2fs  %s\n", r.passed ? "PASS" : "FAIL", r.name.c_str(), r.seconds, r.detail.c_str());
    failed += !r.passed;
  }
  std::printf("%zu/%zu passed in %.2f s\n", results.size() - failed, results.size(), total);
  return failed ? 2 : 0;
}

bool knows_flag(const CLI::App* app, const std::string& flag) {
  for (const CLI::Option* o : app->get_options()) {
    for (const auto& n : o->get_lnames()) {
      if (flag == "--" + n) return true;
    }
    for (const auto& n : o->get_snames()) {
      if (flag == "-" + n) return true;
    }
  }
  return false;
}

/// Names the first unknown subcommand or flag. CLI11 would otherwise report
/// a missing required option first.
std::optional<std::string> find_unknown(CLI::App& app, int argc, char** argv) {
  std::vector<CLI::App*> chain{&app};
  for (int i = 1; i < argc; ++i) {
    const std::string tok = argv[i];
    if (tok == "--") break;
    if (tok.size() > 1 && tok[0] == '-' && !std::isdigit(static_cast<unsigned char>(tok[1])) && tok[1] != '.') {
      const std::string flag = tok.substr(0, tok.find('='));
      bool known = false;
      for (const CLI::App* a : chain) known = known || knows_flag(a, flag);
      if (!known) return "unknown option " + flag;
      continue;
    }
    CLI::App* cur = chain.back();
    if (!cur->get_subcommands({}).empty()) {
      CLI::App* next = nullptr;
      for (CLI::App* s : cur->get_subcommands({})) {
        if (s->get_name() == tok) next = s;
      }
      if (next) {
        chain.push_back(next);
      } else if (i == 1 || std::string(argv[i - 1]).rfind('-', 0) != 0) {
        return "unknown subcommand '" + tok + "'";
      }
    }
  }
  return std::nullopt;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Compact Convolutional Transformer toolkit for chest X-ray classification", "cct"};
  app.set_version_flag("--version", std::string("cct ") + kVersion);
  app.require_subcommand(1);
  std::size_t threads = 1;
  app.add_option("--threads", threads, "Upper bound on worker threads (computation runs on one)")
      ->check(CLI::PositiveNumber);

  PreprocessArgs pre;
  auto* c_pre = app.add_subcommand("preprocess", "Write preprocessed model inputs as PNG previews");
  c_pre->add_option("--input", pre.input, "PNG file or directory of PNGs")->required()->check(CLI::ExistingPath);
  c_pre->add_option("--out-dir", pre.out_dir, "Output directory")->required();
  c_pre->add_option("--config", pre.config, "Run configuration (JSON)")->check(CLI::ExistingFile);
  c_pre->add_option("--dump-intermediate", pre.dump, "Directory under --out-dir for <stem>.clahe.png and <stem>.bg.png");

  AugmentArgs aug;
  auto* c_aug = app.add_subcommand("augment-preview", "Write seeded augmentations of one image");
  c_aug->add_option("--image", aug.image, "Source PNG")->required()->check(CLI::ExistingFile);
  c_aug->add_option("--out-dir", aug.out_dir, "Output directory")->required();
  c_aug->add_option("--config", aug.config, "Run configuration (JSON)")->check(CLI::ExistingFile);
  c_aug->add_option("--count", aug.count, "Number of previews")->check(CLI::Range(1, 10000));

  DatasetArgs ds;
  auto* c_ds = app.add_subcommand("dataset", "Build and split dataset manifests");
  c_ds->require_subcommand(1);
  auto* c_scan = c_ds->add_subcommand("scan", "Scan <root>/<Class>/*.png into manifest.json");
  c_scan->add_option("--root", ds.root, "Dataset root")->required();
  c_scan->add_option("--class-map", ds.class_map, "binary, four_class or folders")
      ->check(CLI::IsMember({"binary", "four_class", "folders"}));
  c_scan->add_option("--out-dir", ds.out_dir, "Output directory")->required();
  auto* c_synth = c_ds->add_subcommand("synth", "Write the synthetic blob dataset as <out>/<class>/*.png");
  c_synth->add_option("--per-class", ds.per_class, "Images per class")->check(CLI::Range(1, 1000000));
  c_synth->add_option("--size", ds.size, "Image side in pixels")->check(CLI::Range(16, 4096));
  c_synth->add_option("--seed", ds.seed, "Generator seed");
  c_synth->add_option("--out-dir", ds.out_dir, "Output directory")->required();
  auto* c_split = c_ds->add_subcommand("split", "Stratified train/val/test split of a manifest");
  c_split->add_option("--manifest", ds.manifest, "Input manifest.json")->required();
  c_split->add_option("--fractions", ds.fractions, "train val test fractions")->expected(3);
  c_split->add_option("--seed", ds.seed, "Split seed");
  c_split->add_option("--out-dir", ds.out_dir, "Output directory")->required();

  TrainArgs tr;
  auto* c_train = app.add_subcommand("train", "Train a model; writes checkpoints, curves and a report");
  c_train->add_option("--config", tr.config, "Run configuration (JSON)");
  c_train->add_option("--out-dir", tr.out_dir, "Output directory")->required();
  c_train->add_option("--resume", tr.resume, "Checkpoint to continue from");

  EvalArgs ev;
  auto* c_eval = app.add_subcommand("eval", "Evaluate a checkpoint; writes report.json and confusion.csv");
  c_eval->add_option("--ckpt", ev.ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  c_eval->add_option("--out-dir", ev.out_dir, "Output directory")->required();
  c_eval->add_option("--config", ev.config, "Run configuration overriding the checkpoint's data settings")
      ->check(CLI::ExistingFile);
  c_eval->add_option("--split", ev.split, "train, val or test (default: test if present, else val)");

  StatsArgs st;
  auto* c_stats = app.add_subcommand("stats", "Per-image pixel statistics and their class-wise densities");
  c_stats->add_option("--config", st.config, "Run configuration naming the dataset")->check(CLI::ExistingFile);
  c_stats->add_option("--root", st.root, "Dataset root (instead of --config)");
  c_stats->add_option("--class-map", st.class_map, "Class map for --root")
      ->check(CLI::IsMember({"binary", "four_class", "folders"}));
  c_stats->add_option("--out-dir", st.out_dir, "Output directory")->required();
  c_stats->add_option("--points", st.points, "Density grid points")->check(CLI::Range(2, 100000));

  ExplainArgs ex;
  auto* c_ex = app.add_subcommand("explain", "Grad-CAM heatmap, overlay and JSON sidecar for one image");
  c_ex->add_option("--image", ex.image, "Source PNG")->required()->check(CLI::ExistingFile);
  c_ex->add_option("--ckpt", ex.ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  c_ex->add_option("--class", ex.target, "Target class index or 'auto' for the prediction");
  c_ex->add_option("--out", ex.out, "Heatmap PNG; overlay and sidecar are written beside it")->required();
  c_ex->add_option("--alpha", ex.alpha, "Overlay opacity");

  auto* c_self = app.add_subcommand("selftest", "Gradient checks and oracle suites");

  if (const auto unknown = find_unknown(app, argc, argv)) {
    std::cerr << "error: " << *unknown << "\n\n" << app.help();
    return 1;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    if (code == 0) return 0;
    if (app.get_subcommands().empty()) std::cerr << app.help();
    return 1;
  }

  try {
    if (*c_pre) return cmd_preprocess(pre);
    if (*c_aug) return cmd_augment_preview(aug);
    if (*c_scan) return cmd_dataset_scan(ds);
    if (*c_synth) return cmd_dataset_synth(ds);
    if (*c_split) return cmd_dataset_split(ds);
    if (*c_train) return cmd_train(tr);
    if (*c_eval) return cmd_eval(ev);
    if (*c_stats) return cmd_stats(st);
    if (*c_ex) return cmd_explain(ex);
    if (*c_self) return cmd_selftest();
  } catch (const ValueError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
