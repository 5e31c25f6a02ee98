#pragma once

#include <array>
#include <cstdint>
#include <limits>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <optional>
#include <set>
#include <string>

#include "cct/augment.hpp"
#include "cct/dataset.hpp"
#include "cct/errors.hpp"
#include "cct/model.hpp"
#include "cct/preprocess.hpp"

namespace cct {

using json = nlohmann::json;

struct OptimizerConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t batch_size = 32;
  std::size_t epochs = 150;
  /// Stop after this many epochs without a new best validation loss; 0 = off.
  std::size_t early_stop_patience = 20;

  void validate() const {
    if (!(lr >= 0.0)) throw ValueError("optimizer.lr must be >= 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
      throw ValueError("optimizer betas must lie in [0,1)");
    }
    if (!(eps > 0.0)) throw ValueError("optimizer.eps must be > 0");
    if (batch_size < 1) throw ValueError("optimizer.batch_size must be >= 1");
    if (epochs < 1) throw ValueError("optimizer.epochs must be >= 1");
  }
};

/// Where samples come from. "synthetic" generates the blob dataset in
/// memory; "folder" scans root with a class map; "manifest" loads a
/// previously written manifest (its split assignment is kept).
struct DataConfig {
  std::string source = "synthetic";
  std::string root;
  std::string manifest;
  std::string class_map = "binary";
  std::size_t synthetic_per_class = 250;
  std::size_t synthetic_size = 64;
  SplitFractions split{0.8, 0.2, 0.0};

  void validate() const {
    if (source == "synthetic") {
      if (synthetic_per_class < 1 || synthetic_size < 16) {
        throw ValueError("data.synthetic_per_class must be >= 1 and data.synthetic_size >= 16");
      }
    } else if (source == "folder") {
      if (root.empty()) throw ValueError("data.root is required for source 'folder'");
      ClassMap::preset(class_map);
    } else if (source == "manifest") {
      if (manifest.empty()) throw ValueError("data.manifest is required for source 'manifest'");
    } else {
      throw ValueError("data.source must be synthetic, folder or manifest (got '" + source + "')");
    }
    if (split.train < 0 || split.val < 0 || split.test < 0 ||
        std::abs(split.train + split.val + split.test - 1.0) > 1e-9) {
      throw ValueError("data.split fractions must be nonnegative and sum to 1");
    }
  }
};

struct RunConfig {
  CctConfig model;
  PreprocessConfig preprocess;
  AugmentPolicy augment;
  OptimizerConfig optimizer;
  DataConfig data;
  std::uint64_t seed = 42;

  void validate() const {
    model.validate();
    preprocess.validate();
    augment.validate();
    optimizer.validate();
    data.validate();
    if (model.input_channels != preprocess.channels()) {
      throw ValueError("model.input_channels (" + std::to_string(model.input_channels) +
                       ") must equal the preprocessing channel count (" + std::to_string(preprocess.channels()) +
                       ", fusion " + (preprocess.fusion ? "on" : "off") + ")");
    }
    if (model.input_size != preprocess.output_size) {
      throw ValueError("model.input_size must equal preprocess.output_size");
    }
  }
};

namespace detail {

/// Reads keys of one JSON object and rejects anything it was not asked for.
class Section {
 public:
  Section(const json& j, std::string name) : j_(j), name_(std::move(name)) {
    if (!j_.is_object()) throw ValueError("config section '" + name_ + "' must be an object");
  }

  template <typename V>
  void get(const char* key, V& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<V>();
    } catch (const json::exception&) {
      throw ValueError("config key '" + name_ + "." + key + "' has the wrong type");
    }
  }

  /// Null or absent leaves the optional unset.
  void get_optional(const char* key, std::optional<double>& out) {
    seen_.insert(key);
    if (!j_.contains(key) || j_.at(key).is_null()) return;
    double v = 0;
    get(key, v);
    out = v;
  }

  /// Null means infinity.
  void get_unbounded(const char* key, double& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    if (j_.at(key).is_null()) {
      out = std::numeric_limits<double>::infinity();
      return;
    }
    get(key, out);
  }

  std::optional<Section> sub(const char* key) {
    seen_.insert(key);
    if (!j_.contains(key)) return std::nullopt;
    return Section(j_.at(key), name_.empty() ? key : name_ + "." + key);
  }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) {
        throw ValueError("unknown config key '" + (name_.empty() ? k : name_ + "." + k) + "'");
      }
    }
  }

 private:
  const json& j_;
  std::string name_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline json to_json(const CctConfig& c) {
  return {{"input_channels", c.input_channels},
          {"input_size", c.input_size},
          {"conv_blocks", c.conv_blocks},
          {"tokenizer_kernel", c.tokenizer_kernel},
          {"tokenizer_stride", c.tokenizer_stride},
          {"tokenizer_padding", c.tokenizer_padding},
          {"tokenizer_hidden", c.tokenizer_hidden},
          {"pool_window", c.pool_window},
          {"pool_stride", c.pool_stride},
          {"embed_dim", c.embed_dim},
          {"encoder_layers", c.encoder_layers},
          {"heads", c.heads},
          {"mlp_ratio", c.mlp_ratio},
          {"dropout", c.dropout},
          {"num_classes", c.num_classes},
          {"positional_embedding", c.positional_embedding == PositionalEmbedding::learnable ? "learnable" : "none"},
          {"precision", c.precision},
          {"layernorm_eps", c.layernorm_eps}};
}

inline void read(detail::Section s, CctConfig& c) {
  s.get("input_channels", c.input_channels);
  s.get("input_size", c.input_size);
  s.get("conv_blocks", c.conv_blocks);
  s.get("tokenizer_kernel", c.tokenizer_kernel);
  s.get("tokenizer_stride", c.tokenizer_stride);
  s.get("tokenizer_padding", c.tokenizer_padding);
  s.get("tokenizer_hidden", c.tokenizer_hidden);
  s.get("pool_window", c.pool_window);
  s.get("pool_stride", c.pool_stride);
  s.get("embed_dim", c.embed_dim);
  s.get("encoder_layers", c.encoder_layers);
  s.get("heads", c.heads);
  s.get("mlp_ratio", c.mlp_ratio);
  s.get("dropout", c.dropout);
  s.get("num_classes", c.num_classes);
  std::string pe = c.positional_embedding == PositionalEmbedding::learnable ? "learnable" : "none";
  s.get("positional_embedding", pe);
  if (pe == "learnable") {
    c.positional_embedding = PositionalEmbedding::learnable;
  } else if (pe == "none") {
    c.positional_embedding = PositionalEmbedding::none;
  } else {
    throw ValueError("model.positional_embedding must be 'learnable' or 'none'");
  }
  s.get("precision", c.precision);
  s.get("layernorm_eps", c.layernorm_eps);
  s.finish();
}

inline json to_json(const PreprocessConfig& p) {
  json clahe = {{"tiles_x", p.clahe.tiles_x},
                {"tiles_y", p.clahe.tiles_y},
                {"clip_limit", std::isfinite(p.clahe.clip_limit) ? json(p.clahe.clip_limit) : json(nullptr)},
                {"bins", p.clahe.bins}};
  json bg = {{"sigma", p.ben_graham.sigma ? json(*p.ben_graham.sigma) : json(nullptr)},
             {"alpha", p.ben_graham.alpha},
             {"beta", p.ben_graham.beta ? json(*p.ben_graham.beta) : json(nullptr)},
             {"gamma", p.ben_graham.gamma}};
  return {{"clahe", clahe}, {"ben_graham", bg}, {"fusion", p.fusion}, {"output_size", p.output_size}};
}

inline void read(detail::Section s, PreprocessConfig& p) {
  if (auto c = s.sub("clahe")) {
    c->get("tiles_x", p.clahe.tiles_x);
    c->get("tiles_y", p.clahe.tiles_y);
    c->get_unbounded("clip_limit", p.clahe.clip_limit);
    c->get("bins", p.clahe.bins);
    c->finish();
  }
  if (auto b = s.sub("ben_graham")) {
    b->get_optional("sigma", p.ben_graham.sigma);
    b->get("alpha", p.ben_graham.alpha);
    b->get_optional("beta", p.ben_graham.beta);
    b->get("gamma", p.ben_graham.gamma);
    b->finish();
  }
  s.get("fusion", p.fusion);
  s.get("output_size", p.output_size);
  s.finish();
}

inline json to_json(const AugmentPolicy& a) {
  return {{"p_blur", a.p_blur},
          {"p_rotate", a.p_rotate},
          {"p_zoom", a.p_zoom},
          {"p_flip_h", a.p_flip_h},
          {"p_flip_v", a.p_flip_v},
          {"rotate_max_deg", a.rotate_max_deg},
          {"zoom_range", {a.zoom_min, a.zoom_max}},
          {"blur_sigma_range", {a.blur_sigma_min, a.blur_sigma_max}},
          {"seed", a.seed}};
}

inline void read(detail::Section s, AugmentPolicy& a) {
  s.get("p_blur", a.p_blur);
  s.get("p_rotate", a.p_rotate);
  s.get("p_zoom", a.p_zoom);
  s.get("p_flip_h", a.p_flip_h);
  s.get("p_flip_v", a.p_flip_v);
  s.get("rotate_max_deg", a.rotate_max_deg);
  std::array<double, 2> zr{a.zoom_min, a.zoom_max}, br{a.blur_sigma_min, a.blur_sigma_max};
  s.get("zoom_range", zr);
  s.get("blur_sigma_range", br);
  a.zoom_min = zr[0];
  a.zoom_max = zr[1];
  a.blur_sigma_min = br[0];
  a.blur_sigma_max = br[1];
  s.get("seed", a.seed);
  s.finish();
}

inline json to_json(const OptimizerConfig& o) {
  return {{"lr", o.lr},       {"beta1", o.beta1},   {"beta2", o.beta2},
          {"eps", o.eps},     {"batch_size", o.batch_size}, {"epochs", o.epochs},
          {"early_stop_patience", o.early_stop_patience}};
}

inline void read(detail::Section s, OptimizerConfig& o) {
  s.get("lr", o.lr);
  s.get("beta1", o.beta1);
  s.get("beta2", o.beta2);
  s.get("eps", o.eps);
  s.get("batch_size", o.batch_size);
  s.get("epochs", o.epochs);
  s.get("early_stop_patience", o.early_stop_patience);
  s.finish();
}

inline json to_json(const DataConfig& d) {
  return {{"source", d.source},
          {"root", d.root},
          {"manifest", d.manifest},
          {"class_map", d.class_map},
          {"synthetic_per_class", d.synthetic_per_class},
          {"synthetic_size", d.synthetic_size},
          {"split", {d.split.train, d.split.val, d.split.test}}};
}

inline void read(detail::Section s, DataConfig& d) {
  s.get("source", d.source);
  s.get("root", d.root);
  s.get("manifest", d.manifest);
  s.get("class_map", d.class_map);
  s.get("synthetic_per_class", d.synthetic_per_class);
  s.get("synthetic_size", d.synthetic_size);
  std::array<double, 3> sp{d.split.train, d.split.val, d.split.test};
  s.get("split", sp);
  d.split = {sp[0], sp[1], sp[2]};
  s.finish();
}

inline json to_json(const RunConfig& r) {
  return {{"seed", r.seed},
          {"model", to_json(r.model)},
          {"preprocess", to_json(r.preprocess)},
          {"augment", to_json(r.augment)},
          {"optimizer", to_json(r.optimizer)},
          {"data", to_json(r.data)}};
}

/// Missing keys keep their defaults; unknown keys are errors. The
/// augmentation seed defaults to the run seed. The result is validated.
inline RunConfig run_config_from_json(const json& j) {
  RunConfig r;
  detail::Section top(j, "");
  top.get("seed", r.seed);
  if (auto s = top.sub("model")) read(*s, r.model);
  if (auto s = top.sub("preprocess")) read(*s, r.preprocess);
  r.augment.seed = r.seed;
  if (auto s = top.sub("augment")) read(*s, r.augment);
  if (auto s = top.sub("optimizer")) read(*s, r.optimizer);
  if (auto s = top.sub("data")) read(*s, r.data);
  top.finish();
  r.validate();
  return r;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ValueError("cannot open config '" + path.string() + "'");
  json j;
  try {
    is >> j;
  } catch (const json::exception& ex) {
    throw ValueError("config '" + path.string() + "' is not valid JSON: " + ex.what());
  }
  return run_config_from_json(j);
}

}  // namespace cct
