#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "cct/augment.hpp"
#include "cct/config.hpp"
#include "cct/dataset.hpp"
#include "cct/model.hpp"
#include "cct/ops.hpp"

namespace cct {

struct EpochRecord {
  double train_loss = 0, train_acc = 0;
  double val_loss = std::numeric_limits<double>::quiet_NaN();
  double val_acc = std::numeric_limits<double>::quiet_NaN();
};

template <Scalar T>
struct TrainState {
  CctParams<T> params;
  /// Adam moments, aligned with params.tensors().
  std::vector<Tensor<T>> m, v;
  std::uint64_t step = 0;
  std::uint64_t epoch = 0;
  std::uint64_t seed = 0;
  std::vector<EpochRecord> history;
  double best_val_loss = std::numeric_limits<double>::infinity();
  std::uint64_t best_epoch = 0;  // 1-based; 0 = none yet
};

template <Scalar T>
TrainState<T> init_state(const CctConfig& cfg, std::uint64_t seed) {
  TrainState<T> s;
  s.params = init_params<T>(cfg, seed);
  s.seed = seed;
  for (const auto& t : s.params.tensors()) {
    s.m.push_back(Tensor<T>::zeros(t.shape()));
    s.v.push_back(Tensor<T>::zeros(t.shape()));
  }
  return s;
}

/// Bias-corrected Adam: m = b1 m + (1-b1) g, v = b2 v + (1-b2) g^2,
/// p -= lr * m_hat / (sqrt(v_hat) + eps). Increments the step counter.
template <Scalar T>
void adam_step(TrainState<T>& s, const std::vector<std::span<const T>>& grads, const OptimizerConfig& o) {
  auto params = s.params.tensors();
  if (grads.size() != params.size() || s.m.size() != params.size() || s.v.size() != params.size()) {
    throw ShapeError("adam_step: " + std::to_string(grads.size()) + " gradients for " +
                     std::to_string(params.size()) + " parameters");
  }
  ++s.step;
  const double t = static_cast<double>(s.step);
  const T c1 = static_cast<T>(1.0 / (1.0 - std::pow(o.beta1, t)));
  const T c2 = static_cast<T>(1.0 / (1.0 - std::pow(o.beta2, t)));
  const T b1 = static_cast<T>(o.beta1), b2 = static_cast<T>(o.beta2);
  const T lr = static_cast<T>(o.lr), eps = static_cast<T>(o.eps);
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (grads[k].size() != params[k].numel()) {
      throw ShapeError("adam_step: gradient size mismatch for parameter " + std::to_string(k));
    }
    auto p = params[k].data();
    auto m = s.m[k].data();
    auto v = s.v[k].data();
    const auto& g = grads[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = b1 * m[i] + (T(1) - b1) * g[i];
      v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
      p[i] -= lr * (m[i] * c1) / (std::sqrt(v[i] * c2) + eps);
    }
  }
}

/// Adam step using the gradients accumulated in the parameters.
template <Scalar T>
void adam_step(TrainState<T>& s, const OptimizerConfig& o) {
  std::vector<std::span<const T>> g;
  for (const auto& t : s.params.tensors()) g.emplace_back(t.grad());
  adam_step(s, g, o);
}

struct EvalResult {
  double loss = 0;
  double accuracy = 0;
  std::vector<int> predictions;
};

/// No augmentation, dropout off, batches in dataset order.
template <Scalar T>
EvalResult evaluate_split(const CctParams<T>& params, const TensorDataset<T>& ds, const CctConfig& cfg,
                          std::size_t batch_size = 64) {
  if (ds.size() == 0) throw ValueError("cannot evaluate an empty split");
  EvalResult r;
  double loss = 0;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < ds.size(); i += batch_size) {
    const std::size_t e = std::min(ds.size(), i + batch_size);
    std::vector<Tensor<T>> xs(ds.inputs.begin() + static_cast<std::ptrdiff_t>(i),
                              ds.inputs.begin() + static_cast<std::ptrdiff_t>(e));
    std::vector<int> ys(ds.labels.begin() + static_cast<std::ptrdiff_t>(i),
                        ds.labels.begin() + static_cast<std::ptrdiff_t>(e));
    Graph<T> g(false);
    const Tensor<T> logits = forward(g, stack(xs), params, cfg).logits;
    loss += static_cast<double>(ops::cross_entropy(g, logits, std::span<const int>(ys)).item()) *
            static_cast<double>(e - i);
    for (int p : argmax_rows(logits)) {
      correct += p == ys[r.predictions.size() - i];
      r.predictions.push_back(p);
    }
  }
  r.loss = loss / static_cast<double>(ds.size());
  r.accuracy = static_cast<double>(correct) / static_cast<double>(ds.size());
  return r;
}

/// One pass over shuffled batches: augment, forward, cross-entropy, backward,
/// Adam. Appends (mean train loss, running train accuracy, validation loss,
/// validation accuracy) to the history; validation entries are NaN without a
/// validation split.
template <Scalar T>
void train_epoch(TrainState<T>& s, const TensorDataset<T>& train, std::type_identity_t<const TensorDataset<T>*> val,
                 const AugmentPolicy& policy, const CctConfig& cfg, const OptimizerConfig& o) {
  if (train.size() == 0) throw ValueError("cannot train on an empty dataset");
  const std::uint64_t epoch = s.epoch;
  const auto params = s.params.tensors();
  double loss_sum = 0;
  std::size_t correct = 0;
  for (const auto& idx : batch_indices(train.size(), o.batch_size, s.seed, epoch)) {
    std::vector<Tensor<T>> xs;
    std::vector<int> ys;
    for (std::size_t i : idx) {
      xs.push_back(sample_augment(train.inputs[i], policy, (epoch << 32) | i));
      ys.push_back(train.labels[i]);
    }
    for (const auto& p : params) p.zero_grad();
    Graph<T> g;
    const auto fr = forward(g, stack(xs), s.params, cfg, ForwardOptions{true, s.seed, s.step});
    const Tensor<T> loss = ops::cross_entropy(g, fr.logits, std::span<const int>(ys));
    backward(loss, g);
    g.clear();
    adam_step(s, o);
    loss_sum += static_cast<double>(loss.item()) * static_cast<double>(idx.size());
    const auto pred = argmax_rows(fr.logits);
    for (std::size_t k = 0; k < pred.size(); ++k) correct += pred[k] == ys[k];
  }
  for (const auto& p : params) p.drop_grad();
  EpochRecord rec;
  rec.train_loss = loss_sum / static_cast<double>(train.size());
  rec.train_acc = static_cast<double>(correct) / static_cast<double>(train.size());
  if (val && val->size() > 0) {
    const auto ev = evaluate_split(s.params, *val, cfg);
    rec.val_loss = ev.loss;
    rec.val_acc = ev.accuracy;
  }
  s.history.push_back(rec);
  ++s.epoch;
  // without a validation split, "best" tracks the training loss
  const double score = std::isnan(rec.val_loss) ? rec.train_loss : rec.val_loss;
  if (score < s.best_val_loss) {
    s.best_val_loss = score;
    s.best_epoch = s.epoch;
  }
}

// ---------------------------------------------------------------------------
// Learning curves
// ---------------------------------------------------------------------------

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <Scalar T>
void export_curves(const TrainState<T>& s, const fs::path& path) {
  if (s.history.empty()) throw ValueError("export_curves: history is empty");
  std::ofstream os(path);
  if (!os) throw IoError("cannot write '" + path.string() + "'");
  os << "epoch,train_loss,train_acc,val_loss,val_acc\n";
  for (std::size_t e = 0; e < s.history.size(); ++e) {
    const auto& h = s.history[e];
    os << e + 1 << ',' << format_double(h.train_loss) << ',' << format_double(h.train_acc) << ','
       << format_double(h.val_loss) << ',' << format_double(h.val_acc) << '\n';
  }
  if (!os) throw IoError("write failed for '" + path.string() + "'");
}

inline std::vector<EpochRecord> read_curves(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read '" + path.string() + "'");
  std::string line;
  std::getline(is, line);
  std::vector<EpochRecord> out;
  while (std::getline(is, line)) {
    std::istringstream ls(line);
    std::string cell;
    std::vector<double> v;
    while (std::getline(ls, cell, ',')) v.push_back(std::strtod(cell.c_str(), nullptr));
    if (v.size() != 5) throw FormatError("malformed curves row: " + line);
    out.push_back({v[1], v[2], v[3], v[4]});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace detail {

inline json nan_to_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }
inline double null_to_nan(const json& j) {
  return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>();
}

constexpr char kMagic[4] = {'C', 'C', 'T', '1'};

struct CheckpointHeader {
  json header;
  std::uint64_t payload_offset = 0;
};

inline CheckpointHeader read_checkpoint_header(std::istream& is, const std::string& where) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
    throw FormatError("'" + where + "' is not a checkpoint (bad magic)");
  }
  std::uint32_t len = 0;
  if (!get_le(is, len)) throw FormatError("corrupt checkpoint header in '" + where + "'");
  std::string text(len, '\0');
  if (!is.read(text.data(), len)) throw FormatError("corrupt checkpoint header in '" + where + "' (truncated)");
  CheckpointHeader h;
  try {
    h.header = json::parse(text);
  } catch (const json::exception& ex) {
    throw FormatError("corrupt checkpoint header in '" + where + "': " + ex.what());
  }
  h.payload_offset = 8 + len;
  return h;
}

}  // namespace detail

/// Layout: "CCT1", u32 LE header length, JSON header, tensor payloads.
/// The header carries the run configuration, counters, history and a
/// directory of (name, dtype, shape, offset, bytes) relative to the payload
/// start. Adam moments are stored as adam.m.<name> / adam.v.<name>.
template <Scalar T>
void save_checkpoint(const TrainState<T>& s, const RunConfig& cfg, const fs::path& path) {
  const auto named = s.params.named();
  std::vector<std::pair<std::string, Tensor<T>>> all = named;
  for (std::size_t k = 0; k < named.size(); ++k) all.emplace_back("adam.m." + named[k].first, s.m.at(k));
  for (std::size_t k = 0; k < named.size(); ++k) all.emplace_back("adam.v." + named[k].first, s.v.at(k));

  json dir = json::array();
  std::uint64_t off = 0;
  for (const auto& [name, t] : all) {
    const std::size_t bytes = serialized_size(t.shape(), dtype_of<T>());
    dir.push_back({{"name", name}, {"dtype", dtype_name(dtype_of<T>())}, {"shape", t.shape()}, {"offset", off},
                   {"bytes", bytes}});
    off += bytes;
  }
  json hist = json::array();
  for (const auto& h : s.history) {
    hist.push_back({detail::nan_to_null(h.train_loss), detail::nan_to_null(h.train_acc),
                    detail::nan_to_null(h.val_loss), detail::nan_to_null(h.val_acc)});
  }
  const json header = {{"format", 1},
                       {"dtype", dtype_name(dtype_of<T>())},
                       {"config", to_json(cfg)},
                       {"step", s.step},
                       {"epoch", s.epoch},
                       {"seed", s.seed},
                       {"best_val_loss", detail::nan_to_null(s.best_val_loss)},
                       {"best_epoch", s.best_epoch},
                       {"history", hist},
                       {"tensors", dir}};
  const std::string text = header.dump();

  // write to a sibling temp file, then rename, so a crash never leaves a
  // half-written checkpoint under the final name
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw IoError("cannot write checkpoint '" + tmp.string() + "'");
    os.write(detail::kMagic, 4);
    detail::put_le(os, static_cast<std::uint32_t>(text.size()));
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, t] : all) write_tensor(os, t);
    if (!os) throw IoError("write failed for checkpoint '" + tmp.string() + "'");
  }
  fs::rename(tmp, path);
}

/// Precision recorded in a checkpoint, for callers that dispatch on it.
inline DType checkpoint_dtype(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint '" + path.string() + "'");
  const auto h = detail::read_checkpoint_header(is, path.string());
  try {
    return dtype_from_name(h.header.at("dtype").get<std::string>());
  } catch (const json::exception& ex) {
    throw FormatError("corrupt checkpoint header in '" + path.string() + "': " + ex.what());
  }
}

template <Scalar T>
struct LoadedCheckpoint {
  RunConfig config;
  TrainState<T> state;
};

/// Validates the whole file before returning; on any error nothing is
/// returned.
template <Scalar T>
LoadedCheckpoint<T> load_checkpoint(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint '" + path.string() + "'");
  const auto file_size = fs::file_size(path);
  const auto h = detail::read_checkpoint_header(is, path.string());
  const std::string where = "'" + path.string() + "'";
  LoadedCheckpoint<T> out;
  try {
    const json& j = h.header;
    if (j.at("format").get<int>() != 1) throw FormatError("unsupported checkpoint format in " + where);
    const DType dt = dtype_from_name(j.at("dtype").get<std::string>());
    if (dt != dtype_of<T>()) {
      throw FormatError("checkpoint " + where + " holds " + dtype_name(dt) + " tensors, expected " +
                        dtype_name(dtype_of<T>()));
    }
    out.config = run_config_from_json(j.at("config"));
    auto& s = out.state;
    s = init_state<T>(out.config.model, j.at("seed").get<std::uint64_t>());
    s.step = j.at("step").get<std::uint64_t>();
    s.epoch = j.at("epoch").get<std::uint64_t>();
    s.best_val_loss = detail::null_to_nan(j.at("best_val_loss"));
    if (std::isnan(s.best_val_loss)) s.best_val_loss = std::numeric_limits<double>::infinity();
    s.best_epoch = j.at("best_epoch").get<std::uint64_t>();
    for (const auto& r : j.at("history")) {
      if (r.size() != 4) throw FormatError("corrupt history row in " + where);
      s.history.push_back({detail::null_to_nan(r[0]), detail::null_to_nan(r[1]), detail::null_to_nan(r[2]),
                           detail::null_to_nan(r[3])});
    }
    if (s.history.size() != s.epoch) throw FormatError("history length does not match epoch counter in " + where);

    const auto named = s.params.named();
    std::vector<std::pair<std::string, Tensor<T>>> expect = named;
    for (std::size_t k = 0; k < named.size(); ++k) expect.emplace_back("adam.m." + named[k].first, s.m[k]);
    for (std::size_t k = 0; k < named.size(); ++k) expect.emplace_back("adam.v." + named[k].first, s.v[k]);
    const json& dir = j.at("tensors");
    if (dir.size() != expect.size()) throw FormatError("tensor directory size mismatch in " + where);
    std::uint64_t off = 0;
    for (std::size_t k = 0; k < expect.size(); ++k) {
      const json& d = dir[k];
      if (d.at("name").get<std::string>() != expect[k].first || d.at("shape").get<Shape>() != expect[k].second.shape() ||
          d.at("offset").get<std::uint64_t>() != off) {
        throw FormatError("tensor directory entry " + std::to_string(k) + " does not match the model in " + where);
      }
      off += d.at("bytes").get<std::uint64_t>();
    }
    if (file_size != h.payload_offset + off) {
      throw FormatError("checkpoint " + where + " has " + std::to_string(file_size) + " bytes, expected " +
                        std::to_string(h.payload_offset + off));
    }
    for (auto& [name, t] : expect) {
      const Tensor<T> loaded = read_tensor<T>(is, dt);
      if (loaded.shape() != t.shape()) throw FormatError("payload shape mismatch for '" + name + "' in " + where);
      std::copy(loaded.data().begin(), loaded.data().end(), t.data().begin());
    }
  } catch (const json::exception& ex) {
    throw FormatError("corrupt checkpoint header in " + where + ": " + ex.what());
  } catch (const ValueError& ex) {
    throw FormatError("checkpoint " + where + " holds an invalid configuration: " + ex.what());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Full run
// ---------------------------------------------------------------------------

template <Scalar T>
struct TrainRunOptions {
  fs::path out_dir;
  /// Called after each epoch; return true to stop.
  std::function<bool(const TrainState<T>&)> on_epoch;
  /// Epoch cap for this invocation (stops early, e.g. to test resume); 0 = none.
  std::size_t stop_after_epoch = 0;
};

/// Trains from `state` until the configured epoch count, early stopping, or
/// the callback says stop. Writes ckpt_last.cct every epoch, ckpt_best.cct
/// on each new best validation loss, and curves.csv.
template <Scalar T>
void run_training(TrainState<T>& s, const RunConfig& cfg, const TensorDataset<T>& train,
                  std::type_identity_t<const TensorDataset<T>*> val, const TrainRunOptions<T>& opt) {
  if (!opt.out_dir.empty()) fs::create_directories(opt.out_dir);
  while (s.epoch < cfg.optimizer.epochs) {
    const std::uint64_t prev_best = s.best_epoch;
    train_epoch(s, train, val, cfg.augment, cfg.model, cfg.optimizer);
    if (!opt.out_dir.empty()) {
      if (s.best_epoch != prev_best) save_checkpoint(s, cfg, opt.out_dir / "ckpt_best.cct");
      save_checkpoint(s, cfg, opt.out_dir / "ckpt_last.cct");
      export_curves(s, opt.out_dir / "curves.csv");
    }
    if (opt.on_epoch && opt.on_epoch(s)) break;
    if (cfg.optimizer.early_stop_patience > 0 && s.best_epoch > 0 &&
        s.epoch - s.best_epoch >= cfg.optimizer.early_stop_patience) {
      break;
    }
    if (opt.stop_after_epoch > 0 && s.epoch >= opt.stop_after_epoch) break;
  }
}

}  // namespace cct
