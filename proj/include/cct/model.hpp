#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "cct/graph.hpp"
#include "cct/ops.hpp"
#include "cct/rng.hpp"
#include "cct/tensor.hpp"

namespace cct {

enum class PositionalEmbedding { learnable, none };

struct CctConfig {
  std::size_t input_channels = 2;
  std::size_t input_size = 64;
  std::size_t conv_blocks = 2;
  std::size_t tokenizer_kernel = 3;
  std::size_t tokenizer_stride = 1;
  std::size_t tokenizer_padding = 1;
  /// Output channels of every conv block except the last (which emits D).
  std::size_t tokenizer_hidden = 64;
  std::size_t pool_window = 3;
  std::size_t pool_stride = 2;
  std::size_t embed_dim = 128;
  std::size_t encoder_layers = 2;
  std::size_t heads = 4;
  double mlp_ratio = 2.0;
  double dropout = 0.1;
  std::size_t num_classes = 2;
  PositionalEmbedding positional_embedding = PositionalEmbedding::learnable;
  /// 32 or 64; selects the scalar type the trainer instantiates.
  int precision = 32;
  double layernorm_eps = 1e-5;

  std::size_t mlp_hidden() const {
    return static_cast<std::size_t>(std::llround(mlp_ratio * static_cast<double>(embed_dim)));
  }

  /// Spatial size of the tokenizer grid after all conv blocks.
  std::pair<std::size_t, std::size_t> grid() const {
    std::size_t h = input_size, w = input_size;
    for (std::size_t b = 0; b < conv_blocks; ++b) {
      h = ops::pool_out_dim(ops::conv_out_dim(h, tokenizer_kernel, tokenizer_stride, tokenizer_padding), pool_window,
                            pool_stride);
      w = ops::pool_out_dim(ops::conv_out_dim(w, tokenizer_kernel, tokenizer_stride, tokenizer_padding), pool_window,
                            pool_stride);
    }
    return {h, w};
  }

  std::size_t seq_len() const {
    auto [h, w] = grid();
    return h * w;
  }

  void validate() const {
    if (input_channels < 1) throw ValueError("input_channels must be >= 1");
    if (conv_blocks < 1) throw ValueError("conv_blocks must be >= 1");
    if (embed_dim < 1 || heads < 1 || embed_dim % heads != 0) {
      throw ValueError("embed_dim (" + std::to_string(embed_dim) + ") must be divisible by heads (" +
                       std::to_string(heads) + ")");
    }
    if (num_classes < 2) throw ValueError("num_classes must be >= 2");
    if (!(mlp_ratio > 0.0) || mlp_hidden() < 1) throw ValueError("mlp_ratio must be > 0");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ValueError("dropout must lie in [0,1)");
    if (precision != 32 && precision != 64) throw ValueError("precision must be 32 or 64");
    if (tokenizer_kernel < 1 || tokenizer_stride < 1 || pool_window < 1 || pool_stride < 1) {
      throw ValueError("tokenizer kernel, stride and pool geometry must be >= 1");
    }
    if (conv_blocks > 1 && tokenizer_hidden < 1) throw ValueError("tokenizer_hidden must be >= 1");
    grid();  // throws ShapeError when the geometry collapses
  }
};

template <Scalar T>
struct ConvBlockParams {
  Tensor<T> weight;  // [out, in, k, k]
  Tensor<T> bias;    // [out]
};

template <Scalar T>
struct EncoderLayerParams {
  Tensor<T> ln1_gain, ln1_bias;
  Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;  // [D,D], [D]
  Tensor<T> ln2_gain, ln2_bias;
  Tensor<T> w1, b1;  // [D,M], [M]
  Tensor<T> w2, b2;  // [M,D], [D]
};

template <Scalar T>
struct CctParams {
  std::vector<ConvBlockParams<T>> tokenizer;
  Tensor<T> pos_embedding;  // [S,D], undefined when disabled
  std::vector<EncoderLayerParams<T>> layers;
  Tensor<T> final_ln_gain, final_ln_bias;  // undefined with zero layers
  Tensor<T> pool_g;                        // [D,1]
  Tensor<T> head_weight;                   // [D,n]
  Tensor<T> head_bias;                     // [n]

  /// Calls f(name, tensor&) for every defined parameter in a stable order.
  template <typename F>
  void visit(F&& f) {
    for (std::size_t i = 0; i < tokenizer.size(); ++i) {
      const std::string p = "tokenizer." + std::to_string(i) + ".";
      f(p + "weight", tokenizer[i].weight);
      f(p + "bias", tokenizer[i].bias);
    }
    if (pos_embedding.defined()) f(std::string("pos_embedding"), pos_embedding);
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const std::string p = "encoder." + std::to_string(i) + ".";
      auto& l = layers[i];
      f(p + "ln1.gain", l.ln1_gain);
      f(p + "ln1.bias", l.ln1_bias);
      f(p + "attn.wq", l.wq);
      f(p + "attn.bq", l.bq);
      f(p + "attn.wk", l.wk);
      f(p + "attn.bk", l.bk);
      f(p + "attn.wv", l.wv);
      f(p + "attn.bv", l.bv);
      f(p + "attn.wo", l.wo);
      f(p + "attn.bo", l.bo);
      f(p + "ln2.gain", l.ln2_gain);
      f(p + "ln2.bias", l.ln2_bias);
      f(p + "mlp.w1", l.w1);
      f(p + "mlp.b1", l.b1);
      f(p + "mlp.w2", l.w2);
      f(p + "mlp.b2", l.b2);
    }
    if (final_ln_gain.defined()) {
      f(std::string("final_ln.gain"), final_ln_gain);
      f(std::string("final_ln.bias"), final_ln_bias);
    }
    f(std::string("pool.g"), pool_g);
    f(std::string("head.weight"), head_weight);
    f(std::string("head.bias"), head_bias);
  }

  /// Ordered (name, handle) list; handles share storage with the fields.
  std::vector<std::pair<std::string, Tensor<T>>> named() const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    const_cast<CctParams*>(this)->visit([&](const std::string& n, Tensor<T>& t) { out.emplace_back(n, t); });
    return out;
  }

  std::vector<Tensor<T>> tensors() const {
    std::vector<Tensor<T>> out;
    for (auto& [n, t] : named()) out.push_back(t);
    return out;
  }

  std::size_t count() const {
    std::size_t n = 0;
    for (auto& [name, t] : named()) n += t.numel();
    return n;
  }

  bool all_finite() const {
    for (auto& [name, t] : named()) {
      if (!t.all_finite()) return false;
    }
    return true;
  }

  /// Deep copy with fresh storage and no grads.
  CctParams clone() const {
    CctParams c = *this;
    c.visit([](const std::string&, Tensor<T>& t) {
      const bool rg = t.requires_grad();
      t = t.clone();
      t.set_requires_grad(rg);
    });
    return c;
  }
};

namespace detail {

/// Normal(0, std) truncated to +-3 std by resampling.
template <Scalar T>
Tensor<T> trunc_normal(Shape shape, double sd, std::uint64_t seed, std::uint64_t stream) {
  Tensor<T> t(std::move(shape));
  CounterRng rng(seed, stream);
  for (auto& v : t.data()) {
    double z;
    do {
      z = rng.normal();
    } while (std::abs(z) > 3.0);
    v = static_cast<T>(sd * z);
  }
  return t;
}

template <Scalar T>
Tensor<T> he_uniform(Shape shape, std::size_t fan_in, std::uint64_t seed, std::uint64_t stream) {
  Tensor<T> t(std::move(shape));
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  CounterRng rng(seed, stream);
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(-bound, bound));
  return t;
}

}  // namespace detail

/// Deterministic per (cfg, seed). Every tensor draws from its own stream.
template <Scalar T>
CctParams<T> init_params(const CctConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const std::size_t D = cfg.embed_dim, M = cfg.mlp_hidden(), n = cfg.num_classes, k = cfg.tokenizer_kernel;
  constexpr double sd = 0.02;
  std::uint64_t stream = 0;
  CctParams<T> p;
  std::size_t in = cfg.input_channels;
  for (std::size_t b = 0; b < cfg.conv_blocks; ++b) {
    const std::size_t out = b + 1 == cfg.conv_blocks ? D : cfg.tokenizer_hidden;
    p.tokenizer.push_back({detail::he_uniform<T>({out, in, k, k}, in * k * k, seed, ++stream), Tensor<T>::zeros({out})});
    in = out;
  }
  ++stream;
  if (cfg.positional_embedding == PositionalEmbedding::learnable) {
    p.pos_embedding = detail::trunc_normal<T>({cfg.seq_len(), D}, sd, seed, stream);
  }
  for (std::size_t l = 0; l < cfg.encoder_layers; ++l) {
    EncoderLayerParams<T> e;
    e.ln1_gain = Tensor<T>::ones({D});
    e.ln1_bias = Tensor<T>::zeros({D});
    e.wq = detail::trunc_normal<T>({D, D}, sd, seed, ++stream);
    e.wk = detail::trunc_normal<T>({D, D}, sd, seed, ++stream);
    e.wv = detail::trunc_normal<T>({D, D}, sd, seed, ++stream);
    e.wo = detail::trunc_normal<T>({D, D}, sd, seed, ++stream);
    e.bq = Tensor<T>::zeros({D});
    e.bk = Tensor<T>::zeros({D});
    e.bv = Tensor<T>::zeros({D});
    e.bo = Tensor<T>::zeros({D});
    e.ln2_gain = Tensor<T>::ones({D});
    e.ln2_bias = Tensor<T>::zeros({D});
    e.w1 = detail::trunc_normal<T>({D, M}, sd, seed, ++stream);
    e.b1 = Tensor<T>::zeros({M});
    e.w2 = detail::trunc_normal<T>({M, D}, sd, seed, ++stream);
    e.b2 = Tensor<T>::zeros({D});
    p.layers.push_back(std::move(e));
  }
  if (cfg.encoder_layers > 0) {
    p.final_ln_gain = Tensor<T>::ones({D});
    p.final_ln_bias = Tensor<T>::zeros({D});
  }
  p.pool_g = detail::trunc_normal<T>({D, 1}, sd, seed, ++stream);
  p.head_weight = detail::trunc_normal<T>({D, n}, sd, seed, ++stream);
  p.head_bias = Tensor<T>::zeros({n});
  for (auto& [name, t] : p.named()) t.set_requires_grad(true);
  return p;
}

/// Dropout is active only when `train` is set; masks are keyed by
/// (seed, step, site) so a step can be replayed exactly.
struct ForwardOptions {
  bool train = false;
  std::uint64_t seed = 0;
  std::uint64_t step = 0;
};

template <Scalar T>
struct ForwardResult {
  Tensor<T> logits;                  // [B,n]
  std::vector<Tensor<T>> attention;  // per layer [B,H,S,S]
  Tensor<T> pool_weights;            // [B,S]
  Tensor<T> features;                // [B,D,h,w], last tokenizer block output
};

/// Conv -> ReLU -> MaxPool, repeated; returns the last block's feature map.
template <Scalar T>
Tensor<T> tokenizer_features(Graph<T>& g, const Tensor<T>& x, const CctParams<T>& p, const CctConfig& cfg) {
  if (x.rank() != 4 || x.dim(1) != cfg.input_channels) {
    throw ShapeError("model input must be [B," + std::to_string(cfg.input_channels) + ",H,W], got " +
                     shape_str(x.shape()));
  }
  Tensor<T> h = x;
  for (const auto& b : p.tokenizer) {
    h = ops::conv2d(g, h, b.weight, b.bias, cfg.tokenizer_stride, cfg.tokenizer_padding);
    h = ops::relu(g, h);
    h = ops::maxpool2d(g, h, cfg.pool_window, cfg.pool_stride);
  }
  return h;
}

/// [B,D,h,w] -> [B,h*w,D], plus the positional table when present.
template <Scalar T>
Tensor<T> features_to_tokens(Graph<T>& g, const Tensor<T>& a, const CctParams<T>& p) {
  const std::size_t B = a.dim(0), D = a.dim(1), S = a.dim(2) * a.dim(3);
  Tensor<T> t = ops::permute(g, ops::reshape(g, a, {B, D, S}), {0, 2, 1});
  if (p.pos_embedding.defined()) {
    if (p.pos_embedding.dim(0) != S) {
      throw ShapeError("positional table " + shape_str(p.pos_embedding.shape()) + " does not fit " +
                       std::to_string(S) + " tokens");
    }
    t = ops::add(g, t, p.pos_embedding);
  }
  return t;
}

template <Scalar T>
Tensor<T> tokenize(Graph<T>& g, const Tensor<T>& x, const CctParams<T>& p, const CctConfig& cfg) {
  return features_to_tokens(g, tokenizer_features(g, x, p, cfg), p);
}

namespace detail {

/// [B,S,D] -> [B,H,S,dh]
template <Scalar T>
Tensor<T> split_heads(Graph<T>& g, const Tensor<T>& x, std::size_t H, std::vector<std::size_t> perm) {
  const std::size_t B = x.dim(0), S = x.dim(1), D = x.dim(2);
  return ops::permute(g, ops::reshape(g, x, {B, S, H, D / H}), perm);
}

template <Scalar T>
Tensor<T> linear(Graph<T>& g, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  return ops::add(g, ops::matmul(g, x, w), b);
}

}  // namespace detail

/// Pre-norm transformer blocks. Appends each layer's attention weights to
/// `attention` when non-null.
template <Scalar T>
Tensor<T> encode(Graph<T>& g, const Tensor<T>& tokens, const CctParams<T>& p, const CctConfig& cfg,
                 const ForwardOptions& opt = {}, std::vector<Tensor<T>>* attention = nullptr) {
  if (tokens.rank() != 3 || tokens.dim(2) != cfg.embed_dim) {
    throw ShapeError("encode: tokens must be [B,S," + std::to_string(cfg.embed_dim) + "], got " +
                     shape_str(tokens.shape()));
  }
  const std::size_t B = tokens.dim(0), S = tokens.dim(1), D = cfg.embed_dim, H = cfg.heads;
  const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(D / H)));
  const double drop = opt.train ? cfg.dropout : 0.0;
  Tensor<T> x = tokens;
  for (std::size_t li = 0; li < p.layers.size(); ++li) {
    const auto& l = p.layers[li];
    const Tensor<T> h = ops::layernorm(g, x, l.ln1_gain, l.ln1_bias, static_cast<T>(cfg.layernorm_eps));
    const Tensor<T> q = detail::split_heads(g, detail::linear(g, h, l.wq, l.bq), H, {0, 2, 1, 3});
    const Tensor<T> kt = detail::split_heads(g, detail::linear(g, h, l.wk, l.bk), H, {0, 2, 3, 1});
    const Tensor<T> v = detail::split_heads(g, detail::linear(g, h, l.wv, l.bv), H, {0, 2, 1, 3});
    const Tensor<T> att = ops::softmax(g, ops::matmul(g, ops::scale(g, q, inv_sqrt), kt), -1);
    if (attention) attention->push_back(att);
    Tensor<T> ctx = ops::permute(g, ops::matmul(g, att, v), {0, 2, 1, 3});
    ctx = ops::reshape(g, ctx, {B, S, D});
    Tensor<T> o = detail::linear(g, ctx, l.wo, l.bo);
    o = ops::dropout(g, o, drop, opt.seed, (opt.step << 16) | (li << 2));
    x = ops::add(g, x, o);

    const Tensor<T> h2 = ops::layernorm(g, x, l.ln2_gain, l.ln2_bias, static_cast<T>(cfg.layernorm_eps));
    Tensor<T> m = ops::gelu(g, detail::linear(g, h2, l.w1, l.b1));
    m = ops::dropout(g, m, drop, opt.seed, (opt.step << 16) | (li << 2) | 1);
    m = detail::linear(g, m, l.w2, l.b2);
    x = ops::add(g, x, m);
  }
  if (p.final_ln_gain.defined()) {
    x = ops::layernorm(g, x, p.final_ln_gain, p.final_ln_bias, static_cast<T>(cfg.layernorm_eps));
  }
  return x;
}

template <Scalar T>
struct SeqPoolResult {
  Tensor<T> pooled;   // [B,D]
  Tensor<T> weights;  // [B,S]
};

/// weights = softmax over tokens of z.g; pooled = weights-averaged tokens.
template <Scalar T>
SeqPoolResult<T> seq_pool(Graph<T>& g, const Tensor<T>& z, const Tensor<T>& gvec) {
  if (z.rank() != 3 || gvec.rank() != 2 || gvec.dim(0) != z.dim(2) || gvec.dim(1) != 1) {
    throw ShapeError("seq_pool: incompatible tokens " + shape_str(z.shape()) + " and score vector " +
                     shape_str(gvec.shape()));
  }
  const std::size_t B = z.dim(0), S = z.dim(1), D = z.dim(2);
  const Tensor<T> scores = ops::reshape(g, ops::matmul(g, z, gvec), {B, S});
  const Tensor<T> w = ops::softmax(g, scores, 1);
  const Tensor<T> pooled = ops::reshape(g, ops::matmul(g, ops::reshape(g, w, {B, 1, S}), z), {B, D});
  return {pooled, w};
}

template <Scalar T>
Tensor<T> classify_head(Graph<T>& g, const Tensor<T>& pooled, const Tensor<T>& w, const Tensor<T>& b) {
  return detail::linear(g, pooled, w, b);
}

/// Everything downstream of the tokenizer feature map.
template <Scalar T>
ForwardResult<T> forward_from_features(Graph<T>& g, const Tensor<T>& features, const CctParams<T>& p,
                                       const CctConfig& cfg, const ForwardOptions& opt = {}) {
  ForwardResult<T> r;
  r.features = features;
  const Tensor<T> z = encode(g, features_to_tokens(g, features, p), p, cfg, opt, &r.attention);
  auto sp = seq_pool(g, z, p.pool_g);
  r.pool_weights = sp.weights;
  r.logits = classify_head(g, sp.pooled, p.head_weight, p.head_bias);
  return r;
}

template <Scalar T>
ForwardResult<T> forward(Graph<T>& g, const Tensor<T>& x, const CctParams<T>& p, const CctConfig& cfg,
                         const ForwardOptions& opt = {}) {
  return forward_from_features(g, tokenizer_features(g, x, p, cfg), p, cfg, opt);
}

/// Inference-mode logits without recording.
template <Scalar T>
Tensor<T> predict_logits(const Tensor<T>& x, const CctParams<T>& p, const CctConfig& cfg) {
  Graph<T> g(false);
  return forward(g, x, p, cfg).logits;
}

/// Row-wise argmax (first maximum on ties).
template <Scalar T>
std::vector<int> argmax_rows(const Tensor<T>& logits) {
  const std::size_t B = logits.dim(0), n = logits.dim(1);
  std::vector<int> out(B);
  auto d = logits.data();
  for (std::size_t b = 0; b < B; ++b) {
    out[b] = static_cast<int>(std::max_element(d.begin() + static_cast<std::ptrdiff_t>(b * n),
                                               d.begin() + static_cast<std::ptrdiff_t>((b + 1) * n)) -
                              (d.begin() + static_cast<std::ptrdiff_t>(b * n)));
  }
  return out;
}

/// Row-wise softmax probabilities.
template <Scalar T>
std::vector<double> probabilities(const Tensor<T>& logits, std::size_t row) {
  const std::size_t n = logits.dim(1);
  std::vector<double> p(n);
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < n; ++c) mx = std::max(mx, static_cast<double>(logits[row * n + c]));
  double s = 0;
  for (std::size_t c = 0; c < n; ++c) s += p[c] = std::exp(static_cast<double>(logits[row * n + c]) - mx);
  for (double& v : p) v /= s;
  return p;
}

}  // namespace cct
