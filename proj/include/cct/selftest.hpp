#pragma once

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cmath>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "cct/grad_check.hpp"
#include "cct/metrics.hpp"
#include "cct/model.hpp"
#include "cct/ops.hpp"
#include "cct/preprocess.hpp"
#include "cct/rng.hpp"

/// Built-in verification: finite-difference gradient checks for every
/// differentiable kernel and the full model, plus brute-force oracles for
/// CLAHE, the metric suite, sequence pooling, permutation equivariance and
/// the cross-entropy anchor. Shared by `cct selftest` and the acceptance
/// binary.
namespace cct::selftest {

struct Result {
  std::string name;
  bool passed = false;
  double metric = 0;  // worst error, or the fraction that held
  std::string detail;
  double seconds = 0;
};

constexpr double kH = 1e-5;
constexpr double kGradTol = 1e-4;

namespace detail {

using TD = Tensor<double>;
using GD = Graph<double>;

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

inline TD rand(Shape s, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  TD t(std::move(s));
  CounterRng r(seed, 0x5e1f);
  for (auto& v : t.data()) v = r.uniform(lo, hi);
  return t;
}

/// sum(f(x) * mix): a scalar whose gradient reaches every output coordinate
/// with a distinct weight.
inline ScalarFn<double> mixed(std::function<TD(GD&)> f, std::uint64_t seed) {
  GD probe(false);
  const TD mix = rand(f(probe).shape(), seed);
  return [f, mix](GD& g) { return ops::sum(g, ops::mul(g, f(g), mix)); };
}

inline Result timed(const std::string& name, const std::function<Result()>& body) {
  const auto t0 = std::chrono::steady_clock::now();
  Result r = body();
  r.name = name;
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

inline Result from_report(const GradCheckReport& rep) {
  Result r;
  r.passed = rep.passed && rep.checked > 0;
  r.metric = rep.max_rel_error;
  r.detail = "max rel err " + detail::num(rep.max_rel_error) + ", " + std::to_string(rep.checked) + " coords, " +
             std::to_string(rep.excluded) + " kink-excluded";
  return r;
}

inline CctConfig tiny_cct() {
  CctConfig c;
  c.input_channels = 2;
  c.input_size = 8;
  c.conv_blocks = 1;
  c.pool_window = 2;
  c.pool_stride = 2;
  c.embed_dim = 8;
  c.encoder_layers = 1;
  c.heads = 2;
  c.mlp_ratio = 2.0;
  c.dropout = 0.0;
  c.precision = 64;
  return c;
}

/// Uniform noise in every parameter, gains around 1.
inline void scramble(CctParams<double>& p, std::uint64_t seed) {
  std::uint64_t s = 0;
  p.visit([&](const std::string& name, Tensor<double>& t) {
    CounterRng r(seed, ++s);
    const bool gain = name.find("gain") != std::string::npos;
    for (auto& v : t.data()) v = (gain ? 1.0 : 0.0) + r.uniform(-0.5, 0.5);
  });
}

}  // namespace detail

/// One finite-difference check per kernel (and broadcast mode).
inline std::vector<Result> kernel_gradient_checks() {
  using namespace detail;
  std::vector<Result> out;
  auto check = [&](const std::string& name, std::function<TD(GD&)> f, std::vector<TD> inputs, std::uint64_t seed) {
    out.push_back(timed("grad " + name, [&] { return from_report(grad_check<double>(mixed(f, seed), inputs, kH, kGradTol)); }));
  };
  {
    TD a = rand({3, 4, 5}, 1), b = rand({4, 5}, 2);
    check("add (suffix broadcast)", [=](GD& g) { return ops::add(g, a, b); }, {a, b}, 3);
  }
  {
    TD a = rand({3, 4}, 4), b = rand({3, 4}, 5);
    check("mul", [=](GD& g) { return ops::mul(g, a, b); }, {a, b}, 6);
  }
  {
    TD a = rand({2, 5}, 7);
    check("scale", [=](GD& g) { return ops::scale(g, a, 1.7); }, {a}, 8);
    check("mean", [=](GD& g) { return ops::mean(g, a); }, {a}, 9);
  }
  {
    TD a = rand({4, 6}, 10, -2, 2);
    check("relu", [=](GD& g) { return ops::relu(g, a); }, {a}, 11);
    check("gelu", [=](GD& g) { return ops::gelu(g, a); }, {a}, 12);
    check("dropout", [=](GD& g) { return ops::dropout(g, a, 0.3, 5, 1); }, {a}, 13);
  }
  {
    TD a = rand({2, 3, 4}, 14);
    check("reshape", [=](GD& g) { return ops::reshape(g, a, {6, 4}); }, {a}, 15);
    check("permute", [=](GD& g) { return ops::permute(g, a, {2, 0, 1}); }, {a}, 16);
    check("softmax last axis", [=](GD& g) { return ops::softmax(g, a, -1); }, {a}, 17);
    check("softmax middle axis", [=](GD& g) { return ops::softmax(g, a, 1); }, {a}, 18);
    TD gain = rand({4}, 19, 0.5, 1.5), bias = rand({4}, 20);
    check("layernorm", [=](GD& g) { return ops::layernorm(g, a, gain, bias, 1e-5); }, {a, gain, bias}, 21);
  }
  {
    TD a = rand({3, 4}, 22), b = rand({4, 2}, 23), a3 = rand({2, 3, 4}, 24), b3 = rand({2, 4, 2}, 25);
    check("matmul 2d", [=](GD& g) { return ops::matmul(g, a, b); }, {a, b}, 26);
    check("matmul batch x matrix", [=](GD& g) { return ops::matmul(g, a3, b); }, {a3, b}, 27);
    check("matmul matrix x batch", [=](GD& g) { return ops::matmul(g, a, b3); }, {a, b3}, 28);
    check("matmul batched", [=](GD& g) { return ops::matmul(g, a3, b3); }, {a3, b3}, 29);
  }
  {
    TD x = rand({2, 2, 5, 6}, 30), w = rand({3, 2, 3, 3}, 31), b = rand({3}, 32);
    check("conv2d", [=](GD& g) { return ops::conv2d(g, x, w, b, 1, 1); }, {x, w, b}, 33);
    check("conv2d strided", [=](GD& g) { return ops::conv2d(g, x, w, b, 2, 0); }, {x, w, b}, 34);
    check("maxpool2d", [=](GD& g) { return ops::maxpool2d(g, x, 3, 2); }, {x}, 35);
  }
  {
    TD logits = rand({4, 3}, 36, -2, 2);
    const std::vector<int> labels{0, 2, 1, 2};
    out.push_back(timed("grad cross_entropy", [&] {
      return from_report(grad_check<double>(
          [=](GD& g) { return ops::cross_entropy(g, logits, std::span<const int>(labels)); }, {logits}, kH, kGradTol));
    }));
  }
  return out;
}

/// Every parameter and the input of the tiny CCT (8x8, D=8, one layer).
inline Result full_model_gradient_check(std::uint64_t seed = 1) {
  using namespace detail;
  return timed("grad full tiny CCT", [&] {
    const CctConfig c = tiny_cct();
    auto p = init_params<double>(c, seed);
    scramble(p, seed);
    TD x = rand({2, 2, 8, 8}, seed + 100, 0, 1);
    const std::vector<int> y{0, 1};
    std::vector<TD> inputs = p.tensors();
    inputs.push_back(x);
    return from_report(grad_check<double>(
        [&](GD& g) { return ops::cross_entropy(g, forward(g, x, p, c).logits, std::span<const int>(y)); }, inputs, kH,
        kGradTol));
  });
}

/// Uniform logits give ln 2; d CE / d logits equals (softmax - onehot)/B
/// and matches central differences.
inline Result cross_entropy_anchor() {
  using namespace detail;
  return timed("cross-entropy anchor", [] {
    Result r;
    GD g0(false);
    const std::vector<int> y2{0, 1, 1};
    const double uniform = ops::cross_entropy(g0, TD({3, 2}, 0.37), std::span<const int>(y2)).item();
    const double anchor_err = std::abs(uniform - std::log(2.0));

    TD logits = rand({5, 3}, 40, -3, 3);
    const std::vector<int> y{2, 0, 1, 1, 0};
    const std::size_t B = 5, n = 3;
    double identity_err = 0, fd_err = 0;
    for (std::size_t b = 0; b < B; ++b) {
      double mx = -1e300, z = 0;
      for (std::size_t k = 0; k < n; ++k) mx = std::max(mx, logits[b * n + k]);
      for (std::size_t k = 0; k < n; ++k) z += std::exp(logits[b * n + k] - mx);
      for (std::size_t k = 0; k < n; ++k) {
        const double expect = (std::exp(logits[b * n + k] - mx) / z - (static_cast<int>(k) == y[b] ? 1.0 : 0.0)) / B;
        TD l = logits.clone();
        l.set_requires_grad();
        GD g;
        backward(ops::cross_entropy(g, l, std::span<const int>(y)), g);
        const double analytic = l.grad()[b * n + k];
        identity_err = std::max(identity_err, std::abs(analytic - expect) / std::max(std::abs(expect), 1e-12));
        const double h = 1e-6;
        TD hi = logits.clone(), lo = logits.clone();
        hi[b * n + k] += h;
        lo[b * n + k] -= h;
        GD gf(false);
        const double fd = (ops::cross_entropy(gf, hi, std::span<const int>(y)).item() -
                           ops::cross_entropy(gf, lo, std::span<const int>(y)).item()) /
                          (2 * h);
        fd_err = std::max(fd_err, std::abs(fd - expect) / std::max(std::abs(expect), 1e-12));
      }
    }
    r.passed = anchor_err <= 1e-9 && identity_err < 1e-6 && fd_err < 1e-6;
    r.metric = std::max(identity_err, fd_err);
    r.detail = "|CE - ln2| " + detail::num(anchor_err) + ", identity rel err " + detail::num(identity_err) +
               ", FD rel err " + detail::num(fd_err);
    return r;
  });
}

/// Nonnegative weights summing to 1, pooled values inside each dimension's
/// token range; plus the two-token hand case.
inline Result seq_pool_invariants(std::size_t draws = 1000) {
  using namespace detail;
  return timed("sequence pooling invariants", [draws] {
    Result r;
    std::size_t held = 0;
    double worst_sum = 0;
    GD g(false);
    for (std::size_t i = 0; i < draws; ++i) {
      CounterRng rng(7, i);
      const std::size_t B = 1 + rng.below(3), S = 1 + rng.below(12), D = 1 + rng.below(8);
      const double scale = std::pow(10.0, rng.uniform(-1, 1.5));
      TD z = rand({B, S, D}, 1000 + i, -scale, scale), gv = rand({D, 1}, 5000 + i, -scale, scale);
      const auto sp = seq_pool(g, z, gv);
      bool ok = true;
      for (std::size_t b = 0; b < B; ++b) {
        double s = 0;
        for (std::size_t t = 0; t < S; ++t) {
          const double w = sp.weights[b * S + t];
          ok &= w >= 0.0;
          s += w;
        }
        worst_sum = std::max(worst_sum, std::abs(s - 1.0));
        ok &= std::abs(s - 1.0) <= 1e-6;
        for (std::size_t d = 0; d < D; ++d) {
          double lo = 1e300, hi = -1e300;
          for (std::size_t t = 0; t < S; ++t) {
            lo = std::min(lo, z[(b * S + t) * D + d]);
            hi = std::max(hi, z[(b * S + t) * D + d]);
          }
          const double v = sp.pooled[b * D + d];
          const double slack = 1e-12 * std::max(1.0, std::max(std::abs(lo), std::abs(hi)));
          ok &= v >= lo - slack && v <= hi + slack;
        }
      }
      held += ok;
    }
    // tokens z1 = [1,0], z2 = [0,0], g = [1,0]: weights sigmoid(1), sigmoid(-1)
    const auto hand = seq_pool(g, TD({1, 2, 2}, std::vector<double>{1, 0, 0, 0}), TD({2, 1}, std::vector<double>{1, 0}));
    const double e0 = std::abs(hand.weights[0] - 0.7311), e1 = std::abs(hand.weights[1] - 0.2689);
    r.passed = held == draws && e0 <= 1e-4 && e1 <= 1e-4;
    r.metric = static_cast<double>(held) / static_cast<double>(draws);
    r.detail = std::to_string(held) + "/" + std::to_string(draws) + " draws held, worst |sum-1| " +
               detail::num(worst_sum) + ", hand case [" + detail::num(hand.weights[0]) + ", " +
               detail::num(hand.weights[1]) + "]";
    return r;
  });
}

namespace detail {

/// Global mid-rank equalization by direct pairwise counting.
inline ImageU8 brute_equalize(const ImageU8& img) {
  ImageU8 out(img.height, img.width, 1);
  const double n = static_cast<double>(img.data.size());
  for (std::size_t i = 0; i < img.data.size(); ++i) {
    double less = 0, equal = 0;
    for (std::uint8_t o : img.data) {
      less += o < img.data[i];
      equal += o == img.data[i];
    }
    out.data[i] = saturate_u8(256.0 * (less + 0.5 * equal) / n - 0.5);
  }
  return out;
}

}  // namespace detail

/// Single-tile unclipped CLAHE equals the equalization oracle exactly;
/// constant images move at most one level; clipped histograms respect the
/// limit on two-valued images.
inline Result clahe_oracle(std::size_t images = 50) {
  return detail::timed("CLAHE oracle", [images] {
    Result r;
    std::size_t exact = 0;
    for (std::size_t s = 0; s < images; ++s) {
      CounterRng rng(s, 11);
      const std::size_t h = 8 + rng.below(57), w = 8 + rng.below(57);
      const auto lo = rng.below(100);
      const auto hi = lo + 1 + rng.below(255 - lo);
      ImageU8 img(h, w, 1);
      for (auto& v : img.data) v = static_cast<std::uint8_t>(lo + rng.below(hi - lo + 1));
      ClaheParams p;
      p.tiles_x = p.tiles_y = 1;
      p.clip_limit = ClaheParams::unbounded;
      exact += clahe(img, p).data == detail::brute_equalize(img).data;
    }
    int worst_shift = 0;
    for (int value = 0; value < 256; value += 17) {
      const ImageU8 c(40, 40, 1, static_cast<std::uint8_t>(value));
      for (auto v : clahe(c, ClaheParams{}).data) worst_shift = std::max(worst_shift, std::abs(int(v) - value));
    }
    std::size_t bound_violations = 0;
    for (std::uint64_t s = 0; s < 11; ++s) {
      ImageU8 img(64, 64, 1);
      CounterRng rng(s, 12);
      // case 0: 90% at 50, 10% at 200, limit 2
      const double frac = s == 0 ? 0.1 : rng.uniform(0.01, 0.5);
      const auto a = static_cast<std::uint8_t>(s == 0 ? 50 : rng.below(128));
      const auto b = static_cast<std::uint8_t>(s == 0 ? 200 : 128 + rng.below(128));
      for (auto& v : img.data) v = rng.uniform() < frac ? b : a;
      ClaheParams p;
      p.clip_limit = s == 0 ? 2.0 : 1.0 + rng.uniform(0, 3);
      for (const auto& hist : clahe_tile_histograms(img, p)) {
        const double total = std::accumulate(hist.begin(), hist.end(), 0.0);
        const double limit = p.clip_limit * total / static_cast<double>(p.bins);
        for (double v : hist) bound_violations += v > limit + 1e-9;
      }
    }
    r.passed = exact == images && worst_shift <= 1 && bound_violations == 0;
    r.metric = static_cast<double>(exact) / static_cast<double>(images);
    r.detail = std::to_string(exact) + "/" + std::to_string(images) + " exact, constant shift <= " +
               std::to_string(worst_shift) + ", clip violations " + std::to_string(bound_violations);
    return r;
  });
}

/// prf1_report, accuracy and hamming loss against a from-scratch recount
/// on random label pairs.
inline Result metric_oracle(std::size_t instances = 1000) {
  return detail::timed("metric oracle", [instances] {
    Result r;
    double worst = 0;
    for (std::size_t inst = 0; inst < instances; ++inst) {
      CounterRng rng(99, inst);
      const int n = 2 + static_cast<int>(rng.below(3));
      const std::size_t len = 1 + rng.below(80);
      std::vector<int> t(len), y(len);
      for (std::size_t i = 0; i < len; ++i) {
        t[i] = static_cast<int>(rng.below(static_cast<std::uint64_t>(n)));
        y[i] = rng.uniform() < 0.5 ? t[i] : static_cast<int>(rng.below(static_cast<std::uint64_t>(n)));
      }
      std::vector<std::string> names(static_cast<std::size_t>(n));
      const EvalReport rep = evaluate_predictions(t, y, names);
      double macro[3] = {}, weighted[3] = {}, correct = 0, miss = 0;
      for (std::size_t i = 0; i < len; ++i) {
        correct += t[i] == y[i];
        miss += t[i] != y[i];
      }
      for (int c = 0; c < n; ++c) {
        double tp = 0, fp = 0, fn = 0;
        for (std::size_t i = 0; i < len; ++i) {
          tp += t[i] == c && y[i] == c;
          fp += t[i] != c && y[i] == c;
          fn += t[i] == c && y[i] != c;
        }
        const double p = tp + fp > 0 ? tp / (tp + fp) : 0.0;
        const double rc = tp + fn > 0 ? tp / (tp + fn) : 0.0;
        const double f = p + rc > 0 ? 2 * p * rc / (p + rc) : 0.0;
        const auto& m = rep.per_class[static_cast<std::size_t>(c)];
        worst = std::max({worst, std::abs(m.precision - p), std::abs(m.recall - rc), std::abs(m.f1 - f),
                          std::abs(static_cast<double>(m.support) - (tp + fn))});
        const double w = (tp + fn) / static_cast<double>(len);
        macro[0] += p / n;
        macro[1] += rc / n;
        macro[2] += f / n;
        weighted[0] += w * p;
        weighted[1] += w * rc;
        weighted[2] += w * f;
      }
      const double L = static_cast<double>(len);
      worst = std::max({worst, std::abs(rep.macro_avg.precision - macro[0]), std::abs(rep.macro_avg.recall - macro[1]),
                        std::abs(rep.macro_avg.f1 - macro[2]), std::abs(rep.weighted_avg.precision - weighted[0]),
                        std::abs(rep.weighted_avg.recall - weighted[1]), std::abs(rep.weighted_avg.f1 - weighted[2]),
                        std::abs(rep.accuracy - correct / L), std::abs(rep.hamming_loss - miss / L),
                        std::abs(hamming_loss(t, y) - miss / L), std::abs(rep.accuracy + rep.hamming_loss - 1.0)});
    }
    r.passed = worst <= 1e-12;
    r.metric = worst;
    r.detail = std::to_string(instances) + " instances, worst abs diff " + detail::num(worst);
    return r;
  });
}

/// Without positional embeddings, permuting the tokens leaves the pooled
/// vector and the logits unchanged.
inline Result permutation_equivariance(std::size_t trials = 100) {
  using namespace detail;
  return timed("permutation equivariance", [trials] {
    Result r;
    double worst = 0;
    for (std::size_t trial = 0; trial < trials; ++trial) {
      CctConfig c = tiny_cct();
      c.positional_embedding = PositionalEmbedding::none;
      c.encoder_layers = 1 + trial % 2;
      auto p = init_params<double>(c, trial);
      scramble(p, trial);
      CounterRng rng(31, trial);
      const std::size_t B = 2, S = 3 + rng.below(10), D = c.embed_dim;
      TD tokens = rand({B, S, D}, 700 + trial, -2, 2);
      std::vector<std::size_t> perm(S);
      std::iota(perm.begin(), perm.end(), 0);
      for (std::size_t i = S - 1; i > 0; --i) std::swap(perm[i], perm[rng.below(i + 1)]);
      TD shuffled({B, S, D});
      for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t t = 0; t < S; ++t) {
          for (std::size_t d = 0; d < D; ++d) shuffled[(b * S + t) * D + d] = tokens[(b * S + perm[t]) * D + d];
        }
      }
      GD g(false);
      auto run = [&](const TD& tk) {
        const auto sp = seq_pool(g, encode(g, tk, p, c), p.pool_g);
        return std::pair{sp.pooled, classify_head(g, sp.pooled, p.head_weight, p.head_bias)};
      };
      const auto [pa, la] = run(tokens);
      const auto [pb, lb] = run(shuffled);
      for (std::size_t i = 0; i < pa.numel(); ++i) worst = std::max(worst, std::abs(pa[i] - pb[i]));
      for (std::size_t i = 0; i < la.numel(); ++i) worst = std::max(worst, std::abs(la[i] - lb[i]));
    }
    r.passed = worst <= 1e-6;
    r.metric = worst;
    r.detail = std::to_string(trials) + " trials, worst abs diff " + detail::num(worst);
    return r;
  });
}

/// The `selftest` suite: every gradient check plus the oracles.
inline std::vector<Result> run_all() {
  auto out = kernel_gradient_checks();
  out.push_back(full_model_gradient_check());
  out.push_back(cross_entropy_anchor());
  out.push_back(seq_pool_invariants());
  out.push_back(clahe_oracle());
  out.push_back(metric_oracle());
  out.push_back(permutation_equivariance());
  return out;
}

}  // namespace cct::selftest
