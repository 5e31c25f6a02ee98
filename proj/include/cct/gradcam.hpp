#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "cct/filters.hpp"
#include "cct/image.hpp"
#include "cct/model.hpp"

namespace cct {

struct Heatmap {
  std::size_t height = 0, width = 0;
  std::vector<double> values;  // row-major, in [0,1]
  int target_class = -1;
  int predicted_class = -1;
  std::vector<double> probabilities;
  std::string source;

  double at(std::size_t y, std::size_t x) const { return values[y * width + x]; }
};

namespace detail {

/// Min-max to [0,1]; a flat map (range negligible against its maximum)
/// becomes all zeros.
inline void minmax_normalize(std::vector<double>& v) {
  if (v.empty()) return;
  const auto [lo_it, hi_it] = std::minmax_element(v.begin(), v.end());
  const double lo = *lo_it, hi = *hi_it;
  const double range = hi - lo;
  if (!(range > 1e-9 * std::max(std::abs(hi), std::abs(lo))) || range == 0.0) {
    std::fill(v.begin(), v.end(), 0.0);
    return;
  }
  for (auto& x : v) x = (x - lo) / range;
}

inline std::vector<double> upsample(const std::vector<double>& grid, std::size_t h, std::size_t w, std::size_t oh,
                                    std::size_t ow) {
  std::vector<double> out(oh * ow);
  resize_plane(grid.data(), h, w, out.data(), oh, ow, [](double v) { return v; });
  return out;
}

template <Scalar T>
void check_params(const CctParams<T>& p) {
  if (!p.all_finite()) throw ValueError("model parameters contain non-finite values");
}

}  // namespace detail

/// Gradient of logit[target] with respect to a [1,D,h,w] feature map, using
/// the same backward pass as training.
template <Scalar T>
Tensor<T> logit_feature_gradient(const Tensor<T>& features, const CctParams<T>& p, const CctConfig& cfg, int target,
                                 Tensor<T>* logits_out = nullptr) {
  if (target < 0 || static_cast<std::size_t>(target) >= cfg.num_classes) {
    throw ValueError("target class " + std::to_string(target) + " outside [0," + std::to_string(cfg.num_classes) +
                     ")");
  }
  // frozen copy: only the feature leaf is differentiated
  const CctParams<T> frozen = p.clone();
  Tensor<T> a = features.clone();
  a.set_requires_grad();
  Graph<T> g;
  const auto r = forward_from_features(g, a, frozen, cfg);
  r.logits.grad()[static_cast<std::size_t>(target)] = T(1);
  g.run_backward();
  if (logits_out) *logits_out = r.logits;
  return Tensor<T>(a.shape(), std::span<const T>(a.grad()));
}

/// Grad-CAM on the last tokenizer block: alpha_d = spatial mean of
/// d logit / d A_d, CAM = ReLU(sum_d alpha_d A_d), bilinearly upsampled to
/// the input size and min-max normalized. target < 0 picks the prediction.
template <Scalar T>
Heatmap grad_cam(const Tensor<T>& x, const CctParams<T>& p, const CctConfig& cfg, int target = -1) {
  detail::check_params(p);
  if (x.rank() != 4 || x.dim(0) != 1) throw ShapeError("grad_cam expects one image [1,C,H,W], got " + shape_str(x.shape()));
  Graph<T> nog(false);
  const Tensor<T> a = tokenizer_features(nog, x, p, cfg);
  const std::size_t D = a.dim(1), h = a.dim(2), w = a.dim(3), hw = h * w;

  Heatmap hm;
  hm.source = "tokenizer." + std::to_string(cfg.conv_blocks - 1);
  const Tensor<T> logits = forward_from_features(nog, a, p, cfg).logits;
  hm.predicted_class = argmax_rows(logits)[0];
  hm.probabilities = probabilities(logits, 0);
  hm.target_class = target < 0 ? hm.predicted_class : target;

  const Tensor<T> grad = logit_feature_gradient(a, p, cfg, hm.target_class);
  std::vector<double> cam(hw, 0.0);
  for (std::size_t d = 0; d < D; ++d) {
    double alpha = 0;
    for (std::size_t i = 0; i < hw; ++i) alpha += static_cast<double>(grad[d * hw + i]);
    alpha /= static_cast<double>(hw);
    for (std::size_t i = 0; i < hw; ++i) cam[i] += alpha * static_cast<double>(a[d * hw + i]);
  }
  for (auto& v : cam) v = std::max(v, 0.0);
  hm.height = x.dim(2);
  hm.width = x.dim(3);
  hm.values = detail::upsample(cam, h, w, hm.height, hm.width);
  detail::minmax_normalize(hm.values);
  return hm;
}

/// Sequence-pooling weights [1,S] laid back onto the tokenizer grid.
template <Scalar T>
Heatmap pool_attention_map(const Tensor<T>& pool_weights, const CctConfig& cfg) {
  const auto [gh, gw] = cfg.grid();
  if (pool_weights.numel() != gh * gw) {
    throw ShapeError("pool weights of shape " + shape_str(pool_weights.shape()) + " do not fit a " +
                     std::to_string(gh) + "x" + std::to_string(gw) + " token grid");
  }
  std::vector<double> grid(pool_weights.data().begin(), pool_weights.data().end());
  Heatmap hm;
  hm.source = "seq_pool";
  hm.height = hm.width = cfg.input_size;
  hm.values = detail::upsample(grid, gh, gw, hm.height, hm.width);
  detail::minmax_normalize(hm.values);
  return hm;
}

/// Bilinear resize of a heatmap, e.g. from model size to the source image.
inline Heatmap resize_heatmap(const Heatmap& hm, std::size_t h, std::size_t w) {
  Heatmap out = hm;
  out.height = h;
  out.width = w;
  out.values = detail::upsample(hm.values, hm.height, hm.width, h, w);
  for (auto& v : out.values) v = std::clamp(v, 0.0, 1.0);
  return out;
}

// ---------------------------------------------------------------------------
// Colormap and overlays
// ---------------------------------------------------------------------------

using Rgb = std::array<std::uint8_t, 3>;

namespace detail {

constexpr std::uint8_t jet_channel(int i, int k) {
  // 255 * clamp(1.5 - |4t - k|, 0, 1), t = i / 255, in integer arithmetic
  const int d = 4 * i - 255 * k;
  const int v = 3 * 255 - 2 * (d < 0 ? -d : d);  // twice the scaled value
  const int c = v < 0 ? 0 : v > 2 * 255 ? 2 * 255 : v;
  return static_cast<std::uint8_t>((c + 1) / 2);
}

constexpr std::array<Rgb, 256> make_jet() {
  std::array<Rgb, 256> t{};
  for (int i = 0; i < 256; ++i) t[static_cast<std::size_t>(i)] = {jet_channel(i, 3), jet_channel(i, 2), jet_channel(i, 1)};
  return t;
}

}  // namespace detail

/// Jet colormap: dark blue (0) through cyan, yellow to dark red (255).
inline constexpr std::array<Rgb, 256> kJet = detail::make_jet();

inline Rgb colormap(double v) {
  const double c = std::clamp(v, 0.0, 1.0);
  return kJet[static_cast<std::size_t>(std::lround(c * 255.0))];
}

/// Heatmap as an 8-bit grayscale image.
inline ImageU8 heatmap_gray(const Heatmap& hm) {
  ImageU8 img(hm.height, hm.width, 1);
  for (std::size_t i = 0; i < hm.values.size(); ++i) img.data[i] = saturate_u8(hm.values[i] * 255.0);
  return img;
}

inline ImageU8 heatmap_color(const Heatmap& hm) {
  ImageU8 img(hm.height, hm.width, 3);
  for (std::size_t i = 0; i < hm.values.size(); ++i) {
    const Rgb c = colormap(hm.values[i]);
    for (int k = 0; k < 3; ++k) img.data[i * 3 + static_cast<std::size_t>(k)] = c[static_cast<std::size_t>(k)];
  }
  return img;
}

/// out = (1 - alpha) * gray(img) + alpha * jet(hm), per channel, rounded.
inline ImageU8 overlay(const ImageU8& img, const Heatmap& hm, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ValueError("overlay alpha must lie in [0,1]");
  if (img.height != hm.height || img.width != hm.width) {
    throw ShapeError("overlay: image is " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                     " but heatmap is " + std::to_string(hm.height) + "x" + std::to_string(hm.width));
  }
  const ImageU8 gray = to_gray(img);
  ImageU8 out(img.height, img.width, 3);
  for (std::size_t i = 0; i < gray.data.size(); ++i) {
    const Rgb c = colormap(hm.values[i]);
    for (std::size_t k = 0; k < 3; ++k) {
      out.data[i * 3 + k] = saturate_u8((1.0 - alpha) * gray.data[i] + alpha * c[k]);
    }
  }
  return out;
}

}  // namespace cct
