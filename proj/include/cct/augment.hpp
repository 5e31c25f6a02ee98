#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>

#include "cct/filters.hpp"
#include "cct/rng.hpp"
#include "cct/tensor.hpp"

namespace cct {

struct AugmentPolicy {
  double p_blur = 0.5;
  double p_rotate = 0.5;
  double p_zoom = 0.5;
  double p_flip_h = 0.5;
  double p_flip_v = 0.5;
  double rotate_max_deg = 15.0;
  double zoom_min = 0.9;
  double zoom_max = 1.1;
  double blur_sigma_min = 0.5;
  double blur_sigma_max = 1.5;
  std::uint64_t seed = 0;

  /// Identity policy: every probability zero.
  static AugmentPolicy none() {
    AugmentPolicy p;
    p.p_blur = p.p_rotate = p.p_zoom = p.p_flip_h = p.p_flip_v = 0.0;
    return p;
  }

  void validate() const {
    for (double p : {p_blur, p_rotate, p_zoom, p_flip_h, p_flip_v}) {
      if (!(p >= 0.0 && p <= 1.0)) throw ValueError("augmentation probabilities must lie in [0,1]");
    }
    if (!(zoom_min > 0.0) || zoom_min > zoom_max) throw ValueError("augmentation zoom range must satisfy 0 < min <= max");
    if (!(blur_sigma_min > 0.0) || blur_sigma_min > blur_sigma_max) {
      throw ValueError("augmentation blur sigma range must satisfy 0 < min <= max");
    }
    if (!(rotate_max_deg >= 0.0)) throw ValueError("rotate_max_deg must be >= 0");
  }
};

enum class FlipAxis { horizontal, vertical };

namespace detail {

inline void check_chw(const Shape& s, const char* op) {
  if (s.size() != 3) throw ShapeError(std::string(op) + ": expected [C,H,W], got " + shape_str(s));
}

}  // namespace detail

template <Scalar T>
Tensor<T> gaussian_blur(const Tensor<T>& t, double sigma) {
  detail::check_chw(t.shape(), "gaussian_blur");
  if (!(sigma > 0.0)) throw ValueError("gaussian_blur sigma must be > 0");
  const std::size_t C = t.dim(0), H = t.dim(1), W = t.dim(2);
  Tensor<T> out(t.shape());
  for (std::size_t c = 0; c < C; ++c) {
    gaussian_blur_plane(t.data().data() + c * H * W, H, W, sigma, out.data().data() + c * H * W);
  }
  return out;
}

/// Counterclockwise rotation (as displayed, rows growing downward) about the
/// image center with bilinear sampling and zero fill.
template <Scalar T>
Tensor<T> rotate(const Tensor<T>& t, double degrees) {
  detail::check_chw(t.shape(), "rotate");
  if (degrees == 0.0) return t.clone();
  const std::size_t C = t.dim(0), H = t.dim(1), W = t.dim(2);
  const double rad = degrees * std::numbers::pi / 180.0;
  const double cs = std::cos(rad), sn = std::sin(rad);
  const double cy = 0.5 * static_cast<double>(H - 1), cx = 0.5 * static_cast<double>(W - 1);
  Tensor<T> out(t.shape());
  for (std::size_t c = 0; c < C; ++c) {
    const T* src = t.data().data() + c * H * W;
    T* dst = out.data().data() + c * H * W;
    for (std::size_t y = 0; y < H; ++y) {
      const double dy = static_cast<double>(y) - cy;
      for (std::size_t x = 0; x < W; ++x) {
        const double dx = static_cast<double>(x) - cx;
        const double sx = cx + dx * cs - dy * sn;
        const double sy = cy + dx * sn + dy * cs;
        dst[y * W + x] = static_cast<T>(bilinear_zero(src, H, W, sy, sx));
      }
    }
  }
  return out;
}

/// scale > 1: bilinear resample of the central H/scale x W/scale window back
/// to H x W (samples clamp to that window). scale < 1: shrink about the
/// center with zero padding.
template <Scalar T>
Tensor<T> zoom(const Tensor<T>& t, double scale) {
  detail::check_chw(t.shape(), "zoom");
  if (!(scale > 0.0)) throw ValueError("zoom scale must be > 0");
  if (scale == 1.0) return t.clone();
  const std::size_t C = t.dim(0), H = t.dim(1), W = t.dim(2);
  const double cy = 0.5 * static_cast<double>(H - 1), cx = 0.5 * static_cast<double>(W - 1);
  const double half_h = 0.5 * static_cast<double>(H) / scale, half_w = 0.5 * static_cast<double>(W) / scale;
  Tensor<T> out(t.shape());
  for (std::size_t c = 0; c < C; ++c) {
    const T* src = t.data().data() + c * H * W;
    T* dst = out.data().data() + c * H * W;
    for (std::size_t y = 0; y < H; ++y) {
      double sy = cy + (static_cast<double>(y) - cy) / scale;
      for (std::size_t x = 0; x < W; ++x) {
        double sx = cx + (static_cast<double>(x) - cx) / scale;
        if (scale > 1.0) {
          sy = std::clamp(sy, cy - half_h + 0.5, cy + half_h - 0.5);
          sx = std::clamp(sx, cx - half_w + 0.5, cx + half_w - 0.5);
          dst[y * W + x] = static_cast<T>(bilinear_clamp(src, H, W, sy, sx));
        } else {
          dst[y * W + x] = static_cast<T>(bilinear_zero(src, H, W, sy, sx));
        }
      }
    }
  }
  return out;
}

/// Exact index reversal: horizontal mirrors columns, vertical mirrors rows.
template <Scalar T>
Tensor<T> flip(const Tensor<T>& t, FlipAxis axis) {
  detail::check_chw(t.shape(), "flip");
  const std::size_t C = t.dim(0), H = t.dim(1), W = t.dim(2);
  Tensor<T> out(t.shape());
  auto s = t.data();
  auto d = out.data();
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t x = 0; x < W; ++x) {
        const std::size_t sy = axis == FlipAxis::vertical ? H - 1 - y : y;
        const std::size_t sx = axis == FlipAxis::horizontal ? W - 1 - x : x;
        d[(c * H + y) * W + x] = s[(c * H + sy) * W + sx];
      }
    }
  }
  return out;
}

/// The random choices for one sample.
struct AugmentDecision {
  bool blur = false;
  double blur_sigma = 0.0;
  bool rotate = false;
  double degrees = 0.0;
  bool zoom = false;
  double scale = 1.0;
  bool flip_h = false;
  bool flip_v = false;
};

/// Eight draws from the generator keyed by (policy.seed, stream_index), in a
/// fixed slot order, so each decision is independent of the others.
inline AugmentDecision draw_augmentation(const AugmentPolicy& p, std::uint64_t stream_index) {
  CounterRng rng(p.seed, stream_index);
  AugmentDecision d;
  d.blur = rng.uniform() < p.p_blur;
  d.blur_sigma = rng.uniform(p.blur_sigma_min, p.blur_sigma_max);
  d.rotate = rng.uniform() < p.p_rotate;
  d.degrees = rng.uniform(-p.rotate_max_deg, p.rotate_max_deg);
  d.zoom = rng.uniform() < p.p_zoom;
  d.scale = rng.uniform(p.zoom_min, p.zoom_max);
  d.flip_h = rng.uniform() < p.p_flip_h;
  d.flip_v = rng.uniform() < p.p_flip_v;
  return d;
}

/// Applies blur -> rotate -> zoom -> flip_h -> flip_v.
template <Scalar T>
Tensor<T> apply_augmentation(const Tensor<T>& t, const AugmentDecision& d) {
  Tensor<T> out = t;
  if (d.blur) out = gaussian_blur(out, d.blur_sigma);
  if (d.rotate) out = rotate(out, d.degrees);
  if (d.zoom) out = zoom(out, d.scale);
  if (d.flip_h) out = flip(out, FlipAxis::horizontal);
  if (d.flip_v) out = flip(out, FlipAxis::vertical);
  return out.same_storage(t) ? t.clone() : out;
}

/// Pure function of (tensor, policy, stream_index).
template <Scalar T>
Tensor<T> sample_augment(const Tensor<T>& t, const AugmentPolicy& policy, std::uint64_t stream_index) {
  return apply_augmentation(t, draw_augmentation(policy, stream_index));
}

}  // namespace cct
