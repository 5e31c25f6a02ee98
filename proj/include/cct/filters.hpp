#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "cct/errors.hpp"

namespace cct {

/// Half-sample symmetric reflection (x[-1] = x[0]) of any integer index into
/// [0, n). With a symmetric kernel this boundary rule preserves total mass.
inline std::size_t reflect_index(std::ptrdiff_t i, std::size_t n) {
  const auto period = static_cast<std::ptrdiff_t>(2 * n);
  std::ptrdiff_t m = i % period;
  if (m < 0) m += period;
  return m < static_cast<std::ptrdiff_t>(n) ? static_cast<std::size_t>(m)
                                            : static_cast<std::size_t>(period - 1 - m);
}

/// Normalized 1-D Gaussian of radius ceil(3 sigma).
inline std::vector<double> gaussian_kernel(double sigma) {
  if (!(sigma > 0.0)) throw ValueError("gaussian sigma must be > 0, got " + std::to_string(sigma));
  const auto radius = static_cast<std::ptrdiff_t>(std::ceil(3.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double total = 0.0;
  for (std::ptrdiff_t i = -radius; i <= radius; ++i) {
    const double v = std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));
    k[static_cast<std::size_t>(i + radius)] = v;
    total += v;
  }
  for (double& v : k) v /= total;
  return k;
}

/// Separable Gaussian blur of one H x W plane with reflect padding.
template <typename In, typename Out>
void gaussian_blur_plane(const In* in, std::size_t h, std::size_t w, double sigma, Out* out) {
  const std::vector<double> k = gaussian_kernel(sigma);
  const auto radius = static_cast<std::ptrdiff_t>(k.size() / 2);
  std::vector<double> tmp(h * w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      double acc = 0.0;
      for (std::ptrdiff_t i = -radius; i <= radius; ++i) {
        const std::size_t sx = reflect_index(static_cast<std::ptrdiff_t>(x) + i, w);
        acc += k[static_cast<std::size_t>(i + radius)] * static_cast<double>(in[y * w + sx]);
      }
      tmp[y * w + x] = acc;
    }
  }
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      double acc = 0.0;
      for (std::ptrdiff_t i = -radius; i <= radius; ++i) {
        const std::size_t sy = reflect_index(static_cast<std::ptrdiff_t>(y) + i, h);
        acc += k[static_cast<std::size_t>(i + radius)] * tmp[sy * w + x];
      }
      out[y * w + x] = static_cast<Out>(acc);
    }
  }
}

/// Bilinear sample at continuous (y, x) in pixel-index coordinates; taps
/// outside the plane contribute zero.
template <typename V>
double bilinear_zero(const V* plane, std::size_t h, std::size_t w, double y, double x) {
  const double fy = std::floor(y), fx = std::floor(x);
  const double wy = y - fy, wx = x - fx;
  const auto y0 = static_cast<std::ptrdiff_t>(fy), x0 = static_cast<std::ptrdiff_t>(fx);
  auto tap = [&](std::ptrdiff_t yy, std::ptrdiff_t xx) -> double {
    if (yy < 0 || xx < 0 || yy >= static_cast<std::ptrdiff_t>(h) || xx >= static_cast<std::ptrdiff_t>(w)) return 0.0;
    return static_cast<double>(plane[static_cast<std::size_t>(yy) * w + static_cast<std::size_t>(xx)]);
  };
  return (1 - wy) * ((1 - wx) * tap(y0, x0) + wx * tap(y0, x0 + 1)) +
         wy * ((1 - wx) * tap(y0 + 1, x0) + wx * tap(y0 + 1, x0 + 1));
}

/// Bilinear sample with coordinates clamped to the plane.
template <typename V>
double bilinear_clamp(const V* plane, std::size_t h, std::size_t w, double y, double x) {
  y = std::clamp(y, 0.0, static_cast<double>(h - 1));
  x = std::clamp(x, 0.0, static_cast<double>(w - 1));
  const auto y0 = static_cast<std::size_t>(y), x0 = static_cast<std::size_t>(x);
  const std::size_t y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
  const double wy = y - static_cast<double>(y0), wx = x - static_cast<double>(x0);
  auto at = [&](std::size_t yy, std::size_t xx) { return static_cast<double>(plane[yy * w + xx]); };
  return (1 - wy) * ((1 - wx) * at(y0, x0) + wx * at(y0, x1)) + wy * ((1 - wx) * at(y1, x0) + wx * at(y1, x1));
}

/// Pixel-center aligned bilinear resampling of one plane (src -> dst size).
template <typename In, typename Out, typename Convert>
void resize_plane(const In* in, std::size_t h, std::size_t w, Out* out, std::size_t oh, std::size_t ow,
                  Convert convert) {
  const double sy = static_cast<double>(h) / static_cast<double>(oh);
  const double sx = static_cast<double>(w) / static_cast<double>(ow);
  for (std::size_t y = 0; y < oh; ++y) {
    const double src_y = (static_cast<double>(y) + 0.5) * sy - 0.5;
    for (std::size_t x = 0; x < ow; ++x) {
      const double src_x = (static_cast<double>(x) + 0.5) * sx - 0.5;
      out[y * ow + x] = convert(bilinear_clamp(in, h, w, src_y, src_x));
    }
  }
}

}  // namespace cct
