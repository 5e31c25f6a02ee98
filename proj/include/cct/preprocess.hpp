#pragma once

#include <cmath>
#include <limits>
#include <optional>
#include <vector>

#include "cct/filters.hpp"
#include "cct/image.hpp"
#include "cct/tensor.hpp"

namespace cct {

// ---------------------------------------------------------------------------
// CLAHE
// ---------------------------------------------------------------------------

struct ClaheParams {
  std::size_t tiles_x = 8;
  std::size_t tiles_y = 8;
  /// Bin ceiling as a multiple of the uniform bin height (tile_pixels / bins).
  /// Infinity disables clipping.
  double clip_limit = 2.0;
  std::size_t bins = 256;

  static constexpr double unbounded = std::numeric_limits<double>::infinity();

  void validate() const {
    if (tiles_x < 1 || tiles_y < 1) throw ValueError("CLAHE tile counts must be >= 1");
    if (!(clip_limit >= 1.0)) throw ValueError("CLAHE clip_limit must be >= 1");
    if (bins < 2 || bins > 256) throw ValueError("CLAHE bins must be in [2, 256]");
  }
};

/// Clips bins at `limit` and hands the excess back to the bins below the
/// limit, water-filling so no bin ends above it. Total mass is preserved.
inline void clip_histogram(std::vector<double>& hist, double limit) {
  if (!std::isfinite(limit)) return;
  double excess = 0.0;
  for (double& v : hist) {
    if (v > limit) {
      excess += v - limit;
      v = limit;
    }
  }
  for (std::size_t pass = 0; pass <= hist.size() && excess > 0.0; ++pass) {
    std::size_t below = 0;
    for (double v : hist) below += v < limit;
    if (below == 0) break;
    const double share = excess / static_cast<double>(below);
    double given = 0.0;
    for (double& v : hist) {
      if (v < limit) {
        const double add = std::min(share, limit - v);
        v += add;
        given += add;
      }
    }
    excess -= given;
  }
}

/// Gray-level lookup table from a (clipped) histogram over `bins` bins.
///
/// Mid-rank equalization: level v maps to 256 * (F(v-) + h(v)/2) / N - 0.5,
/// where F(v-) is the mass strictly below v's bin. A uniform histogram maps
/// every level to itself and a single clipped spike stays within one level.
inline std::vector<std::uint8_t> equalization_lut(const std::vector<double>& hist, double total) {
  const std::size_t bins = hist.size();
  std::vector<double> bin_map(bins);
  double below = 0.0;
  for (std::size_t b = 0; b < bins; ++b) {
    bin_map[b] = 256.0 * (below + 0.5 * hist[b]) / total - 0.5;
    below += hist[b];
  }
  std::vector<std::uint8_t> lut(256);
  for (std::size_t v = 0; v < 256; ++v) lut[v] = saturate_u8(bin_map[v * bins / 256]);
  return lut;
}

namespace detail {

struct TileAxis {
  std::vector<std::size_t> start;  // tiles + 1 boundaries
  std::vector<double> center;
};

/// Equal tiles except the last, which absorbs the remainder.
inline TileAxis tile_axis(std::size_t extent, std::size_t tiles) {
  TileAxis a;
  const std::size_t step = extent / tiles;
  for (std::size_t t = 0; t < tiles; ++t) a.start.push_back(t * step);
  a.start.push_back(extent);
  for (std::size_t t = 0; t < tiles; ++t) a.center.push_back(0.5 * static_cast<double>(a.start[t] + a.start[t + 1]));
  return a;
}

struct Blend {
  std::size_t lo, hi;
  double w;  // weight of hi
};

inline std::vector<Blend> blend_axis(const TileAxis& a, std::size_t extent) {
  const std::size_t tiles = a.center.size();
  std::vector<Blend> out(extent);
  std::size_t j = 0;
  for (std::size_t p = 0; p < extent; ++p) {
    const double c = static_cast<double>(p) + 0.5;
    if (c <= a.center.front()) {
      out[p] = {0, 0, 0.0};
    } else if (c >= a.center.back()) {
      out[p] = {tiles - 1, tiles - 1, 0.0};
    } else {
      while (j + 1 < tiles && a.center[j + 1] <= c) ++j;
      out[p] = {j, j + 1, (c - a.center[j]) / (a.center[j + 1] - a.center[j])};
    }
  }
  return out;
}

inline void check_clahe_input(const ImageU8& img, const ClaheParams& p) {
  p.validate();
  if (img.channels != 1) throw ValueError("clahe expects a single-channel image, got " + std::to_string(img.channels));
  if (p.tiles_x > img.width || p.tiles_y > img.height) {
    throw ValueError("CLAHE tile grid " + std::to_string(p.tiles_y) + "x" + std::to_string(p.tiles_x) +
                     " exceeds image " + std::to_string(img.height) + "x" + std::to_string(img.width));
  }
}

}  // namespace detail

/// Effective (clipped and redistributed) histogram of every tile, row-major
/// over the tile grid.
inline std::vector<std::vector<double>> clahe_tile_histograms(const ImageU8& img, const ClaheParams& p) {
  detail::check_clahe_input(img, p);
  const auto ax = detail::tile_axis(img.width, p.tiles_x);
  const auto ay = detail::tile_axis(img.height, p.tiles_y);
  std::vector<std::vector<double>> out;
  for (std::size_t ty = 0; ty < p.tiles_y; ++ty) {
    for (std::size_t tx = 0; tx < p.tiles_x; ++tx) {
      std::vector<double> hist(p.bins, 0.0);
      for (std::size_t y = ay.start[ty]; y < ay.start[ty + 1]; ++y) {
        for (std::size_t x = ax.start[tx]; x < ax.start[tx + 1]; ++x) hist[img.at(y, x) * p.bins / 256] += 1.0;
      }
      const double n = static_cast<double>((ay.start[ty + 1] - ay.start[ty]) * (ax.start[tx + 1] - ax.start[tx]));
      clip_histogram(hist, p.clip_limit * n / static_cast<double>(p.bins));
      out.push_back(std::move(hist));
    }
  }
  return out;
}

/// Contrast-limited adaptive histogram equalization of a gray image.
/// Each output pixel blends the lookup tables of the four nearest tile
/// centers bilinearly; pixels beyond the outer centers clamp to edge tiles.
inline ImageU8 clahe(const ImageU8& img, const ClaheParams& p) {
  const auto hists = clahe_tile_histograms(img, p);
  const auto ax = detail::tile_axis(img.width, p.tiles_x);
  const auto ay = detail::tile_axis(img.height, p.tiles_y);
  std::vector<std::vector<std::uint8_t>> luts;
  for (std::size_t ty = 0; ty < p.tiles_y; ++ty) {
    for (std::size_t tx = 0; tx < p.tiles_x; ++tx) {
      const double n = static_cast<double>((ay.start[ty + 1] - ay.start[ty]) * (ax.start[tx + 1] - ax.start[tx]));
      luts.push_back(equalization_lut(hists[ty * p.tiles_x + tx], n));
    }
  }
  const auto bx = detail::blend_axis(ax, img.width);
  const auto by = detail::blend_axis(ay, img.height);
  ImageU8 out(img.height, img.width, 1);
  for (std::size_t y = 0; y < img.height; ++y) {
    const auto& r = by[y];
    for (std::size_t x = 0; x < img.width; ++x) {
      const auto& c = bx[x];
      const std::uint8_t v = img.at(y, x);
      auto lut = [&](std::size_t ty, std::size_t tx) { return static_cast<double>(luts[ty * p.tiles_x + tx][v]); };
      const double top = (1.0 - c.w) * lut(r.lo, c.lo) + c.w * lut(r.lo, c.hi);
      const double bot = (1.0 - c.w) * lut(r.hi, c.lo) + c.w * lut(r.hi, c.hi);
      out.at(y, x) = saturate_u8((1.0 - r.w) * top + r.w * bot);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Ben Graham local-average removal
// ---------------------------------------------------------------------------

struct BenGrahamParams {
  /// Blur scale in pixels; unset means image width / 30.
  std::optional<double> sigma;
  double alpha = 4.0;
  /// Weight of the blurred image; unset means -alpha.
  std::optional<double> beta;
  double gamma = 128.0;

  double sigma_for(std::size_t width) const { return sigma ? *sigma : static_cast<double>(width) / 30.0; }
  double beta_value() const { return beta ? *beta : -alpha; }

  void validate() const {
    if (sigma && !(*sigma > 0.0)) throw ValueError("Ben Graham sigma must be > 0");
  }
};

/// out = clamp(alpha * img + beta * blur(img, sigma) + gamma), per channel.
inline ImageU8 ben_graham(const ImageU8& img, const BenGrahamParams& p) {
  p.validate();
  const double sigma = p.sigma_for(img.width);
  const double beta = p.beta_value();
  ImageU8 out(img.height, img.width, img.channels);
  std::vector<double> plane(img.pixels()), blurred(img.pixels());
  for (std::size_t c = 0; c < img.channels; ++c) {
    for (std::size_t i = 0; i < img.pixels(); ++i) plane[i] = img.data[i * img.channels + c];
    gaussian_blur_plane(plane.data(), img.height, img.width, sigma, blurred.data());
    for (std::size_t i = 0; i < img.pixels(); ++i) {
      out.data[i * img.channels + c] = saturate_u8(p.alpha * plane[i] + beta * blurred[i] + p.gamma);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Resize / fuse / pipeline
// ---------------------------------------------------------------------------

/// Bilinear resize with pixel-center alignment.
inline ImageU8 resize(const ImageU8& img, std::size_t out_h, std::size_t out_w) {
  if (out_h == 0 || out_w == 0) throw ValueError("resize target must be at least 1x1");
  if (img.empty()) throw ValueError("resize of an empty image");
  if (out_h == img.height && out_w == img.width) return img;
  ImageU8 out(out_h, out_w, img.channels);
  std::vector<std::uint8_t> src(img.pixels());
  std::vector<std::uint8_t> dst(out.pixels());
  for (std::size_t c = 0; c < img.channels; ++c) {
    for (std::size_t i = 0; i < img.pixels(); ++i) src[i] = img.data[i * img.channels + c];
    resize_plane(src.data(), img.height, img.width, dst.data(), out_h, out_w, saturate_u8);
    for (std::size_t i = 0; i < out.pixels(); ++i) out.data[i * img.channels + c] = dst[i];
  }
  return out;
}

/// Stacks the CLAHE image and the CLAHE + Ben Graham image as channels of a
/// [2,H,W] tensor scaled to [0,1].
template <Scalar T>
Tensor<T> fuse(const ImageU8& clahe_img, const ImageU8& clahe_bg_img) {
  if (clahe_img.channels != 1 || clahe_bg_img.channels != 1) throw ValueError("fuse expects single-channel images");
  if (clahe_img.height != clahe_bg_img.height || clahe_img.width != clahe_bg_img.width) {
    throw ValueError("fuse: image sizes differ");
  }
  const std::size_t n = clahe_img.pixels();
  Tensor<T> out({2, clahe_img.height, clahe_img.width});
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = static_cast<T>(clahe_img.data[i]) / T(255);
    out[n + i] = static_cast<T>(clahe_bg_img.data[i]) / T(255);
  }
  return out;
}

template <Scalar T>
Tensor<T> to_tensor(const ImageU8& img) {
  Tensor<T> out({img.channels, img.height, img.width});
  const std::size_t n = img.pixels();
  for (std::size_t c = 0; c < img.channels; ++c) {
    for (std::size_t i = 0; i < n; ++i) out[c * n + i] = static_cast<T>(img.data[i * img.channels + c]) / T(255);
  }
  return out;
}

struct PreprocessConfig {
  ClaheParams clahe;
  BenGrahamParams ben_graham;
  /// Two channels (CLAHE, CLAHE + Ben Graham) when on, CLAHE only when off.
  bool fusion = true;
  /// Model input is output_size x output_size.
  std::size_t output_size = 64;

  std::size_t channels() const { return fusion ? 2 : 1; }

  void validate() const {
    clahe.validate();
    ben_graham.validate();
    if (output_size < 1) throw ValueError("preprocess output_size must be >= 1");
  }
};

/// Every intermediate of the pipeline, for previews and debugging.
template <Scalar T>
struct PreprocessStages {
  ImageU8 gray;
  ImageU8 clahe;
  ImageU8 ben_graham;  // empty when fusion is off
  Tensor<T> tensor;
};

template <Scalar T>
PreprocessStages<T> preprocess_stages(const ImageU8& img, const PreprocessConfig& cfg) {
  cfg.validate();
  PreprocessStages<T> s;
  s.gray = to_gray(img);
  s.clahe = clahe(s.gray, cfg.clahe);
  const std::size_t n = cfg.output_size;
  if (cfg.fusion) {
    s.ben_graham = ben_graham(s.clahe, cfg.ben_graham);
    s.tensor = fuse<T>(resize(s.clahe, n, n), resize(s.ben_graham, n, n));
  } else {
    s.tensor = to_tensor<T>(resize(s.clahe, n, n));
  }
  return s;
}

/// gray -> CLAHE -> (Ben Graham on the CLAHE image) -> resize -> [C,n,n] in [0,1].
/// Ben Graham's sigma is taken from the native width, before resizing.
template <Scalar T>
Tensor<T> preprocess_pipeline(const ImageU8& img, const PreprocessConfig& cfg) {
  return preprocess_stages<T>(img, cfg).tensor;
}

}  // namespace cct
