#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "cct/errors.hpp"

namespace cct {

/// Row-major 8-bit raster, 1 (gray) or 3 (RGB) interleaved channels.
struct ImageU8 {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 1;
  std::vector<std::uint8_t> data;

  ImageU8() = default;
  ImageU8(std::size_t h, std::size_t w, std::size_t c, std::uint8_t fill = 0) : height(h), width(w), channels(c) {
    if (c != 1 && c != 3) throw ValueError("image channels must be 1 or 3, got " + std::to_string(c));
    data.assign(h * w * c, fill);
  }

  bool empty() const noexcept { return data.empty(); }
  std::size_t pixels() const noexcept { return height * width; }

  std::uint8_t at(std::size_t y, std::size_t x, std::size_t c = 0) const { return data[(y * width + x) * channels + c]; }
  std::uint8_t& at(std::size_t y, std::size_t x, std::size_t c = 0) { return data[(y * width + x) * channels + c]; }

  bool operator==(const ImageU8&) const = default;
};

inline std::uint8_t saturate_u8(double v) {
  if (!(v > 0.0)) return 0;  // also maps NaN to 0
  if (v >= 255.0) return 255;
  return static_cast<std::uint8_t>(std::floor(v + 0.5));
}

/// Luminance 0.299 R + 0.587 G + 0.114 B; gray images are returned as-is.
inline ImageU8 to_gray(const ImageU8& img) {
  if (img.channels == 1) return img;
  ImageU8 out(img.height, img.width, 1);
  for (std::size_t i = 0; i < img.pixels(); ++i) {
    const std::uint8_t* p = &img.data[i * 3];
    out.data[i] = saturate_u8(0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]);
  }
  return out;
}

/// Replicates a gray image into three channels.
inline ImageU8 to_rgb(const ImageU8& img) {
  if (img.channels == 3) return img;
  ImageU8 out(img.height, img.width, 3);
  for (std::size_t i = 0; i < img.pixels(); ++i) {
    out.data[3 * i] = out.data[3 * i + 1] = out.data[3 * i + 2] = img.data[i];
  }
  return out;
}

// ---------------------------------------------------------------------------
// PNG codec (libpng simplified API)
// ---------------------------------------------------------------------------

/// Reads an 8-bit gray or RGB PNG. Palette, 16-bit and alpha variants are
/// converted by libpng; alpha is dropped.
inline ImageU8 read_png(const std::filesystem::path& path) {
  png_image im;
  std::memset(&im, 0, sizeof im);
  im.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&im, path.string().c_str())) {
    std::string msg = im.message;
    png_image_free(&im);
    throw IoError("cannot read PNG '" + path.string() + "': " + msg);
  }
  const bool color = (im.format & PNG_FORMAT_FLAG_COLOR) != 0;
  im.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  ImageU8 out(im.height, im.width, color ? 3 : 1);
  if (!png_image_finish_read(&im, nullptr, out.data.data(), 0, nullptr)) {
    std::string msg = im.message;
    png_image_free(&im);
    throw IoError("cannot decode PNG '" + path.string() + "': " + msg);
  }
  return out;
}

/// True if the file has a decodable PNG header (pixels are not decoded).
inline bool probe_png(const std::filesystem::path& path) {
  png_image im;
  std::memset(&im, 0, sizeof im);
  im.version = PNG_IMAGE_VERSION;
  const bool ok = png_image_begin_read_from_file(&im, path.string().c_str()) != 0;
  png_image_free(&im);
  return ok && im.width > 0 && im.height > 0;
}

inline void write_png(const std::filesystem::path& path, const ImageU8& img) {
  if (img.empty()) throw ValueError("cannot write empty image to '" + path.string() + "'");
  png_image im;
  std::memset(&im, 0, sizeof im);
  im.version = PNG_IMAGE_VERSION;
  im.width = static_cast<png_uint_32>(img.width);
  im.height = static_cast<png_uint_32>(img.height);
  im.format = img.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&im, path.string().c_str(), 0, img.data.data(), 0, nullptr)) {
    std::string msg = im.message;
    png_image_free(&im);
    throw IoError("cannot write PNG '" + path.string() + "': " + msg);
  }
}

}  // namespace cct
