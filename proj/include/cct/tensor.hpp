#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <istream>
#include <memory>
#include <new>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "cct/errors.hpp"

namespace cct {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

/// 64-byte aligned storage. Eigen's vectorized kernels peel a different
/// number of leading elements depending on alignment, which changes the
/// summation order; a fixed alignment keeps results independent of where
/// the heap happened to place a buffer.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t alignment{64};

  AlignedAllocator() noexcept = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), alignment)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, alignment); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

template <typename T>
concept Scalar = std::is_same_v<T, float> || std::is_same_v<T, double>;

/// Dense row-major tensor with an optional gradient buffer.
///
/// Tensor is a handle: copies share storage, the way autograd frameworks
/// alias activations between the forward pass and the recorded backward
/// closures. Use clone() for an independent copy. Forward ops never mutate
/// their inputs; only optimizers, the gradient checker and explicit
/// data() writes do.
template <Scalar T>
class Tensor {
 public:
  using value_type = T;
  using Buffer = std::vector<T, AlignedAllocator<T>>;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0))
      : s_(std::make_shared<Storage>()) {
    check_shape(shape);
    s_->data.assign(shape_numel(shape), fill);
    s_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<T> data) : s_(std::make_shared<Storage>()) {
    check_shape(shape);
    if (shape_numel(shape) != data.size()) {
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    }
    s_->shape = std::move(shape);
    s_->data.assign(data.begin(), data.end());
  }

  Tensor(Shape shape, std::span<const T> data) : Tensor(std::move(shape), std::vector<T>(data.begin(), data.end())) {}

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T(0)); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), T(1)); }
  static Tensor scalar(T v) { return Tensor(Shape{1}, v); }

  bool defined() const noexcept { return static_cast<bool>(s_); }

  const Shape& shape() const { return s_->shape; }
  std::size_t rank() const { return s_->shape.size(); }
  std::size_t numel() const { return s_->data.size(); }

  /// Dimension with Python-style negative indexing.
  std::size_t dim(int i) const {
    const int r = static_cast<int>(rank());
    const int k = i < 0 ? r + i : i;
    if (k < 0 || k >= r) {
      throw ShapeError("dimension index " + std::to_string(i) + " out of range for shape " +
                       shape_str(shape()));
    }
    return s_->shape[static_cast<std::size_t>(k)];
  }

  std::span<const T> data() const { return s_->data; }
  std::span<T> data() { return s_->data; }
  /// Copy of the values as a plain vector.
  std::vector<T> vec() const { return {s_->data.begin(), s_->data.end()}; }

  T operator[](std::size_t i) const { return s_->data[i]; }
  T& operator[](std::size_t i) { return s_->data[i]; }

  T item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return s_->data[0];
  }

  bool requires_grad() const noexcept { return s_ && s_->requires_grad; }
  Tensor& set_requires_grad(bool on = true) {
    s_->requires_grad = on;
    return *this;
  }

  bool has_grad() const noexcept { return s_ && !s_->grad.empty(); }

  /// Gradient buffer, allocated as zeros on first access. The buffer is the
  /// one mutable part of an otherwise read-only tensor, so this is const.
  std::span<T> grad() const {
    if (s_->grad.empty()) s_->grad.assign(s_->data.size(), T(0));
    return s_->grad;
  }

  void zero_grad() const {
    if (!s_->grad.empty()) std::fill(s_->grad.begin(), s_->grad.end(), T(0));
  }
  void drop_grad() const { s_->grad = {}; }

  /// Independent copy of the values; no gradient, not requiring grad.
  Tensor clone() const { return Tensor(shape(), data()); }

  bool same_storage(const Tensor& o) const noexcept { return s_ == o.s_; }

  bool all_finite() const {
    return std::all_of(s_->data.begin(), s_->data.end(), [](T v) { return std::isfinite(v); });
  }

  template <Scalar U>
  Tensor<U> cast() const {
    std::vector<U> out(s_->data.begin(), s_->data.end());
    return Tensor<U>(shape(), std::move(out));
  }

 private:
  struct Storage {
    Shape shape;
    Buffer data;
    mutable Buffer grad;
    bool requires_grad = false;
  };

  static void check_shape(const Shape& s) {
    if (s.empty()) throw ShapeError("tensor shape must have rank >= 1");
    for (std::size_t d : s) {
      if (d == 0) throw ShapeError("tensor shape has a zero dimension: " + shape_str(s));
    }
  }

  std::shared_ptr<Storage> s_;
};

// ---------------------------------------------------------------------------
// Binary serialization: u32 rank, u32 dims..., then little-endian payload.
// ---------------------------------------------------------------------------

enum class DType : std::uint8_t { f32, f64 };

inline const char* dtype_name(DType d) { return d == DType::f32 ? "f32" : "f64"; }

inline DType dtype_from_name(const std::string& s) {
  if (s == "f32") return DType::f32;
  if (s == "f64") return DType::f64;
  throw FormatError("unknown dtype '" + s + "'");
}

template <Scalar T>
constexpr DType dtype_of() {
  return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

namespace detail {

template <typename U>
void put_le(std::ostream& os, U v) {
  using Bits = std::conditional_t<sizeof(U) == 4, std::uint32_t, std::uint64_t>;
  Bits b;
  std::memcpy(&b, &v, sizeof(U));
  unsigned char buf[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<unsigned char>(b >> (8 * i));
  os.write(reinterpret_cast<const char*>(buf), sizeof(U));
}

template <typename U>
bool get_le(std::istream& is, U& v) {
  using Bits = std::conditional_t<sizeof(U) == 4, std::uint32_t, std::uint64_t>;
  unsigned char buf[sizeof(U)];
  if (!is.read(reinterpret_cast<char*>(buf), sizeof(U))) return false;
  Bits b = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) b |= static_cast<Bits>(buf[i]) << (8 * i);
  std::memcpy(&v, &b, sizeof(U));
  return true;
}

}  // namespace detail

/// Byte size of a serialized tensor.
inline std::size_t serialized_size(const Shape& shape, DType dt) {
  return 4 * (1 + shape.size()) + shape_numel(shape) * (dt == DType::f32 ? 4 : 8);
}

/// Writes the tensor in its own precision (f32 for float, f64 for double).
template <Scalar T>
void write_tensor(std::ostream& os, const Tensor<T>& t) {
  detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(d));
  for (T v : t.data()) detail::put_le<T>(os, v);
}

/// Reads a tensor written with dtype `dt`, converting to T.
template <Scalar T>
Tensor<T> read_tensor(std::istream& is, DType dt) {
  std::uint32_t rank = 0;
  if (!detail::get_le(is, rank) || rank == 0 || rank > 8) throw FormatError("bad tensor rank");
  Shape shape(rank);
  for (auto& d : shape) {
    std::uint32_t v = 0;
    if (!detail::get_le(is, v) || v == 0) throw FormatError("bad tensor dimension");
    d = v;
  }
  std::vector<T> data(shape_numel(shape));
  for (auto& x : data) {
    if (dt == DType::f32) {
      float f;
      if (!detail::get_le(is, f)) throw FormatError("truncated tensor payload");
      x = static_cast<T>(f);
    } else {
      double f;
      if (!detail::get_le(is, f)) throw FormatError("truncated tensor payload");
      x = static_cast<T>(f);
    }
  }
  return Tensor<T>(std::move(shape), std::move(data));
}

}  // namespace cct
