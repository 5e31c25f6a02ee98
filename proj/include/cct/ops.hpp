#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "cct/graph.hpp"
#include "cct/rng.hpp"
#include "cct/tensor.hpp"

/// Differentiable tensor kernels.
///
/// Every op takes the Graph it records into first. Passing a graph with
/// recording disabled gives plain inference. Broadcasting is limited to
/// leading batch dimensions in matmul and to suffix-shaped operands in add();
/// everything else requires an explicit reshape.
namespace cct::ops {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using Map = Eigen::Map<RowMat<T>>;
template <typename T>
using CMap = Eigen::Map<const RowMat<T>>;

template <typename T>
CMap<T> cmat(const T* p, std::size_t r, std::size_t c) {
  return CMap<T>(p, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
template <typename T>
Map<T> mat(T* p, std::size_t r, std::size_t c) {
  return Map<T>(p, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

inline std::size_t norm_axis(int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) throw ShapeError("axis " + std::to_string(axis) + " invalid for rank " + std::to_string(rank));
  return static_cast<std::size_t>(a);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and reductions
// ---------------------------------------------------------------------------

/// a + b, where b's shape equals a trailing suffix of a's shape (bias rows,
/// positional tables). b's gradient sums over the leading dimensions.
template <Scalar T>
Tensor<T> add(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (bs.size() > as.size() || !std::equal(bs.rbegin(), bs.rend(), as.rbegin())) {
    throw ShapeError("add: shape " + shape_str(bs) + " is not a suffix of " + shape_str(as));
  }
  const std::size_t inner = b.numel();
  const std::size_t outer = a.numel() / inner;
  Tensor<T> out(as);
  auto o = out.data();
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < outer; ++i) {
    for (std::size_t j = 0; j < inner; ++j) o[i * inner + j] = ad[i * inner + j] + bd[j];
  }
  if (g.wants({&a, &b})) {
    out.set_requires_grad();
    g.record("add", [a, b, out, outer, inner]() mutable {
      if (!out.has_grad()) return;
      auto go = out.grad();
      if (a.requires_grad()) {
        auto ga = a.grad();
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        for (std::size_t i = 0; i < outer; ++i) {
          for (std::size_t j = 0; j < inner; ++j) gb[j] += go[i * inner + j];
        }
      }
    });
  }
  return out;
}

/// Elementwise product of equal-shaped tensors.
template <Scalar T>
Tensor<T> mul(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("mul: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " differ");
  }
  Tensor<T> out(a.shape());
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] * b[i];
  if (g.wants({&a, &b})) {
    out.set_requires_grad();
    g.record("mul", [a, b, out]() mutable {
      if (!out.has_grad()) return;
      auto go = out.grad();
      if (a.requires_grad()) {
        auto ga = a.grad();
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * b[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * a[i];
      }
    });
  }
  return out;
}

template <Scalar T>
Tensor<T> scale(Graph<T>& g, const Tensor<T>& x, T s) {
  Tensor<T> out(x.shape());
  auto o = out.data();
  const auto xd = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = xd[i] * s;
  if (g.wants({&x})) {
    out.set_requires_grad();
    g.record("scale", [x, out, s]() mutable {
      if (!out.has_grad()) return;
      auto go = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * s;
    });
  }
  return out;
}

/// Sum of all elements, shape [1].
template <Scalar T>
Tensor<T> sum(Graph<T>& g, const Tensor<T>& x) {
  T acc = 0;
  for (T v : x.data()) acc += v;
  Tensor<T> out = Tensor<T>::scalar(acc);
  if (g.wants({&x})) {
    out.set_requires_grad();
    g.record("sum", [x, out]() mutable {
      if (!out.has_grad()) return;
      const T go = out.grad()[0];
      for (auto& v : x.grad()) v += go;
    });
  }
  return out;
}

template <Scalar T>
Tensor<T> mean(Graph<T>& g, const Tensor<T>& x) {
  return scale(g, sum(g, x), T(1) / static_cast<T>(x.numel()));
}

template <Scalar T>
Tensor<T> relu(Graph<T>& g, const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  auto o = out.data();
  const auto xd = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = xd[i] > T(0) ? xd[i] : T(0);
  if (g.wants({&x})) {
    out.set_requires_grad();
    g.record("relu", [x, out]() mutable {
      if (!out.has_grad()) return;
      auto go = out.grad();
      auto gx = x.grad();
      const auto xd = x.data();
      // subgradient 0 at x == 0
      for (std::size_t i = 0; i < go.size(); ++i) {
        if (xd[i] > T(0)) gx[i] += go[i];
      }
    });
  }
  return out;
}

/// Exact (erf) GELU.
template <Scalar T>
Tensor<T> gelu(Graph<T>& g, const Tensor<T>& x) {
  constexpr T inv_sqrt2 = T(0.70710678118654752440);
  Tensor<T> out(x.shape());
  auto o = out.data();
  const auto xd = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = T(0.5) * xd[i] * (T(1) + std::erf(xd[i] * inv_sqrt2));
  if (g.wants({&x})) {
    out.set_requires_grad();
    g.record("gelu", [x, out]() mutable {
      if (!out.has_grad()) return;
      constexpr T inv_sqrt_2pi = T(0.39894228040143267794);
      auto go = out.grad();
      auto gx = x.grad();
      const auto xd = x.data();
      for (std::size_t i = 0; i < go.size(); ++i) {
        const T v = xd[i];
        const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
        const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
        gx[i] += go[i] * (cdf + v * pdf);
      }
    });
  }
  return out;
}

/// Inverted dropout keyed by a counter RNG; identity when p == 0.
template <Scalar T>
Tensor<T> dropout(Graph<T>& g, const Tensor<T>& x, double p, std::uint64_t seed, std::uint64_t stream) {
  if (p <= 0.0) return x;
  if (p >= 1.0) throw ValueError("dropout probability must be < 1");
  const T keep_scale = T(1.0 / (1.0 - p));
  std::vector<T> mask(x.numel());
  for (std::size_t i = 0; i < mask.size(); ++i) {
    mask[i] = to_unit(counter_hash(seed, stream, i)) >= p ? keep_scale : T(0);
  }
  Tensor<T> out(x.shape());
  auto o = out.data();
  const auto xd = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = xd[i] * mask[i];
  if (g.wants({&x})) {
    out.set_requires_grad();
    g.record("dropout", [x, out, mask = std::move(mask)]() mutable {
      if (!out.has_grad()) return;
      auto go = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * mask[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Layout
// ---------------------------------------------------------------------------

template <Scalar T>
Tensor<T> reshape(Graph<T>& g, const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  Tensor<T> out(std::move(shape), x.data());
  if (g.wants({&x})) {
    out.set_requires_grad();
    g.record("reshape", [x, out]() mutable {
      if (!out.has_grad()) return;
      auto go = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
    });
  }
  return out;
}

/// Axis permutation: out.shape[i] = x.shape[perm[i]].
template <Scalar T>
Tensor<T> permute(Graph<T>& g, const Tensor<T>& x, const std::vector<std::size_t>& perm) {
  const std::size_t r = x.rank();
  if (perm.size() != r) throw ShapeError("permute: permutation rank mismatch for " + shape_str(x.shape()));
  std::vector<bool> seen(r, false);
  for (auto p : perm) {
    if (p >= r || seen[p]) throw ShapeError("permute: invalid permutation");
    seen[p] = true;
  }
  const Shape& in = x.shape();
  Shape os(r);
  for (std::size_t i = 0; i < r; ++i) os[i] = in[perm[i]];
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r - 1; i-- > 0;) in_stride[i] = in_stride[i + 1] * in[i + 1];
  // source offset of each output element; stride of output axis i in the input
  std::vector<std::size_t> src_stride(r);
  for (std::size_t i = 0; i < r; ++i) src_stride[i] = in_stride[perm[i]];

  const std::size_t n = x.numel();
  std::vector<std::size_t> index(n);
  {
    std::vector<std::size_t> ctr(r, 0);
    std::size_t off = 0;
    for (std::size_t k = 0; k < n; ++k) {
      index[k] = off;
      for (std::size_t d = r; d-- > 0;) {
        ++ctr[d];
        off += src_stride[d];
        if (ctr[d] < os[d]) break;
        off -= src_stride[d] * ctr[d];
        ctr[d] = 0;
      }
    }
  }
  Tensor<T> out(os);
  auto o = out.data();
  auto xd = x.data();
  for (std::size_t k = 0; k < n; ++k) o[k] = xd[index[k]];
  if (g.wants({&x})) {
    out.set_requires_grad();
    g.record("permute", [x, out, index = std::move(index)]() mutable {
      if (!out.has_grad()) return;
      auto go = out.grad();
      auto gx = x.grad();
      for (std::size_t k = 0; k < go.size(); ++k) gx[index[k]] += go[k];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Matrix product
// ---------------------------------------------------------------------------

/// a [..., M, K] x b [..., K, N]. Batch dims must match exactly, or one side
/// must be a plain matrix that is broadcast across the other's batch.
template <Scalar T>
Tensor<T> matmul(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b) {
  auto mismatch = [&]() {
    return ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  };
  if (a.rank() < 2 || b.rank() < 2) throw mismatch();
  const std::size_t M = a.dim(-2), K = a.dim(-1), N = b.dim(-1);
  if (b.dim(-2) != K) throw mismatch();
  const Shape a_batch(a.shape().begin(), a.shape().end() - 2);
  const Shape b_batch(b.shape().begin(), b.shape().end() - 2);

  enum class Mode { flat, broadcast_a, batched } mode;
  Shape os;
  if (b.rank() == 2) {
    mode = Mode::flat;
    os = a_batch;
  } else if (a.rank() == 2) {
    mode = Mode::broadcast_a;
    os = b_batch;
  } else if (a_batch == b_batch) {
    mode = Mode::batched;
    os = a_batch;
  } else {
    throw mismatch();
  }
  os.push_back(M);
  os.push_back(N);
  const std::size_t batch = shape_numel(os) / (M * N);

  Tensor<T> out(os);
  {
    const T* ap = a.data().data();
    const T* bp = b.data().data();
    T* op = out.data().data();
    using detail::cmat;
    using detail::mat;
    if (mode == Mode::flat) {
      mat(op, batch * M, N).noalias() = cmat(ap, batch * M, K) * cmat(bp, K, N);
    } else {
      for (std::size_t i = 0; i < batch; ++i) {
        const T* ai = mode == Mode::batched ? ap + i * M * K : ap;
        mat(op + i * M * N, M, N).noalias() = cmat(ai, M, K) * cmat(bp + i * K * N, K, N);
      }
    }
  }

  if (g.wants({&a, &b})) {
    out.set_requires_grad();
    g.record("matmul", [a, b, out, mode, batch, M, K, N]() mutable {
      if (!out.has_grad()) return;
      using detail::cmat;
      using detail::mat;
      const T* gop = out.grad().data();
      const T* ap = a.data().data();
      const T* bp = b.data().data();
      if (mode == Mode::flat) {
        if (a.requires_grad())
          mat(a.grad().data(), batch * M, K).noalias() += cmat(gop, batch * M, N) * cmat(bp, K, N).transpose();
        if (b.requires_grad())
          mat(b.grad().data(), K, N).noalias() += cmat(ap, batch * M, K).transpose() * cmat(gop, batch * M, N);
        return;
      }
      for (std::size_t i = 0; i < batch; ++i) {
        const std::size_t aoff = mode == Mode::batched ? i * M * K : 0;
        auto go = cmat(gop + i * M * N, M, N);
        if (a.requires_grad())
          mat(a.grad().data() + aoff, M, K).noalias() += go * cmat(bp + i * K * N, K, N).transpose();
        if (b.requires_grad())
          mat(b.grad().data() + i * K * N, K, N).noalias() += cmat(ap + aoff, M, K).transpose() * go;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Convolution and pooling
// ---------------------------------------------------------------------------

struct ConvGeometry {
  std::size_t channels, height, width, kernel, stride, padding, out_h, out_w;
};

inline std::size_t conv_out_dim(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
  if (stride == 0) throw ValueError("stride must be >= 1");
  if (k == 0 || k > in + 2 * pad) {
    throw ShapeError("kernel " + std::to_string(k) + " larger than padded input " + std::to_string(in + 2 * pad));
  }
  return (in + 2 * pad - k) / stride + 1;
}

inline std::size_t pool_out_dim(std::size_t in, std::size_t window, std::size_t stride) {
  if (stride == 0) throw ValueError("stride must be >= 1");
  if (window == 0 || window > in) {
    throw ShapeError("pool window " + std::to_string(window) + " exceeds input " + std::to_string(in));
  }
  return (in - window) / stride + 1;
}

namespace detail {

/// cols [C*k*k, out_h*out_w] for one sample.
template <typename T>
void im2col(const T* x, const ConvGeometry& c, T* cols) {
  const std::size_t npos = c.out_h * c.out_w;
  for (std::size_t ch = 0; ch < c.channels; ++ch) {
    for (std::size_t ki = 0; ki < c.kernel; ++ki) {
      for (std::size_t kj = 0; kj < c.kernel; ++kj) {
        T* row = cols + ((ch * c.kernel + ki) * c.kernel + kj) * npos;
        for (std::size_t oy = 0; oy < c.out_h; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * c.stride + ki) - static_cast<std::ptrdiff_t>(c.padding);
          for (std::size_t ox = 0; ox < c.out_w; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * c.stride + kj) - static_cast<std::ptrdiff_t>(c.padding);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(c.height) &&
                                ix < static_cast<std::ptrdiff_t>(c.width);
            row[oy * c.out_w + ox] =
                inside ? x[(ch * c.height + static_cast<std::size_t>(iy)) * c.width + static_cast<std::size_t>(ix)] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* cols, const ConvGeometry& c, T* dx) {
  const std::size_t npos = c.out_h * c.out_w;
  for (std::size_t ch = 0; ch < c.channels; ++ch) {
    for (std::size_t ki = 0; ki < c.kernel; ++ki) {
      for (std::size_t kj = 0; kj < c.kernel; ++kj) {
        const T* row = cols + ((ch * c.kernel + ki) * c.kernel + kj) * npos;
        for (std::size_t oy = 0; oy < c.out_h; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * c.stride + ki) - static_cast<std::ptrdiff_t>(c.padding);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(c.height)) continue;
          for (std::size_t ox = 0; ox < c.out_w; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * c.stride + kj) - static_cast<std::ptrdiff_t>(c.padding);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(c.width)) continue;
            dx[(ch * c.height + static_cast<std::size_t>(iy)) * c.width + static_cast<std::size_t>(ix)] +=
                row[oy * c.out_w + ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// 2-D cross-correlation (kernels are not flipped).
/// input [B,C,H,W], kernels [D,C,k,k], optional bias [D] (pass an undefined
/// tensor for none) -> [B,D,H',W'] with H' = (H + 2p - k) / stride + 1.
template <Scalar T>
Tensor<T> conv2d(Graph<T>& g, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, std::size_t stride,
                 std::size_t padding) {
  if (x.rank() != 4 || w.rank() != 4 || w.dim(1) != x.dim(1) || w.dim(2) != w.dim(3)) {
    throw ShapeError("conv2d: incompatible input " + shape_str(x.shape()) + " and kernels " + shape_str(w.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != w.dim(0))) {
    throw ShapeError("conv2d: bias shape " + shape_str(bias.shape()) + " does not match kernels");
  }
  ConvGeometry c{x.dim(1), x.dim(2), x.dim(3), w.dim(2), stride, padding, 0, 0};
  c.out_h = conv_out_dim(c.height, c.kernel, stride, padding);
  c.out_w = conv_out_dim(c.width, c.kernel, stride, padding);
  const std::size_t B = x.dim(0), D = w.dim(0);
  const std::size_t ckk = c.channels * c.kernel * c.kernel;
  const std::size_t npos = c.out_h * c.out_w;
  const std::size_t in_sz = c.channels * c.height * c.width;

  Tensor<T> out({B, D, c.out_h, c.out_w});
  std::vector<T> cols(ckk * npos);
  for (std::size_t b = 0; b < B; ++b) {
    detail::im2col(x.data().data() + b * in_sz, c, cols.data());
    auto ob = detail::mat(out.data().data() + b * D * npos, D, npos);
    ob.noalias() = detail::cmat(w.data().data(), D, ckk) * detail::cmat(cols.data(), ckk, npos);
    if (bias.defined()) {
      for (std::size_t d = 0; d < D; ++d) ob.row(static_cast<Eigen::Index>(d)).array() += bias[d];
    }
  }

  if (g.wants({&x, &w, &bias})) {
    out.set_requires_grad();
    g.record("conv2d", [x, w, bias, out, c, B, D, ckk, npos, in_sz]() mutable {
      if (!out.has_grad()) return;
      const T* gop = out.grad().data();
      std::vector<T> cols(ckk * npos);
      for (std::size_t b = 0; b < B; ++b) {
        auto go = detail::cmat(gop + b * D * npos, D, npos);
        if (bias.defined() && bias.requires_grad()) {
          auto gb = bias.grad();
          for (std::size_t d = 0; d < D; ++d) gb[d] += go.row(static_cast<Eigen::Index>(d)).sum();
        }
        if (w.requires_grad()) {
          detail::im2col(x.data().data() + b * in_sz, c, cols.data());
          detail::mat(w.grad().data(), D, ckk).noalias() += go * detail::cmat(cols.data(), ckk, npos).transpose();
        }
        if (x.requires_grad()) {
          detail::mat(cols.data(), ckk, npos).noalias() = detail::cmat(w.data().data(), D, ckk).transpose() * go;
          detail::col2im(cols.data(), c, x.grad().data() + b * in_sz);
        }
      }
    });
  }
  return out;
}

/// Max pooling over [B,D,H,W]. Gradient goes to the first maximum in
/// row-major window order.
template <Scalar T>
Tensor<T> maxpool2d(Graph<T>& g, const Tensor<T>& x, std::size_t window, std::size_t stride) {
  if (x.rank() != 4) throw ShapeError("maxpool2d: expected [B,D,H,W], got " + shape_str(x.shape()));
  const std::size_t B = x.dim(0), D = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t oh = pool_out_dim(H, window, stride);
  const std::size_t ow = pool_out_dim(W, window, stride);
  Tensor<T> out({B, D, oh, ow});
  std::vector<std::uint32_t> arg(out.numel());
  auto xd = x.data();
  auto o = out.data();
  std::size_t k = 0;
  for (std::size_t plane = 0; plane < B * D; ++plane) {
    const std::size_t base = plane * H * W;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox, ++k) {
        std::size_t best = base + (oy * stride) * W + ox * stride;
        for (std::size_t wy = 0; wy < window; ++wy) {
          for (std::size_t wx = 0; wx < window; ++wx) {
            const std::size_t idx = base + (oy * stride + wy) * W + ox * stride + wx;
            if (xd[idx] > xd[best]) best = idx;
          }
        }
        o[k] = xd[best];
        arg[k] = static_cast<std::uint32_t>(best);
      }
    }
  }
  if (g.wants({&x})) {
    out.set_requires_grad();
    g.record("maxpool2d", [x, out, arg = std::move(arg)]() mutable {
      if (!out.has_grad()) return;
      auto go = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < go.size(); ++i) gx[arg[i]] += go[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Softmax along `axis`, shifted by the slice maximum.
template <Scalar T>
Tensor<T> softmax(Graph<T>& g, const Tensor<T>& x, int axis) {
  const std::size_t ax = detail::norm_axis(axis, x.rank());
  const Shape& s = x.shape();
  const std::size_t len = s[ax];
  std::size_t inner = 1;
  for (std::size_t i = ax + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t outer = x.numel() / (len * inner);

  Tensor<T> out(s);
  auto xd = x.data();
  auto o = out.data();
  if (inner == 1) {
    using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
    const auto n = static_cast<Eigen::Index>(len);
    for (std::size_t a = 0; a < outer; ++a) {
      Eigen::Map<const Arr> r(xd.data() + a * len, n);
      Eigen::Map<Arr> y(o.data() + a * len, n);
      y = (r - r.maxCoeff()).exp();
      y /= y.sum();
    }
  }
  for (std::size_t a = 0; a < outer && inner > 1; ++a) {
    for (std::size_t c = 0; c < inner; ++c) {
      const std::size_t base = a * len * inner + c;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < len; ++j) mx = std::max(mx, xd[base + j * inner]);
      T z = 0;
      for (std::size_t j = 0; j < len; ++j) {
        const T e = std::exp(xd[base + j * inner] - mx);
        o[base + j * inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < len; ++j) o[base + j * inner] /= z;
    }
  }
  if (g.wants({&x})) {
    out.set_requires_grad();
    g.record("softmax", [x, out, outer, inner, len]() mutable {
      if (!out.has_grad()) return;
      auto go = out.grad();
      auto y = out.data();
      auto gx = x.grad();
      if (inner == 1) {
        using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
        const auto n = static_cast<Eigen::Index>(len);
        for (std::size_t a = 0; a < outer; ++a) {
          const std::size_t base = a * len;
          Eigen::Map<const Arr> gor(go.data() + base, n), yr(y.data() + base, n);
          Eigen::Map<Arr> gxr(gx.data() + base, n);
          gxr += yr * (gor - (gor * yr).sum());
        }
        return;
      }
      for (std::size_t a = 0; a < outer; ++a) {
        for (std::size_t c = 0; c < inner; ++c) {
          const std::size_t base = a * len * inner + c;
          T dot = 0;
          for (std::size_t j = 0; j < len; ++j) dot += go[base + j * inner] * y[base + j * inner];
          for (std::size_t j = 0; j < len; ++j) {
            const std::size_t i = base + j * inner;
            gx[i] += y[i] * (go[i] - dot);
          }
        }
      }
    });
  }
  return out;
}

/// Layer normalization over the last axis, then gain * xhat + bias.
template <Scalar T>
Tensor<T> layernorm(Graph<T>& g, const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
  const std::size_t D = x.dim(-1);
  if (gain.numel() != D || bias.numel() != D) {
    throw ShapeError("layernorm: gain/bias " + shape_str(gain.shape()) + "/" + shape_str(bias.shape()) +
                     " do not match last axis of " + shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / D;
  Tensor<T> out(x.shape());
  std::vector<T> xhat(x.numel());
  std::vector<T> rstd(rows);
  auto xd = x.data();
  auto o = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xd.data() + r * D;
    T mu = 0;
    for (std::size_t j = 0; j < D; ++j) mu += xr[j];
    mu /= static_cast<T>(D);
    T var = 0;
    for (std::size_t j = 0; j < D; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<T>(D);
    rstd[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < D; ++j) {
      const T h = (xr[j] - mu) * rstd[r];
      xhat[r * D + j] = h;
      o[r * D + j] = gain[j] * h + bias[j];
    }
  }
  if (g.wants({&x, &gain, &bias})) {
    out.set_requires_grad();
    g.record("layernorm", [x, gain, bias, out, xhat = std::move(xhat), rstd = std::move(rstd), rows, D]() mutable {
      if (!out.has_grad()) return;
      auto go = out.grad();
      if (gain.requires_grad()) {
        auto gg = gain.grad();
        for (std::size_t i = 0; i < go.size(); ++i) gg[i % D] += go[i] * xhat[i];
      }
      if (bias.requires_grad()) {
        auto gb = bias.grad();
        for (std::size_t i = 0; i < go.size(); ++i) gb[i % D] += go[i];
      }
      if (x.requires_grad()) {
        auto gx = x.grad();
        for (std::size_t r = 0; r < rows; ++r) {
          T m1 = 0, m2 = 0;
          for (std::size_t j = 0; j < D; ++j) {
            const T dh = go[r * D + j] * gain[j];
            m1 += dh;
            m2 += dh * xhat[r * D + j];
          }
          m1 /= static_cast<T>(D);
          m2 /= static_cast<T>(D);
          for (std::size_t j = 0; j < D; ++j) {
            const T dh = go[r * D + j] * gain[j];
            gx[r * D + j] += rstd[r] * (dh - m1 - xhat[r * D + j] * m2);
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

/// Mean over the batch of -log softmax(logits)[label], via log-sum-exp.
/// logits [B,n]; gradient is (softmax - one_hot) / B.
template <Scalar T>
Tensor<T> cross_entropy(Graph<T>& g, const Tensor<T>& logits, std::span<const int> labels) {
  if (logits.rank() != 2) throw ShapeError("cross_entropy: logits must be [B,n], got " + shape_str(logits.shape()));
  const std::size_t B = logits.dim(0), n = logits.dim(1);
  if (labels.size() != B) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " + std::to_string(B));
  }
  std::vector<T> probs(B * n);
  T total = 0;
  auto z = logits.data();
  for (std::size_t b = 0; b < B; ++b) {
    if (labels[b] < 0 || static_cast<std::size_t>(labels[b]) >= n) {
      throw ValueError("cross_entropy: label " + std::to_string(labels[b]) + " outside [0," + std::to_string(n) + ")");
    }
    const T* zr = z.data() + b * n;
    const T mx = *std::max_element(zr, zr + n);
    T s = 0;
    for (std::size_t c = 0; c < n; ++c) s += std::exp(zr[c] - mx);
    const T lse = mx + std::log(s);
    for (std::size_t c = 0; c < n; ++c) probs[b * n + c] = std::exp(zr[c] - lse);
    total += lse - zr[labels[b]];
  }
  Tensor<T> out = Tensor<T>::scalar(total / static_cast<T>(B));
  if (g.wants({&logits})) {
    out.set_requires_grad();
    std::vector<int> lab(labels.begin(), labels.end());
    g.record("cross_entropy", [logits, out, probs = std::move(probs), lab = std::move(lab), B, n]() mutable {
      if (!out.has_grad()) return;
      const T go = out.grad()[0] / static_cast<T>(B);
      auto gl = logits.grad();
      for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t c = 0; c < n; ++c) {
          const T onehot = static_cast<std::size_t>(lab[b]) == c ? T(1) : T(0);
          gl[b * n + c] += go * (probs[b * n + c] - onehot);
        }
      }
    });
  }
  return out;
}

}  // namespace cct::ops
