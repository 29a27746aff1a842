#pragma once

// Convolution, transposed convolution and pixel (un)shuffle with explicit
// backward functions. Convolutions lower to im2col + GEMM (Eigen) so the inner
// products run in a well-vectorized kernel; results are deterministic for a
// fixed shape because Eigen is used single-threaded.

#include <Eigen/Core>

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "invdiff/grid.hpp"
#include "invdiff/tensor.hpp"

namespace invdiff {

enum class Pad { Same, Valid };

struct ConvGeom {
  std::size_t stride = 1;
  Pad pad = Pad::Same;
};

namespace detail {

template <class S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using MapMat = Eigen::Map<RowMat<S>>;
template <class S>
using CMapMat = Eigen::Map<const RowMat<S>>;

inline std::size_t pad_amount(std::size_t k, Pad pad) { return pad == Pad::Same ? (k - 1) / 2 : 0; }

inline std::string kernel_str(std::size_t kh, std::size_t kw, std::size_t ci, std::size_t co) {
  return std::to_string(kh) + "x" + std::to_string(kw) + "x" + std::to_string(ci) + "x" +
         std::to_string(co);
}

struct ConvPlan {
  std::size_t h, w, cin, kh, kw, stride, pad, oh, ow;

  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
  std::size_t patch() const { return kh * kw * cin; }
};

inline ConvPlan plan(std::size_t h, std::size_t w, std::size_t cin, std::size_t kh, std::size_t kw,
                     ConvGeom g) {
  if (g.stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
  if (g.pad == Pad::Same && (kh % 2 == 0 || kw % 2 == 0)) {
    throw std::invalid_argument("conv2d: 'same' padding needs an odd kernel, got " +
                                std::to_string(kh) + "x" + std::to_string(kw));
  }
  const std::size_t p = pad_amount(kh, g.pad);
  const std::size_t pw = pad_amount(kw, g.pad);
  if (p != pw) throw std::invalid_argument("conv2d: non-square padding is unsupported");
  if (h + 2 * p < kh || w + 2 * p < kw) {
    throw std::invalid_argument("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                                " larger than padded input " + std::to_string(h) + "x" +
                                std::to_string(w));
  }
  return {h, w, cin, kh, kw, g.stride, p, (h + 2 * p - kh) / g.stride + 1,
          (w + 2 * p - kw) / g.stride + 1};
}

// cols[(oy*ow+ox), (ky*kw+kx)*cin + ci] = x[oy*s-p+ky, ox*s-p+kx, ci], zero outside.
template <class S>
void im2col(const S* x, const ConvPlan& pl, S* cols) {
  const std::size_t K = pl.patch();
  for (std::size_t oy = 0; oy < pl.oh; ++oy) {
    for (std::size_t ox = 0; ox < pl.ow; ++ox) {
      S* row = cols + (oy * pl.ow + ox) * K;
      for (std::size_t ky = 0; ky < pl.kh; ++ky) {
        const long iy = long(oy * pl.stride + ky) - long(pl.pad);
        for (std::size_t kx = 0; kx < pl.kw; ++kx) {
          const long ix = long(ox * pl.stride + kx) - long(pl.pad);
          S* dst = row + (ky * pl.kw + kx) * pl.cin;
          if (iy < 0 || ix < 0 || iy >= long(pl.h) || ix >= long(pl.w)) {
            std::fill(dst, dst + pl.cin, S(0));
          } else {
            const S* src = x + (std::size_t(iy) * pl.w + std::size_t(ix)) * pl.cin;
            std::copy(src, src + pl.cin, dst);
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatters-and-adds patch rows back into x.
template <class S>
void col2im(const S* cols, const ConvPlan& pl, S* x) {
  const std::size_t K = pl.patch();
  for (std::size_t oy = 0; oy < pl.oh; ++oy) {
    for (std::size_t ox = 0; ox < pl.ow; ++ox) {
      const S* row = cols + (oy * pl.ow + ox) * K;
      for (std::size_t ky = 0; ky < pl.kh; ++ky) {
        const long iy = long(oy * pl.stride + ky) - long(pl.pad);
        if (iy < 0 || iy >= long(pl.h)) continue;
        for (std::size_t kx = 0; kx < pl.kw; ++kx) {
          const long ix = long(ox * pl.stride + kx) - long(pl.pad);
          if (ix < 0 || ix >= long(pl.w)) continue;
          const S* src = row + (ky * pl.kw + kx) * pl.cin;
          S* dst = x + (std::size_t(iy) * pl.w + std::size_t(ix)) * pl.cin;
          for (std::size_t ci = 0; ci < pl.cin; ++ci) dst[ci] += src[ci];
        }
      }
    }
  }
}

template <class S>
void check_conv_input(const Grid<S>& x, const KernelView<S>& k, const char* op) {
  if (x.c() != k.cin) {
    throw std::invalid_argument(std::string(op) + ": input " + x.shape().str() +
                                " does not match kernel " + kernel_str(k.kh, k.kw, k.cin, k.cout));
  }
}

// Patch matrix for x (or x itself when the conv is pointwise).
template <class S>
CMapMat<S> patches(const Grid<S>& x, const ConvPlan& pl, std::vector<S>& scratch) {
  const std::size_t P = pl.oh * pl.ow;
  if (pl.pointwise()) return CMapMat<S>(x.data(), long(P), long(pl.cin));
  scratch.resize(P * pl.patch());
  im2col(x.data(), pl, scratch.data());
  return CMapMat<S>(scratch.data(), long(P), long(pl.patch()));
}

}  // namespace detail

inline std::size_t conv_out_dim(std::size_t n, std::size_t k, ConvGeom g) {
  const std::size_t p = detail::pad_amount(k, g.pad);
  return (n + 2 * p - k) / g.stride + 1;
}

// Cross-correlation. Output spatial dims floor((n + 2p - k)/stride) + 1.
template <class S>
Grid<S> conv2d(const Grid<S>& x, const KernelView<S>& k, ConvGeom g = {}) {
  detail::check_conv_input(x, k, "conv2d");
  const auto pl = detail::plan(x.h(), x.w(), x.c(), k.kh, k.kw, g);
  std::vector<S> scratch;
  auto cols = detail::patches(x, pl, scratch);
  Grid<S> y(pl.oh, pl.ow, k.cout);
  detail::MapMat<S> ym(y.data(), long(pl.oh * pl.ow), long(k.cout));
  detail::CMapMat<S> wm(k.w.data(), long(pl.patch()), long(k.cout));
  ym.noalias() = cols * wm;
  return y;
}

// Backward of conv2d: returns dL/dx and accumulates dL/dk into `gk` when given.
template <class S>
Grid<S> conv2d_backward(const Grid<S>& x, const KernelView<S>& k, ConvGeom g, const Grid<S>& gy,
                        std::span<S> gk = {}) {
  detail::check_conv_input(x, k, "conv2d_backward");
  const auto pl = detail::plan(x.h(), x.w(), x.c(), k.kh, k.kw, g);
  if (gy.h() != pl.oh || gy.w() != pl.ow || gy.c() != k.cout) {
    throw std::invalid_argument("conv2d_backward: output gradient " + gy.shape().str() +
                                " does not match forward output (" + std::to_string(pl.oh) + "," +
                                std::to_string(pl.ow) + "," + std::to_string(k.cout) + ")");
  }
  const long P = long(pl.oh * pl.ow);
  detail::CMapMat<S> gym(gy.data(), P, long(k.cout));
  detail::CMapMat<S> wm(k.w.data(), long(pl.patch()), long(k.cout));
  std::vector<S> scratch;
  if (!gk.empty()) {
    auto cols = detail::patches(x, pl, scratch);
    detail::MapMat<S> gkm(gk.data(), long(pl.patch()), long(k.cout));
    gkm.noalias() += cols.transpose() * gym;
  }
  Grid<S> gx(x.shape());
  if (pl.pointwise()) {
    detail::MapMat<S> gxm(gx.data(), P, long(pl.cin));
    gxm.noalias() = gym * wm.transpose();
  } else {
    scratch.assign(std::size_t(P) * pl.patch(), S(0));
    detail::MapMat<S> gcols(scratch.data(), P, long(pl.patch()));
    gcols.noalias() = gym * wm.transpose();
    detail::col2im(scratch.data(), pl, gx.data());
  }
  return gx;
}

// Default output extent of the transposed conv: (n - 1)*stride + k - 2p.
inline std::size_t conv_transpose_out_dim(std::size_t n, std::size_t k, ConvGeom g) {
  const std::size_t p = detail::pad_amount(k, g.pad);
  return (n - 1) * g.stride + k - 2 * p;
}

// Adjoint of conv2d with the same kernel: input carries k.cout channels, the
// output k.cin. out_h/out_w select the conv input extent when several map to
// the same conv output size (0 = default).
template <class S>
Grid<S> conv2d_transpose(const Grid<S>& x, const KernelView<S>& k, ConvGeom g = {},
                         std::size_t out_h = 0, std::size_t out_w = 0) {
  if (x.c() != k.cout) {
    throw std::invalid_argument("conv2d_transpose: input " + x.shape().str() +
                                " does not match kernel " +
                                detail::kernel_str(k.kh, k.kw, k.cin, k.cout));
  }
  if (g.stride < 1) throw std::invalid_argument("conv2d_transpose: stride must be >= 1");
  if (out_h == 0) out_h = conv_transpose_out_dim(x.h(), k.kh, g);
  if (out_w == 0) out_w = conv_transpose_out_dim(x.w(), k.kw, g);
  const auto pl = detail::plan(out_h, out_w, k.cin, k.kh, k.kw, g);
  if (pl.oh != x.h() || pl.ow != x.w()) {
    throw std::invalid_argument("conv2d_transpose: input " + x.shape().str() +
                                " is not the conv output size of (" + std::to_string(out_h) + "," +
                                std::to_string(out_w) + ")");
  }
  const long P = long(pl.oh * pl.ow);
  detail::CMapMat<S> xm(x.data(), P, long(k.cout));
  detail::CMapMat<S> wm(k.w.data(), long(pl.patch()), long(k.cout));
  Grid<S> y(out_h, out_w, k.cin);
  if (pl.pointwise()) {
    detail::MapMat<S> ym(y.data(), P, long(k.cin));
    ym.noalias() = xm * wm.transpose();
    return y;
  }
  std::vector<S> cols(std::size_t(P) * pl.patch());
  detail::MapMat<S> cm(cols.data(), P, long(pl.patch()));
  cm.noalias() = xm * wm.transpose();
  detail::col2im(cols.data(), pl, y.data());
  return y;
}

// Backward of conv2d_transpose. gy has the transposed conv's output shape.
template <class S>
Grid<S> conv2d_transpose_backward(const Grid<S>& x, const KernelView<S>& k, ConvGeom g,
                                  const Grid<S>& gy, std::span<S> gk = {}) {
  if (gy.c() != k.cin) {
    throw std::invalid_argument("conv2d_transpose_backward: gradient " + gy.shape().str() +
                                " does not match kernel " +
                                detail::kernel_str(k.kh, k.kw, k.cin, k.cout));
  }
  const auto pl = detail::plan(gy.h(), gy.w(), k.cin, k.kh, k.kw, g);
  if (pl.oh != x.h() || pl.ow != x.w() || x.c() != k.cout) {
    throw std::invalid_argument("conv2d_transpose_backward: input " + x.shape().str() +
                                " inconsistent with gradient " + gy.shape().str());
  }
  std::vector<S> scratch;
  auto cols = detail::patches(gy, pl, scratch);
  const long P = long(pl.oh * pl.ow);
  detail::CMapMat<S> wm(k.w.data(), long(pl.patch()), long(k.cout));
  if (!gk.empty()) {
    detail::CMapMat<S> xm(x.data(), P, long(k.cout));
    detail::MapMat<S> gkm(gk.data(), long(pl.patch()), long(k.cout));
    gkm.noalias() += cols.transpose() * xm;
  }
  Grid<S> gx(x.shape());
  detail::MapMat<S> gxm(gx.data(), P, long(k.cout));
  gxm.noalias() = cols * wm;
  return gx;
}

// (h, w, c) -> (h*r, w*r, c/r^2); out[y*r+i, x*r+j, k] = in[y, x, k*r*r + i*r + j].
template <class S>
Grid<S> pixel_shuffle(const Grid<S>& x, std::size_t r) {
  if (r == 0) throw std::invalid_argument("pixel_shuffle: r must be positive");
  if (x.c() % (r * r) != 0) {
    throw std::invalid_argument("pixel_shuffle: channels " + std::to_string(x.c()) +
                                " not divisible by r^2 = " + std::to_string(r * r));
  }
  const std::size_t co = x.c() / (r * r);
  Grid<S> y(x.h() * r, x.w() * r, co);
  for (std::size_t iy = 0; iy < x.h(); ++iy)
    for (std::size_t ix = 0; ix < x.w(); ++ix)
      for (std::size_t k = 0; k < co; ++k)
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < r; ++j)
            y.at(iy * r + i, ix * r + j, k) = x.at(iy, ix, k * r * r + i * r + j);
  return y;
}

template <class S>
Grid<S> pixel_unshuffle(const Grid<S>& x, std::size_t r) {
  if (r == 0) throw std::invalid_argument("pixel_unshuffle: r must be positive");
  if (x.h() % r != 0 || x.w() % r != 0) {
    throw std::invalid_argument("pixel_unshuffle: spatial dims of " + x.shape().str() +
                                " not divisible by r = " + std::to_string(r));
  }
  const std::size_t oh = x.h() / r, ow = x.w() / r, co = x.c() * r * r;
  Grid<S> y(oh, ow, co);
  for (std::size_t oy = 0; oy < oh; ++oy)
    for (std::size_t ox = 0; ox < ow; ++ox)
      for (std::size_t k = 0; k < x.c(); ++k)
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < r; ++j)
            y.at(oy, ox, k * r * r + i * r + j) = x.at(oy * r + i, ox * r + j, k);
  return y;
}

// Both rearrangements are permutations, so each one's backward is the other.
template <class S>
Grid<S> pixel_shuffle_backward(const Grid<S>& gy, std::size_t r) {
  return pixel_unshuffle(gy, r);
}
template <class S>
Grid<S> pixel_unshuffle_backward(const Grid<S>& gy, std::size_t r) {
  return pixel_shuffle(gy, r);
}

}  // namespace invdiff
