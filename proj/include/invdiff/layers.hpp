#pragma once

// Primitive layers with explicit backward passes: biased convolutions, group
// normalisation, SiLU, dense maps and the sinusoidal step embedding.
// Backward functions accumulate parameter gradients into Param::grad.

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "invdiff/conv.hpp"
#include "invdiff/grid.hpp"
#include "invdiff/ledger.hpp"
#include "invdiff/tensor.hpp"

namespace invdiff {

// Ordered list of tensors saved for a backward pass, all charged to one
// ledger tag. Destroying (or clearing) the tape releases the bytes.
template <class S>
class Tape {
 public:
  Tape() = default;
  Tape(MemoryLedger* ledger, MemTag tag) : ledger_(ledger), tag_(tag) {}
  Tape(Tape&&) noexcept = default;
  Tape& operator=(Tape&&) noexcept = default;

  void save(Grid<S> g) { items_.emplace_back(ledger_, tag_, std::move(g)); }
  const Grid<S>& operator[](std::size_t i) const { return items_.at(i).get(); }
  std::size_t size() const { return items_.size(); }
  void clear() { items_.clear(); }
  MemoryLedger* ledger() const { return ledger_; }
  MemTag tag() const { return tag_; }

 private:
  MemoryLedger* ledger_ = nullptr;
  MemTag tag_ = MemTag::ModuleInternal;
  std::vector<Saved<S>> items_;
};

template <class S>
S sigmoid(S x) {
  return S(1) / (S(1) + std::exp(-x));
}

template <class S>
Grid<S> silu(const Grid<S>& x) {
  Grid<S> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * sigmoid(x[i]);
  return y;
}

template <class S>
Grid<S> silu_backward(const Grid<S>& x, const Grid<S>& gy) {
  Grid<S> gx(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const S s = sigmoid(x[i]);
    gx[i] = gy[i] * s * (S(1) + x[i] * (S(1) - s));
  }
  return gx;
}

inline std::size_t group_count(std::size_t channels) { return channels < 8 ? channels : 8; }

enum class ConvDir { Forward, Transposed };

// Convolution with optional per-output-channel bias. A Transposed layer maps
// cout channels back to cin and its bias has cin entries.
template <class S>
class ConvLayer {
 public:
  ConvLayer() = default;
  ConvLayer(ParamStore<S>& store, const std::string& name, std::size_t k, std::size_t cin,
            std::size_t cout, ConvGeom geom, bool bias, ConvDir dir = ConvDir::Forward)
      : geom_(geom) {
    w_ = store.add(name + ".w", {k, k, cin, cout});
    if (bias) b_ = store.add(name + ".b", {dir == ConvDir::Forward ? cout : cin});
  }

  Param<S>& weight() { return *w_; }
  Param<S>* bias() { return b_; }
  const ConvGeom& geom() const { return geom_; }
  std::size_t cin() const { return w_->value.dims[2]; }
  std::size_t cout() const { return w_->value.dims[3]; }

  Grid<S> forward(const Grid<S>& x) const {
    Grid<S> y = conv2d(x, w_->kernel(), geom_);
    add_bias(y);
    return y;
  }

  Grid<S> backward(const Grid<S>& x, const Grid<S>& gy) const {
    accumulate_bias(gy);
    return conv2d_backward(x, w_->kernel(), geom_, gy, w_->g());
  }

  // Adjoint direction: input has cout channels, output cin.
  Grid<S> forward_transposed(const Grid<S>& x, std::size_t out_h, std::size_t out_w) const {
    Grid<S> y = conv2d_transpose(x, w_->kernel(), geom_, out_h, out_w);
    add_bias(y);
    return y;
  }

  Grid<S> backward_transposed(const Grid<S>& x, const Grid<S>& gy) const {
    accumulate_bias(gy);
    return conv2d_transpose_backward(x, w_->kernel(), geom_, gy, w_->g());
  }

 private:
  void add_bias(Grid<S>& y) const {
    if (!b_) return;
    if (b_->size() != y.c()) throw std::invalid_argument("ConvLayer: bias width mismatch");
    for (std::size_t px = 0; px < y.h() * y.w(); ++px)
      for (std::size_t c = 0; c < y.c(); ++c) y[px * y.c() + c] += b_->value[c];
  }
  void accumulate_bias(const Grid<S>& gy) const {
    if (!b_) return;
    for (std::size_t px = 0; px < gy.h() * gy.w(); ++px)
      for (std::size_t c = 0; c < gy.c(); ++c) b_->grad[c] += gy[px * gy.c() + c];
  }

  Param<S>* w_ = nullptr;
  Param<S>* b_ = nullptr;
  ConvGeom geom_{};
};

// Group normalisation with a per-channel affine map.
// Saves (x_hat, rstd-per-group) on the tape when one is given.
template <class S>
class GroupNorm {
 public:
  static constexpr double kEps = 1e-5;

  GroupNorm() = default;
  GroupNorm(ParamStore<S>& store, const std::string& name, std::size_t channels)
      : c_(channels), groups_(group_count(channels)) {
    if (c_ % groups_ != 0) {
      throw std::invalid_argument("GroupNorm " + name + ": " + std::to_string(c_) +
                                  " channels not divisible into " + std::to_string(groups_) +
                                  " groups");
    }
    gamma_ = store.add(name + ".gamma", {c_});
    beta_ = store.add(name + ".beta", {c_});
    std::fill(gamma_->value.data.begin(), gamma_->value.data.end(), S(1));
  }

  std::size_t channels() const { return c_; }

  // Returns the affine output; writes x_hat and rstd when requested.
  Grid<S> forward(const Grid<S>& x, Grid<S>* x_hat_out = nullptr, Grid<S>* rstd_out = nullptr) const {
    if (x.c() != c_) {
      throw std::invalid_argument("GroupNorm: input " + x.shape().str() + " expects " +
                                  std::to_string(c_) + " channels");
    }
    const std::size_t cg = c_ / groups_, P = x.h() * x.w();
    Grid<S> xh(x.shape()), y(x.shape()), rstd(1, 1, groups_);
    for (std::size_t g = 0; g < groups_; ++g) {
      double mean = 0.0;
      for (std::size_t p = 0; p < P; ++p)
        for (std::size_t k = 0; k < cg; ++k) mean += double(x[p * c_ + g * cg + k]);
      mean /= double(P * cg);
      double var = 0.0;
      for (std::size_t p = 0; p < P; ++p)
        for (std::size_t k = 0; k < cg; ++k) {
          const double d = double(x[p * c_ + g * cg + k]) - mean;
          var += d * d;
        }
      var /= double(P * cg);
      const S rs = S(1.0 / std::sqrt(var + kEps));
      rstd[g] = rs;
      for (std::size_t p = 0; p < P; ++p)
        for (std::size_t k = 0; k < cg; ++k) {
          const std::size_t i = p * c_ + g * cg + k;
          xh[i] = (x[i] - S(mean)) * rs;
          y[i] = xh[i] * gamma_->value[g * cg + k] + beta_->value[g * cg + k];
        }
    }
    if (x_hat_out) *x_hat_out = std::move(xh);
    if (rstd_out) *rstd_out = std::move(rstd);
    return y;
  }

  Grid<S> backward(const Grid<S>& x_hat, const Grid<S>& rstd, const Grid<S>& gy) const {
    const std::size_t cg = c_ / groups_, P = x_hat.h() * x_hat.w();
    const double n = double(P * cg);
    Grid<S> gx(x_hat.shape());
    for (std::size_t g = 0; g < groups_; ++g) {
      double sum_g = 0.0, sum_gx = 0.0;
      for (std::size_t p = 0; p < P; ++p)
        for (std::size_t k = 0; k < cg; ++k) {
          const std::size_t i = p * c_ + g * cg + k, ch = g * cg + k;
          gamma_->grad[ch] += gy[i] * x_hat[i];
          beta_->grad[ch] += gy[i];
          const double gxh = double(gy[i]) * double(gamma_->value[ch]);
          sum_g += gxh;
          sum_gx += gxh * double(x_hat[i]);
        }
      const double rs = double(rstd[g]);
      for (std::size_t p = 0; p < P; ++p)
        for (std::size_t k = 0; k < cg; ++k) {
          const std::size_t i = p * c_ + g * cg + k, ch = g * cg + k;
          const double gxh = double(gy[i]) * double(gamma_->value[ch]);
          gx[i] = S(rs / n * (n * gxh - sum_g - double(x_hat[i]) * sum_gx));
        }
    }
    return gx;
  }

 private:
  std::size_t c_ = 0, groups_ = 1;
  Param<S>* gamma_ = nullptr;
  Param<S>* beta_ = nullptr;
};

// y = W^T x + b with W stored [in, out].
template <class S>
class Dense {
 public:
  Dense() = default;
  Dense(ParamStore<S>& store, const std::string& name, std::size_t in, std::size_t out)
      : in_(in), out_(out) {
    w_ = store.add(name + ".w", {in, out});
    b_ = store.add(name + ".b", {out});
  }

  Param<S>& weight() { return *w_; }
  Param<S>& bias() { return *b_; }
  std::size_t in() const { return in_; }
  std::size_t out() const { return out_; }

  std::vector<S> forward(std::span<const S> x) const {
    if (x.size() != in_) throw std::invalid_argument("Dense: input width mismatch");
    std::vector<S> y(b_->value.data);
    for (std::size_t i = 0; i < in_; ++i)
      for (std::size_t j = 0; j < out_; ++j) y[j] += x[i] * w_->value[i * out_ + j];
    return y;
  }

  // Accumulates into gx (size in) when non-empty.
  void backward(std::span<const S> x, std::span<const S> gy, std::span<S> gx) const {
    for (std::size_t j = 0; j < out_; ++j) b_->grad[j] += gy[j];
    for (std::size_t i = 0; i < in_; ++i)
      for (std::size_t j = 0; j < out_; ++j) {
        w_->grad[i * out_ + j] += x[i] * gy[j];
        if (!gx.empty()) gx[i] += w_->value[i * out_ + j] * gy[j];
      }
  }

 private:
  std::size_t in_ = 0, out_ = 0;
  Param<S>* w_ = nullptr;
  Param<S>* b_ = nullptr;
};

inline constexpr std::size_t kTimeEmbedDim = 32;

// 16 (sin, cos) pairs at geometric frequencies 1 ... 1e4.
template <class S>
std::vector<S> sinusoidal_features(std::size_t t) {
  constexpr std::size_t pairs = kTimeEmbedDim / 2;
  std::vector<S> f(kTimeEmbedDim);
  for (std::size_t i = 0; i < pairs; ++i) {
    const double freq = std::pow(1e4, double(i) / double(pairs - 1));
    f[i] = S(std::sin(double(t) * freq));
    f[pairs + i] = S(std::cos(double(t) * freq));
  }
  return f;
}

template <class S>
class TimeEmbedding {
 public:
  TimeEmbedding() = default;
  TimeEmbedding(ParamStore<S>& store, const std::string& name)
      : proj_(store, name, kTimeEmbedDim, kTimeEmbedDim) {}

  Dense<S>& proj() { return proj_; }

  std::vector<S> forward(std::size_t t) const { return proj_.forward(sinusoidal_features<S>(t)); }

  void backward(std::size_t t, std::span<const S> g_emb) const {
    const auto f = sinusoidal_features<S>(t);
    proj_.backward(f, g_emb, {});
  }

 private:
  Dense<S> proj_;
};

}  // namespace invdiff
