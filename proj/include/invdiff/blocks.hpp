#pragma once

// Residual, attention and injector branches plus the additive two-stream
// coupling that wraps them. A branch computes only the residual term g(x);
// a standalone block is x + g(x), and a coupling applies two branches to
// alternating channel halves.

#include <Eigen/Dense>
#include <cmath>
#include <cstddef>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "invdiff/conv.hpp"
#include "invdiff/grid.hpp"
#include "invdiff/layers.hpp"
#include "invdiff/ledger.hpp"
#include "invdiff/rng.hpp"
#include "invdiff/tensor.hpp"

namespace invdiff {

// Side inputs shared by every block of one network evaluation.
template <class S>
struct BlockContext {
  std::span<const S> t_emb;
  const Grid<S>* backproj = nullptr;  // full resolution, 1 channel
  const Grid<S>* env = nullptr;       // full resolution, 2 channels
};

template <class S>
struct ContextGrads {
  std::vector<S> t_emb;  // dL/dt_emb, accumulated across blocks

  void ensure(std::size_t n) {
    if (t_emb.size() != n) t_emb.assign(n, S(0));
  }
};

template <class S>
class Branch {
 public:
  virtual ~Branch() = default;
  virtual std::size_t channels() const = 0;
  virtual void initialize(Rng& rng) = 0;
  virtual Grid<S> forward(const Grid<S>& x, const BlockContext<S>& ctx, Tape<S>* tape) const = 0;
  virtual Grid<S> backward(const Tape<S>& tape, const Grid<S>& gy, const BlockContext<S>& ctx,
                           ContextGrads<S>& cg) const = 0;
};

template <class S>
void init_he(Param<S>& p, Rng& rng, std::size_t fan_in) {
  init_normal(p, rng, std::sqrt(2.0 / double(fan_in)));
}

template <class S>
void zero_values(Param<S>& p) {
  std::fill(p.value.data.begin(), p.value.data.end(), S(0));
}

template <class S>
void require_channels(const Grid<S>& x, std::size_t c, const std::string& who) {
  if (x.c() != c) {
    throw std::invalid_argument(who + ": input " + x.shape().str() + " expects " +
                                std::to_string(c) + " channels");
  }
}

// Conv3x3(SiLU(GroupNorm(x))) * (1 + gamma(t)) + beta(t).
template <class S>
class ResidualBranch final : public Branch<S> {
 public:
  ResidualBranch(ParamStore<S>& store, const std::string& name, std::size_t c)
      : name_(name),
        c_(c),
        norm_(store, name + ".norm", c),
        conv_(store, name + ".conv", 3, c, c, {}, false),
        film_scale_(store, name + ".film_scale", kTimeEmbedDim, c),
        film_shift_(store, name + ".film_shift", kTimeEmbedDim, c) {}

  std::size_t channels() const override { return c_; }

  void initialize(Rng&) override {
    zero_values(conv_.weight());
    zero_values(film_scale_.weight());
    zero_values(film_shift_.weight());
  }

  ConvLayer<S>& conv() { return conv_; }
  Dense<S>& film_scale() { return film_scale_; }
  Dense<S>& film_shift() { return film_shift_; }

  Grid<S> forward(const Grid<S>& x, const BlockContext<S>& ctx, Tape<S>* tape) const override {
    require_channels(x, c_, name_);
    if (ctx.t_emb.size() != kTimeEmbedDim) {
      throw std::invalid_argument(name_ + ": time embedding of width " +
                                  std::to_string(kTimeEmbedDim) + " required");
    }
    Grid<S> x_hat, rstd;
    Grid<S> z = norm_.forward(x, &x_hat, &rstd);
    Grid<S> a = silu(z);
    Grid<S> h = conv_.forward(a);
    const auto scale = film_scale_.forward(ctx.t_emb);
    const auto shift = film_shift_.forward(ctx.t_emb);
    Grid<S> out(h.shape());
    for (std::size_t px = 0; px < h.h() * h.w(); ++px)
      for (std::size_t k = 0; k < c_; ++k) {
        const std::size_t i = px * c_ + k;
        out[i] = h[i] * (S(1) + scale[k]) + shift[k];
      }
    if (tape) {
      tape->save(std::move(x_hat));
      tape->save(std::move(rstd));
      tape->save(std::move(z));
      tape->save(std::move(a));
      tape->save(std::move(h));
    }
    return out;
  }

  Grid<S> backward(const Tape<S>& tape, const Grid<S>& gy, const BlockContext<S>& ctx,
                   ContextGrads<S>& cg) const override {
    const Grid<S>&x_hat = tape[0], &rstd = tape[1], &z = tape[2], &a = tape[3], &h = tape[4];
    const auto scale = film_scale_.forward(ctx.t_emb);
    std::vector<S> g_scale(c_, S(0)), g_shift(c_, S(0));
    Grid<S> gh(gy.shape());
    for (std::size_t px = 0; px < gy.h() * gy.w(); ++px)
      for (std::size_t k = 0; k < c_; ++k) {
        const std::size_t i = px * c_ + k;
        g_shift[k] += gy[i];
        g_scale[k] += gy[i] * h[i];
        gh[i] = gy[i] * (S(1) + scale[k]);
      }
    cg.ensure(kTimeEmbedDim);
    film_scale_.backward(ctx.t_emb, g_scale, cg.t_emb);
    film_shift_.backward(ctx.t_emb, g_shift, cg.t_emb);
    Grid<S> ga = conv_.backward(a, gh);
    Grid<S> gz = silu_backward(z, ga);
    return norm_.backward(x_hat, rstd, gz);
  }

 private:
  std::string name_;
  std::size_t c_;
  GroupNorm<S> norm_;
  ConvLayer<S> conv_;
  Dense<S> film_scale_, film_shift_;
};

// Single-head spatial self-attention over all h*w positions.
template <class S>
class AttentionBranch final : public Branch<S> {
  using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MapC = Eigen::Map<const Mat>;
  using Map = Eigen::Map<Mat>;

 public:
  static constexpr std::size_t kDefaultMaxPositions = 16 * 16;

  AttentionBranch(ParamStore<S>& store, const std::string& name, std::size_t c,
                  std::size_t max_positions = kDefaultMaxPositions)
      : name_(name), c_(c), max_positions_(max_positions) {
    q_ = store.add(name + ".q", {1, 1, c, c});
    k_ = store.add(name + ".k", {1, 1, c, c});
    v_ = store.add(name + ".v", {1, 1, c, c});
    o_ = store.add(name + ".out", {1, 1, c, c});
  }

  std::size_t channels() const override { return c_; }
  std::size_t max_positions() const { return max_positions_; }
  Param<S>& out_proj() { return *o_; }

  void initialize(Rng& rng) override {
    for (Param<S>* p : {q_, k_, v_}) init_normal(*p, rng, 1.0 / std::sqrt(double(c_)));
    zero_values(*o_);
  }

  // Row-stochastic score matrix for input x (n x n, stored as a grid n x n x 1).
  Grid<S> scores(const Grid<S>& x) const {
    Grid<S> q, k, v;
    return attend(x, q, k, v);
  }

  Grid<S> forward(const Grid<S>& x, const BlockContext<S>&, Tape<S>* tape) const override {
    require_channels(x, c_, name_);
    Grid<S> q, k, v;
    Grid<S> p = attend(x, q, k, v);
    const std::size_t n = x.h() * x.w();
    Grid<S> o(x.h(), x.w(), c_), y(x.h(), x.w(), c_);
    Map(o.data(), n, c_).noalias() = MapC(p.data(), n, n) * MapC(v.data(), n, c_);
    Map(y.data(), n, c_).noalias() = MapC(o.data(), n, c_) * w(*o_);
    if (tape) {
      tape->save(x);
      tape->save(std::move(q));
      tape->save(std::move(k));
      tape->save(std::move(v));
      tape->save(std::move(p));
      tape->save(std::move(o));
    }
    return y;
  }

  Grid<S> backward(const Tape<S>& tape, const Grid<S>& gy, const BlockContext<S>&,
                   ContextGrads<S>&) const override {
    const Grid<S>&x = tape[0], &q = tape[1], &k = tape[2], &v = tape[3], &p = tape[4], &o = tape[5];
    const Eigen::Index n = Eigen::Index(x.h() * x.w()), c = Eigen::Index(c_);
    const S inv_sqrt = S(1.0 / std::sqrt(double(c_)));
    MapC X(x.data(), n, c), Q(q.data(), n, c), K(k.data(), n, c), V(v.data(), n, c);
    MapC P(p.data(), n, n), O(o.data(), n, c), GY(gy.data(), n, c);

    gw(*o_) += O.transpose() * GY;
    Mat GO = GY * w(*o_).transpose();
    Mat GP = GO * V.transpose();
    Mat GV = P.transpose() * GO;
    Mat GS(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
      S row = S(0);
      for (Eigen::Index j = 0; j < n; ++j) row += GP(i, j) * P(i, j);
      for (Eigen::Index j = 0; j < n; ++j) GS(i, j) = P(i, j) * (GP(i, j) - row) * inv_sqrt;
    }
    Mat GQ = GS * K;
    Mat GK = GS.transpose() * Q;
    gw(*q_) += X.transpose() * GQ;
    gw(*k_) += X.transpose() * GK;
    gw(*v_) += X.transpose() * GV;
    Grid<S> gx(x.shape());
    Map GX(gx.data(), n, c);
    GX.noalias() = GQ * w(*q_).transpose();
    GX.noalias() += GK * w(*k_).transpose();
    GX.noalias() += GV * w(*v_).transpose();
    return gx;
  }

 private:
  static MapC w(const Param<S>& p) {
    const auto c = Eigen::Index(p.value.dims[2]);
    return MapC(p.value.data.data(), c, c);
  }
  static Map gw(Param<S>& p) {
    const auto c = Eigen::Index(p.value.dims[2]);
    return Map(p.grad.data.data(), c, c);
  }

  Grid<S> attend(const Grid<S>& x, Grid<S>& q, Grid<S>& k, Grid<S>& v) const {
    const std::size_t n = x.h() * x.w();
    if (n > max_positions_) {
      throw std::invalid_argument(name_ + ": " + x.shape().str() + " has " + std::to_string(n) +
                                  " positions, above the attention cap of " +
                                  std::to_string(max_positions_));
    }
    const Eigen::Index N = Eigen::Index(n), C = Eigen::Index(c_);
    MapC X(x.data(), N, C);
    q = Grid<S>(x.h(), x.w(), c_);
    k = Grid<S>(x.h(), x.w(), c_);
    v = Grid<S>(x.h(), x.w(), c_);
    Map(q.data(), N, C).noalias() = X * w(*q_);
    Map(k.data(), N, C).noalias() = X * w(*k_);
    Map(v.data(), N, C).noalias() = X * w(*v_);
    Grid<S> p(n, n, 1);
    Map P(p.data(), N, N);
    P.noalias() = MapC(q.data(), N, C) * MapC(k.data(), N, C).transpose();
    const S inv_sqrt = S(1.0 / std::sqrt(double(c_)));
    for (Eigen::Index i = 0; i < N; ++i) {
      S mx = P(i, 0) * inv_sqrt;
      for (Eigen::Index j = 1; j < N; ++j) mx = std::max(mx, P(i, j) * inv_sqrt);
      S total = S(0);
      for (Eigen::Index j = 0; j < N; ++j) {
        P(i, j) = std::exp(P(i, j) * inv_sqrt - mx);
        total += P(i, j);
      }
      for (Eigen::Index j = 0; j < N; ++j) P(i, j) /= total;
    }
    return p;
  }

  std::string name_;
  std::size_t c_, max_positions_;
  Param<S>* q_ = nullptr;
  Param<S>* k_ = nullptr;
  Param<S>* v_ = nullptr;
  Param<S>* o_ = nullptr;
};

// Prior injection at a layer running r times below full resolution:
// unshuffle(Conv3x3(concat(Conv1x1(shuffle(x, r)), backproj, env)), r).
template <class S>
class InjectorBranch final : public Branch<S> {
 public:
  static constexpr std::size_t kEnvChannels = 2;

  InjectorBranch(ParamStore<S>& store, const std::string& name, std::size_t c, std::size_t r)
      : name_(name), c_(c), r_(r) {
    if (r == 0 || c % (r * r) != 0) {
      throw std::invalid_argument(name + ": " + std::to_string(c) +
                                  " channels not divisible by r^2 = " + std::to_string(r * r));
    }
    const std::size_t lifted = c / (r * r);
    compress_ = ConvLayer<S>(store, name + ".compress", 1, lifted, 1, {}, false);
    mix_ = ConvLayer<S>(store, name + ".mix", 3, 2 + kEnvChannels, lifted, {}, false);
  }

  std::size_t channels() const override { return c_; }
  std::size_t scale() const { return r_; }
  ConvLayer<S>& compress() { return compress_; }
  ConvLayer<S>& mix() { return mix_; }

  void initialize(Rng& rng) override {
    init_he(compress_.weight(), rng, c_ / (r_ * r_));
    zero_values(mix_.weight());
  }

  Grid<S> forward(const Grid<S>& x, const BlockContext<S>& ctx, Tape<S>* tape) const override {
    require_channels(x, c_, name_);
    check_context(x, ctx);
    Grid<S> lifted = pixel_shuffle(x, r_);
    Grid<S> compressed = compress_.forward(lifted);
    Grid<S> cat = concat_channels<S>({&compressed, ctx.backproj, ctx.env});
    Grid<S> out = pixel_unshuffle(mix_.forward(cat), r_);
    if (tape) {
      tape->save(std::move(lifted));
      tape->save(std::move(cat));
    }
    return out;
  }

  Grid<S> backward(const Tape<S>& tape, const Grid<S>& gy, const BlockContext<S>&,
                   ContextGrads<S>&) const override {
    const Grid<S>&lifted = tape[0], &cat = tape[1];
    Grid<S> gcat = mix_.backward(cat, pixel_unshuffle_backward(gy, r_));
    Grid<S> gcomp = slice_channels(gcat, 0, 1);
    return pixel_shuffle_backward(compress_.backward(lifted, gcomp), r_);
  }

 private:
  void check_context(const Grid<S>& x, const BlockContext<S>& ctx) const {
    if (!ctx.backproj || !ctx.env) throw std::invalid_argument(name_ + ": missing injector context");
    const Grid<S>&bp = *ctx.backproj, &env = *ctx.env;
    if (bp.c() != 1 || env.c() != kEnvChannels || env.h() != bp.h() || env.w() != bp.w()) {
      throw std::invalid_argument(name_ + ": context shapes " + bp.shape().str() + " and " +
                                  env.shape().str() + " are not (h,w,1) and (h,w,2)");
    }
    if (x.h() * r_ != bp.h() || x.w() * r_ != bp.w()) {
      throw std::invalid_argument(name_ + ": input " + x.shape().str() + " at scale " +
                                  std::to_string(r_) + " does not match context " +
                                  bp.shape().str());
    }
  }

  std::string name_;
  std::size_t c_, r_;
  ConvLayer<S> compress_, mix_;
};

// x + g(x) for a standalone block.
template <class S>
Grid<S> apply_block(const Branch<S>& g, const Grid<S>& x, const BlockContext<S>& ctx) {
  return x + g.forward(x, ctx, nullptr);
}

template <class S>
struct CouplingTape {
  Tape<S> first, second;
};

// y1 = u1 + g1(u2); y2 = u2 + g2(y1).
template <class S>
class Coupling {
 public:
  Coupling(std::unique_ptr<Branch<S>> g1, std::unique_ptr<Branch<S>> g2)
      : g1_(std::move(g1)), g2_(std::move(g2)) {
    if (g1_->channels() != g2_->channels()) throw std::invalid_argument("Coupling: branch width mismatch");
  }

  std::size_t channels() const { return 2 * g1_->channels(); }
  Branch<S>& first() { return *g1_; }
  Branch<S>& second() { return *g2_; }

  void initialize(Rng& rng) {
    g1_->initialize(rng);
    g2_->initialize(rng);
  }

  Grid<S> forward(const Grid<S>& x, const BlockContext<S>& ctx, CouplingTape<S>* tape = nullptr) const {
    require_channels(x, channels(), "Coupling");
    const std::size_t half = g1_->channels();
    Grid<S> y1 = slice_channels(x, 0, half);
    Grid<S> y2 = slice_channels(x, half, half);
    y1 += g1_->forward(y2, ctx, tape ? &tape->first : nullptr);
    y2 += g2_->forward(y1, ctx, tape ? &tape->second : nullptr);
    return concat_channels<S>({&y1, &y2});
  }

  Grid<S> inverse(const Grid<S>& y, const BlockContext<S>& ctx, CouplingTape<S>* tape = nullptr) const {
    require_channels(y, channels(), "Coupling");
    const std::size_t half = g1_->channels();
    Grid<S> u1 = slice_channels(y, 0, half);
    Grid<S> u2 = slice_channels(y, half, half);
    u2 -= g2_->forward(u1, ctx, tape ? &tape->second : nullptr);
    u1 -= g1_->forward(u2, ctx, tape ? &tape->first : nullptr);
    return concat_channels<S>({&u1, &u2});
  }

  // Backward from tapes recorded by forward (or inverse).
  Grid<S> backward(const CouplingTape<S>& tape, const Grid<S>& gy, const BlockContext<S>& ctx,
                   ContextGrads<S>& cg) const {
    const std::size_t half = g1_->channels();
    Grid<S> gy1 = slice_channels(gy, 0, half);
    Grid<S> gy2 = slice_channels(gy, half, half);
    gy1 += g2_->backward(tape.second, gy2, ctx, cg);
    gy2 += g1_->backward(tape.first, gy1, ctx, cg);
    return concat_channels<S>({&gy1, &gy2});
  }

  struct Recomputed {
    Grid<S> x;
    Grid<S> gx;
  };

  // Reconstructs the input from the output, re-records both branch tapes
  // under ModuleInternal, and back-propagates. Tapes are freed on return.
  Recomputed backward_from_output(const Grid<S>& y, const Grid<S>& gy, const BlockContext<S>& ctx,
                                  ContextGrads<S>& cg, MemoryLedger* ledger) const {
    CouplingTape<S> tape{Tape<S>(ledger, MemTag::ModuleInternal), Tape<S>(ledger, MemTag::ModuleInternal)};
    Grid<S> x = inverse(y, ctx, &tape);
    Grid<S> gx = backward(tape, gy, ctx, cg);
    return {std::move(x), std::move(gx)};
  }

 private:
  std::unique_ptr<Branch<S>> g1_, g2_;
};

template <class S>
void require_even(std::size_t c, const std::string& name) {
  if (c == 0 || c % 2 != 0) {
    throw std::invalid_argument(name + ": coupling needs an even channel count, got " + std::to_string(c));
  }
}

template <class S>
Coupling<S> make_residual_coupling(ParamStore<S>& store, const std::string& name, std::size_t c) {
  require_even<S>(c, name);
  return Coupling<S>(std::make_unique<ResidualBranch<S>>(store, name + ".g1", c / 2),
                     std::make_unique<ResidualBranch<S>>(store, name + ".g2", c / 2));
}

template <class S>
Coupling<S> make_attention_coupling(ParamStore<S>& store, const std::string& name, std::size_t c,
                                    std::size_t max_positions = AttentionBranch<S>::kDefaultMaxPositions) {
  require_even<S>(c, name);
  return Coupling<S>(std::make_unique<AttentionBranch<S>>(store, name + ".g1", c / 2, max_positions),
                     std::make_unique<AttentionBranch<S>>(store, name + ".g2", c / 2, max_positions));
}

template <class S>
Coupling<S> make_injector_coupling(ParamStore<S>& store, const std::string& name, std::size_t c,
                                   std::size_t r) {
  require_even<S>(c, name);
  return Coupling<S>(std::make_unique<InjectorBranch<S>>(store, name + ".g1", c / 2, r),
                     std::make_unique<InjectorBranch<S>>(store, name + ".g2", c / 2, r));
}

}  // namespace invdiff
