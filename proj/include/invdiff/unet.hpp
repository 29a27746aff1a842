#pragma once

// Invertible U-Net noise estimator. Two down and two up stages of coupling
// modules; resolution changes, skip fusion, head and tail are ordinary layers
// whose inputs form the boundary cache.

#include <array>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "invdiff/blocks.hpp"
#include "invdiff/conv.hpp"
#include "invdiff/grid.hpp"
#include "invdiff/layers.hpp"
#include "invdiff/ledger.hpp"
#include "invdiff/rng.hpp"
#include "invdiff/tensor.hpp"

namespace invdiff {

enum class CacheMode { Infer, CacheAll, CacheBoundary };

inline const char* cache_mode_name(CacheMode m) {
  switch (m) {
    case CacheMode::Infer: return "infer";
    case CacheMode::CacheAll: return "cache_all";
    case CacheMode::CacheBoundary: return "cache_boundary";
  }
  return "?";
}

struct UNetConfig {
  std::size_t base_channels = 16;
  std::size_t attention_max_positions = AttentionBranch<double>::kDefaultMaxPositions;

  void validate() const {
    // Injector sites need half-width channels divisible by r^2 (r up to 4).
    if (base_channels == 0 || base_channels % 8 != 0) {
      throw std::invalid_argument("UNetConfig: base_channels must be a positive multiple of 8, got " +
                                  std::to_string(base_channels));
    }
    if (attention_max_positions == 0) throw std::invalid_argument("UNetConfig: attention cap must be positive");
  }

  // Rejects spatial sizes the network cannot process.
  void check_input(std::size_t h, std::size_t w) const {
    if (h == 0 || w == 0 || h % 4 != 0 || w % 4 != 0) {
      throw std::invalid_argument("UNet: spatial size " + std::to_string(h) + "x" + std::to_string(w) +
                                  " is not divisible by 4");
    }
    if ((h / 4) * (w / 4) > attention_max_positions) {
      throw std::invalid_argument("UNet: bottleneck " + std::to_string(h / 4) + "x" +
                                  std::to_string(w / 4) + " exceeds the attention cap of " +
                                  std::to_string(attention_max_positions) + " positions");
    }
  }
};

inline constexpr std::size_t kStageCount = 4;  // down0, down1, up0, up1

template <class S>
struct UNetTape {
  CacheMode mode = CacheMode::Infer;
  bool armed = false;
  std::size_t t = 0;
  MemoryLedger* ledger = nullptr;
  const Grid<S>* env = nullptr;
  const Grid<S>* backproj = nullptr;

  Saved<S> t_emb;
  Saved<S> head_in;
  std::array<Saved<S>, kStageCount> stage_out;
  std::array<Saved<S>, 2> up_out;
  Saved<S> tail_in;
  Tape<S> tail;
  std::array<std::vector<CouplingTape<S>>, kStageCount> modules;

  void clear() {
    armed = false;
    t_emb.reset();
    head_in.reset();
    for (auto& s : stage_out) s.reset();
    for (auto& s : up_out) s.reset();
    tail_in.reset();
    tail.clear();
    for (auto& m : modules) m.clear();
  }
};

template <class S>
class UNet {
 public:
  UNet(ParamStore<S>& store, UNetConfig cfg, const std::string& prefix = "unet")
      : cfg_(cfg), time_(store, prefix + ".time") {
    cfg_.validate();
    const std::size_t b = cfg_.base_channels;
    const ConvGeom same{}, down{2, Pad::Same}, up{2, Pad::Valid};
    head_ = ConvLayer<S>(store, prefix + ".head", 3, 3, b, same, true);

    const std::array<std::size_t, kStageCount> width{b, 2 * b, 4 * b, 2 * b};
    const std::array<std::size_t, kStageCount> scale{1, 2, 4, 2};
    for (std::size_t s = 0; s < kStageCount; ++s) {
      const std::string n = prefix + ".stage" + std::to_string(s);
      auto& mods = stages_[s];
      mods.push_back(make_residual_coupling(store, n + ".m0", width[s]));
      if (s == 2) {
        mods.push_back(make_attention_coupling(store, n + ".m1", width[s], cfg_.attention_max_positions));
      } else if (s == 3) {
        mods.push_back(make_residual_coupling(store, n + ".m1", width[s]));
      }
      mods.push_back(make_injector_coupling(store, n + ".m" + std::to_string(mods.size()), width[s], scale[s]));
    }
    down_[0] = ConvLayer<S>(store, prefix + ".down0", 3, b, 2 * b, down, true);
    down_[1] = ConvLayer<S>(store, prefix + ".down1", 3, 2 * b, 4 * b, down, true);
    up_[0] = ConvLayer<S>(store, prefix + ".up0", 2, 2 * b, 4 * b, up, true, ConvDir::Transposed);
    up_[1] = ConvLayer<S>(store, prefix + ".up1", 2, b, 2 * b, up, true, ConvDir::Transposed);
    fuse_[0] = ConvLayer<S>(store, prefix + ".fuse0", 1, 4 * b, 2 * b, same, true);
    fuse_[1] = ConvLayer<S>(store, prefix + ".fuse1", 1, 2 * b, b, same, true);
    tail_norm_ = GroupNorm<S>(store, prefix + ".tail.norm", b);
    tail_conv_ = ConvLayer<S>(store, prefix + ".tail.conv", 3, b, 1, same, true);
  }

  UNet(const UNet&) = delete;
  UNet& operator=(const UNet&) = delete;

  const UNetConfig& config() const { return cfg_; }
  std::vector<Coupling<S>>& stage(std::size_t s) { return stages_.at(s); }

  // Random boundary layers; every coupling starts as the identity.
  void initialize(Rng& rng) {
    const std::size_t b = cfg_.base_channels;
    init_he(time_.proj().weight(), rng, kTimeEmbedDim);
    init_he(head_.weight(), rng, 9 * 3);
    init_he(down_[0].weight(), rng, 9 * b);
    init_he(down_[1].weight(), rng, 9 * 2 * b);
    init_he(up_[0].weight(), rng, 4 * 4 * b);
    init_he(up_[1].weight(), rng, 4 * 2 * b);
    init_he(fuse_[0].weight(), rng, 4 * b);
    init_he(fuse_[1].weight(), rng, 2 * b);
    init_normal(tail_conv_.weight(), rng, 0.1 * std::sqrt(2.0 / double(9 * b)));
    for (auto& st : stages_)
      for (auto& m : st) m.initialize(rng);
  }

  // `env` and `backproj` must outlive the tape.
  Grid<S> forward(const Grid<S>& x, const Grid<S>& env, const Grid<S>& backproj, std::size_t t,
                  CacheMode mode = CacheMode::Infer, UNetTape<S>* tape = nullptr,
                  MemoryLedger* ledger = nullptr) const {
    check_inputs(x, env, backproj);
    if (mode != CacheMode::Infer && !tape) throw std::invalid_argument("UNet::forward: caching mode needs a tape");
    const bool keep = mode != CacheMode::Infer;
    const bool all = mode == CacheMode::CacheAll;
    UNetTape<S> unused;
    if (!tape) tape = &unused;
    tape->clear();
    tape->mode = mode;
    tape->t = t;
    tape->ledger = ledger;
    tape->env = &env;
    tape->backproj = &backproj;
    tape->armed = keep;
    auto boundary = [&](Saved<S>& slot, const Grid<S>& g) {
      if (keep) slot = Saved<S>(ledger, MemTag::BoundaryCache, g);
    };

    const std::vector<S> temb = time_.forward(t);
    const BlockContext<S> ctx{temb, &backproj, &env};
    if (keep) tape->t_emb = Saved<S>(ledger, MemTag::BoundaryCache, Grid<S>(1, 1, temb.size(), temb));

    Grid<S> head_in = concat_channels<S>({&x, &env});
    Grid<S> cur = head_.forward(head_in);
    boundary(tape->head_in, head_in);

    std::array<Grid<S>, 2> skip;
    for (std::size_t s = 0; s < kStageCount; ++s) {
      auto& mt = tape->modules[s];
      for (const auto& m : stages_[s]) {
        if (all) {
          mt.push_back({Tape<S>(ledger, MemTag::ModuleInternal), Tape<S>(ledger, MemTag::ModuleInternal)});
          cur = m.forward(cur, ctx, &mt.back());
        } else {
          cur = m.forward(cur, ctx);
        }
      }
      boundary(tape->stage_out[s], cur);
      if (s < 2) {
        skip[s] = cur;
        cur = down_[s].forward(cur);
      } else {
        const std::size_t u = s - 2;
        const Grid<S>& sk = skip[1 - u];
        Grid<S> upx = up_[u].forward_transposed(cur, sk.h(), sk.w());
        boundary(tape->up_out[u], upx);
        cur = fuse_[u].forward(concat_channels<S>({&upx, &sk}));
      }
    }

    if (all) return tail_forward(cur, &tape->tail);
    boundary(tape->tail_in, cur);
    return tail_forward(cur, nullptr);
  }

  // Accumulates parameter gradients; returns d/dx. Empties the tape.
  Grid<S> backward(UNetTape<S>& tape, const Grid<S>& g_out) const {
    if (!tape.armed) throw std::logic_error("UNet::backward: no matching cached forward");
    const bool all = tape.mode == CacheMode::CacheAll;
    MemoryLedger* ledger = tape.ledger;
    const std::vector<S> temb = tape.t_emb->vec();
    const BlockContext<S> ctx{temb, tape.backproj, tape.env};
    ContextGrads<S> cg;
    cg.ensure(kTimeEmbedDim);

    Grid<S> g;
    if (all) {
      g = tail_backward(tape.tail, g_out);
      tape.tail.clear();
    } else {
      Tape<S> local(ledger, MemTag::ModuleInternal);
      tail_forward(tape.tail_in.get(), &local);
      tape.tail_in.reset();
      g = tail_backward(local, g_out);
    }

    std::array<Grid<S>, 2> g_skip;
    for (std::size_t s = kStageCount; s-- > 2;) {
      const std::size_t u = s - 2;
      const Grid<S>& sk = tape.stage_out[1 - u].get();
      const Grid<S>& upx = tape.up_out[u].get();
      Grid<S> g_cat = fuse_[u].backward(concat_channels<S>({&upx, &sk}), g);
      g_skip[1 - u] = slice_channels(g_cat, upx.c(), sk.c());
      Grid<S> g_up = slice_channels(g_cat, 0, upx.c());
      tape.up_out[u].reset();
      g = up_[u].backward_transposed(tape.stage_out[s].get(), g_up);
      g = stage_backward(s, tape, std::move(g), ctx, cg, all, ledger);
    }
    for (std::size_t s = 2; s-- > 0;) {
      g = down_[s].backward(tape.stage_out[s].get(), g);
      g += g_skip[s];
      g = stage_backward(s, tape, std::move(g), ctx, cg, all, ledger);
    }
    Grid<S> g_head_in = head_.backward(tape.head_in.get(), g);
    time_.backward(tape.t, cg.t_emb);
    tape.clear();
    return slice_channels(g_head_in, 0, 1);
  }

 private:
  void check_inputs(const Grid<S>& x, const Grid<S>& env, const Grid<S>& backproj) const {
    if (x.c() != 1 || env.c() != 2 || backproj.c() != 1 || env.h() != x.h() || env.w() != x.w() ||
        backproj.h() != x.h() || backproj.w() != x.w()) {
      throw std::invalid_argument("UNet: expected x (h,w,1), env (h,w,2), backprojection (h,w,1); got " +
                                  x.shape().str() + ", " + env.shape().str() + ", " + backproj.shape().str());
    }
    cfg_.check_input(x.h(), x.w());
  }

  Grid<S> tail_forward(const Grid<S>& f, Tape<S>* tape) const {
    Grid<S> x_hat, rstd;
    Grid<S> z = tail_norm_.forward(f, &x_hat, &rstd);
    Grid<S> a = silu(z);
    Grid<S> out = tail_conv_.forward(a);
    if (tape) {
      tape->save(std::move(x_hat));
      tape->save(std::move(rstd));
      tape->save(std::move(z));
      tape->save(std::move(a));
    }
    return out;
  }

  Grid<S> tail_backward(const Tape<S>& tape, const Grid<S>& g) const {
    Grid<S> ga = tail_conv_.backward(tape[3], g);
    return tail_norm_.backward(tape[0], tape[1], silu_backward(tape[2], ga));
  }

  Grid<S> stage_backward(std::size_t s, UNetTape<S>& tape, Grid<S> g, const BlockContext<S>& ctx,
                         ContextGrads<S>& cg, bool all, MemoryLedger* ledger) const {
    const auto& mods = stages_[s];
    if (all) {
      tape.stage_out[s].reset();
      for (std::size_t i = mods.size(); i-- > 0;) {
        g = mods[i].backward(tape.modules[s][i], g, ctx, cg);
        tape.modules[s][i] = {};
      }
      return g;
    }
    Grid<S> y = tape.stage_out[s].take();
    for (std::size_t i = mods.size(); i-- > 0;) {
      auto rec = mods[i].backward_from_output(y, g, ctx, cg, ledger);
      y = std::move(rec.x);
      g = std::move(rec.gx);
    }
    return g;
  }

  UNetConfig cfg_;
  TimeEmbedding<S> time_;
  ConvLayer<S> head_;
  std::array<std::vector<Coupling<S>>, kStageCount> stages_;
  std::array<ConvLayer<S>, 2> down_, up_, fuse_;
  GroupNorm<S> tail_norm_;
  ConvLayer<S> tail_conv_;
};

}  // namespace invdiff
