#include <gtest/gtest.h>

#include "invdiff/blocks.hpp"
#include "invdiff/gradcheck.hpp"
#include "test_util.hpp"

using namespace invdiff;
using invdiff::testing::expect_param_grads;
using invdiff::testing::random_grid;
using invdiff::testing::randomize;

namespace {

constexpr double kGradTol = 1e-6;

struct Ctx {
  std::vector<double> t_emb;
  Grid<double> backproj, env;
  BlockContext<double> view() const { return {t_emb, &backproj, &env}; }
};

Ctx random_ctx(Rng& rng, std::size_t h, std::size_t w) {
  Ctx c;
  c.t_emb.resize(kTimeEmbedDim);
  for (auto& v : c.t_emb) v = rng.uniform(-1, 1);
  c.backproj = random_grid(rng, h, w, 1);
  c.env = random_grid(rng, h, w, 2);
  return c;
}

// Checks d<g(x), v>/dx, d/dparams and d/dt_emb against finite differences.
void gradcheck_branch(const Branch<double>& g, ParamStore<double>& store, Grid<double> x, Ctx ctx,
                      Rng& rng, bool check_temb) {
  auto v = random_grid(rng, x.h(), x.w(), x.c());
  store.zero_grad();
  Tape<double> tape;
  g.forward(x, ctx.view(), &tape);
  ContextGrads<double> cg;
  auto gx = g.backward(tape, v, ctx.view(), cg);
  auto loss = [&] { return dot(g.forward(x, ctx.view(), nullptr), v); };
  EXPECT_LE(finite_difference_check(x.vec(), gx.vec(), loss).rel_err, kGradTol);
  expect_param_grads(store, loss, kGradTol);
  if (check_temb) {
    ASSERT_EQ(cg.t_emb.size(), kTimeEmbedDim);
    EXPECT_LE(finite_difference_check(ctx.t_emb, cg.t_emb, loss).rel_err, kGradTol);
  }
}

}  // namespace

TEST(TimeEmbedding, DeterministicAndDistinctAcrossSteps) {
  ParamStore<double> store;
  TimeEmbedding<double> te(store, "temb");
  Rng rng(1);
  randomize(store, rng, 0.3);
  EXPECT_EQ(te.forward(2), te.forward(2));
  auto e1 = te.forward(1), e2 = te.forward(2), e3 = te.forward(3);
  EXPECT_NE(e1, e2);
  EXPECT_NE(e2, e3);
  EXPECT_NE(e1, e3);
  for (double v : te.forward(0)) EXPECT_TRUE(std::isfinite(v));
}

TEST(TimeEmbedding, FeaturesAreSinCosPairs) {
  auto f = sinusoidal_features<double>(3);
  EXPECT_DOUBLE_EQ(f[0], std::sin(3.0));
  EXPECT_DOUBLE_EQ(f[16], std::cos(3.0));
  EXPECT_NEAR(f[15], std::sin(3.0 * 1e4), 1e-9);
}

TEST(TimeEmbedding, LinearMapGradcheck) {
  ParamStore<double> store;
  TimeEmbedding<double> te(store, "temb");
  Rng rng(2);
  randomize(store, rng, 0.5);
  std::vector<double> v(kTimeEmbedDim);
  for (auto& x : v) x = rng.uniform(-1, 1);
  te.backward(2, v);
  auto loss = [&] {
    auto e = te.forward(2);
    double s = 0;
    for (std::size_t i = 0; i < e.size(); ++i) s += e[i] * v[i];
    return s;
  };
  expect_param_grads(store, loss, kGradTol);
}

TEST(GroupNorm, NormalisesEachGroup) {
  ParamStore<double> store;
  GroupNorm<double> gn(store, "gn", 16);
  Rng rng(3);
  auto x = random_grid(rng, 4, 4, 16, 3.0);
  auto y = gn.forward(x);
  for (std::size_t g = 0; g < 8; ++g) {
    double m = 0, s2 = 0;
    for (std::size_t p = 0; p < 16; ++p)
      for (std::size_t k = 0; k < 2; ++k) m += y[p * 16 + g * 2 + k];
    m /= 32;
    for (std::size_t p = 0; p < 16; ++p)
      for (std::size_t k = 0; k < 2; ++k) s2 += std::pow(y[p * 16 + g * 2 + k] - m, 2);
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(s2 / 32, 1.0, 1e-4);
  }
  EXPECT_THROW(GroupNorm<double>(store, "bad", 12), std::invalid_argument);
  EXPECT_NO_THROW(GroupNorm<double>(store, "narrow", 6));
}

TEST(ResidualBranch, ZeroInitGivesShiftOnly) {
  ParamStore<double> store;
  ResidualBranch<double> g(store, "res", 8);
  Rng rng(4);
  randomize(store, rng, 0.5);
  zero_values(g.conv().weight());
  auto ctx = random_ctx(rng, 6, 6);
  auto x = random_grid(rng, 6, 6, 8);
  auto y = apply_block<double>(g, x, ctx.view());
  auto shift = g.film_shift().forward(ctx.t_emb);
  ASSERT_EQ(y.shape(), x.shape());
  for (std::size_t px = 0; px < 36; ++px)
    for (std::size_t k = 0; k < 8; ++k) EXPECT_DOUBLE_EQ(y[px * 8 + k], x[px * 8 + k] + shift[k]);
}

TEST(ResidualBranch, InitializeMakesBlockIdentity) {
  ParamStore<double> store;
  ResidualBranch<double> g(store, "res", 8);
  Rng rng(5);
  randomize(store, rng, 0.5);
  g.initialize(rng);
  auto ctx = random_ctx(rng, 5, 5);
  auto x = random_grid(rng, 5, 5, 8);
  // Only the shift bias could still be nonzero.
  zero_values(g.film_shift().bias());
  EXPECT_EQ(apply_block<double>(g, x, ctx.view()), x);
}

TEST(ResidualBranch, RejectsChannelMismatch) {
  ParamStore<double> store;
  ResidualBranch<double> g(store, "res", 8);
  Rng rng(6);
  auto ctx = random_ctx(rng, 4, 4);
  EXPECT_THROW(g.forward(Grid<double>(4, 4, 6), ctx.view(), nullptr), std::invalid_argument);
}

TEST(ResidualBranch, Gradcheck) {
  Rng rng(7);
  for (std::size_t c : {4, 8}) {
    ParamStore<double> store;
    ResidualBranch<double> g(store, "res", c);
    randomize(store, rng, 0.4);
    gradcheck_branch(g, store, random_grid(rng, 5, 6, c), random_ctx(rng, 5, 6), rng, true);
  }
}

TEST(AttentionBranch, SinglePositionPassesValueThrough) {
  ParamStore<double> store;
  AttentionBranch<double> g(store, "attn", 4);
  Rng rng(8);
  randomize(store, rng, 0.7);
  auto x = random_grid(rng, 1, 1, 4);
  auto y = apply_block<double>(g, x, {});
  const auto& wv = store.at("attn.v").value;
  const auto& wo = store.at("attn.out").value;
  for (std::size_t j = 0; j < 4; ++j) {
    double expect = x[j];
    for (std::size_t k = 0; k < 4; ++k) {
      double vk = 0;
      for (std::size_t i = 0; i < 4; ++i) vk += x[i] * wv[i * 4 + k];
      expect += vk * wo[k * 4 + j];
    }
    EXPECT_NEAR(y[j], expect, 1e-14);
  }
}

TEST(AttentionBranch, ScoreRowsSumToOne) {
  ParamStore<float> store;
  AttentionBranch<float> g(store, "attn", 8);
  Rng rng(9);
  randomize(store, rng, 1.0);
  auto p = g.scores(random_grid<float>(rng, 4, 4, 8, 2.0));
  ASSERT_EQ(p.h(), 16u);
  for (std::size_t i = 0; i < 16; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < 16; ++j) s += p.at(i, j);
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(AttentionBranch, RejectsAboveCap) {
  ParamStore<double> store;
  AttentionBranch<double> g(store, "attn", 4);
  EXPECT_NO_THROW(g.forward(Grid<double>(16, 16, 4), {}, nullptr));
  EXPECT_THROW(g.forward(Grid<double>(32, 32, 4), {}, nullptr), std::invalid_argument);
}

TEST(AttentionBranch, Gradcheck) {
  Rng rng(10);
  ParamStore<double> store;
  AttentionBranch<double> g(store, "attn", 8);
  randomize(store, rng, 0.5);
  gradcheck_branch(g, store, random_grid(rng, 4, 4, 8), random_ctx(rng, 4, 4), rng, false);
}

TEST(InjectorBranch, ZeroMixIsIdentityAndShapesHold) {
  Rng rng(11);
  for (std::size_t r : {1, 2, 4}) {
    ParamStore<double> store;
    InjectorBranch<double> g(store, "inj", 16, r);
    randomize(store, rng, 0.5);
    auto ctx = random_ctx(rng, 8, 8);
    auto x = random_grid(rng, 8 / r, 8 / r, 16);
    auto y = apply_block<double>(g, x, ctx.view());
    EXPECT_EQ(y.shape(), x.shape());
    EXPECT_NE(y, x);
    g.initialize(rng);
    EXPECT_EQ(apply_block<double>(g, x, ctx.view()), x);
  }
}

TEST(InjectorBranch, RejectsIndivisibleChannelsAndBadContext) {
  ParamStore<double> store;
  EXPECT_THROW(InjectorBranch<double>(store, "bad", 6, 2), std::invalid_argument);
  InjectorBranch<double> g(store, "inj", 8, 2);
  Rng rng(12);
  auto ctx = random_ctx(rng, 8, 8);
  EXPECT_THROW(g.forward(Grid<double>(8, 8, 8), ctx.view(), nullptr), std::invalid_argument);
  EXPECT_THROW(g.forward(Grid<double>(4, 4, 8), {}, nullptr), std::invalid_argument);
}

TEST(InjectorBranch, Gradcheck) {
  Rng rng(13);
  for (std::size_t r : {1, 2}) {
    ParamStore<double> store;
    InjectorBranch<double> g(store, "inj", 8, r);
    randomize(store, rng, 0.5);
    gradcheck_branch(g, store, random_grid(rng, 8 / r, 8 / r, 8), random_ctx(rng, 8, 8), rng, false);
  }
}

namespace {

Coupling<double> make_kind(ParamStore<double>& store, int kind, std::size_t c) {
  switch (kind) {
    case 0: return make_residual_coupling(store, "cp", c);
    case 1: return make_attention_coupling(store, "cp", c);
    default: return make_injector_coupling(store, "cp", c, 2);
  }
}

}  // namespace

TEST(Coupling, InitializedCouplingIsIdentity) {
  Rng rng(14);
  for (int kind = 0; kind < 3; ++kind) {
    ParamStore<double> store;
    auto cp = make_kind(store, kind, 8);
    randomize(store, rng, 0.5);
    cp.initialize(rng);
    for (auto& p : store)
      if (p->name.find("film_shift.b") != std::string::npos) zero_values(*p);
    auto ctx = random_ctx(rng, 8, 8);
    auto x = random_grid(rng, 4, 4, 8);
    EXPECT_EQ(cp.forward(x, ctx.view()), x) << "kind " << kind;
  }
}

TEST(Coupling, RoundTripIsExactToRounding) {
  Rng rng(15);
  for (int kind = 0; kind < 3; ++kind) {
    ParamStore<double> store;
    auto cp = make_kind(store, kind, 8);
    randomize(store, rng, 0.5);
    auto ctx = random_ctx(rng, 16, 16);
    auto x = random_grid(rng, 8, 8, 8);
    auto back = cp.inverse(cp.forward(x, ctx.view()), ctx.view());
    EXPECT_LE(max_abs_diff(back, x) / max_abs(x), 1e-10) << "kind " << kind;
    auto zero = Grid<double>(8, 8, 8);
    EXPECT_LE(max_abs_diff(cp.inverse(cp.forward(zero, ctx.view()), ctx.view()), zero), 1e-12);
  }
}

TEST(Coupling, RejectsOddChannels) {
  ParamStore<double> store;
  EXPECT_THROW(make_residual_coupling(store, "odd", 7), std::invalid_argument);
}

TEST(Coupling, GradcheckAndRecomputeEquivalence) {
  Rng rng(16);
  for (int kind = 0; kind < 3; ++kind) {
    ParamStore<double> store;
    auto cp = make_kind(store, kind, 8);
    randomize(store, rng, 0.4);
    auto ctx = random_ctx(rng, 8, 8);
    auto x = random_grid(rng, 4, 4, 8);
    auto v = random_grid(rng, 4, 4, 8);

    CouplingTape<double> tape;
    auto y = cp.forward(x, ctx.view(), &tape);
    ContextGrads<double> cg_cached;
    store.zero_grad();
    auto gx_cached = cp.backward(tape, v, ctx.view(), cg_cached);
    std::vector<std::vector<double>> cached_grads;
    for (auto& p : store) cached_grads.push_back(p->grad.data);

    auto loss = [&] { return dot(cp.forward(x, ctx.view()), v); };
    EXPECT_LE(finite_difference_check(x.vec(), gx_cached.vec(), loss).rel_err, kGradTol);
    expect_param_grads(store, loss, kGradTol);

    MemoryLedger ledger;
    store.zero_grad();
    ContextGrads<double> cg;
    auto rec = cp.backward_from_output(y, v, ctx.view(), cg, &ledger);
    EXPECT_EQ(ledger.live_bytes(), 0u);
    EXPECT_GT(ledger.peak_bytes(MemTag::ModuleInternal), 0u);
    EXPECT_LE(max_abs_diff(rec.x, x), 1e-10);
    EXPECT_LE(rel_error(rec.gx, gx_cached), 1e-8);
    std::size_t i = 0;
    for (auto& p : store) {
      Grid<double> a(1, 1, p->size(), p->grad.data), b(1, 1, p->size(), cached_grads[i++]);
      if (max_abs(b) > 0) EXPECT_LE(rel_error(a, b), 1e-8) << p->name;
      else EXPECT_EQ(max_abs(a), 0.0) << p->name;
    }
  }
}

TEST(Coupling, ZeroBranchesPassGradientThrough) {
  Rng rng(17);
  ParamStore<double> store;
  auto cp = make_residual_coupling(store, "cp", 8);
  cp.initialize(rng);
  auto ctx = random_ctx(rng, 4, 4);
  auto x = random_grid(rng, 4, 4, 8);
  auto v = random_grid(rng, 4, 4, 8);
  ContextGrads<double> cg;
  auto rec = cp.backward_from_output(cp.forward(x, ctx.view()), v, ctx.view(), cg, nullptr);
  EXPECT_EQ(rec.gx, v);
}
