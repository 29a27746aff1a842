#include <gtest/gtest.h>

#include "invdiff/sampler.hpp"
#include "invdiff/unet.hpp"
#include "test_util.hpp"

using namespace invdiff;
using invdiff::testing::random_grid;
using invdiff::testing::randomize;

namespace {

template <class S>
struct Inputs {
  Grid<S> x, env, backproj;
};

template <class S>
Inputs<S> random_inputs(Rng& rng, std::size_t h, std::size_t w) {
  return {random_grid<S>(rng, h, w, 1), random_grid<S>(rng, h, w, 2), random_grid<S>(rng, h, w, 1)};
}

template <class S>
std::vector<std::vector<S>> grads_for(UNet<S>& net, ParamStore<S>& store, const Inputs<S>& in,
                                      const Grid<S>& v, CacheMode mode, MemoryLedger* ledger,
                                      Grid<S>* gx = nullptr) {
  store.zero_grad();
  UNetTape<S> tape;
  net.forward(in.x, in.env, in.backproj, 2, mode, &tape, ledger);
  auto g = net.backward(tape, v);
  if (gx) *gx = g;
  std::vector<std::vector<S>> out;
  for (auto& p : store) out.push_back(p->grad.data);
  return out;
}

double vec_rel(const std::vector<double>& a, const std::vector<double>& b) {
  double d = 0, n = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    d += (a[i] - b[i]) * (a[i] - b[i]);
    n += b[i] * b[i];
  }
  return n > 0 ? std::sqrt(d / n) : std::sqrt(d);
}

}  // namespace

TEST(UNetConfig, RejectsBadChannelsAndSizes) {
  ParamStore<double> store;
  EXPECT_THROW(UNet<double>(store, UNetConfig{12}), std::invalid_argument);
  ParamStore<double> ok;
  UNet<double> net(ok, UNetConfig{8});
  Rng rng(1);
  auto in = random_inputs<double>(rng, 18, 16);
  EXPECT_THROW(net.forward(in.x, in.env, in.backproj, 1), std::invalid_argument);
  auto big = random_inputs<double>(rng, 128, 128);
  EXPECT_THROW(net.forward(big.x, big.env, big.backproj, 1), std::invalid_argument);
  auto bad_env = random_inputs<double>(rng, 16, 16);
  bad_env.env = Grid<double>(16, 16, 3);
  EXPECT_THROW(net.forward(bad_env.x, bad_env.env, bad_env.backproj, 1), std::invalid_argument);
}

TEST(UNet, OutputShapeAndModeInvariantValues) {
  Rng rng(2);
  ParamStore<double> store;
  UNet<double> net(store, UNetConfig{8});
  net.initialize(rng);
  for (bool random_params : {false, true}) {
    if (random_params) randomize(store, rng, 0.2);
    auto in = random_inputs<double>(rng, 16, 12);
    auto ref = net.forward(in.x, in.env, in.backproj, 1);
    EXPECT_EQ(ref.shape(), (Shape{16, 12, 1}));
    for (CacheMode m : {CacheMode::CacheAll, CacheMode::CacheBoundary}) {
      UNetTape<double> tape;
      EXPECT_EQ(net.forward(in.x, in.env, in.backproj, 1, m, &tape), ref) << cache_mode_name(m);
    }
  }
}

TEST(UNet, InitializedCouplingsLeaveOnlyBoundaryLayers) {
  Rng rng(3);
  ParamStore<double> store;
  UNet<double> net(store, UNetConfig{8});
  net.initialize(rng);
  auto in = random_inputs<double>(rng, 16, 16);
  auto ref = net.forward(in.x, in.env, in.backproj, 1);
  // With every coupling at identity the back-projection has no influence.
  auto other = in;
  other.backproj = random_grid(rng, 16, 16, 1);
  EXPECT_EQ(net.forward(other.x, other.env, other.backproj, 1), ref);
}

TEST(UNet, BoundaryRecomputeMatchesCachedGradients) {
  Rng rng(4);
  ParamStore<double> store;
  UNet<double> net(store, UNetConfig{8});
  randomize(store, rng, 0.2);
  auto in = random_inputs<double>(rng, 16, 16);
  auto v = random_grid(rng, 16, 16, 1);
  MemoryLedger ledger;
  Grid<double> gx_all, gx_b;
  auto all = grads_for(net, store, in, v, CacheMode::CacheAll, &ledger, &gx_all);
  EXPECT_EQ(ledger.live_bytes(), 0u);
  auto bnd = grads_for(net, store, in, v, CacheMode::CacheBoundary, &ledger, &gx_b);
  EXPECT_EQ(ledger.live_bytes(), 0u);
  EXPECT_LE(rel_error(gx_b, gx_all), 1e-8);
  std::size_t i = 0;
  for (auto& p : store) {
    EXPECT_LE(vec_rel(bnd[i], all[i]), 1e-8) << p->name;
    ++i;
  }
}

TEST(UNet, FloatModesAgree) {
  Rng rng(5);
  ParamStore<float> store;
  UNet<float> net(store, UNetConfig{8});
  randomize(store, rng, 0.2);
  auto in = random_inputs<float>(rng, 16, 16);
  auto v = random_grid<float>(rng, 16, 16, 1);
  auto all = grads_for(net, store, in, v, CacheMode::CacheAll, nullptr);
  auto bnd = grads_for(net, store, in, v, CacheMode::CacheBoundary, nullptr);
  std::size_t i = 0;
  for (auto& p : store) {
    std::vector<double> a(all[i].begin(), all[i].end()), b(bnd[i].begin(), bnd[i].end());
    EXPECT_LE(vec_rel(b, a), 1e-4) << p->name;
    ++i;
  }
}

TEST(UNet, FiniteDifferenceProbe) {
  Rng rng(6);
  ParamStore<double> store;
  UNet<double> net(store, UNetConfig{8});
  randomize(store, rng, 0.2);
  auto in = random_inputs<double>(rng, 16, 16);
  auto v = random_grid(rng, 16, 16, 1);
  Grid<double> gx;
  grads_for(net, store, in, v, CacheMode::CacheBoundary, nullptr, &gx);
  auto loss = [&] { return dot(net.forward(in.x, in.env, in.backproj, 2), v); };
  // Ten random (tensor, entry) probes.
  std::vector<double> analytic, numeric;
  for (int k = 0; k < 10; ++k) {
    auto& p = store[rng.below(store.size())];
    const std::size_t i = rng.below(p.size());
    const double keep = p.value[i], h = 1e-5 * std::max(1.0, std::abs(keep));
    p.value[i] = keep + h;
    const double fp = loss();
    p.value[i] = keep - h;
    const double fm = loss();
    p.value[i] = keep;
    analytic.push_back(p.grad[i]);
    numeric.push_back((fp - fm) / (2 * h));
  }
  EXPECT_LE(vec_rel(analytic, numeric), 1e-5);
  std::vector<std::size_t> probe;
  for (int k = 0; k < 20; ++k) probe.push_back(rng.below(gx.size()));
  EXPECT_LE(finite_difference_check(in.x.vec(), gx.vec(), loss, probe).rel_err, 1e-5);
}

TEST(UNet, BackwardNeedsMatchingForwardAndCleansUp) {
  Rng rng(7);
  ParamStore<double> store;
  UNet<double> net(store, UNetConfig{8});
  randomize(store, rng, 0.2);
  auto in = random_inputs<double>(rng, 16, 16);
  UNetTape<double> tape;
  net.forward(in.x, in.env, in.backproj, 1, CacheMode::Infer, &tape);
  EXPECT_THROW(net.backward(tape, in.x), std::logic_error);
  MemoryLedger ledger;
  net.forward(in.x, in.env, in.backproj, 1, CacheMode::CacheBoundary, &tape, &ledger);
  EXPECT_GT(ledger.live_bytes(MemTag::BoundaryCache), 0u);
  EXPECT_EQ(ledger.live_bytes(MemTag::ModuleInternal), 0u);
  net.backward(tape, in.x);
  EXPECT_EQ(ledger.live_bytes(), 0u);
  EXPECT_GT(ledger.peak_bytes(MemTag::ModuleInternal), 0u);
  EXPECT_THROW(net.backward(tape, in.x), std::logic_error);
}

TEST(UNet, BoundaryPeakIsUnderHalfOfFullCacheAtDefaultSize) {
  Rng rng(8);
  ParamStore<float> store;
  UNet<float> net(store, UNetConfig{});
  net.initialize(rng);
  auto in = random_inputs<float>(rng, 64, 64);
  auto v = random_grid<float>(rng, 64, 64, 1);
  std::size_t peak[2];
  int k = 0;
  for (CacheMode m : {CacheMode::CacheAll, CacheMode::CacheBoundary}) {
    MemoryLedger ledger;
    grads_for(net, store, in, v, m, &ledger);
    peak[k++] = ledger.peak_bytes();
  }
  EXPECT_LT(double(peak[1]), 0.5 * double(peak[0])) << peak[1] << " vs " << peak[0];
}
