#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include "invdiff/gradcheck.hpp"
#include "invdiff/train.hpp"
#include "test_util.hpp"

using namespace invdiff;
using invdiff::testing::random_grid;
using invdiff::testing::randomize;

namespace {

SolverConfig tiny_config(std::size_t T = 3) {
  SolverConfig c;
  c.unet.base_channels = 8;
  c.schedule = Schedule::with_steps(T);
  return c;
}

template <class S>
SceneInput<S> random_scene(Rng& rng, std::size_t n, double ratio, Grid<S>& truth) {
  truth = random_grid<S>(rng, n, n, 1);
  auto op = make_mask(rng, n, n, ratio);
  return SceneInput<S>::observe(op, truth, random_grid<S>(rng, n, n, 2));
}

template <class S>
void perturb_scalars(Solver<S>& solver, Rng& rng) {
  for (auto& v : solver.scalars().mix_logit().value.data) v = S(rng.uniform(-1, 1));
  solver.scalars().init_scale_param().value[0] = S(rng.uniform(0.5, 1.5));
  solver.scalars().fuse_scale_param().value[0] = S(rng.uniform(0.5, 1.5));
}

template <class S>
std::vector<std::vector<S>> snapshot_grads(const ParamStore<S>& store) {
  std::vector<std::vector<S>> out;
  for (const auto& p : store) out.push_back(p->grad.data);
  return out;
}

// Relative error with a denominator floor. Biases feeding straight into a
// GroupNorm have an exactly zero gradient, so their values are pure rounding.
double rel(const std::vector<double>& a, const std::vector<double>& b, double floor = 0.0) {
  double d = 0, n = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    d += (a[i] - b[i]) * (a[i] - b[i]);
    n += b[i] * b[i];
  }
  const double den = std::max(std::sqrt(n), floor);
  return den > 0 ? std::sqrt(d) / den : std::sqrt(d);
}

template <class S>
double total_norm(const std::vector<std::vector<S>>& g) {
  double n = 0;
  for (const auto& v : g)
    for (S x : v) n += double(x) * double(x);
  return std::sqrt(n);
}

std::vector<LoadedScene<float>> synthetic_scenes(std::size_t n, std::size_t size, std::uint64_t seed) {
  std::vector<LoadedScene<float>> out;
  for (std::size_t i = 0; i < n; ++i) {
    auto s = make_scene_sample(Rng(seed), i, size, size);
    out.push_back({scene_id(i), s.cgm.cast<float>(), s.env.cast<float>()});
  }
  return out;
}

}  // namespace

TEST(L1Loss, ValuesAndGradient) {
  Rng rng(1);
  auto a = random_grid(rng, 4, 5, 1);
  EXPECT_EQ(l1_loss(a, a).loss, 0.0);
  auto b = a;
  for (std::size_t i = 0; i < b.size(); ++i) b[i] += 0.5;
  EXPECT_NEAR(l1_loss(b, a).loss, 0.5, 1e-15);
  auto target = random_grid(rng, 4, 5, 1);
  auto r = l1_loss(a, target);
  auto loss = [&] { return l1_loss(a, target).loss; };
  EXPECT_LE(finite_difference_check(a.vec(), r.grad.vec(), loss).rel_err, 1e-6);
  EXPECT_THROW(l1_loss(a, Grid<double>(5, 4, 1)), std::invalid_argument);
}

TEST(Adam, ZeroGradientKeepsValues) {
  ParamStore<double> store;
  store.add("p", {3});
  store[0].value.data = {1, 2, 3};
  Adam<double> adam(store);
  adam.step(store, 1e-3);
  EXPECT_EQ(store[0].value.data, (std::vector<double>{1, 2, 3}));
}

TEST(Adam, FirstStepIsLearningRate) {
  ParamStore<double> store;
  store.add("p", {1});
  Adam<double> adam(store);
  store[0].grad[0] = 1.0;
  adam.step(store, 1e-4);
  EXPECT_NEAR(store[0].value[0], -1e-4 / (1.0 + 1e-8), 1e-18);
  // Constant gradient keeps the bias-corrected step at lr.
  adam.step(store, 1e-4);
  EXPECT_NEAR(store[0].value[0], -2e-4, 1e-11);
}

TEST(MultiStepLr, DecaysAtMilestoneEpochs) {
  const std::vector<double> ms{0.62, 0.95};
  EXPECT_EQ(multistep_lr(1e-4, 24, 40, ms, 0.1), 1e-4);
  EXPECT_NEAR(multistep_lr(1e-4, 25, 40, ms, 0.1), 1e-5, 1e-20);
  EXPECT_NEAR(multistep_lr(1e-4, 37, 40, ms, 0.1), 1e-5, 1e-20);
  EXPECT_NEAR(multistep_lr(1e-4, 38, 40, ms, 0.1), 1e-6, 1e-20);
}

TEST(Backprop, ModesAgreeAndLedgerReturnsToBaseline) {
  Rng rng(2);
  Solver<double> solver(tiny_config());
  randomize(solver.params(), rng, 0.15);
  perturb_scalars(solver, rng);
  Grid<double> truth;
  auto in = random_scene<double>(rng, 16, 0.1, truth);
  MemoryLedger ledger;
  solver.params().zero_grad();
  auto rc = backprop(solver, in, truth, BackpropMode::Cached, &ledger);
  EXPECT_EQ(ledger.live_bytes(), 0u);
  auto gc = snapshot_grads(solver.params());
  solver.params().zero_grad();
  auto ri = backprop(solver, in, truth, BackpropMode::Invertible, &ledger, 1.0, true);
  EXPECT_EQ(ledger.live_bytes(), 0u);
  EXPECT_EQ(ri.loss, rc.loss);
  EXPECT_LT(ri.drift, 1e-10);
  EXPECT_FALSE(ri.drift_flagged);
  auto gi = snapshot_grads(solver.params());
  const double floor = 1e-3 * total_norm(gc);
  std::size_t k = 0;
  for (const auto& p : solver.params()) {
    EXPECT_LE(rel(gi[k], gc[k], floor), 1e-8) << p->name;
    ++k;
  }
}

TEST(Backprop, MatchesFiniteDifferencesOnScalarsAndWeights) {
  Rng rng(3);
  Solver<double> solver(tiny_config());
  randomize(solver.params(), rng, 0.15);
  perturb_scalars(solver, rng);
  Grid<double> truth;
  auto in = random_scene<double>(rng, 16, 0.1, truth);
  solver.params().zero_grad();
  backprop(solver, in, truth, BackpropMode::Invertible);
  auto loss = [&] { return l1_loss(solver.solve(in), truth).loss; };
  auto& w = solver.scalars().mix_logit();
  for (std::size_t t = 0; t < 3; ++t) EXPECT_NE(w.grad[t], 0.0);
  EXPECT_LE(finite_difference_check(w.value.data, w.grad.data, loss).rel_err, 1e-5);
  auto& sT = solver.scalars().init_scale_param();
  EXPECT_LE(finite_difference_check(sT.value.data, sT.grad.data, loss).rel_err, 1e-5);
  auto& s0 = solver.scalars().fuse_scale_param();
  EXPECT_LE(finite_difference_check(s0.value.data, s0.grad.data, loss).rel_err, 1e-5);
  std::vector<double> analytic, numeric;
  for (int k = 0; k < 10; ++k) {
    auto& p = solver.params()[rng.below(solver.params().size())];
    const std::size_t i = rng.below(p.size());
    const double keep = p.value[i], h = 1e-6;
    p.value[i] = keep + h;
    const double fp = loss();
    p.value[i] = keep - h;
    const double fm = loss();
    p.value[i] = keep;
    analytic.push_back(p.grad[i]);
    numeric.push_back((fp - fm) / (2 * h));
  }
  EXPECT_LE(rel(analytic, numeric), 1e-5);
}

TEST(Backprop, FloatModesAgree) {
  Rng rng(4);
  Solver<float> solver(tiny_config());
  randomize(solver.params(), rng, 0.15);
  Grid<float> truth;
  auto in = random_scene<float>(rng, 16, 0.1, truth);
  solver.params().zero_grad();
  auto rc = backprop(solver, in, truth, BackpropMode::Cached);
  auto gc = snapshot_grads(solver.params());
  solver.params().zero_grad();
  auto ri = backprop(solver, in, truth, BackpropMode::Invertible);
  EXPECT_EQ(ri.loss, rc.loss);
  auto gi = snapshot_grads(solver.params());
  const double floor = 1e-3 * total_norm(gc);
  for (std::size_t k = 0; k < gi.size(); ++k) {
    std::vector<double> a(gi[k].begin(), gi[k].end()), b(gc[k].begin(), gc[k].end());
    EXPECT_LE(rel(a, b, floor), 1e-4) << solver.params()[k].name;
  }
}

TEST(Backprop, MemoryGrowsWithStepsOnlyWhenCached) {
  Rng rng(5);
  std::map<std::pair<std::size_t, int>, std::size_t> peak;
  Grid<float> truth;
  auto in = random_scene<float>(rng, 32, 0.05, truth);
  for (std::size_t T : {1, 2, 3}) {
    Solver<float> solver(tiny_config(T));
    solver.initialize(rng);
    for (int m = 0; m < 2; ++m) {
      MemoryLedger ledger;
      backprop(solver, in, truth, m ? BackpropMode::Cached : BackpropMode::Invertible, &ledger);
      peak[{T, m}] = ledger.peak_bytes();
    }
  }
  EXPECT_LT(peak.at({1, 1}), peak.at({2, 1}));
  EXPECT_LT(peak.at({2, 1}), peak.at({3, 1}));
  EXPECT_LE(peak.at({1, 0}), peak.at({2, 0}));
  EXPECT_LE(peak.at({2, 0}), peak.at({3, 0}));
  EXPECT_LE(double(peak.at({3, 0})) / double(peak.at({1, 0})), 1.4);
  EXPECT_GE(double(peak.at({3, 1})) / double(peak.at({1, 1})), 2.5);
}

TEST(Split, HoldsOutTrailingScenes) {
  auto s = split_scenes(20, 0.1);
  EXPECT_EQ(s.train.size(), 18u);
  EXPECT_EQ(s.test, (std::vector<std::size_t>{18, 19}));
  EXPECT_EQ(split_scenes(1, 0.1).train.size(), 1u);
}

TEST(Train, ModesGiveMatchingLossesAndRunsRepeat) {
  auto scenes = synthetic_scenes(6, 32, 11);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 2;
  cfg.lr = 1e-3;
  cfg.test_fraction = 0.2;
  std::vector<std::vector<double>> losses;
  for (BackpropMode m : {BackpropMode::Cached, BackpropMode::Invertible, BackpropMode::Invertible}) {
    Solver<float> solver(tiny_config());
    Rng init(7);
    solver.initialize(init);
    cfg.mode = m;
    std::ostringstream log;
    auto rep = train(solver, scenes, cfg, &log);
    losses.push_back(rep.batch_losses);
    EXPECT_EQ(rep.epochs.size(), 2u);
    EXPECT_NE(log.str().find("\"mode\":\"" + std::string(backprop_mode_name(m)) + "\""), std::string::npos);
  }
  ASSERT_EQ(losses[0].size(), 4u);  // 4 train scenes, batches of 2, 2 epochs
  for (std::size_t i = 0; i < losses[0].size(); ++i) {
    EXPECT_LE(std::abs(losses[1][i] - losses[0][i]) / losses[0][i], 1e-4) << i;
  }
  EXPECT_EQ(losses[1], losses[2]);
}

TEST(Train, LossDecreasesOverFiveEpochs) {
  auto scenes = synthetic_scenes(20, 64, 12);
  TrainConfig cfg;
  cfg.epochs = 5;
  cfg.lr = 1e-3;
  Solver<float> solver(SolverConfig{});
  Rng init(8);
  solver.initialize(init);
  auto rep = train(solver, scenes, cfg);
  EXPECT_LT(rep.epochs.back().loss, rep.epochs.front().loss);
  for (const auto& e : rep.epochs) EXPECT_EQ(e.drift_flags, 0u);
}

TEST(Train, RejectsBadConfig) {
  TrainConfig cfg;
  cfg.milestones = {0.9, 0.5};
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = {};
  cfg.lr = 0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
}
