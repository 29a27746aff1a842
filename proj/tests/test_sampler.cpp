#include <gtest/gtest.h>

#include "invdiff/gradcheck.hpp"
#include "invdiff/sampler.hpp"
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
SceneInput<S> random_scene(Rng& rng, std::size_t n, double ratio, Grid<S>* truth_out = nullptr) {
  auto truth = random_grid<S>(rng, n, n, 1);
  auto op = make_mask(rng, n, n, ratio);
  auto in = SceneInput<S>::observe(op, truth, random_grid<S>(rng, n, n, 2));
  if (truth_out) *truth_out = truth;
  return in;
}

template <class S>
void perturb_scalars(Solver<S>& solver, Rng& rng) {
  for (auto& v : solver.scalars().mix_logit().value.data) v = S(rng.uniform(-2, 2));
  solver.scalars().init_scale_param().value[0] = S(rng.uniform(0.5, 1.5));
  solver.scalars().fuse_scale_param().value[0] = S(rng.uniform(0.5, 1.5));
}

}  // namespace

TEST(Schedule, DefaultIsValidAndViolationsRejected) {
  Schedule s;
  EXPECT_NO_THROW(s.validate());
  EXPECT_EQ(s.steps(), 3u);
  EXPECT_THROW((Schedule{{1.0, 0.5, 0.5}}.validate()), std::invalid_argument);
  EXPECT_THROW((Schedule{{0.9, 0.5}}.validate()), std::invalid_argument);
  EXPECT_THROW((Schedule{{1.0, 0.0}}.validate()), std::invalid_argument);
  EXPECT_THROW((Schedule{{1.0}}.validate()), std::invalid_argument);
  EXPECT_EQ(Schedule::with_steps(1).alpha_bar, (std::vector<double>{1.0, 0.75}));
  EXPECT_NO_THROW(Schedule::with_steps(6));
  SolverConfig bad = tiny_config();
  bad.schedule.alpha_bar = {1.0, 0.3, 0.6};
  EXPECT_THROW(Solver<double>{bad}, std::invalid_argument);
}

TEST(EstimateX0, HandValues) {
  auto x = Grid<double>::from(1, 1, 1, {1.0});
  auto e = Grid<double>::from(1, 1, 1, {0.5});
  EXPECT_NEAR(estimate_x0(x, e, 0.25)[0], (1.0 - std::sqrt(0.75) * 0.5) / 0.5, 1e-15);
  EXPECT_NEAR(estimate_x0(x, e, 0.25)[0], 1.1340, 1e-4);
  EXPECT_EQ(estimate_x0(x, e, 1.0)[0], 1.0);
  EXPECT_EQ(estimate_x0(x, Grid<double>(1, 1, 1), 0.25)[0], 2.0);
  EXPECT_THROW(estimate_x0(x, e, 0.0), std::invalid_argument);
}

TEST(DdimUpdate, HandValues) {
  auto x0 = Grid<double>::from(1, 1, 1, {1.134});
  auto e = Grid<double>::from(1, 1, 1, {0.5});
  EXPECT_NEAR(ddim_update(x0, e, 0.75)[0], 1.2320, 1e-4);
  EXPECT_EQ(ddim_update(x0, e, 1.0)[0], 1.134);
  EXPECT_EQ(ddim_update(x0, Grid<double>(1, 1, 1), 0.25)[0], 0.5 * 1.134);
}

TEST(InitState, BackProjectionStart) {
  Rng rng(1);
  Solver<double> solver(tiny_config());
  solver.initialize(rng);
  Grid<double> truth;
  auto full = random_scene<double>(rng, 16, 1.0, &truth);
  auto s = solver.init_state(full);
  EXPECT_EQ(s.t, 3u);
  EXPECT_EQ(s.x_hat, truth);
  EXPECT_EQ(s.h_aux, s.x_hat);
  auto op = make_mask(rng, 16, 16, 0.2);
  SceneInput<double> zero(op, std::vector<double>(op.m(), 0.0), Grid<double>(16, 16, 2));
  auto z = solver.init_state(zero);
  EXPECT_EQ(max_abs(z.x_hat), 0.0);
  EXPECT_EQ(max_abs(z.h_aux), 0.0);
}

TEST(StepOperator, FullMeasurementFinalStepReturnsTruth) {
  Rng rng(2);
  Solver<double> solver(tiny_config());
  solver.initialize(rng);
  randomize(solver.params(), rng, 0.2);
  Grid<double> truth;
  auto in = random_scene<double>(rng, 16, 1.0, &truth);
  EXPECT_EQ(solver.step_operator(random_grid(rng, 16, 16, 1), 1, in), truth);
  EXPECT_THROW(solver.step_operator(truth, 0, in), std::invalid_argument);
  EXPECT_THROW(solver.step_operator(truth, 4, in), std::invalid_argument);
}

TEST(StepOperator, FinalStepIsDataConsistent) {
  Rng rng(3);
  Solver<float> solver(tiny_config());
  solver.initialize(rng);
  randomize(solver.params(), rng, 0.2);
  auto in = random_scene<float>(rng, 16, 0.1);
  auto f = solver.step_operator(random_grid<float>(rng, 16, 16, 1), 1, in);
  auto af = apply_A(in.op, f);
  for (std::size_t k = 0; k < af.size(); ++k) EXPECT_NEAR(af[k], in.y[k], 1e-6);
  EXPECT_EQ(solver.step_operator(in.backproj, 2, in), solver.step_operator(in.backproj, 2, in));
}

TEST(StepForward, AuxiliaryCopyAndMixFloor) {
  Rng rng(4);
  Solver<double> solver(tiny_config());
  solver.initialize(rng);
  randomize(solver.params(), rng, 0.2);
  auto in = random_scene<double>(rng, 16, 0.1);
  SamplerState<double> s{random_grid(rng, 16, 16, 1), random_grid(rng, 16, 16, 1), 2};
  auto next = solver.step_forward(s, in);
  EXPECT_EQ(next.h_aux, s.x_hat);
  EXPECT_EQ(next.t, 1u);
  solver.scalars().mix_logit().value[0] = -60.0;
  auto h = random_grid(rng, 4, 4, 1);
  auto m = solver.mix(Grid<double>(4, 4, 1), h, 1);
  for (std::size_t i = 0; i < h.size(); ++i) EXPECT_NEAR(m[i], 0.05 * h[i], 1e-15);
  solver.scalars().reset();
  EXPECT_EQ(solver.scalars().v(2), 0.5);
}

TEST(StepInverse, RoundTripAcrossSteps) {
  Rng rng(5);
  Solver<double> solver(tiny_config());
  randomize(solver.params(), rng, 0.2);
  perturb_scalars(solver, rng);
  for (int trial = 0; trial < 3; ++trial) {
    auto in = random_scene<double>(rng, 16, 0.1);
    for (std::size_t t = 1; t <= 3; ++t) {
      SamplerState<double> s{random_grid(rng, 16, 16, 1), random_grid(rng, 16, 16, 1), t};
      auto back = solver.step_inverse(solver.step_forward(s, in), in);
      EXPECT_EQ(back.t, t);
      EXPECT_EQ(back.x_hat, s.x_hat);
      EXPECT_LE(rel_error(back.h_aux, s.h_aux), 1e-10);
    }
  }
}

TEST(StepInverse, FloatRoundTrip) {
  Rng rng(6);
  Solver<float> solver(tiny_config());
  randomize(solver.params(), rng, 0.2);
  perturb_scalars(solver, rng);
  auto in = random_scene<float>(rng, 16, 0.1);
  for (std::size_t t = 1; t <= 3; ++t) {
    SamplerState<float> s{random_grid<float>(rng, 16, 16, 1), random_grid<float>(rng, 16, 16, 1), t};
    auto back = solver.step_inverse(solver.step_forward(s, in), in);
    EXPECT_EQ(back.x_hat, s.x_hat);
    EXPECT_LE(rel_error(back.h_aux, s.h_aux), 1e-5);
  }
}

TEST(FuseOutput, ScaleCasesAndGradient) {
  Rng rng(7);
  Solver<double> solver(tiny_config());
  SamplerState<double> s{random_grid(rng, 4, 4, 1), random_grid(rng, 4, 4, 1), 0};
  EXPECT_EQ(solver.fuse_output(s), s.x_hat + s.h_aux);
  solver.scalars().fuse_scale_param().value[0] = 0.0;
  EXPECT_EQ(solver.fuse_output(s), s.x_hat);
  s.t = 1;
  EXPECT_THROW(solver.fuse_output(s), std::invalid_argument);
  s.t = 0;
  auto g = random_grid(rng, 4, 4, 1);
  std::vector<double> analytic{dot(s.h_aux, g)};
  auto& scale = solver.scalars().fuse_scale_param().value.data;
  auto loss = [&] { return dot(solver.fuse_output(s), g); };
  EXPECT_LE(finite_difference_check(scale, analytic, loss).rel_err, 1e-8);
}

TEST(Solve, DeterministicAndFullMeasurementProjection) {
  Rng rng(8);
  Solver<double> solver(tiny_config());
  solver.initialize(rng);
  randomize(solver.params(), rng, 0.2);
  Grid<double> truth;
  auto in = random_scene<double>(rng, 16, 1.0, &truth);
  Grid<double> last;
  auto a = solver.solve(in, &last);
  EXPECT_EQ(a, solver.solve(in));
  EXPECT_EQ(last, truth);
}

TEST(Solve, SingleStepSampledPixelsFollowMixAlgebra) {
  Rng rng(9);
  Solver<double> solver(tiny_config(1));
  solver.initialize(rng);
  perturb_scalars(solver, rng);
  auto in = random_scene<double>(rng, 16, 0.1);
  auto out = solver.solve(in);
  // Sampled cells: F_1 = y, h_1 = s_T y, h_0 = y.
  const double v = solver.scalars().v(1), sT = solver.scalars().init_scale(),
               s0 = solver.scalars().fuse_scale();
  auto ao = apply_A(in.op, out);
  for (std::size_t k = 0; k < ao.size(); ++k) {
    EXPECT_NEAR(ao[k], ((1 - v) + v * sT + s0) * in.y[k], 1e-5);
  }
}
