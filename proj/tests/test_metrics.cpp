#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "invdiff/metrics.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace invdiff;
using invdiff::testing::oracle_mse;
using invdiff::testing::oracle_ssim;
using invdiff::testing::random_grid;

namespace {

Grid<double> uniform01(Rng& rng, std::size_t h, std::size_t w) {
  Grid<double> g(h, w, 1);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = rng.uniform(0, 1);
  return g;
}

}  // namespace

TEST(Psnr, IdenticalInputsAreCapped) {
  Rng rng(1);
  auto x = uniform01(rng, 8, 8);
  EXPECT_EQ(psnr(x, x), 99.0);
}

TEST(Psnr, ConstantErrorHandValue) {
  Grid<double> a(4, 4, 1), b(4, 4, 1);
  a.fill(0.5);
  b.fill(0.4);
  EXPECT_NEAR(mse(a, b), 0.01, 1e-15);
  EXPECT_NEAR(psnr(a, b), 20.0, 1e-12);
}

TEST(Psnr, DoublingNoiseCostsSixDecibels) {
  Rng rng(2);
  auto x = uniform01(rng, 16, 16);
  auto n = random_grid(rng, 16, 16, 1);
  Grid<double> a(x.shape()), b(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    a[i] = x[i] + 0.01 * n[i];
    b[i] = x[i] + 0.02 * n[i];
  }
  EXPECT_NEAR(psnr(a, x) - psnr(b, x), 20.0 * std::log10(2.0), 1e-10);
}

TEST(Psnr, RejectsBadInputs) {
  Grid<double> a(4, 4, 1), b(4, 5, 1);
  EXPECT_THROW(psnr(a, b), std::invalid_argument);
  EXPECT_THROW(psnr(a, a, 0.0), std::invalid_argument);
}

TEST(Metrics, MatchBruteForceOracles) {
  Rng rng(3);
  for (int rep = 0; rep < 5; ++rep) {
    auto x = uniform01(rng, 16, 16), y = uniform01(rng, 16, 16);
    const double m = oracle_mse(x, y);
    double tn = 0;
    for (std::size_t i = 0; i < y.size(); ++i) tn += y[i] * y[i];
    EXPECT_NEAR(mse(x, y), m, 1e-12);
    EXPECT_NEAR(psnr(x, y), 10 * std::log10(1.0 / m), 1e-8);
    EXPECT_NEAR(rmse(x, y), std::sqrt(m), 1e-12);
    EXPECT_NEAR(nmse(x, y), m * double(y.size()) / tn, 1e-12);
    EXPECT_NEAR(ssim(x, y), oracle_ssim(x, y), 1e-8);
  }
}

TEST(Ssim, IdentityInversionAndNoise) {
  Rng rng(4);
  auto x = uniform01(rng, 24, 20);
  EXPECT_NEAR(ssim(x, x), 1.0, 1e-9);
  Grid<double> inv(x.shape()), noisy(x.shape());
  auto n = random_grid(rng, 24, 20, 1);
  for (std::size_t i = 0; i < x.size(); ++i) {
    inv[i] = 1.0 - x[i];
    noisy[i] = x[i] + 0.05 * n[i];
  }
  EXPECT_LT(ssim(x, inv), ssim(x, x));
  EXPECT_NEAR(ssim(noisy, x), oracle_ssim(noisy, x), 1e-8);
  const double s = ssim(x, inv);
  EXPECT_GE(s, -1.0);
  EXPECT_LE(s, 1.0);
}

TEST(Ssim, RejectsSmallOrMultichannel) {
  Grid<double> small(10, 16, 1), multi(16, 16, 2);
  EXPECT_THROW(ssim(small, small), std::invalid_argument);
  EXPECT_THROW(ssim(multi, multi), std::invalid_argument);
}

TEST(Nmse, IdentitiesAndErrors) {
  Rng rng(5);
  auto x = uniform01(rng, 8, 8);
  EXPECT_EQ(nmse(x, x), 0.0);
  EXPECT_EQ(rmse(x, x), 0.0);
  Grid<double> twice(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) twice[i] = 2 * x[i];
  EXPECT_NEAR(nmse(twice, x), 1.0, 1e-12);
  auto y = uniform01(rng, 8, 8);
  EXPECT_NEAR(rmse(x, y) * rmse(x, y), mse(x, y), 1e-12);
  EXPECT_THROW(nmse(x, Grid<double>(8, 8, 1)), std::invalid_argument);
}

TEST(Metrics, ConstantShiftGivesSquaredMse) {
  Rng rng(6);
  auto x = uniform01(rng, 8, 8);
  Grid<double> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] + 0.3;
  EXPECT_NEAR(mse(y, x), 0.09, 1e-12);
}

TEST(Evaluate, OracleReconstructorAndMeans) {
  std::vector<LoadedScene<double>> scenes;
  std::vector<MeasurementOp> ops;
  Rng root(7);
  for (std::size_t i = 0; i < 3; ++i) {
    auto s = make_scene_sample(root, i, 16, 16);
    scenes.push_back({scene_id(i), s.cgm, s.env});
    Rng r = root.derive(100 + i);
    ops.push_back(make_mask(r, 16, 16, 0.1));
  }
  std::size_t k = 0;
  auto rep = evaluate(scenes, ops, [&](const SceneInput<double>&) { return scenes[k++].cgm; });
  ASSERT_EQ(rep.scenes.size(), 3u);
  EXPECT_EQ(rep.mean_model.psnr, 99.0);
  EXPECT_NEAR(rep.mean_model.ssim, 1.0, 1e-9);
  EXPECT_EQ(rep.mean_model.nmse, 0.0);
  double bp = 0;
  for (const auto& s : rep.scenes) bp += s.baseline.psnr;
  EXPECT_NEAR(rep.mean_baseline.psnr, bp / 3, 1e-12);
  EXPECT_LT(rep.mean_baseline.psnr, 99.0);
  EXPECT_NEAR(rep.psnr_gain(), 99.0 - rep.mean_baseline.psnr, 1e-12);
  auto again = evaluate(scenes, ops, [](const SceneInput<double>& in) { return in.backproj; });
  EXPECT_EQ(again.mean_model.psnr, again.mean_baseline.psnr);
  ops.pop_back();
  EXPECT_THROW(evaluate(scenes, ops, [](const SceneInput<double>& in) { return in.backproj; }),
               std::invalid_argument);
}

TEST(Pgm, WritesHeaderAndClampedBytes) {
  auto g = Grid<double>::from(1, 3, 1, {-0.5, 0.5, 2.0});
  auto path = std::filesystem::temp_directory_path() / "invdiff_metrics_test.pgm";
  write_pgm(path, g);
  std::ifstream is(path, std::ios::binary);
  std::string content((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  EXPECT_EQ(content, std::string("P5\n3 1\n255\n") + char(0) + char(128) + char(255));
  std::filesystem::remove(path);
}
