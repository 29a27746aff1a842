#pragma once

// Reconstruction quality metrics and dataset-level evaluation.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "invdiff/dataset.hpp"
#include "invdiff/grid.hpp"
#include "invdiff/measurement.hpp"
#include "invdiff/sampler.hpp"
#include "json.hpp"

namespace invdiff {

inline constexpr double kPsnrCap = 99.0;

struct SsimConfig {
  std::size_t window = 11;
  double sigma = 1.5;
  double k1 = 0.01, k2 = 0.03;
  double range = 1.0;
};

template <class S>
double mse(const Grid<S>& pred, const Grid<S>& target) {
  pred.require_same(target, "mse");
  if (pred.size() == 0) throw std::invalid_argument("mse: empty grid");
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = double(pred[i]) - double(target[i]);
    acc += d * d;
  }
  return acc / double(pred.size());
}

template <class S>
double rmse(const Grid<S>& pred, const Grid<S>& target) {
  return std::sqrt(mse(pred, target));
}

// Capped at kPsnrCap so identical inputs give a finite value.
template <class S>
double psnr(const Grid<S>& pred, const Grid<S>& target, double x_max = 1.0) {
  if (!(x_max > 0)) throw std::invalid_argument("psnr: x_max must be positive");
  const double m = mse(pred, target);
  if (m == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(x_max * x_max / m));
}

template <class S>
double nmse(const Grid<S>& pred, const Grid<S>& target) {
  pred.require_same(target, "nmse");
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = double(pred[i]) - double(target[i]);
    num += d * d;
    den += double(target[i]) * double(target[i]);
  }
  if (den == 0.0) throw std::invalid_argument("nmse: target has zero norm");
  return num / den;
}

inline std::vector<double> gaussian_window(std::size_t n, double sigma) {
  std::vector<double> w(n);
  const double mid = double(n - 1) / 2.0;
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    w[i] = std::exp(-(double(i) - mid) * (double(i) - mid) / (2.0 * sigma * sigma));
    total += w[i];
  }
  for (double& v : w) v /= total;
  return w;
}

// Mean SSIM over every position where the window fits entirely.
template <class S>
double ssim(const Grid<S>& pred, const Grid<S>& target, const SsimConfig& cfg = {}) {
  pred.require_same(target, "ssim");
  if (pred.c() != 1) throw std::invalid_argument("ssim: single-channel grids required, got " + pred.shape().str());
  const std::size_t n = cfg.window, h = pred.h(), w = pred.w();
  if (h < n || w < n) {
    throw std::invalid_argument("ssim: grid " + pred.shape().str() + " is smaller than the " + std::to_string(n) +
                                "x" + std::to_string(n) + " window");
  }
  const auto g = gaussian_window(n, cfg.sigma);
  const double c1 = (cfg.k1 * cfg.range) * (cfg.k1 * cfg.range);
  const double c2 = (cfg.k2 * cfg.range) * (cfg.k2 * cfg.range);
  const std::size_t oh = h - n + 1, ow = w - n + 1;

  // Separable filtering of x, y, x², y², xy: rows first, then columns.
  constexpr std::size_t kMaps = 5;
  std::array<std::vector<double>, kMaps> rows;
  for (auto& r : rows) r.assign(h * ow, 0.0);
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < ow; ++j) {
      std::array<double, kMaps> acc{};
      for (std::size_t k = 0; k < n; ++k) {
        const double x = double(pred.at(i, j + k)), y = double(target.at(i, j + k));
        acc[0] += g[k] * x;
        acc[1] += g[k] * y;
        acc[2] += g[k] * x * x;
        acc[3] += g[k] * y * y;
        acc[4] += g[k] * x * y;
      }
      for (std::size_t m = 0; m < kMaps; ++m) rows[m][i * ow + j] = acc[m];
    }
  }
  double total = 0.0;
  for (std::size_t i = 0; i < oh; ++i) {
    for (std::size_t j = 0; j < ow; ++j) {
      std::array<double, kMaps> f{};
      for (std::size_t k = 0; k < n; ++k)
        for (std::size_t m = 0; m < kMaps; ++m) f[m] += g[k] * rows[m][(i + k) * ow + j];
      const double mx = f[0], my = f[1];
      const double vx = f[2] - mx * mx, vy = f[3] - my * my, cov = f[4] - mx * my;
      total += ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
  }
  return total / double(oh * ow);
}

struct Metrics {
  double psnr = 0, ssim = 0, nmse = 0, rmse = 0;
};

template <class S>
Metrics compute_metrics(const Grid<S>& pred, const Grid<S>& target) {
  return {psnr(pred, target), ssim(pred, target), nmse(pred, target), rmse(pred, target)};
}

inline nlohmann::json metrics_json(const Metrics& m) {
  return {{"psnr_db", m.psnr}, {"ssim", m.ssim}, {"nmse", m.nmse}, {"rmse", m.rmse}};
}

struct SceneEval {
  std::string id;
  Metrics model, baseline;  // baseline = back-projection of the measurements
};

struct EvalReport {
  std::vector<SceneEval> scenes;
  Metrics mean_model, mean_baseline;

  double psnr_gain() const { return mean_model.psnr - mean_baseline.psnr; }

  nlohmann::json to_json() const {
    nlohmann::json per = nlohmann::json::array();
    for (const auto& s : scenes)
      per.push_back({{"id", s.id}, {"model", metrics_json(s.model)}, {"baseline", metrics_json(s.baseline)}});
    return {{"scenes", per},
            {"mean", {{"model", metrics_json(mean_model)}, {"baseline", metrics_json(mean_baseline)}}},
            {"psnr_gain_db", psnr_gain()}};
  }
};

namespace detail {

inline Metrics mean_of(const std::vector<SceneEval>& v, Metrics SceneEval::*field) {
  Metrics m;
  for (const auto& s : v) {
    const Metrics& x = s.*field;
    m.psnr += x.psnr;
    m.ssim += x.ssim;
    m.nmse += x.nmse;
    m.rmse += x.rmse;
  }
  const double n = double(v.size());
  m.psnr /= n;
  m.ssim /= n;
  m.nmse /= n;
  m.rmse /= n;
  return m;
}

}  // namespace detail

// Runs `reconstruct(SceneInput)` on each scene and scores it together with
// the back-projection baseline.
template <class S, class Reconstruct>
EvalReport evaluate(const std::vector<LoadedScene<S>>& scenes, const std::vector<MeasurementOp>& ops,
                    Reconstruct&& reconstruct) {
  if (scenes.size() != ops.size())
    throw std::invalid_argument("evaluate: " + std::to_string(scenes.size()) + " scenes but " +
                                std::to_string(ops.size()) + " masks");
  if (scenes.empty()) throw std::invalid_argument("evaluate: no scenes");
  EvalReport rep;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const auto& sc = scenes[i];
    if (ops[i].h() != sc.cgm.h() || ops[i].w() != sc.cgm.w())
      throw std::invalid_argument("evaluate: mask shape does not match scene " + sc.id);
    SceneInput<S> in = SceneInput<S>::observe(ops[i], sc.cgm, sc.env);
    const Grid<S> pred = reconstruct(in);
    rep.scenes.push_back({sc.id, compute_metrics(pred, sc.cgm), compute_metrics(in.backproj, sc.cgm)});
  }
  rep.mean_model = detail::mean_of(rep.scenes, &SceneEval::model);
  rep.mean_baseline = detail::mean_of(rep.scenes, &SceneEval::baseline);
  return rep;
}

// 8-bit binary PGM; values are mapped linearly from [lo, hi] and clamped.
template <class S>
void write_pgm(const std::filesystem::path& path, const Grid<S>& g, double lo = 0.0, double hi = 1.0) {
  if (g.c() != 1) throw std::invalid_argument("write_pgm: single-channel grid required");
  if (!(hi > lo)) throw std::invalid_argument("write_pgm: empty value range");
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  os << "P5\n" << g.w() << " " << g.h() << "\n255\n";
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double u = std::clamp((double(g[i]) - lo) / (hi - lo), 0.0, 1.0);
    os.put(char(std::uint8_t(std::lround(u * 255.0))));
  }
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

template <class S>
Grid<S> abs_error(const Grid<S>& pred, const Grid<S>& target) {
  pred.require_same(target, "abs_error");
  Grid<S> e(pred.shape());
  for (std::size_t i = 0; i < e.size(); ++i) e[i] = std::abs(pred[i] - target[i]);
  return e;
}

}  // namespace invdiff
