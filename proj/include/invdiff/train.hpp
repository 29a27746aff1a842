#pragma once

// End-to-end training of the unrolled sampler. Two exact backprop strategies:
//   Cached:     keep every sampler state, every F_t and full U-Net tapes.
//   Invertible: keep only the terminal state; walk back with step_inverse,
//               rerunning each U-Net with a boundary-only cache.
// Memory is accounted in a MemoryLedger as saved-for-backward bytes.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <numeric>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "invdiff/dataset.hpp"
#include "invdiff/grid.hpp"
#include "invdiff/ledger.hpp"
#include "invdiff/measurement.hpp"
#include "invdiff/rng.hpp"
#include "invdiff/sampler.hpp"
#include "json.hpp"

namespace invdiff {

enum class BackpropMode { Cached, Invertible };

inline const char* backprop_mode_name(BackpropMode m) {
  return m == BackpropMode::Cached ? "cached" : "invertible";
}

inline BackpropMode parse_backprop_mode(const std::string& s) {
  if (s == "cached") return BackpropMode::Cached;
  if (s == "invertible") return BackpropMode::Invertible;
  throw std::invalid_argument("unknown backprop mode '" + s + "' (expected cached or invertible)");
}

template <class S>
struct L1Result {
  double loss = 0.0;
  Grid<S> grad;  // sign(pred - target) / (h w)
};

template <class S>
L1Result<S> l1_loss(const Grid<S>& pred, const Grid<S>& target) {
  pred.require_same(target, "l1_loss");
  L1Result<S> r{0.0, Grid<S>(pred.shape())};
  const double n = double(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = double(pred[i]) - double(target[i]);
    r.loss += std::abs(d);
    r.grad[i] = S(d > 0 ? 1.0 / n : d < 0 ? -1.0 / n : 0.0);
  }
  r.loss /= n;
  return r;
}

struct AdamConfig {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

template <class S>
class Adam {
 public:
  explicit Adam(const ParamStore<S>& store, AdamConfig cfg = {}) : cfg_(cfg) {
    for (const auto& p : store) {
      m_.emplace_back(p->size(), 0.0);
      v_.emplace_back(p->size(), 0.0);
    }
  }

  std::size_t step_count() const { return steps_; }

  void step(ParamStore<S>& store, double lr) {
    if (store.size() != m_.size()) throw std::invalid_argument("Adam: parameter layout changed");
    ++steps_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, double(steps_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, double(steps_));
    for (std::size_t k = 0; k < store.size(); ++k) {
      auto& p = store[k];
      if (p.size() != m_[k].size()) throw std::invalid_argument("Adam: shape of " + p.name + " changed");
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double g = double(p.grad[i]);
        m_[k][i] = cfg_.beta1 * m_[k][i] + (1.0 - cfg_.beta1) * g;
        v_[k][i] = cfg_.beta2 * v_[k][i] + (1.0 - cfg_.beta2) * g * g;
        const double mh = m_[k][i] / c1, vh = v_[k][i] / c2;
        p.value[i] = S(double(p.value[i]) - lr * mh / (std::sqrt(vh) + cfg_.eps));
      }
    }
  }

 private:
  AdamConfig cfg_;
  std::size_t steps_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// lr * decay^(number of milestone epochs reached); milestones are fractions
// of the total epoch count.
inline double multistep_lr(double base, std::size_t epoch, std::size_t total_epochs,
                           const std::vector<double>& milestones, double decay) {
  double lr = base;
  for (double f : milestones)
    if (double(epoch) >= std::round(f * double(total_epochs))) lr *= decay;
  return lr;
}

struct BackpropResult {
  double loss = 0.0;
  double drift = 0.0;        // max relative error of reconstructed h vs forward
  bool drift_flagged = false;
};

inline constexpr double kDriftLimit = 1e-3;

namespace detail {

template <class S>
Saved<S> keep_state(MemoryLedger* ledger, const Grid<S>& g) {
  return Saved<S>(ledger, MemTag::StepState, g);
}

// One step's contribution given (g_x, g_h) at state t-1; returns the pair at t.
template <class S>
void step_backward(const Solver<S>& solver, std::size_t t, const SceneInput<S>& in, UNetTape<S>& tape,
                   const Grid<S>& h_t, const Grid<S>& f_t, Grid<S>& g_x, Grid<S>& g_h,
                   StepScalars<S>& scalars) {
  const S v = scalars.v(t);
  Grid<S> gf = (S(1) - v) * g_x;
  double gv = 0.0;
  for (std::size_t i = 0; i < g_x.size(); ++i) gv += double(g_x[i]) * (double(h_t[i]) - double(f_t[i]));
  scalars.add_mix_grad(t, S(gv));
  Grid<S> gx_t = solver.step_operator_backward(tape, gf, t, in);
  gx_t += g_h;
  g_h = v * g_x;
  g_x = std::move(gx_t);
}

}  // namespace detail

// Loss and parameter gradients for one example. Gradients are accumulated
// (scaled by `grad_scale`) into the solver's parameter store.
template <class S>
BackpropResult backprop(Solver<S>& solver, const SceneInput<S>& in, const Grid<S>& target,
                        BackpropMode mode, MemoryLedger* ledger = nullptr, double grad_scale = 1.0,
                        bool self_check = false) {
  const std::size_t T = solver.steps();
  StepScalars<S>& scalars = solver.scalars();
  BackpropResult res;

  SamplerState<S> s0 = solver.init_state(in);
  std::vector<Saved<S>> xs, hs, fs;  // Cached: indexed by t
  std::vector<UNetTape<S>> tapes(T + 1);
  std::vector<Grid<S>> forward_h;    // self-check copies, not charged
  Saved<S> term_x, term_h;

  if (mode == BackpropMode::Cached) {
    xs.resize(T + 1);
    hs.resize(T + 1);
    fs.resize(T + 1);
    xs[T] = detail::keep_state(ledger, s0.x_hat);
    hs[T] = detail::keep_state(ledger, s0.h_aux);
    SamplerState<S> s = std::move(s0);
    for (std::size_t t = T; t >= 1; --t) {
      Grid<S> f;
      s = solver.step_forward(s, in, CacheMode::CacheAll, &tapes[t], ledger, &f);
      fs[t] = detail::keep_state(ledger, f);
      xs[t - 1] = detail::keep_state(ledger, s.x_hat);
      hs[t - 1] = detail::keep_state(ledger, s.h_aux);
    }
    s0 = std::move(s);
  } else {
    if (self_check) forward_h.resize(T + 1);
    SamplerState<S> s = std::move(s0);
    if (self_check) forward_h[T] = s.h_aux;
    for (std::size_t t = T; t >= 1; --t) {
      s = solver.step_forward(s, in);
      if (self_check) forward_h[t - 1] = s.h_aux;
    }
    term_x = detail::keep_state(ledger, s.x_hat);
    term_h = detail::keep_state(ledger, s.h_aux);
    s0 = std::move(s);
  }

  Grid<S> out = solver.fuse_output(s0);
  auto l1 = l1_loss(out, target);
  res.loss = l1.loss;
  Grid<S> g_x = S(grad_scale) * l1.grad;
  Grid<S> g_h = scalars.fuse_scale() * g_x;
  scalars.add_fuse_scale_grad(S(dot(g_x, s0.h_aux)));

  if (mode == BackpropMode::Cached) {
    s0 = {};
    for (std::size_t t = 1; t <= T; ++t) {
      detail::step_backward(solver, t, in, tapes[t], hs[t].get(), fs[t].get(), g_x, g_h, scalars);
      fs[t].reset();
      xs[t - 1].reset();
      hs[t - 1].reset();
    }
    xs[T].reset();
    hs[T].reset();
  } else {
    s0 = {};
    SamplerState<S> cur{term_x.take(), term_h.take(), 0};
    Saved<S> cur_x = detail::keep_state(ledger, cur.x_hat), cur_h = detail::keep_state(ledger, cur.h_aux);
    for (std::size_t t = 1; t <= T; ++t) {
      UNetTape<S> tape;
      Grid<S> f;
      SamplerState<S> prev = solver.step_inverse(cur, in, CacheMode::CacheBoundary, &tape, ledger, &f);
      Saved<S> px = detail::keep_state(ledger, prev.x_hat), ph = detail::keep_state(ledger, prev.h_aux);
      Saved<S> kept_f = detail::keep_state(ledger, f);
      cur = {};
      cur_x.reset();
      cur_h.reset();
      if (self_check) {
        const double drift = rel_error(prev.h_aux, forward_h[t]);
        res.drift = std::max(res.drift, drift);
      }
      detail::step_backward(solver, t, in, tape, prev.h_aux, f, g_x, g_h, scalars);
      kept_f.reset();
      cur = std::move(prev);
      cur_x = std::move(px);
      cur_h = std::move(ph);
    }
    res.drift_flagged = res.drift > kDriftLimit;
  }
  scalars.add_init_scale_grad(S(dot(g_h, in.backproj)));
  return res;
}

struct TrainConfig {
  double lr = 1e-4;
  std::vector<double> milestones{0.62, 0.95};
  double decay = 0.1;
  std::size_t batch_size = 1;
  std::size_t epochs = 40;
  BackpropMode mode = BackpropMode::Invertible;
  double mask_ratio = 0.05;
  double noise_sigma = 0.0;
  double test_fraction = 0.1;
  std::uint64_t seed = 1;
  std::size_t drift_check_every = 50;

  void validate() const {
    if (!(lr > 0)) throw std::invalid_argument("TrainConfig: lr must be positive");
    for (std::size_t i = 0; i < milestones.size(); ++i) {
      if (!(milestones[i] > 0 && milestones[i] <= 1) || (i > 0 && !(milestones[i] > milestones[i - 1]))) {
        throw std::invalid_argument("TrainConfig: milestones must be increasing fractions in (0, 1]");
      }
    }
    if (batch_size == 0) throw std::invalid_argument("TrainConfig: batch_size must be positive");
    if (epochs == 0) throw std::invalid_argument("TrainConfig: epochs must be positive");
    if (!(mask_ratio > 0 && mask_ratio <= 1)) throw std::invalid_argument("TrainConfig: mask_ratio must be in (0, 1]");
    if (!(test_fraction >= 0 && test_fraction < 1)) throw std::invalid_argument("TrainConfig: test_fraction must be in [0, 1)");
  }
};

// Stream labels for derived generators.
enum : std::uint64_t { kInitStream = 1, kTrainMaskStream = 2, kTestMaskStream = 3, kShuffleStream = 4, kNoiseStream = 5 };

struct Split {
  std::vector<std::size_t> train, test;
};

// The last ceil(fraction * n) scenes are held out.
inline Split split_scenes(std::size_t n, double test_fraction) {
  std::size_t n_test = std::size_t(std::ceil(test_fraction * double(n)));
  if (n_test >= n) n_test = n > 1 ? n - 1 : 0;
  Split s;
  for (std::size_t i = 0; i < n; ++i) (i < n - n_test ? s.train : s.test).push_back(i);
  return s;
}

inline MeasurementOp train_mask(std::uint64_t seed, std::size_t epoch, std::size_t scene, std::size_t h,
                                std::size_t w, double ratio) {
  Rng rng = Rng(seed).derive(kTrainMaskStream).derive(epoch).derive(scene);
  return make_mask(rng, h, w, ratio);
}

inline MeasurementOp test_mask(std::uint64_t seed, std::size_t scene, std::size_t h, std::size_t w, double ratio) {
  Rng rng = Rng(seed).derive(kTestMaskStream).derive(scene);
  return make_mask(rng, h, w, ratio);
}

template <class S>
SceneInput<S> observe_scene(const LoadedScene<S>& sc, const MeasurementOp& op, double noise_sigma, Rng noise) {
  std::vector<S> y = apply_A(op, sc.cgm);
  add_measurement_noise(y, noise, noise_sigma);
  return SceneInput<S>(op, std::move(y), sc.env);
}

struct EpochSummary {
  std::size_t epoch = 0;
  double loss = 0.0;           // mean training loss over the epoch
  double test_loss = -1.0;     // mean L1 on held-out scenes, -1 when there are none
  double wall_ms = 0.0;
  std::size_t peak_bytes = 0;  // ledger peak over the epoch
  double max_drift = 0.0;
  std::size_t drift_flags = 0;
  double lr = 0.0;
};

struct TrainReport {
  std::vector<EpochSummary> epochs;
  std::vector<double> batch_losses;
};

// Mean L1 loss of the solver on the given scenes with fixed test masks.
template <class S>
double held_out_loss(const Solver<S>& solver, const std::vector<LoadedScene<S>>& scenes,
                     const std::vector<std::size_t>& idx, const TrainConfig& cfg) {
  if (idx.empty()) return -1.0;
  double total = 0.0;
  for (std::size_t i : idx) {
    const auto& sc = scenes[i];
    auto op = test_mask(cfg.seed, i, sc.cgm.h(), sc.cgm.w(), cfg.mask_ratio);
    auto in = observe_scene(sc, op, cfg.noise_sigma, Rng(cfg.seed).derive(kNoiseStream).derive(i));
    total += l1_loss(solver.solve(in), sc.cgm).loss;
  }
  return total / double(idx.size());
}

// Runs cfg.epochs epochs over the training split. One JSON object per batch
// and per epoch is written to `log` when given.
template <class S>
TrainReport train(Solver<S>& solver, const std::vector<LoadedScene<S>>& scenes, const TrainConfig& cfg,
                  std::ostream* log = nullptr,
                  const std::function<void(const EpochSummary&)>& on_epoch = {}) {
  cfg.validate();
  if (scenes.empty()) throw std::invalid_argument("train: no scenes");
  const Split split = split_scenes(scenes.size(), cfg.test_fraction);
  Adam<S> adam(solver.params());
  MemoryLedger ledger;
  TrainReport report;
  std::size_t global_batch = 0;
  const char* mode = backprop_mode_name(cfg.mode);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const double lr = multistep_lr(cfg.lr, epoch, cfg.epochs, cfg.milestones, cfg.decay);
    std::vector<std::size_t> order = split.train;
    Rng shuffle = Rng(cfg.seed).derive(kShuffleStream).derive(epoch);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);

    ledger.reset_peak();
    EpochSummary sum;
    sum.epoch = epoch;
    sum.lr = lr;
    double loss_total = 0.0;
    for (std::size_t b0 = 0, batch = 0; b0 < order.size(); b0 += cfg.batch_size, ++batch, ++global_batch) {
      const auto tb = std::chrono::steady_clock::now();
      const std::size_t b1 = std::min(order.size(), b0 + cfg.batch_size);
      const double scale = 1.0 / double(b1 - b0);
      const bool check = cfg.mode == BackpropMode::Invertible && cfg.drift_check_every > 0 &&
                         global_batch % cfg.drift_check_every == 0;
      solver.params().zero_grad();
      double batch_loss = 0.0;
      for (std::size_t k = b0; k < b1; ++k) {
        const std::size_t i = order[k];
        const auto& sc = scenes[i];
        auto op = train_mask(cfg.seed, epoch, i, sc.cgm.h(), sc.cgm.w(), cfg.mask_ratio);
        auto in = observe_scene(sc, op, cfg.noise_sigma, Rng(cfg.seed).derive(kNoiseStream).derive(epoch).derive(i));
        auto r = backprop(solver, in, sc.cgm, cfg.mode, &ledger, scale, check);
        if (!std::isfinite(r.loss)) {
          throw std::runtime_error("train: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                                   std::to_string(batch) + ", scene " + sc.id);
        }
        batch_loss += r.loss * scale;
        sum.max_drift = std::max(sum.max_drift, r.drift);
        if (r.drift_flagged) ++sum.drift_flags;
      }
      adam.step(solver.params(), lr);
      loss_total += batch_loss * double(b1 - b0);
      report.batch_losses.push_back(batch_loss);
      if (log) {
        nlohmann::json j{{"epoch", epoch},
                         {"batch", batch},
                         {"loss", batch_loss},
                         {"peak_bytes", ledger.peak_bytes()},
                         {"live_bytes", ledger.live_bytes()},
                         {"wall_ms", std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - tb).count()},
                         {"mode", mode}};
        if (check) j["drift"] = sum.max_drift;
        *log << j.dump() << "\n";
      }
    }
    sum.loss = loss_total / double(order.size());
    sum.peak_bytes = ledger.peak_bytes();
    sum.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    sum.test_loss = held_out_loss(solver, scenes, split.test, cfg);
    if (log) {
      *log << nlohmann::json{{"epoch", epoch},
                             {"batch", "epoch"},
                             {"loss", sum.loss},
                             {"test_loss", sum.test_loss},
                             {"peak_bytes", sum.peak_bytes},
                             {"live_bytes", ledger.live_bytes()},
                             {"wall_ms", sum.wall_ms},
                             {"mode", mode},
                             {"lr", lr},
                             {"drift_flags", sum.drift_flags}}
                  .dump()
           << "\n";
      log->flush();
    }
    report.epochs.push_back(sum);
    if (on_epoch) on_epoch(sum);
  }
  return report;
}

struct MembenchRow {
  std::size_t steps = 0;
  std::size_t invertible_bytes = 0;
  std::size_t cached_bytes = 0;
  double reduction_pct = 0.0;
};

struct MembenchReport {
  std::vector<MembenchRow> rows;
  double invertible_ms = 0.0;  // mean per-example backprop time at the largest T
  double cached_ms = 0.0;
  double time_ratio() const { return cached_ms > 0 ? invertible_ms / cached_ms : 0.0; }
};

// Ledger peaks of one training example per (T, mode) on a synthetic scene,
// plus per-example wall time of both modes at the largest T.
template <class S>
MembenchReport membench(const UNetConfig& unet, const std::vector<std::size_t>& steps, std::size_t size,
                        std::uint64_t seed, double mask_ratio = 0.05, std::size_t timing_reps = 3) {
  MembenchReport rep;
  const auto sample = make_scene_sample(Rng(seed), 0, size, size);
  LoadedScene<S> sc{"bench", sample.cgm.template cast<S>(), sample.env.template cast<S>()};
  Rng mrng = Rng(seed).derive(kTestMaskStream);
  const auto op = make_mask(mrng, size, size, mask_ratio);
  const auto in = observe_scene(sc, op, 0.0, Rng(seed));
  for (std::size_t T : steps) {
    Solver<S> solver(SolverConfig{unet, Schedule::with_steps(T)});
    Rng init = Rng(seed).derive(kInitStream);
    solver.initialize(init);
    MembenchRow row;
    row.steps = T;
    for (BackpropMode m : {BackpropMode::Invertible, BackpropMode::Cached}) {
      MemoryLedger ledger;
      solver.params().zero_grad();
      backprop(solver, in, sc.cgm, m, &ledger);
      (m == BackpropMode::Cached ? row.cached_bytes : row.invertible_bytes) = ledger.peak_bytes();
    }
    row.reduction_pct = 100.0 * (1.0 - double(row.invertible_bytes) / double(row.cached_bytes));
    rep.rows.push_back(row);
    if (T == *std::max_element(steps.begin(), steps.end()) && timing_reps > 0) {
      for (BackpropMode m : {BackpropMode::Cached, BackpropMode::Invertible}) {
        const auto t0 = std::chrono::steady_clock::now();
        for (std::size_t r = 0; r < timing_reps; ++r) backprop(solver, in, sc.cgm, m, nullptr);
        const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count() /
                          double(timing_reps);
        (m == BackpropMode::Cached ? rep.cached_ms : rep.invertible_ms) = ms;
      }
    }
  }
  return rep;
}

inline std::string membench_table(const MembenchReport& r) {
  std::string s = "  T   invertible_bytes   cached_bytes   reduction_%\n";
  char line[128];
  for (const auto& row : r.rows) {
    std::snprintf(line, sizeof line, "%3zu   %16zu   %12zu   %11.2f\n", row.steps, row.invertible_bytes,
                  row.cached_bytes, row.reduction_pct);
    s += line;
  }
  std::snprintf(line, sizeof line, "time per example: invertible %.1f ms, cached %.1f ms, ratio %.3f\n",
                r.invertible_ms, r.cached_ms, r.time_ratio());
  return s + line;
}

inline nlohmann::json membench_json(const MembenchReport& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : r.rows) {
    rows.push_back({{"T", row.steps},
                    {"invertible_bytes", row.invertible_bytes},
                    {"cached_bytes", row.cached_bytes},
                    {"reduction_pct", row.reduction_pct}});
  }
  return {{"rows", rows},
          {"invertible_ms", r.invertible_ms},
          {"cached_ms", r.cached_ms},
          {"time_ratio", r.time_ratio()}};
}

}  // namespace invdiff
