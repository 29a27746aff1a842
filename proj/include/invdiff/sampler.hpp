#pragma once

// Invertible iterative sampler. Each step predicts noise with the U-Net,
// forms the clean estimate, projects it onto the measurements and applies a
// deterministic DDIM update; an auxiliary stream makes the step invertible:
//   x_{t-1} = (1 - v_t) F_t(x_t) + v_t h_t,   h_{t-1} = x_t.

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "invdiff/grid.hpp"
#include "invdiff/layers.hpp"
#include "invdiff/measurement.hpp"
#include "invdiff/tensor.hpp"
#include "invdiff/unet.hpp"

namespace invdiff {

struct Schedule {
  std::vector<double> alpha_bar{1.0, 0.75, 0.35, 0.05};

  std::size_t steps() const { return alpha_bar.size() - 1; }

  void validate() const {
    if (alpha_bar.size() < 2) throw std::invalid_argument("Schedule: need at least one step");
    if (alpha_bar[0] != 1.0) throw std::invalid_argument("Schedule: alpha_bar[0] must be 1");
    for (std::size_t t = 0; t < alpha_bar.size(); ++t) {
      if (!(alpha_bar[t] > 0.0 && alpha_bar[t] <= 1.0)) {
        throw std::invalid_argument("Schedule: alpha_bar[" + std::to_string(t) + "] = " +
                                    std::to_string(alpha_bar[t]) + " is outside (0, 1]");
      }
      if (t > 0 && !(alpha_bar[t] < alpha_bar[t - 1])) {
        throw std::invalid_argument("Schedule: alpha_bar must be strictly decreasing (index " +
                                    std::to_string(t) + ")");
      }
    }
  }

  // The default schedule cut to T steps; beyond 3 steps, linear in t down to 0.05.
  static Schedule with_steps(std::size_t T) {
    static const std::vector<double> defaults{1.0, 0.75, 0.35, 0.05};
    Schedule s;
    if (T + 1 <= defaults.size()) {
      s.alpha_bar.assign(defaults.begin(), defaults.begin() + long(T + 1));
    } else {
      s.alpha_bar.resize(T + 1);
      for (std::size_t t = 0; t <= T; ++t) s.alpha_bar[t] = 1.0 - 0.95 * double(t) / double(T);
    }
    s.validate();
    return s;
  }
};

// (x - sqrt(1 - a) e) / sqrt(a)
template <class S>
Grid<S> estimate_x0(const Grid<S>& x_hat, const Grid<S>& eps, double alpha_bar) {
  if (!(alpha_bar > 0.0 && alpha_bar <= 1.0)) {
    throw std::invalid_argument("estimate_x0: alpha_bar " + std::to_string(alpha_bar) + " outside (0, 1]");
  }
  x_hat.require_same(eps, "estimate_x0");
  const S c = S(std::sqrt(1.0 - alpha_bar)), d = S(std::sqrt(alpha_bar));
  Grid<S> out(x_hat.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (x_hat[i] - c * eps[i]) / d;
  return out;
}

// sqrt(a) x0 + sqrt(1 - a) e
template <class S>
Grid<S> ddim_update(const Grid<S>& x0_bar, const Grid<S>& eps, double alpha_prev) {
  if (!(alpha_prev > 0.0 && alpha_prev <= 1.0)) {
    throw std::invalid_argument("ddim_update: alpha_bar " + std::to_string(alpha_prev) + " outside (0, 1]");
  }
  x0_bar.require_same(eps, "ddim_update");
  const S a = S(std::sqrt(alpha_prev)), b = S(std::sqrt(1.0 - alpha_prev));
  Grid<S> out(x0_bar.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * x0_bar[i] + b * eps[i];
  return out;
}

template <class S>
struct SamplerState {
  Grid<S> x_hat;
  Grid<S> h_aux;
  std::size_t t = 0;
};

inline constexpr double kMixFloor = 0.05;
inline constexpr double kMixSpan = 0.9;

// Learnable per-step mixing weights and the two output scales.
template <class S>
class StepScalars {
 public:
  StepScalars(ParamStore<S>& store, std::size_t T) {
    w_ = store.add("sampler.mix_logit", {T});
    s_init_ = store.add("sampler.init_scale", {1});
    s_out_ = store.add("sampler.fuse_scale", {1});
    reset();
  }

  void reset() {
    zero_values(*w_);
    s_init_->value[0] = S(1);
    s_out_->value[0] = S(1);
  }

  std::size_t steps() const { return w_->size(); }
  S v(std::size_t t) const { return S(kMixFloor + kMixSpan * double(sigmoid(w_->value.data.at(t - 1)))); }
  S dv_dw(std::size_t t) const {
    const double s = double(sigmoid(w_->value.data.at(t - 1)));
    return S(kMixSpan * s * (1.0 - s));
  }
  S init_scale() const { return s_init_->value[0]; }
  S fuse_scale() const { return s_out_->value[0]; }
  Param<S>& mix_logit() { return *w_; }
  Param<S>& init_scale_param() { return *s_init_; }
  Param<S>& fuse_scale_param() { return *s_out_; }

  void add_mix_grad(std::size_t t, S g) { w_->grad.data.at(t - 1) += g * dv_dw(t); }
  void add_init_scale_grad(S g) { s_init_->grad[0] += g; }
  void add_fuse_scale_grad(S g) { s_out_->grad[0] += g; }

 private:
  Param<S>* w_ = nullptr;
  Param<S>* s_init_ = nullptr;
  Param<S>* s_out_ = nullptr;
};

// Observed data for one scene.
template <class S>
struct SceneInput {
  MeasurementOp op;
  std::vector<S> y;
  Grid<S> env;
  Grid<S> backproj;

  SceneInput(MeasurementOp op_, std::vector<S> y_, Grid<S> env_)
      : op(std::move(op_)), y(std::move(y_)), env(std::move(env_)), backproj(apply_At(op, y)) {
    if (env.h() != op.h() || env.w() != op.w() || env.c() != 2) {
      throw std::invalid_argument("SceneInput: environment " + env.shape().str() +
                                  " does not match measurement grid " + std::to_string(op.h()) + "x" +
                                  std::to_string(op.w()));
    }
  }

  static SceneInput observe(const MeasurementOp& op, const Grid<S>& truth, Grid<S> env) {
    return SceneInput(op, apply_A(op, truth), std::move(env));
  }
};

struct SolverConfig {
  UNetConfig unet;
  Schedule schedule;
};

template <class S>
class Solver {
 public:
  explicit Solver(SolverConfig cfg)
      : cfg_(validated(std::move(cfg))), unet_(store_, cfg_.unet), scalars_(store_, cfg_.schedule.steps()) {}

  Solver(const Solver&) = delete;
  Solver& operator=(const Solver&) = delete;

  const SolverConfig& config() const { return cfg_; }
  const Schedule& schedule() const { return cfg_.schedule; }
  std::size_t steps() const { return cfg_.schedule.steps(); }
  ParamStore<S>& params() { return store_; }
  const ParamStore<S>& params() const { return store_; }
  UNet<S>& unet() { return unet_; }
  const UNet<S>& unet() const { return unet_; }
  StepScalars<S>& scalars() { return scalars_; }
  const StepScalars<S>& scalars() const { return scalars_; }

  void initialize(Rng& rng) {
    unet_.initialize(rng);
    scalars_.reset();
  }

  SamplerState<S> init_state(const SceneInput<S>& in) const {
    SamplerState<S> s{in.backproj, in.backproj, steps()};
    s.h_aux *= scalars_.init_scale();
    return s;
  }

  // F_t(x): noise prediction, clean estimate, projection, DDIM update.
  Grid<S> step_operator(const Grid<S>& x_hat, std::size_t t, const SceneInput<S>& in,
                        CacheMode mode = CacheMode::Infer, UNetTape<S>* tape = nullptr,
                        MemoryLedger* ledger = nullptr) const {
    check_step(t);
    Grid<S> eps = unet_.forward(x_hat, in.env, in.backproj, t, mode, tape, ledger);
    Grid<S> x0 = estimate_x0(x_hat, eps, cfg_.schedule.alpha_bar[t]);
    Grid<S> x0_bar = dc_project(in.op, x0, in.y);
    return ddim_update(x0_bar, eps, cfg_.schedule.alpha_bar[t - 1]);
  }

  // Vector-Jacobian product of F_t from its U-Net tape; accumulates parameter
  // gradients and returns d/dx_hat.
  Grid<S> step_operator_backward(UNetTape<S>& tape, const Grid<S>& g_out, std::size_t t,
                                 const SceneInput<S>& in) const {
    const double ab = cfg_.schedule.alpha_bar[t], ap = cfg_.schedule.alpha_bar[t - 1];
    const S a = S(std::sqrt(ap)), b = S(std::sqrt(1.0 - ap));
    const S c = S(std::sqrt(1.0 - ab)), d = S(std::sqrt(ab));
    Grid<S> g_x0bar = a * g_out;
    Grid<S> g_x0 = dc_project_backward(in.op, g_x0bar, S(1));
    Grid<S> g_eps(g_out.shape()), g_x(g_out.shape());
    for (std::size_t i = 0; i < g_out.size(); ++i) {
      g_eps[i] = b * g_out[i] - (c / d) * g_x0[i];
      g_x[i] = g_x0[i] / d;
    }
    g_x += unet_.backward(tape, g_eps);
    return g_x;
  }

  // Mixes F_t(x_t) with h_t; `f_out` receives F_t(x_t) when given.
  SamplerState<S> step_forward(const SamplerState<S>& s, const SceneInput<S>& in,
                               CacheMode mode = CacheMode::Infer, UNetTape<S>* tape = nullptr,
                               MemoryLedger* ledger = nullptr, Grid<S>* f_out = nullptr) const {
    check_step(s.t);
    Grid<S> f = step_operator(s.x_hat, s.t, in, mode, tape, ledger);
    SamplerState<S> next{mix(f, s.h_aux, s.t), s.x_hat, s.t - 1};
    if (f_out) *f_out = std::move(f);
    return next;
  }

  // Recovers the state at t from the state at t - 1.
  SamplerState<S> step_inverse(const SamplerState<S>& s, const SceneInput<S>& in,
                               CacheMode mode = CacheMode::Infer, UNetTape<S>* tape = nullptr,
                               MemoryLedger* ledger = nullptr, Grid<S>* f_out = nullptr) const {
    const std::size_t t = s.t + 1;
    check_step(t);
    Grid<S> f = step_operator(s.h_aux, t, in, mode, tape, ledger);
    const S v = scalars_.v(t);
    Grid<S> h(f.shape());
    for (std::size_t i = 0; i < h.size(); ++i) h[i] = (s.x_hat[i] - (S(1) - v) * f[i]) / v;
    SamplerState<S> prev{s.h_aux, std::move(h), t};
    if (f_out) *f_out = std::move(f);
    return prev;
  }

  Grid<S> fuse_output(const SamplerState<S>& s) const {
    if (s.t != 0) throw std::invalid_argument("fuse_output: state is at step " + std::to_string(s.t) + ", not 0");
    Grid<S> out = s.x_hat;
    out.axpy(scalars_.fuse_scale(), s.h_aux);
    return out;
  }

  // `last_step` receives F_1, the final data-consistent estimate, when given.
  Grid<S> solve(const SceneInput<S>& in, Grid<S>* last_step = nullptr) const {
    SamplerState<S> s = init_state(in);
    while (s.t > 0) s = step_forward(s, in, CacheMode::Infer, nullptr, nullptr, s.t == 1 ? last_step : nullptr);
    return fuse_output(s);
  }

  Grid<S> mix(const Grid<S>& f, const Grid<S>& h, std::size_t t) const {
    const S v = scalars_.v(t);
    Grid<S> out(f.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = (S(1) - v) * f[i] + v * h[i];
    return out;
  }

 private:
  static SolverConfig validated(SolverConfig cfg) {
    cfg.unet.validate();
    cfg.schedule.validate();
    return cfg;
  }

  void check_step(std::size_t t) const {
    if (t < 1 || t > steps()) {
      throw std::invalid_argument("sampler: step " + std::to_string(t) + " outside [1, " +
                                  std::to_string(steps()) + "]");
    }
  }

  SolverConfig cfg_;
  ParamStore<S> store_;
  UNet<S> unet_;
  StepScalars<S> scalars_;
};

}  // namespace invdiff
