#pragma once

// Self-checks shared by the `gradcheck` / `roundtrip` commands and the
// acceptance suite: finite-difference gradient checks of every block,
// inversion round trips and cached-vs-invertible gradient equivalence.

#include <cmath>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "invdiff/blocks.hpp"
#include "invdiff/gradcheck.hpp"
#include "invdiff/layers.hpp"
#include "invdiff/sampler.hpp"
#include "invdiff/train.hpp"
#include "json.hpp"

namespace invdiff {

struct CheckRow {
  std::string name;
  std::size_t cases = 0;
  double max_err = 0.0;
  double tol = 0.0;
  std::string note;

  bool pass() const { return cases > 0 && std::isfinite(max_err) && max_err <= tol; }
  void record(double err) {
    ++cases;
    if (std::isnan(max_err)) return;  // NaN sticks
    if (!(err <= max_err)) max_err = err;
  }
};

struct CheckReport {
  std::vector<CheckRow> rows;

  bool pass() const {
    for (const auto& r : rows)
      if (!r.pass()) return false;
    return !rows.empty();
  }
  std::size_t cases() const {
    std::size_t n = 0;
    for (const auto& r : rows) n += r.cases;
    return n;
  }

  std::string table() const {
    std::string out;
    char line[256];
    std::snprintf(line, sizeof line, "%-34s %6s %12s %10s  %s\n", "check", "cases", "max_err", "tol", "result");
    out += line;
    for (const auto& r : rows) {
      std::snprintf(line, sizeof line, "%-34s %6zu %12.3e %10.1e  %s%s%s\n", r.name.c_str(), r.cases, r.max_err, r.tol,
                    r.pass() ? "pass" : "FAIL", r.note.empty() ? "" : "  ", r.note.c_str());
      out += line;
    }
    return out;
  }

  nlohmann::json json() const {
    nlohmann::json a = nlohmann::json::array();
    for (const auto& r : rows)
      a.push_back({{"check", r.name}, {"cases", r.cases}, {"max_err", r.max_err}, {"tol", r.tol}, {"pass", r.pass()}});
    return a;
  }
};

namespace checks {

template <class S>
Grid<S> noise(Rng& rng, std::size_t h, std::size_t w, std::size_t c, double scale = 1.0) {
  Grid<S> g(h, w, c);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = S(rng.uniform(-scale, scale));
  return g;
}

template <class S>
void randomize(ParamStore<S>& store, Rng& rng, double scale) {
  for (auto& p : store)
    for (auto& v : p->value.data) v = S(rng.uniform(-scale, scale));
}

// Worst relative error over all parameter tensors, probing at most
// `max_probes` random coordinates per tensor. Denominators are floored at
// 1e-3 of the overall numeric norm so tensors with an exactly zero gradient
// (a bias feeding a GroupNorm) are judged on absolute error.
inline double param_fd_error(ParamStore<double>& store, const std::function<double()>& loss, Rng& rng,
                             std::size_t max_probes = 16) {
  std::vector<FdResult> res;
  double total = 0.0;
  for (auto& p : store) {
    std::vector<std::size_t> probe;
    if (p->size() > max_probes)
      for (std::size_t k = 0; k < max_probes; ++k) probe.push_back(rng.below(p->size()));
    res.push_back(finite_difference_check(p->value.data, p->grad.data, loss, probe));
    total += res.back().numeric_norm * res.back().numeric_norm;
  }
  const double floor = 1e-3 * std::sqrt(total);
  double worst = 0.0;
  for (const auto& r : res) {
    const double diff = r.numeric_norm > 0 ? r.rel_err * r.numeric_norm : r.rel_err;
    const double den = std::max(r.numeric_norm, floor);
    worst = std::max(worst, den > 0 ? diff / den : diff);
  }
  return worst;
}

struct Context {
  std::vector<double> t_emb;
  Grid<double> backproj, env;
  BlockContext<double> view() const { return {t_emb, &backproj, &env}; }
};

inline Context random_context(Rng& rng, std::size_t h, std::size_t w) {
  Context c;
  c.t_emb.resize(kTimeEmbedDim);
  for (auto& v : c.t_emb) v = rng.uniform(-1, 1);
  c.backproj = noise<double>(rng, h, w, 1);
  c.env = noise<double>(rng, h, w, 2);
  return c;
}

// d<g(x), v> against finite differences in x, params and (optionally) t_emb.
inline double branch_error(const Branch<double>& g, ParamStore<double>& store, Grid<double> x, Context ctx,
                           Rng& rng, bool with_temb) {
  const auto v = noise<double>(rng, x.h(), x.w(), x.c());
  store.zero_grad();
  Tape<double> tape;
  g.forward(x, ctx.view(), &tape);
  ContextGrads<double> cg;
  auto gx = g.backward(tape, v, ctx.view(), cg);
  auto loss = [&] { return dot(g.forward(x, ctx.view(), nullptr), v); };
  double err = finite_difference_check(x.vec(), gx.vec(), loss).rel_err;
  err = std::max(err, param_fd_error(store, loss, rng));
  if (with_temb) err = std::max(err, finite_difference_check(ctx.t_emb, cg.t_emb, loss).rel_err);
  return err;
}

inline Coupling<double> coupling_of_kind(ParamStore<double>& store, int kind, std::size_t c) {
  switch (kind) {
    case 0: return make_residual_coupling(store, "cp", c);
    case 1: return make_attention_coupling(store, "cp", c);
    default: return make_injector_coupling(store, "cp", c, 2);
  }
}

inline const char* coupling_kind_name(int kind) {
  return kind == 0 ? "residual" : kind == 1 ? "attention" : "injector";
}

inline SolverConfig small_solver_config(std::size_t base = 8, std::size_t steps = 3) {
  SolverConfig c;
  c.unet.base_channels = base;
  c.schedule = Schedule::with_steps(steps);
  return c;
}

template <class S>
void randomize_solver(Solver<S>& solver, Rng& rng, double weight_scale = 0.15) {
  randomize(solver.params(), rng, weight_scale);
  for (auto& v : solver.scalars().mix_logit().value.data) v = S(rng.uniform(-2, 2));
  solver.scalars().init_scale_param().value[0] = S(rng.uniform(0.5, 1.5));
  solver.scalars().fuse_scale_param().value[0] = S(rng.uniform(0.5, 1.5));
}

template <class S>
SceneInput<S> random_scene(Rng& rng, std::size_t n, double ratio, Grid<S>* truth_out = nullptr) {
  Grid<S> truth = noise<S>(rng, n, n, 1);
  auto op = make_mask(rng, n, n, ratio);
  auto in = SceneInput<S>::observe(op, truth, noise<S>(rng, n, n, 2));
  if (truth_out) *truth_out = std::move(truth);
  return in;
}

}  // namespace checks

// Finite-difference checks (f64) of every differentiable block.
inline CheckReport gradient_checks(std::uint64_t seed, std::size_t cases_per_block = 3, double tol = 1e-6) {
  using namespace checks;
  Rng rng = Rng(seed).derive(11);
  CheckReport rep;
  auto row = [&](const std::string& name) -> CheckRow& {
    rep.rows.push_back({name, 0, 0.0, tol, {}});
    return rep.rows.back();
  };

  for (std::size_t stride : {1, 2}) {
    CheckRow& r = row("conv 3x3 stride " + std::to_string(stride));
    for (std::size_t k = 0; k < cases_per_block; ++k) {
      ParamStore<double> store;
      ConvLayer<double> conv(store, "conv", 3, 3, 4, ConvGeom{stride, Pad::Same}, true);
      randomize(store, rng, 0.5);
      auto x = noise<double>(rng, 6, 8, 3);
      auto y = conv.forward(x);
      auto v = noise<double>(rng, y.h(), y.w(), y.c());
      store.zero_grad();
      auto gx = conv.backward(x, v);
      auto loss = [&] { return dot(conv.forward(x), v); };
      r.record(std::max(finite_difference_check(x.vec(), gx.vec(), loss).rel_err, param_fd_error(store, loss, rng)));
    }
  }
  {
    CheckRow& r = row("transposed conv 2x2 stride 2");
    for (std::size_t k = 0; k < cases_per_block; ++k) {
      ParamStore<double> store;
      ConvLayer<double> up(store, "up", 2, 3, 4, ConvGeom{2, Pad::Valid}, true, ConvDir::Transposed);
      randomize(store, rng, 0.5);
      auto x = noise<double>(rng, 3, 4, 4);
      auto v = noise<double>(rng, 6, 8, 3);
      store.zero_grad();
      auto gx = up.backward_transposed(x, v);
      auto loss = [&] { return dot(up.forward_transposed(x, 6, 8), v); };
      r.record(std::max(finite_difference_check(x.vec(), gx.vec(), loss).rel_err, param_fd_error(store, loss, rng)));
    }
  }
  {
    CheckRow& r = row("group norm");
    for (std::size_t k = 0; k < cases_per_block; ++k) {
      ParamStore<double> store;
      GroupNorm<double> gn(store, "gn", 16);
      randomize(store, rng, 1.0);
      auto x = noise<double>(rng, 4, 4, 16);
      Grid<double> x_hat, rstd;
      auto y = gn.forward(x, &x_hat, &rstd);
      auto v = noise<double>(rng, 4, 4, 16);
      store.zero_grad();
      auto gx = gn.backward(x_hat, rstd, v);
      auto loss = [&] { return dot(gn.forward(x), v); };
      r.record(std::max(finite_difference_check(x.vec(), gx.vec(), loss).rel_err, param_fd_error(store, loss, rng)));
    }
  }
  {
    CheckRow& r = row("time embedding");
    for (std::size_t k = 0; k < cases_per_block; ++k) {
      ParamStore<double> store;
      TimeEmbedding<double> te(store, "temb");
      randomize(store, rng, 0.5);
      const std::size_t t = 1 + rng.below(3);
      std::vector<double> v(kTimeEmbedDim);
      for (auto& e : v) e = rng.uniform(-1, 1);
      store.zero_grad();
      te.backward(t, v);
      auto loss = [&] {
        auto e = te.forward(t);
        double s = 0;
        for (std::size_t i = 0; i < e.size(); ++i) s += e[i] * v[i];
        return s;
      };
      r.record(param_fd_error(store, loss, rng));
    }
  }
  {
    CheckRow& r = row("residual branch");
    for (std::size_t k = 0; k < cases_per_block; ++k) {
      ParamStore<double> store;
      ResidualBranch<double> g(store, "res", 8);
      randomize(store, rng, 0.5);
      r.record(branch_error(g, store, noise<double>(rng, 4, 4, 8), random_context(rng, 4, 4), rng, true));
    }
  }
  {
    CheckRow& r = row("attention branch");
    for (std::size_t k = 0; k < cases_per_block; ++k) {
      ParamStore<double> store;
      AttentionBranch<double> g(store, "attn", 8);
      randomize(store, rng, 0.5);
      r.record(branch_error(g, store, noise<double>(rng, 4, 4, 8), random_context(rng, 4, 4), rng, false));
    }
  }
  {
    CheckRow& r = row("injector branch");
    for (std::size_t k = 0; k < cases_per_block; ++k) {
      ParamStore<double> store;
      const std::size_t scale = 1 + k % 2;
      InjectorBranch<double> g(store, "inj", 8, scale);
      randomize(store, rng, 0.5);
      r.record(branch_error(g, store, noise<double>(rng, 8 / scale, 8 / scale, 8), random_context(rng, 8, 8), rng, false));
    }
  }
  for (int kind = 0; kind < 3; ++kind) {
    CheckRow& r = row(std::string("coupling (") + coupling_kind_name(kind) + ")");
    for (std::size_t k = 0; k < cases_per_block; ++k) {
      ParamStore<double> store;
      auto cp = coupling_of_kind(store, kind, 8);
      randomize(store, rng, 0.4);
      auto ctx = random_context(rng, 8, 8);
      auto x = noise<double>(rng, 4, 4, 8);
      auto v = noise<double>(rng, 4, 4, 8);
      CouplingTape<double> tape;
      cp.forward(x, ctx.view(), &tape);
      ContextGrads<double> cg;
      store.zero_grad();
      auto gx = cp.backward(tape, v, ctx.view(), cg);
      auto loss = [&] { return dot(cp.forward(x, ctx.view()), v); };
      r.record(std::max(finite_difference_check(x.vec(), gx.vec(), loss).rel_err, param_fd_error(store, loss, rng)));
    }
  }
  {
    CheckRow& r = row("u-net (boundary cache)");
    for (std::size_t k = 0; k < cases_per_block; ++k) {
      ParamStore<double> store;
      UNetConfig cfg;
      cfg.base_channels = 8;
      UNet<double> net(store, cfg);
      randomize(store, rng, 0.3);
      auto x = noise<double>(rng, 8, 8, 1);
      auto env = noise<double>(rng, 8, 8, 2);
      auto bp = noise<double>(rng, 8, 8, 1);
      const std::size_t t = 1 + rng.below(3);
      auto v = noise<double>(rng, 8, 8, 1);
      UNetTape<double> tape;
      MemoryLedger ledger;
      net.forward(x, env, bp, t, CacheMode::CacheBoundary, &tape, &ledger);
      store.zero_grad();
      auto gx = net.backward(tape, v);
      auto loss = [&] { return dot(net.forward(x, env, bp, t), v); };
      r.record(std::max(finite_difference_check(x.vec(), gx.vec(), loss).rel_err, param_fd_error(store, loss, rng, 4)));
    }
  }
  {
    CheckRow& r = row("sampler step operator");
    for (std::size_t k = 0; k < cases_per_block; ++k) {
      Solver<double> solver(small_solver_config());
      randomize_solver(solver, rng, 0.3);
      auto in = random_scene<double>(rng, 8, 0.2);
      auto x = noise<double>(rng, 8, 8, 1);
      const std::size_t t = 1 + rng.below(3);
      auto v = noise<double>(rng, 8, 8, 1);
      UNetTape<double> tape;
      MemoryLedger ledger;
      solver.step_operator(x, t, in, CacheMode::CacheBoundary, &tape, &ledger);
      solver.params().zero_grad();
      auto gx = solver.step_operator_backward(tape, v, t, in);
      auto loss = [&] { return dot(solver.step_operator(x, t, in), v); };
      r.record(std::max(finite_difference_check(x.vec(), gx.vec(), loss).rel_err,
                        param_fd_error(solver.params(), loss, rng, 4)));
    }
  }
  return rep;
}

// Inversion round trips: sampler step (f64 and f32) and each coupling kind (f64).
inline CheckReport roundtrip_checks(std::uint64_t seed, std::size_t cases = 200) {
  using namespace checks;
  Rng rng = Rng(seed).derive(12);
  CheckReport rep;
  constexpr std::size_t kRefresh = 20;  // cases per solver instance

  auto sampler_rows = [&](auto tag, double tol, const char* label) {
    using S = decltype(tag);
    CheckRow h_row{std::string("sampler step ") + label + " (h rel)", 0, 0.0, tol, {}};
    CheckRow x_row{std::string("sampler step ") + label + " (x exact)", 0, 0.0, 0.0, {}};
    std::unique_ptr<Solver<S>> solver;
    for (std::size_t k = 0; k < cases; ++k) {
      if (k % kRefresh == 0) solver = std::make_unique<Solver<S>>(small_solver_config());
      randomize_solver(*solver, rng, 0.3);
      auto in = random_scene<S>(rng, 16, 0.1);
      SamplerState<S> s{noise<S>(rng, 16, 16, 1), noise<S>(rng, 16, 16, 1), 1 + rng.below(3)};
      auto next = solver->step_forward(s, in);
      auto back = solver->step_inverse(next, in);
      h_row.record(rel_error(back.h_aux, s.h_aux));
      x_row.record(max_abs_diff(back.x_hat, s.x_hat));
    }
    rep.rows.push_back(h_row);
    rep.rows.push_back(x_row);
  };
  sampler_rows(double{}, 1e-10, "f64");
  sampler_rows(float{}, 1e-5, "f32");

  for (int kind = 0; kind < 3; ++kind) {
    CheckRow r{std::string("coupling ") + coupling_kind_name(kind) + " f64", 0, 0.0, 1e-10, {}};
    for (std::size_t k = 0; k < cases; ++k) {
      ParamStore<double> store;
      auto cp = coupling_of_kind(store, kind, 8);
      randomize(store, rng, 0.5);
      auto ctx = random_context(rng, 16, 16);
      auto x = noise<double>(rng, 8, 8, 8);
      r.record(rel_error(cp.inverse(cp.forward(x, ctx.view()), ctx.view()), x));
    }
    rep.rows.push_back(r);
  }
  return rep;
}

struct ModeEquivalence {
  double max_rel = 0.0;
  std::string worst_tensor;
  bool losses_identical = true;
  std::size_t tensors = 0;
  std::size_t peak_cached = 0, peak_invertible = 0;
};

// Cached vs invertible parameter gradients for one batch on a random solver.
// The per-tensor relative error uses max(|g_cached|, 1e-3 |g_total|) as
// denominator: biases feeding a GroupNorm have an exactly zero gradient.
template <class S>
ModeEquivalence mode_equivalence(std::uint64_t seed, std::size_t size = 32, std::size_t base = 8,
                                 std::size_t steps = 3, std::size_t batch = 2) {
  using namespace checks;
  Rng rng = Rng(seed).derive(13);
  Solver<S> solver(small_solver_config(base, steps));
  randomize_solver(solver, rng, 0.15);
  std::vector<SceneInput<S>> inputs;
  std::vector<Grid<S>> targets;
  for (std::size_t b = 0; b < batch; ++b) {
    Grid<S> truth;
    inputs.push_back(random_scene<S>(rng, size, 0.05, &truth));
    targets.push_back(std::move(truth));
  }
  ModeEquivalence out;
  std::vector<std::vector<std::vector<double>>> grads(2);
  std::vector<std::vector<double>> losses(2);
  for (int m = 0; m < 2; ++m) {
    const BackpropMode mode = m == 0 ? BackpropMode::Cached : BackpropMode::Invertible;
    MemoryLedger ledger;
    solver.params().zero_grad();
    for (std::size_t b = 0; b < batch; ++b)
      losses[m].push_back(backprop(solver, inputs[b], targets[b], mode, &ledger, 1.0 / double(batch)).loss);
    (m == 0 ? out.peak_cached : out.peak_invertible) = ledger.peak_bytes();
    for (const auto& p : solver.params()) grads[m].emplace_back(p->grad.data.begin(), p->grad.data.end());
  }
  out.losses_identical = losses[0] == losses[1];
  double total = 0.0;
  for (const auto& g : grads[0])
    for (double v : g) total += v * v;
  const double floor = 1e-3 * std::sqrt(total);
  out.tensors = grads[0].size();
  for (std::size_t k = 0; k < grads[0].size(); ++k) {
    double d = 0.0, n = 0.0;
    for (std::size_t i = 0; i < grads[0][k].size(); ++i) {
      const double a = grads[1][k][i], b = grads[0][k][i];
      d += (a - b) * (a - b);
      n += b * b;
    }
    const double den = std::max(std::sqrt(n), floor);
    const double rel = den > 0 ? std::sqrt(d) / den : std::sqrt(d);
    if (!(rel <= out.max_rel)) {
      out.max_rel = rel;
      out.worst_tensor = solver.params()[k].name;
    }
  }
  return out;
}

}  // namespace invdiff
