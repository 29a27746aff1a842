#pragma once

#include <gtest/gtest.h>

#include <cstdint>
#include <functional>

#include "invdiff/gradcheck.hpp"

#include "invdiff/grid.hpp"
#include "invdiff/rng.hpp"
#include "invdiff/tensor.hpp"

namespace invdiff::testing {

template <class S = double>
Grid<S> random_grid(Rng& rng, std::size_t h, std::size_t w, std::size_t c, double scale = 1.0) {
  Grid<S> g(h, w, c);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = static_cast<S>(rng.uniform(-scale, scale));
  return g;
}

template <class S = double>
Tensor<S> random_tensor(Rng& rng, std::vector<std::size_t> dims, double scale = 1.0) {
  Tensor<S> t(std::move(dims));
  for (auto& v : t.data) v = static_cast<S>(rng.uniform(-scale, scale));
  return t;
}

inline std::vector<double>& as_vec(Grid<double>& g) { return g.vec(); }

template <class S>
void randomize(ParamStore<S>& store, Rng& rng, double scale) {
  for (auto& p : store)
    for (auto& v : p->value.data) v = static_cast<S>(rng.uniform(-scale, scale));
}

// Finite-difference check of every parameter's accumulated gradient against
// `loss`, which must evaluate with the current parameter values.
inline void expect_param_grads(ParamStore<double>& store, const std::function<double()>& loss,
                               double tol, std::size_t max_probes = 64) {
  Rng pick(99);
  for (auto& p : store) {
    std::vector<std::size_t> probe;
    if (p->size() > max_probes) {
      for (std::size_t k = 0; k < max_probes; ++k) probe.push_back(pick.below(p->size()));
    }
    auto r = finite_difference_check(p->value.data, p->grad.data, loss, probe);
    EXPECT_LE(r.rel_err, tol) << p->name << " numeric norm " << r.numeric_norm;
  }
}

}  // namespace invdiff::testing
