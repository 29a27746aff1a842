#pragma once

// Central finite differences. Used as the independent oracle for every
// analytic backward in the library, both by the test suites and by the
// `gradcheck` command.

#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <vector>

namespace invdiff {

struct FdResult {
  double rel_err = 0.0;  // ||analytic - numeric|| / ||numeric||
  double abs_err = 0.0;  // max |analytic - numeric|
  double numeric_norm = 0.0;
  std::size_t probes = 0;
};

// Compares `analytic` (dL/dv) with central differences of `loss` over the
// coordinates in `probe` (all coordinates when empty). `loss` must read the
// current contents of `v`.
inline FdResult finite_difference_check(std::span<double> v, std::span<const double> analytic,
                                        const std::function<double()>& loss,
                                        std::span<const std::size_t> probe = {},
                                        double step = 1e-5) {
  std::vector<std::size_t> all;
  if (probe.empty()) {
    all.resize(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) all[i] = i;
    probe = all;
  }
  double num2 = 0.0, diff2 = 0.0, maxd = 0.0;
  for (std::size_t i : probe) {
    const double keep = v[i];
    const double h = step * std::max(1.0, std::abs(keep));
    v[i] = keep + h;
    const double fp = loss();
    v[i] = keep - h;
    const double fm = loss();
    v[i] = keep;
    const double numeric = (fp - fm) / (2.0 * h);
    const double d = analytic[i] - numeric;
    num2 += numeric * numeric;
    diff2 += d * d;
    maxd = std::max(maxd, std::abs(d));
  }
  FdResult r;
  r.numeric_norm = std::sqrt(num2);
  r.abs_err = maxd;
  r.rel_err = r.numeric_norm > 0 ? std::sqrt(diff2) / r.numeric_norm : std::sqrt(diff2);
  r.probes = probe.size();
  return r;
}

}  // namespace invdiff
