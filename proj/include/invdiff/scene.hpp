#pragma once

// Synthetic urban scenes and their ground-truth channel gain maps.
//
// Buildings are axis-aligned blocks on flat terrain. Path loss is
//   20 log10(max(d_3d, 1 m)) + L_cross * crossings + S
// where `crossings` counts building cells that rise above the straight ray
// from the base station to a 1.5 m receiver and S is spatially correlated
// shadowing (Gaussian-filtered white noise). Building interiors get the
// weakest gain; the result is min-max normalised so 1 = strongest gain.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "invdiff/grid.hpp"
#include "invdiff/rng.hpp"

namespace invdiff {

inline constexpr double kMinBuildingHeight = 6.6;
inline constexpr double kMaxBuildingHeight = 19.8;
inline constexpr double kRooftopThreshold = 16.5;
inline constexpr double kRooftopMast = 3.0;
inline constexpr double kFreeSpaceBsHeight = 19.5;
inline constexpr double kReceiverHeight = 1.5;

struct BaseStation {
  double height_m = 0.0;
  std::size_t x = 0;
  std::size_t y = 0;
};

struct Scene {
  Grid<double> buildings;  // h x w x 1, metres, 0 = free space
  BaseStation bs;
  double cell_size_m = 1.0;
  bool truncated = false;  // fewer buildings than requested could be placed

  std::size_t h() const { return buildings.h(); }
  std::size_t w() const { return buildings.w(); }
  double height_at(std::size_t y, std::size_t x) const { return buildings.at(y, x); }
};

struct PropagationParams {
  double crossing_loss_db = 15.0;
  double shadow_sigma_db = 4.0;
  double shadow_filter_cells = 4.0;
  double rx_height_m = kReceiverHeight;
};

namespace detail {

struct Rect {
  std::size_t y0, x0, hh, ww;
  bool overlaps(const Rect& o, std::size_t gap) const {
    return !(y0 + hh + gap <= o.y0 || o.y0 + o.hh + gap <= y0 || x0 + ww + gap <= o.x0 ||
             o.x0 + o.ww + gap <= x0);
  }
};

}  // namespace detail

// Places up to n_buildings non-touching rectangles (bounded retries), then the
// base station: 3 m above the tallest rooftop if that rooftop exceeds 16.5 m,
// otherwise at 19.5 m over a random free-space cell.
inline Scene generate_scene(Rng& rng, std::size_t h, std::size_t w, std::size_t n_buildings) {
  if (h < 16 || w < 16) {
    throw std::invalid_argument("generate_scene: grid must be at least 16x16, got " +
                                std::to_string(h) + "x" + std::to_string(w));
  }
  Scene sc;
  sc.buildings = Grid<double>(h, w, 1);
  std::vector<detail::Rect> rects;
  std::vector<double> heights;
  const std::size_t max_h = std::max<std::size_t>(3, h / 5), max_w = std::max<std::size_t>(3, w / 5);
  for (std::size_t b = 0; b < n_buildings; ++b) {
    bool placed = false;
    for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
      detail::Rect r;
      r.hh = std::size_t(rng.range(3, std::int64_t(max_h)));
      r.ww = std::size_t(rng.range(3, std::int64_t(max_w)));
      r.y0 = std::size_t(rng.range(0, std::int64_t(h - r.hh)));
      r.x0 = std::size_t(rng.range(0, std::int64_t(w - r.ww)));
      const bool clash = std::any_of(rects.begin(), rects.end(),
                                     [&](const detail::Rect& o) { return r.overlaps(o, 1); });
      if (clash) continue;
      rects.push_back(r);
      heights.push_back(rng.uniform(kMinBuildingHeight, kMaxBuildingHeight));
      placed = true;
    }
    if (!placed) {
      sc.truncated = true;
      break;
    }
  }
  for (std::size_t i = 0; i < rects.size(); ++i) {
    const auto& r = rects[i];
    for (std::size_t y = r.y0; y < r.y0 + r.hh; ++y)
      for (std::size_t x = r.x0; x < r.x0 + r.ww; ++x) sc.buildings.at(y, x) = heights[i];
  }

  const auto tallest = std::max_element(heights.begin(), heights.end());
  if (tallest != heights.end() && *tallest > kRooftopThreshold) {
    const auto& r = rects[std::size_t(tallest - heights.begin())];
    sc.bs = {*tallest + kRooftopMast, r.x0 + r.ww / 2, r.y0 + r.hh / 2};
  } else {
    std::size_t cell = h * w;
    for (int attempt = 0; attempt < 1000 && cell == h * w; ++attempt) {
      const std::size_t c = std::size_t(rng.below(h * w));
      if (sc.buildings[c] == 0.0) cell = c;
    }
    if (cell == h * w) {
      for (std::size_t c = 0; c < h * w && cell == h * w; ++c)
        if (sc.buildings[c] == 0.0) cell = c;
    }
    if (cell == h * w) throw std::runtime_error("generate_scene: no free-space cell for the BS");
    sc.bs = {kFreeSpaceBsHeight, cell % w, cell / w};
  }
  return sc;
}

// Calls visit(y, x) for every cell whose interior the segment between the
// centres of `from` and `to` passes through, in order. Corner crossings step
// diagonally; the boundary comparisons are exact integer arithmetic.
template <class Visit>
void traverse_cells(std::size_t from_y, std::size_t from_x, std::size_t to_y, std::size_t to_x,
                    Visit&& visit) {
  const long dx = long(to_x) - long(from_x), dy = long(to_y) - long(from_y);
  const long adx = std::labs(dx), ady = std::labs(dy);
  const long sx = dx > 0 ? 1 : -1, sy = dy > 0 ? 1 : -1;
  long x = long(from_x), y = long(from_y);
  long kx = 0, ky = 0;  // boundaries crossed so far along each axis
  visit(std::size_t(y), std::size_t(x));
  while (kx < adx || ky < ady) {
    // Next x boundary at t = (2kx+1)/(2adx), next y boundary at (2ky+1)/(2ady).
    const bool can_x = kx < adx, can_y = ky < ady;
    long cmp;
    if (!can_y) cmp = -1;
    else if (!can_x) cmp = 1;
    else cmp = (2 * kx + 1) * ady - (2 * ky + 1) * adx;
    if (cmp <= 0) {
      x += sx;
      ++kx;
    }
    if (cmp >= 0) {
      y += sy;
      ++ky;
    }
    visit(std::size_t(y), std::size_t(x));
  }
}

// Height of the BS-to-receiver ray above the point of the segment nearest to
// the centre of cell (y, x).
inline double ray_height_at(const Scene& sc, std::size_t ty, std::size_t tx, std::size_t y,
                            std::size_t x, double rx_height = kReceiverHeight) {
  const double dx = double(tx) - double(sc.bs.x), dy = double(ty) - double(sc.bs.y);
  const double len2 = dx * dx + dy * dy;
  double s = 0.0;
  if (len2 > 0.0) {
    s = ((double(x) - double(sc.bs.x)) * dx + (double(y) - double(sc.bs.y)) * dy) / len2;
    s = std::clamp(s, 0.0, 1.0);
  }
  return sc.bs.height_m + (rx_height - sc.bs.height_m) * s;
}

inline std::size_t count_crossings(const Scene& sc, std::size_t ty, std::size_t tx,
                                   double rx_height = kReceiverHeight) {
  if (ty >= sc.h() || tx >= sc.w()) {
    throw std::invalid_argument("count_crossings: target (" + std::to_string(ty) + "," +
                                std::to_string(tx) + ") outside grid");
  }
  std::size_t n = 0;
  traverse_cells(sc.bs.y, sc.bs.x, ty, tx, [&](std::size_t y, std::size_t x) {
    const double b = sc.height_at(y, x);
    if (b > 0.0 && b > ray_height_at(sc, ty, tx, y, x, rx_height)) ++n;
  });
  return n;
}

// Separable Gaussian filter of white noise, scaled so the output has standard
// deviation sigma_db. Noise is drawn on a padded canvas to avoid edge decay.
inline Grid<double> correlated_shadowing(Rng& rng, std::size_t h, std::size_t w, double sigma_db,
                                         double filter_cells) {
  Grid<double> out(h, w, 1);
  if (sigma_db <= 0.0) return out;
  const long rad = std::max<long>(1, long(std::ceil(3.0 * filter_cells)));
  std::vector<double> k(std::size_t(2 * rad + 1));
  double ks = 0.0;
  for (long i = -rad; i <= rad; ++i) {
    k[std::size_t(i + rad)] = std::exp(-0.5 * double(i * i) / (filter_cells * filter_cells));
    ks += k[std::size_t(i + rad)];
  }
  double k2 = 0.0;
  for (auto& v : k) {
    v /= ks;
    k2 += v * v;
  }
  const double white_sigma = sigma_db / k2;  // 2-D kernel energy is k2^2
  const std::size_t ph = h + 2 * std::size_t(rad), pw = w + 2 * std::size_t(rad);
  std::vector<double> noise(ph * pw);
  for (auto& v : noise) v = white_sigma * rng.normal();
  std::vector<double> rows(ph * w, 0.0);
  for (std::size_t y = 0; y < ph; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double acc = 0.0;
      for (long i = -rad; i <= rad; ++i) acc += k[std::size_t(i + rad)] * noise[y * pw + std::size_t(long(x) + rad + i)];
      rows[y * w + x] = acc;
    }
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double acc = 0.0;
      for (long i = -rad; i <= rad; ++i) acc += k[std::size_t(i + rad)] * rows[std::size_t(long(y) + rad + i) * w + x];
      out.at(y, x) = acc;
    }
  return out;
}

// Un-normalised path loss in dB (interiors not yet clamped).
inline Grid<double> path_loss_db(const Scene& sc, const PropagationParams& p,
                                 const Grid<double>* shadow = nullptr) {
  Grid<double> loss(sc.h(), sc.w(), 1);
  const double dz = sc.bs.height_m - p.rx_height_m;
  for (std::size_t y = 0; y < sc.h(); ++y)
    for (std::size_t x = 0; x < sc.w(); ++x) {
      const double ddx = (double(x) - double(sc.bs.x)) * sc.cell_size_m;
      const double ddy = (double(y) - double(sc.bs.y)) * sc.cell_size_m;
      const double d = std::sqrt(ddx * ddx + ddy * ddy + dz * dz);
      double l = 20.0 * std::log10(std::max(d, 1.0));
      if (p.crossing_loss_db != 0.0) l += p.crossing_loss_db * double(count_crossings(sc, y, x, p.rx_height_m));
      if (shadow) l += shadow->at(y, x);
      loss.at(y, x) = l;
    }
  return loss;
}

inline Grid<double> synthesize_cgm(const Scene& sc, Rng& rng, const PropagationParams& p = {}) {
  const Grid<double> shadow =
      correlated_shadowing(rng, sc.h(), sc.w(), p.shadow_sigma_db, p.shadow_filter_cells);
  Grid<double> loss = path_loss_db(sc, p, &shadow);
  const std::size_t bs_cell = sc.bs.y * sc.w() + sc.bs.x;
  auto interior = [&](std::size_t i) { return i != bs_cell && sc.buildings[i] > 0.0; };

  double open_max = -std::numeric_limits<double>::infinity();
  double open_min = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < loss.size(); ++i) {
    if (interior(i) || i == bs_cell) continue;
    open_max = std::max(open_max, loss[i]);
    open_min = std::min(open_min, loss[i]);
  }
  if (!std::isfinite(open_max)) open_max = open_min = loss[bs_cell];
  for (std::size_t i = 0; i < loss.size(); ++i)
    if (interior(i)) loss[i] = open_max;
  // The BS cell is the strongest cell even when shadowing dips elsewhere.
  loss[bs_cell] = std::min(loss[bs_cell], open_min);

  const double lo = loss[bs_cell];
  const double hi = std::max(open_max, lo);
  Grid<double> gain(sc.h(), sc.w(), 1);
  if (hi == lo) {
    gain[bs_cell] = 1.0;
    return gain;
  }
  for (std::size_t i = 0; i < loss.size(); ++i) gain[i] = (hi - loss[i]) / (hi - lo);
  return gain;
}

// Channel 0: building height / 19.8; channel 1: distance to BS / max distance.
inline Grid<double> env_raster(const Scene& sc) {
  Grid<double> env(sc.h(), sc.w(), 2);
  double dmax = 0.0;
  for (std::size_t y = 0; y < sc.h(); ++y)
    for (std::size_t x = 0; x < sc.w(); ++x) {
      const double dx = double(x) - double(sc.bs.x), dy = double(y) - double(sc.bs.y);
      env.at(y, x, 1) = std::sqrt(dx * dx + dy * dy);
      dmax = std::max(dmax, env.at(y, x, 1));
      env.at(y, x, 0) = std::clamp(sc.height_at(y, x) / kMaxBuildingHeight, 0.0, 1.0);
    }
  if (dmax > 0.0)
    for (std::size_t y = 0; y < sc.h(); ++y)
      for (std::size_t x = 0; x < sc.w(); ++x) env.at(y, x, 1) /= dmax;
  return env;
}

}  // namespace invdiff
