#pragma once

// Sparse sampling operator A (gather at an index set), its adjoint A^T
// (scatter into zeros) and the data-consistency projection
//   X0 - eta * A^T(A(X0) - Y).
// Indices are distinct, so A A^T = I holds structurally.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "invdiff/grid.hpp"
#include "invdiff/grid_io.hpp"
#include "invdiff/rng.hpp"

namespace invdiff {

class MeasurementOp {
 public:
  MeasurementOp() = default;
  MeasurementOp(std::size_t h, std::size_t w, std::vector<std::uint32_t> indices)
      : h_(h), w_(w), idx_(std::move(indices)) {
    if (idx_.empty()) throw std::invalid_argument("MeasurementOp: at least one index required");
    for (std::size_t k = 0; k < idx_.size(); ++k) {
      if (idx_[k] >= h_ * w_) {
        throw std::invalid_argument("MeasurementOp: index " + std::to_string(idx_[k]) +
                                    " outside " + std::to_string(h_) + "x" + std::to_string(w_));
      }
      if (k > 0 && idx_[k] <= idx_[k - 1]) {
        throw std::invalid_argument("MeasurementOp: indices must be strictly increasing");
      }
    }
  }

  std::size_t h() const { return h_; }
  std::size_t w() const { return w_; }
  std::size_t m() const { return idx_.size(); }
  double ratio() const { return double(idx_.size()) / double(h_ * w_); }
  const std::vector<std::uint32_t>& indices() const { return idx_; }

  template <class S>
  void require_grid(const Grid<S>& x, const char* op) const {
    if (x.h() != h_ || x.w() != w_ || x.c() != 1) {
      throw std::invalid_argument(std::string(op) + ": grid " + x.shape().str() +
                                  " does not match operator (" + std::to_string(h_) + "," +
                                  std::to_string(w_) + ",1)");
    }
  }

  bool operator==(const MeasurementOp&) const = default;

 private:
  std::size_t h_ = 0, w_ = 0;
  std::vector<std::uint32_t> idx_;
};

template <class S>
using MeasurementVec = std::vector<S>;

// m = max(1, round(ratio*h*w)) distinct cells, uniform without replacement.
inline MeasurementOp make_mask(Rng& rng, std::size_t h, std::size_t w, double ratio) {
  if (!(ratio > 0.0 && ratio <= 1.0)) {
    throw std::invalid_argument("make_mask: sampling ratio must be in (0, 1], got " +
                                std::to_string(ratio));
  }
  const std::size_t n = h * w;
  const std::size_t m = std::max<std::size_t>(1, std::size_t(std::llround(ratio * double(n))));
  std::vector<std::uint32_t> cells(n);
  for (std::size_t i = 0; i < n; ++i) cells[i] = std::uint32_t(i);
  // Partial Fisher-Yates: the first m slots become a uniform m-subset.
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t j = i + std::size_t(rng.below(n - i));
    std::swap(cells[i], cells[j]);
  }
  cells.resize(m);
  std::sort(cells.begin(), cells.end());
  return MeasurementOp(h, w, std::move(cells));
}

template <class S>
MeasurementVec<S> apply_A(const MeasurementOp& op, const Grid<S>& x) {
  op.require_grid(x, "apply_A");
  MeasurementVec<S> y(op.m());
  for (std::size_t k = 0; k < op.m(); ++k) y[k] = x[op.indices()[k]];
  return y;
}

template <class S>
Grid<S> apply_At(const MeasurementOp& op, const MeasurementVec<S>& y) {
  if (y.size() != op.m()) {
    throw std::invalid_argument("apply_At: measurement length " + std::to_string(y.size()) +
                                " does not match operator m = " + std::to_string(op.m()));
  }
  Grid<S> x(op.h(), op.w(), 1);
  for (std::size_t k = 0; k < op.m(); ++k) x[op.indices()[k]] = y[k];
  return x;
}

template <class S>
Grid<S> dc_project(const MeasurementOp& op, const Grid<S>& x0, const MeasurementVec<S>& y,
                   S eta = S(1)) {
  op.require_grid(x0, "dc_project");
  if (y.size() != op.m()) {
    throw std::invalid_argument("dc_project: measurement length " + std::to_string(y.size()) +
                                " does not match operator m = " + std::to_string(op.m()));
  }
  Grid<S> out = x0;
  if (eta == S(1)) {
    for (std::size_t k = 0; k < op.m(); ++k) out[op.indices()[k]] = y[k];
  } else {
    for (std::size_t k = 0; k < op.m(); ++k) {
      const auto i = op.indices()[k];
      out[i] = x0[i] - eta * (x0[i] - y[k]);
    }
  }
  return out;
}

// (I - eta A^T A) g
template <class S>
Grid<S> dc_project_backward(const MeasurementOp& op, const Grid<S>& g, S eta = S(1)) {
  op.require_grid(g, "dc_project_backward");
  Grid<S> out = g;
  for (auto i : op.indices()) out[i] = g[i] - eta * g[i];
  return out;
}

// Gradient of dc_project w.r.t. the measurements: eta * A(g).
template <class S>
MeasurementVec<S> dc_project_backward_y(const MeasurementOp& op, const Grid<S>& g, S eta = S(1)) {
  MeasurementVec<S> gy = apply_A(op, g);
  for (auto& v : gy) v *= eta;
  return gy;
}

// Additive N(0, sigma^2) measurement noise; off unless requested.
template <class S>
void add_measurement_noise(MeasurementVec<S>& y, Rng& rng, double sigma) {
  if (sigma <= 0.0) return;
  for (auto& v : y) v += static_cast<S>(sigma * rng.normal());
}

// "CGMM" mask file: magic, u32 h, u32 w, u32 m, m x u32 indices (little-endian).
inline void write_mask(const std::filesystem::path& path, const MeasurementOp& op) {
  io::Writer wr;
  wr.bytes("CGMM", 4);
  wr.u32(std::uint32_t(op.h()));
  wr.u32(std::uint32_t(op.w()));
  wr.u32(std::uint32_t(op.m()));
  for (auto i : op.indices()) wr.u32(i);
  wr.save(path);
}

inline MeasurementOp read_mask(const std::filesystem::path& path) {
  io::Reader rd = io::Reader::load(path);
  rd.need(16);
  const std::string magic = rd.str(4);
  if (magic != "CGMM") {
    throw std::runtime_error(path.string() + ": bad magic, expected \"CGMM\", header bytes: " +
                             io::hex_dump(magic));
  }
  const std::uint32_t h = rd.u32(), w = rd.u32(), m = rd.u32();
  rd.need(std::size_t(m) * 4);
  std::vector<std::uint32_t> idx(m);
  for (auto& i : idx) i = rd.u32();
  if (rd.remaining() != 0) throw std::runtime_error(path.string() + ": trailing bytes in mask file");
  return MeasurementOp(h, w, std::move(idx));
}

}  // namespace invdiff
