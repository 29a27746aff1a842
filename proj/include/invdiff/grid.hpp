#pragma once

// Dense rank-3 grid (height x width x channels), row-major, channel-minor.
// Every map, mask back-projection, environment raster and network feature in
// the library is carried by this type.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

namespace invdiff {

enum class Dtype : std::uint8_t { F32 = 0, F64 = 1 };

template <class S>
constexpr Dtype dtype_of() {
  static_assert(std::is_same_v<S, float> || std::is_same_v<S, double>,
                "grids hold float or double");
  return std::is_same_v<S, float> ? Dtype::F32 : Dtype::F64;
}

inline const char* dtype_name(Dtype d) { return d == Dtype::F32 ? "f32" : "f64"; }

inline std::size_t dtype_size(Dtype d) { return d == Dtype::F32 ? 4 : 8; }

struct Shape {
  std::size_t h = 0;
  std::size_t w = 0;
  std::size_t c = 0;

  std::size_t size() const { return h * w * c; }
  std::size_t pixels() const { return h * w; }
  bool operator==(const Shape&) const = default;

  std::string str() const {
    std::ostringstream os;
    os << "(" << h << "," << w << "," << c << ")";
    return os.str();
  }
};

template <class S>
class Grid {
 public:
  using value_type = S;

  Grid() = default;
  Grid(std::size_t h, std::size_t w, std::size_t c, S fill = S(0))
      : shape_{h, w, c}, data_(h * w * c, fill) {}
  explicit Grid(Shape s, S fill = S(0)) : Grid(s.h, s.w, s.c, fill) {}
  Grid(std::size_t h, std::size_t w, std::size_t c, std::vector<S> data)
      : shape_{h, w, c}, data_(std::move(data)) {
    if (data_.size() != shape_.size()) {
      throw std::invalid_argument("Grid: data length " + std::to_string(data_.size()) +
                                  " does not match shape " + shape_.str());
    }
  }

  static Grid from(std::size_t h, std::size_t w, std::size_t c, std::initializer_list<S> v) {
    return Grid(h, w, c, std::vector<S>(v));
  }

  const Shape& shape() const { return shape_; }
  std::size_t h() const { return shape_.h; }
  std::size_t w() const { return shape_.w; }
  std::size_t c() const { return shape_.c; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  std::size_t bytes() const { return data_.size() * sizeof(S); }
  static constexpr Dtype dtype() { return dtype_of<S>(); }

  S* data() { return data_.data(); }
  const S* data() const { return data_.data(); }
  std::span<S> span() { return data_; }
  std::span<const S> span() const { return data_; }
  std::vector<S>& vec() { return data_; }
  const std::vector<S>& vec() const { return data_; }

  S& operator[](std::size_t i) { return data_[i]; }
  const S& operator[](std::size_t i) const { return data_[i]; }

  S& at(std::size_t y, std::size_t x, std::size_t ch = 0) {
    return data_[(y * shape_.w + x) * shape_.c + ch];
  }
  const S& at(std::size_t y, std::size_t x, std::size_t ch = 0) const {
    return data_[(y * shape_.w + x) * shape_.c + ch];
  }

  void fill(S v) { std::fill(data_.begin(), data_.end(), v); }

  template <class D>
  Grid<D> cast() const {
    Grid<D> out(shape_);
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<D>(data_[i]);
    return out;
  }

  Grid& operator+=(const Grid& o) {
    require_same(o, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }
  Grid& operator-=(const Grid& o) {
    require_same(o, "-=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
    return *this;
  }
  Grid& operator*=(S a) {
    for (auto& v : data_) v *= a;
    return *this;
  }

  // this += a * o
  void axpy(S a, const Grid& o) {
    require_same(o, "axpy");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += a * o.data_[i];
  }

  void require_same(const Grid& o, const char* what) const {
    if (shape_ != o.shape_) {
      throw std::invalid_argument(std::string("Grid ") + what + ": shape mismatch " +
                                  shape_.str() + " vs " + o.shape_.str());
    }
  }

  bool operator==(const Grid& o) const { return shape_ == o.shape_ && data_ == o.data_; }

 private:
  Shape shape_{};
  std::vector<S> data_;
};

template <class S>
Grid<S> operator+(Grid<S> a, const Grid<S>& b) {
  a += b;
  return a;
}
template <class S>
Grid<S> operator-(Grid<S> a, const Grid<S>& b) {
  a -= b;
  return a;
}
template <class S>
Grid<S> operator*(S s, Grid<S> a) {
  a *= s;
  return a;
}

template <class S>
Grid<S> zeros_like(const Grid<S>& g) {
  return Grid<S>(g.shape());
}

template <class S>
double dot(const Grid<S>& a, const Grid<S>& b) {
  a.require_same(b, "dot");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += double(a[i]) * double(b[i]);
  return acc;
}

template <class S>
double sum(const Grid<S>& a) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += double(a[i]);
  return acc;
}

template <class S>
double max_abs(const Grid<S>& a) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i])));
  return m;
}

template <class S>
double max_abs_diff(const Grid<S>& a, const Grid<S>& b) {
  a.require_same(b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
  return m;
}

template <class S>
bool all_finite(const Grid<S>& a) {
  return std::all_of(a.vec().begin(), a.vec().end(), [](S v) { return std::isfinite(v); });
}

template <class S>
Grid<S> concat_channels(std::span<const Grid<S>* const> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_channels: no parts");
  const std::size_t h = parts[0]->h(), w = parts[0]->w();
  std::size_t c = 0;
  for (const Grid<S>* p : parts) {
    if (p->h() != h || p->w() != w) {
      throw std::invalid_argument("concat_channels: spatial mismatch " + parts[0]->shape().str() +
                                  " vs " + p->shape().str());
    }
    c += p->c();
  }
  Grid<S> out(h, w, c);
  for (std::size_t px = 0; px < h * w; ++px) {
    S* dst = out.data() + px * c;
    for (const Grid<S>* p : parts) {
      const S* src = p->data() + px * p->c();
      dst = std::copy(src, src + p->c(), dst);
    }
  }
  return out;
}

template <class S>
Grid<S> concat_channels(std::initializer_list<const Grid<S>*> parts) {
  std::vector<const Grid<S>*> v(parts);
  return concat_channels<S>(std::span<const Grid<S>* const>(v));
}

template <class S>
Grid<S> concat_channels(const std::vector<Grid<S>>& parts) {
  std::vector<const Grid<S>*> v;
  for (const auto& p : parts) v.push_back(&p);
  return concat_channels<S>(std::span<const Grid<S>* const>(v));
}

// Channels [begin, begin + count).
template <class S>
Grid<S> slice_channels(const Grid<S>& g, std::size_t begin, std::size_t count) {
  if (begin + count > g.c()) {
    throw std::invalid_argument("slice_channels: range [" + std::to_string(begin) + "," +
                                std::to_string(begin + count) + ") exceeds " + g.shape().str());
  }
  Grid<S> out(g.h(), g.w(), count);
  for (std::size_t px = 0; px < g.h() * g.w(); ++px) {
    const S* src = g.data() + px * g.c() + begin;
    std::copy(src, src + count, out.data() + px * count);
  }
  return out;
}

// Adds `part` into channels [begin, begin + part.c()) of `g`.
template <class S>
void add_into_channels(Grid<S>& g, const Grid<S>& part, std::size_t begin) {
  if (part.h() != g.h() || part.w() != g.w() || begin + part.c() > g.c()) {
    throw std::invalid_argument("add_into_channels: " + part.shape().str() + " at channel " +
                                std::to_string(begin) + " does not fit " + g.shape().str());
  }
  for (std::size_t px = 0; px < g.h() * g.w(); ++px) {
    S* dst = g.data() + px * g.c() + begin;
    const S* src = part.data() + px * part.c();
    for (std::size_t k = 0; k < part.c(); ++k) dst[k] += src[k];
  }
}

template <class S>
std::vector<Grid<S>> split_channels(const Grid<S>& g, std::span<const std::size_t> widths) {
  std::vector<Grid<S>> out;
  std::size_t begin = 0;
  for (std::size_t wd : widths) {
    out.push_back(slice_channels(g, begin, wd));
    begin += wd;
  }
  if (begin != g.c()) {
    throw std::invalid_argument("split_channels: widths sum to " + std::to_string(begin) +
                                " but grid has " + std::to_string(g.c()) + " channels");
  }
  return out;
}

// Relative error ||a - b|| / max(||b||, tiny), Euclidean norms.
template <class S>
double rel_error(const Grid<S>& a, const Grid<S>& b) {
  a.require_same(b, "rel_error");
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = double(a[i]) - double(b[i]);
    num += d * d;
    den += double(b[i]) * double(b[i]);
  }
  if (den == 0.0) return std::sqrt(num);
  return std::sqrt(num / den);
}

}  // namespace invdiff
