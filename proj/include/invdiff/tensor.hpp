#pragma once

// Learnable tensors. A ParamStore owns named parameters, each with a paired
// gradient accumulator; layers keep stable pointers into the store.

#include <cstddef>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "invdiff/grid.hpp"
#include "invdiff/rng.hpp"

namespace invdiff {

template <class S>
struct Tensor {
  std::vector<std::size_t> dims;
  std::vector<S> data;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> d, S fill = S(0)) : dims(std::move(d)) {
    data.assign(count(dims), fill);
  }

  static std::size_t count(const std::vector<std::size_t>& d) {
    return std::accumulate(d.begin(), d.end(), std::size_t(1), std::multiplies<>());
  }
  std::size_t size() const { return data.size(); }
  std::size_t bytes() const { return data.size() * sizeof(S); }
  S& operator[](std::size_t i) { return data[i]; }
  const S& operator[](std::size_t i) const { return data[i]; }

  std::string dims_str() const {
    std::string s = "[";
    for (std::size_t i = 0; i < dims.size(); ++i) s += (i ? "," : "") + std::to_string(dims[i]);
    return s + "]";
  }
};

// Non-owning view of a conv weight laid out kh x kw x cin x cout.
template <class S>
struct KernelView {
  std::size_t kh = 1, kw = 1, cin = 1, cout = 1;
  std::span<const S> w;

  KernelView() = default;
  KernelView(std::size_t kh_, std::size_t kw_, std::size_t cin_, std::size_t cout_,
             std::span<const S> w_)
      : kh(kh_), kw(kw_), cin(cin_), cout(cout_), w(w_) {
    if (w.size() != kh * kw * cin * cout) {
      throw std::invalid_argument("KernelView: weight length does not match " +
                                  std::to_string(kh) + "x" + std::to_string(kw) + "x" +
                                  std::to_string(cin) + "x" + std::to_string(cout));
    }
  }
  explicit KernelView(const Tensor<S>& t)
      : KernelView(t.dims.at(0), t.dims.at(1), t.dims.at(2), t.dims.at(3), t.data) {
    if (t.dims.size() != 4) throw std::invalid_argument("KernelView: rank-4 tensor required");
  }
};

template <class S>
struct Param {
  std::string name;
  Tensor<S> value;
  Tensor<S> grad;

  std::size_t size() const { return value.size(); }
  KernelView<S> kernel() const { return KernelView<S>(value); }
  std::span<S> g() { return grad.data; }
  void zero_grad() { std::fill(grad.data.begin(), grad.data.end(), S(0)); }
};

template <class S>
class ParamStore {
 public:
  ParamStore() = default;
  ParamStore(const ParamStore&) = delete;
  ParamStore& operator=(const ParamStore&) = delete;
  ParamStore(ParamStore&&) noexcept = default;
  ParamStore& operator=(ParamStore&&) noexcept = default;

  Param<S>* add(const std::string& name, std::vector<std::size_t> dims) {
    if (index_.count(name)) throw std::invalid_argument("ParamStore: duplicate parameter " + name);
    auto p = std::make_unique<Param<S>>();
    p->name = name;
    p->value = Tensor<S>(dims);
    p->grad = Tensor<S>(std::move(dims));
    Param<S>* raw = p.get();
    index_[name] = params_.size();
    params_.push_back(std::move(p));
    return raw;
  }

  Param<S>* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : params_[it->second].get();
  }
  const Param<S>* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : params_[it->second].get();
  }
  Param<S>& at(const std::string& name) {
    Param<S>* p = find(name);
    if (!p) throw std::out_of_range("ParamStore: no parameter named " + name);
    return *p;
  }

  std::size_t size() const { return params_.size(); }
  Param<S>& operator[](std::size_t i) { return *params_[i]; }
  const Param<S>& operator[](std::size_t i) const { return *params_[i]; }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  void zero_grad() {
    for (auto& p : params_) p->zero_grad();
  }

  std::size_t total_scalars() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p->size();
    return n;
  }

  // Copies values (with dtype conversion) from a store with identical layout.
  template <class D>
  void copy_values_from(const ParamStore<D>& other) {
    for (const auto& p : params_) {
      const Param<D>* q = other.find(p->name);
      if (!q || q->value.dims != p->value.dims) {
        throw std::invalid_argument("ParamStore: layout mismatch at " + p->name);
      }
      for (std::size_t i = 0; i < p->size(); ++i) p->value[i] = static_cast<S>(q->value[i]);
    }
  }

 private:
  std::vector<std::unique_ptr<Param<S>>> params_;
  std::map<std::string, std::size_t> index_;
};

// Fills with N(0, stddev^2).
template <class S>
void init_normal(Param<S>& p, Rng& rng, double stddev) {
  for (auto& v : p.value.data) v = static_cast<S>(rng.normal() * stddev);
}

}  // namespace invdiff
