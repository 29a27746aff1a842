#pragma once

// Accounting of saved-for-backward bytes. Every tensor retained between a
// forward pass and its backward is held by a Saved<S> handle, which registers
// its bytes on construction and releases them on destruction.

#include <algorithm>
#include <array>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>

#include "invdiff/grid.hpp"

namespace invdiff {

enum class MemTag : std::uint8_t { StepState = 0, BoundaryCache = 1, ModuleInternal = 2 };

inline constexpr std::size_t kMemTagCount = 3;

inline const char* mem_tag_name(MemTag t) {
  switch (t) {
    case MemTag::StepState: return "step-state";
    case MemTag::BoundaryCache: return "boundary-cache";
    case MemTag::ModuleInternal: return "module-internal";
  }
  return "?";
}

class MemoryLedger {
 public:
  void acquire(MemTag tag, std::size_t bytes) {
    live_ += bytes;
    tag_live_[idx(tag)] += bytes;
    peak_ = std::max(peak_, live_);
    tag_peak_[idx(tag)] = std::max(tag_peak_[idx(tag)], tag_live_[idx(tag)]);
  }

  void release(MemTag tag, std::size_t bytes) {
    if (bytes > live_ || bytes > tag_live_[idx(tag)]) {
      throw std::logic_error(std::string("MemoryLedger: releasing more ") + mem_tag_name(tag) +
                             " bytes than are live");
    }
    live_ -= bytes;
    tag_live_[idx(tag)] -= bytes;
  }

  std::size_t live_bytes() const { return live_; }
  std::size_t peak_bytes() const { return peak_; }
  std::size_t live_bytes(MemTag t) const { return tag_live_[idx(t)]; }
  std::size_t peak_bytes(MemTag t) const { return tag_peak_[idx(t)]; }

  void reset_peak() {
    peak_ = live_;
    tag_peak_ = tag_live_;
  }

 private:
  static std::size_t idx(MemTag t) { return static_cast<std::size_t>(t); }

  std::size_t live_ = 0;
  std::size_t peak_ = 0;
  std::array<std::size_t, kMemTagCount> tag_live_{};
  std::array<std::size_t, kMemTagCount> tag_peak_{};
};

template <class S>
class Saved {
 public:
  Saved() = default;
  Saved(MemoryLedger* ledger, MemTag tag, Grid<S> g) : grid_(std::move(g)), ledger_(ledger), tag_(tag) {
    if (ledger_) ledger_->acquire(tag_, grid_.bytes());
  }
  Saved(const Saved&) = delete;
  Saved& operator=(const Saved&) = delete;
  Saved(Saved&& o) noexcept : grid_(std::move(o.grid_)), ledger_(o.ledger_), tag_(o.tag_) {
    o.ledger_ = nullptr;
    o.grid_ = Grid<S>();
  }
  Saved& operator=(Saved&& o) noexcept {
    if (this != &o) {
      reset();
      grid_ = std::move(o.grid_);
      ledger_ = o.ledger_;
      tag_ = o.tag_;
      o.ledger_ = nullptr;
      o.grid_ = Grid<S>();
    }
    return *this;
  }
  ~Saved() { reset(); }

  void reset() {
    if (ledger_) ledger_->release(tag_, grid_.bytes());
    ledger_ = nullptr;
    grid_ = Grid<S>();
  }

  // Moves the grid out and releases its bytes.
  Grid<S> take() {
    if (ledger_) ledger_->release(tag_, grid_.bytes());
    ledger_ = nullptr;
    return std::exchange(grid_, Grid<S>());
  }

  const Grid<S>& get() const { return grid_; }
  const Grid<S>& operator*() const { return grid_; }
  const Grid<S>* operator->() const { return &grid_; }
  bool has_value() const { return !grid_.empty(); }

 private:
  Grid<S> grid_;
  MemoryLedger* ledger_ = nullptr;
  MemTag tag_ = MemTag::ModuleInternal;
};

}  // namespace invdiff
