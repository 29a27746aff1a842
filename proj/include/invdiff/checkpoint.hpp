#pragma once

// "IDCW" weight file.
//
//   magic "IDCW", u32 tensor count, then per tensor:
//     u16 name length, name bytes, u8 dtype (0 = f32, 1 = f64), u8 rank,
//     u32 dims[rank], payload (little-endian reals)
//
// Besides every solver parameter the file holds two f64 tensors describing
// the architecture: "solver.unet" = [base_channels, attention_max_positions]
// and "solver.alpha_bar" = the noise schedule.

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "invdiff/grid_io.hpp"
#include "invdiff/sampler.hpp"

namespace invdiff {

inline constexpr char kCheckpointMagic[4] = {'I', 'D', 'C', 'W'};
inline constexpr const char* kUnetConfigTensor = "solver.unet";
inline constexpr const char* kScheduleTensor = "solver.alpha_bar";

struct CheckpointTensor {
  Dtype dtype = Dtype::F64;
  std::vector<std::size_t> dims;
  std::vector<double> values;
};

using CheckpointContents = std::map<std::string, CheckpointTensor>;

namespace detail {

template <class S>
void put_tensor(io::Writer& wr, const std::string& name, const std::vector<std::size_t>& dims,
                const std::vector<S>& data) {
  if (name.size() > 0xffff) throw std::invalid_argument("checkpoint: tensor name too long");
  wr.u16(std::uint16_t(name.size()));
  wr.bytes(name.data(), name.size());
  wr.u8(std::uint8_t(dtype_of<S>()));
  wr.u8(std::uint8_t(dims.size()));
  for (std::size_t d : dims) wr.u32(std::uint32_t(d));
  for (S v : data) wr.real(v);
}

}  // namespace detail

template <class S>
void save_checkpoint(const std::filesystem::path& path, const Solver<S>& solver) {
  io::Writer wr;
  wr.bytes(kCheckpointMagic, 4);
  wr.u32(std::uint32_t(solver.params().size() + 2));
  const auto& cfg = solver.config();
  detail::put_tensor<double>(wr, kUnetConfigTensor, {2},
                             {double(cfg.unet.base_channels), double(cfg.unet.attention_max_positions)});
  detail::put_tensor<double>(wr, kScheduleTensor, {cfg.schedule.alpha_bar.size()}, cfg.schedule.alpha_bar);
  for (const auto& p : solver.params()) detail::put_tensor(wr, p->name, p->value.dims, p->value.data);
  wr.save(path);
}

inline CheckpointContents read_checkpoint(const std::filesystem::path& path) {
  io::Reader rd = io::Reader::load(path);
  if (rd.str(4) != std::string(kCheckpointMagic, 4))
    throw std::runtime_error(path.string() + ": not a checkpoint (bad magic)");
  const std::uint32_t count = rd.u32();
  CheckpointContents out;
  for (std::uint32_t k = 0; k < count; ++k) {
    const std::string name = rd.str(rd.u16());
    CheckpointTensor t;
    const std::uint8_t code = rd.u8();
    if (code > 1) throw std::runtime_error(path.string() + ": tensor " + name + " has unknown dtype " + std::to_string(code));
    t.dtype = Dtype(code);
    const std::uint8_t rank = rd.u8();
    std::size_t n = 1;
    for (std::uint8_t r = 0; r < rank; ++r) {
      t.dims.push_back(rd.u32());
      n *= t.dims.back();
    }
    rd.need(n * (t.dtype == Dtype::F32 ? 4 : 8));
    t.values.resize(n);
    for (double& v : t.values) v = t.dtype == Dtype::F32 ? double(rd.f32()) : rd.f64();
    if (!out.emplace(name, std::move(t)).second)
      throw std::runtime_error(path.string() + ": duplicate tensor " + name);
  }
  if (rd.remaining() != 0) throw std::runtime_error(path.string() + ": trailing bytes after last tensor");
  return out;
}

inline SolverConfig checkpoint_config(const CheckpointContents& c) {
  auto unet = c.find(kUnetConfigTensor);
  auto sched = c.find(kScheduleTensor);
  if (unet == c.end() || sched == c.end())
    throw std::runtime_error("checkpoint: missing architecture tensors");
  if (unet->second.values.size() != 2) throw std::runtime_error("checkpoint: malformed solver.unet tensor");
  SolverConfig cfg;
  cfg.unet.base_channels = std::size_t(unet->second.values[0]);
  cfg.unet.attention_max_positions = std::size_t(unet->second.values[1]);
  cfg.schedule.alpha_bar = sched->second.values;
  cfg.unet.validate();
  cfg.schedule.validate();
  return cfg;
}

// Copies weights into `solver`; every parameter must be present with the
// exact shape and no unknown tensors are accepted.
template <class S>
void assign_checkpoint(Solver<S>& solver, const CheckpointContents& c) {
  const SolverConfig cfg = checkpoint_config(c);
  if (cfg.unet.base_channels != solver.config().unet.base_channels ||
      cfg.schedule.alpha_bar != solver.config().schedule.alpha_bar)
    throw std::runtime_error("checkpoint: architecture or schedule differs from the solver");
  std::size_t used = 2;
  for (auto& p : solver.params()) {
    auto it = c.find(p->name);
    if (it == c.end()) throw std::runtime_error("checkpoint: missing tensor " + p->name);
    if (it->second.dims != p->value.dims)
      throw std::runtime_error("checkpoint: tensor " + p->name + " has shape " + Tensor<double>(it->second.dims).dims_str() +
                               ", expected " + p->value.dims_str());
    for (std::size_t i = 0; i < p->size(); ++i) p->value[i] = S(it->second.values[i]);
    ++used;
  }
  if (used != c.size()) throw std::runtime_error("checkpoint: contains tensors the solver does not define");
}

template <class S>
std::unique_ptr<Solver<S>> load_checkpoint(const std::filesystem::path& path) {
  const CheckpointContents c = read_checkpoint(path);
  auto solver = std::make_unique<Solver<S>>(checkpoint_config(c));
  assign_checkpoint(*solver, c);
  return solver;
}

}  // namespace invdiff
