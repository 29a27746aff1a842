#pragma once

// On-disk synthetic dataset: one GridFile triple (cgm, env, buildings) per
// scene plus a JSON manifest. Scene i draws from the stream derived from
// (seed, i), so generation order does not affect content.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "invdiff/grid.hpp"
#include "invdiff/grid_io.hpp"
#include "invdiff/rng.hpp"
#include "invdiff/scene.hpp"
#include "json.hpp"

namespace invdiff {

struct SceneEntry {
  std::string id;
  std::string cgm, env, buildings;  // paths relative to the manifest directory
  BaseStation bs;
  std::uint64_t seed = 0;
};

struct Manifest {
  std::filesystem::path dir;
  std::size_t h = 0, w = 0;
  double cell_size_m = 1.0;
  std::vector<SceneEntry> scenes;

  std::filesystem::path resolve(const std::string& rel) const { return dir / rel; }
};

struct DatasetOptions {
  std::size_t n_buildings = 8;
  PropagationParams propagation{};
};

struct SceneSample {
  Scene scene;
  Grid<double> cgm;
  Grid<double> env;
};

inline SceneSample make_scene_sample(const Rng& root, std::size_t index, std::size_t h,
                                     std::size_t w, const DatasetOptions& opt = {}) {
  Rng rng = root.derive(index);
  SceneSample s;
  s.scene = generate_scene(rng, h, w, opt.n_buildings);
  s.cgm = synthesize_cgm(s.scene, rng, opt.propagation);
  s.env = env_raster(s.scene);
  return s;
}

inline std::string scene_id(std::size_t i) {
  std::ostringstream os;
  os << "scene_" << std::setw(4) << std::setfill('0') << i;
  return os.str();
}

inline nlohmann::json manifest_json(const Manifest& m) {
  nlohmann::json scenes = nlohmann::json::array();
  for (const auto& e : m.scenes) {
    scenes.push_back({{"id", e.id},
                      {"cgm", e.cgm},
                      {"env", e.env},
                      {"buildings", e.buildings},
                      {"bs", {e.bs.height_m, e.bs.x, e.bs.y}},
                      {"seed", e.seed}});
  }
  return {{"scenes", scenes}, {"h", m.h}, {"w", m.w}, {"cell_size_m", m.cell_size_m}};
}

// Writes n_scenes scenes under out_dir and returns the manifest path.
inline std::filesystem::path make_dataset(std::uint64_t seed, std::size_t n_scenes, std::size_t h,
                                          std::size_t w, const std::filesystem::path& out_dir,
                                          const DatasetOptions& opt = {}) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw std::runtime_error("make_dataset: cannot create " + out_dir.string() + ": " + ec.message());
  const Rng root(seed);
  Manifest m;
  m.dir = out_dir;
  m.h = h;
  m.w = w;
  for (std::size_t i = 0; i < n_scenes; ++i) {
    SceneSample s = make_scene_sample(root, i, h, w, opt);
    SceneEntry e;
    e.id = scene_id(i);
    e.cgm = e.id + "_cgm.cgmg";
    e.env = e.id + "_env.cgmg";
    e.buildings = e.id + "_buildings.cgmg";
    e.bs = s.scene.bs;
    e.seed = root.derive(i).seed_key();
    try {
      write_grid(out_dir / e.cgm, s.cgm.cast<float>());
      write_grid(out_dir / e.env, s.env.cast<float>());
      write_grid(out_dir / e.buildings, s.scene.buildings.cast<float>());
    } catch (const std::exception& ex) {
      throw std::runtime_error("make_dataset: scene " + e.id + ": " + ex.what());
    }
    m.scenes.push_back(std::move(e));
  }
  const auto path = out_dir / "manifest.json";
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("make_dataset: cannot write " + path.string());
  os << manifest_json(m).dump(2) << "\n";
  return path;
}

inline Manifest load_manifest(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("load_manifest: cannot open " + path.string());
  nlohmann::json j;
  try {
    is >> j;
  } catch (const std::exception& ex) {
    throw std::runtime_error("load_manifest: " + path.string() + ": " + ex.what());
  }
  Manifest m;
  m.dir = path.parent_path();
  try {
    m.h = j.at("h").get<std::size_t>();
    m.w = j.at("w").get<std::size_t>();
    m.cell_size_m = j.at("cell_size_m").get<double>();
    for (const auto& s : j.at("scenes")) {
      SceneEntry e;
      e.id = s.at("id").get<std::string>();
      e.cgm = s.at("cgm").get<std::string>();
      e.env = s.at("env").get<std::string>();
      e.buildings = s.at("buildings").get<std::string>();
      const auto& bs = s.at("bs");
      e.bs = {bs.at(0).get<double>(), bs.at(1).get<std::size_t>(), bs.at(2).get<std::size_t>()};
      e.seed = s.at("seed").get<std::uint64_t>();
      m.scenes.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& ex) {
    throw std::runtime_error("load_manifest: " + path.string() + ": malformed manifest: " + ex.what());
  }
  return m;
}

// Ground truth and environment raster of one manifest entry.
template <class S>
struct LoadedScene {
  std::string id;
  Grid<S> cgm;
  Grid<S> env;
};

template <class S>
LoadedScene<S> load_scene(const Manifest& m, const SceneEntry& e) {
  LoadedScene<S> out;
  out.id = e.id;
  try {
    out.cgm = read_grid<S>(m.resolve(e.cgm));
    out.env = read_grid<S>(m.resolve(e.env));
  } catch (const std::exception& ex) {
    throw std::runtime_error("scene " + e.id + ": " + ex.what());
  }
  if (out.cgm.h() != m.h || out.cgm.w() != m.w || out.cgm.c() != 1 || out.env.c() != 2 ||
      out.env.h() != m.h || out.env.w() != m.w) {
    throw std::runtime_error("scene " + e.id + ": grid shapes " + out.cgm.shape().str() + " / " +
                             out.env.shape().str() + " do not match manifest " +
                             std::to_string(m.h) + "x" + std::to_string(m.w));
  }
  return out;
}

}  // namespace invdiff
