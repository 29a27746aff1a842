// invdiff: dataset generation, training, reconstruction, evaluation and
// self-checks for the invertible unrolled diffusion solver.
//
// Exit codes: 0 success, 1 invalid input or configuration, 2 a check failed.

#include <CLI11.hpp>

#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "invdiff/checkpoint.hpp"
#include "invdiff/checks.hpp"
#include "invdiff/config.hpp"
#include "invdiff/dataset.hpp"
#include "invdiff/grid_io.hpp"
#include "invdiff/measurement.hpp"
#include "invdiff/metrics.hpp"
#include "invdiff/sampler.hpp"
#include "invdiff/train.hpp"

namespace fs = std::filesystem;
using namespace invdiff;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInvalid = 1;
constexpr int kExitCheckFailed = 2;

struct InvalidInput : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Config file, then --set pairs, then dedicated flags.
struct ConfigSource {
  std::string file;
  std::vector<std::string> sets;
  std::vector<std::pair<std::string, std::string>> flags;

  RunConfig resolve() const {
    RunConfig cfg;
    if (!file.empty()) cfg = load_config_file(file);
    for (const auto& kv : sets) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw std::invalid_argument("--set expects key=value, got '" + kv + "'");
      cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    for (const auto& [k, v] : flags) cfg.set(k, v);
    cfg.validate();
    return cfg;
  }
};

void add_config_options(CLI::App* cmd, ConfigSource& src, const std::vector<std::string>& keys) {
  cmd->add_option("--config", src.file, "key=value configuration file")->check(CLI::ExistingFile);
  cmd->add_option("--set", src.sets, "override a configuration key (key=value), repeatable");
  for (const auto& key : keys) {
    std::string flag = "--" + key;
    for (char& ch : flag)
      if (ch == '_') ch = '-';
    cmd->add_option_function<std::string>(
        flag, [&src, key](const std::string& v) { src.flags.emplace_back(key, v); }, "sets config key " + key);
  }
}

void echo_config(const RunConfig& cfg, const fs::path& dir) {
  fs::create_directories(dir);
  std::ofstream os(dir / "config.txt", std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + (dir / "config.txt").string());
  os << "# effective configuration\n" << cfg.to_text();
}

void print_config(const RunConfig& cfg) {
  std::istringstream is(cfg.to_text());
  std::string line;
  while (std::getline(is, line)) std::cout << "# " << line << "\n";
}

template <class S>
std::vector<LoadedScene<S>> load_scenes(const Manifest& m) {
  std::vector<LoadedScene<S>> out;
  out.reserve(m.scenes.size());
  for (const auto& e : m.scenes) out.push_back(load_scene<S>(m, e));
  return out;
}

Manifest open_manifest(const std::string& data) {
  fs::path p(data);
  if (fs::is_directory(p)) p /= "manifest.json";
  if (!fs::exists(p)) throw InvalidInput("dataset manifest not found: " + p.string());
  return load_manifest(p);
}

// Checks the grid size against the network and records the dataset shape in
// the echoed configuration.
RunConfig with_dataset(RunConfig cfg, const Manifest& m, const UNetConfig& unet) {
  if (m.h != m.w) throw InvalidInput("dataset grids must be square, got " + std::to_string(m.h) + "x" + std::to_string(m.w));
  unet.check_input(m.h, m.w);
  cfg.size = m.h;
  cfg.scenes = m.scenes.size();
  return cfg;
}

std::size_t scene_index(const Manifest& m, const std::string& id) {
  for (std::size_t i = 0; i < m.scenes.size(); ++i)
    if (m.scenes[i].id == id) return i;
  throw InvalidInput("scene '" + id + "' is not in the manifest");
}

// Mask for scene i: from `mask_dir/<id>.cgmm` when given, else the seeded test mask.
MeasurementOp scene_mask(const RunConfig& cfg, const Manifest& m, std::size_t i, const std::string& mask_dir) {
  if (!mask_dir.empty()) {
    const fs::path p = fs::path(mask_dir) / (m.scenes[i].id + ".cgmm");
    if (!fs::exists(p)) throw InvalidInput("scene " + m.scenes[i].id + ": mask file " + p.string() + " not found");
    auto op = read_mask(p);
    if (op.h() != m.h || op.w() != m.w) throw InvalidInput("scene " + m.scenes[i].id + ": mask shape does not match grid");
    return op;
  }
  return test_mask(cfg.train.seed, i, m.h, m.w, cfg.train.mask_ratio);
}

// ---- gen ------------------------------------------------------------------

int run_gen(const RunConfig& cfg, const std::string& out) {
  const auto manifest = make_dataset(cfg.train.seed, cfg.scenes, cfg.size, cfg.size, out);
  echo_config(cfg, out);
  std::cout << "wrote " << cfg.scenes << " scenes (" << cfg.size << "x" << cfg.size << ") to " << manifest.string() << "\n";
  return kExitOk;
}

// ---- mask -----------------------------------------------------------------

int run_mask(const RunConfig& base, const std::string& data, const std::string& out) {
  const Manifest m = open_manifest(data);
  RunConfig cfg = base;
  cfg.size = m.h;
  cfg.scenes = m.scenes.size();
  fs::create_directories(out);
  for (std::size_t i = 0; i < m.scenes.size(); ++i)
    write_mask(fs::path(out) / (m.scenes[i].id + ".cgmm"), test_mask(cfg.train.seed, i, m.h, m.w, cfg.train.mask_ratio));
  echo_config(cfg, out);
  std::cout << "wrote " << m.scenes.size() << " masks (ratio " << cfg.train.mask_ratio << ") to " << out << "\n";
  return kExitOk;
}

// ---- train ----------------------------------------------------------------

template <class S>
int train_typed(const RunConfig& cfg, const Manifest& m, const fs::path& out) {
  auto scenes = load_scenes<S>(m);
  Solver<S> solver(cfg.solver);
  Rng init = Rng(cfg.train.seed).derive(kInitStream);
  solver.initialize(init);
  fs::create_directories(out);
  echo_config(cfg, out);
  std::ofstream log(out / "train_log.jsonl", std::ios::trunc);
  if (!log) throw std::runtime_error("cannot write " + (out / "train_log.jsonl").string());
  auto report = train(solver, scenes, cfg.train, &log, [](const EpochSummary& e) {
    std::printf("epoch %3zu  loss %.6f  test %.6f  lr %.1e  peak %zu B  %.1f s%s\n", e.epoch + 1, e.loss, e.test_loss,
                e.lr, e.peak_bytes, e.wall_ms / 1000.0,
                e.drift_flags ? ("  drift flags " + std::to_string(e.drift_flags)).c_str() : "");
    std::fflush(stdout);
  });
  save_checkpoint(out / "checkpoint.idcw", solver);
  nlohmann::json epochs = nlohmann::json::array();
  for (const auto& e : report.epochs)
    epochs.push_back({{"epoch", e.epoch}, {"loss", e.loss}, {"test_loss", e.test_loss}, {"wall_ms", e.wall_ms},
                      {"peak_bytes", e.peak_bytes}, {"drift_flags", e.drift_flags}, {"lr", e.lr}});
  std::ofstream(out / "summary.json", std::ios::trunc) << nlohmann::json{{"epochs", epochs}}.dump(2) << "\n";
  std::cout << "checkpoint: " << (out / "checkpoint.idcw").string() << "\n";
  return kExitOk;
}

int run_train(const RunConfig& base, const std::string& data, const std::string& out) {
  const Manifest m = open_manifest(data);
  const RunConfig cfg = with_dataset(base, m, base.solver.unet);
  return cfg.dtype == "f64" ? train_typed<double>(cfg, m, out) : train_typed<float>(cfg, m, out);
}

// ---- reconstruct ----------------------------------------------------------

std::unique_ptr<Solver<float>> open_checkpoint(const std::string& path) {
  if (!fs::exists(path)) throw InvalidInput("checkpoint not found: " + path);
  return load_checkpoint<float>(path);
}

int run_reconstruct(const RunConfig& base, const std::string& ckpt, const std::string& data,
                    const std::vector<std::string>& ids, const std::string& mask_dir, const std::string& out, bool pgm) {
  auto solver = open_checkpoint(ckpt);
  const Manifest m = open_manifest(data);
  RunConfig cfg = with_dataset(base, m, solver->config().unet);
  cfg.solver = solver->config();
  fs::create_directories(out);
  std::vector<std::size_t> idx;
  if (ids.empty())
    for (std::size_t i = 0; i < m.scenes.size(); ++i) idx.push_back(i);
  for (const auto& id : ids) idx.push_back(scene_index(m, id));
  for (std::size_t i : idx) {
    auto sc = load_scene<float>(m, m.scenes[i]);
    auto in = SceneInput<float>::observe(scene_mask(cfg, m, i, mask_dir), sc.cgm, sc.env);
    Grid<float> pred = solver->solve(in);
    write_grid(fs::path(out) / (sc.id + "_recon.cgmg"), pred);
    if (pgm) {
      write_pgm(fs::path(out) / (sc.id + "_recon.pgm"), pred);
      write_pgm(fs::path(out) / (sc.id + "_target.pgm"), sc.cgm);
      write_pgm(fs::path(out) / (sc.id + "_error.pgm"), abs_error(pred, sc.cgm), 0.0, 0.25);
    }
    std::printf("%s  psnr %.2f dB  (back-projection %.2f dB)\n", sc.id.c_str(), psnr(pred, sc.cgm),
                psnr(in.backproj, sc.cgm));
  }
  echo_config(cfg, out);
  return kExitOk;
}

// ---- eval -----------------------------------------------------------------

int run_eval(const RunConfig& base, const std::string& ckpt, const std::string& data, const std::string& mask_dir,
             const std::string& split_name, const std::string& out, const std::string& pgm_dir) {
  auto solver = open_checkpoint(ckpt);
  const Manifest m = open_manifest(data);
  RunConfig cfg = with_dataset(base, m, solver->config().unet);
  cfg.solver = solver->config();
  std::vector<std::size_t> idx;
  if (split_name == "all") {
    for (std::size_t i = 0; i < m.scenes.size(); ++i) idx.push_back(i);
  } else {
    idx = split_scenes(m.scenes.size(), cfg.train.test_fraction).test;
    if (idx.empty()) throw InvalidInput("test split is empty (test_fraction = " + std::to_string(cfg.train.test_fraction) + ")");
  }
  std::vector<LoadedScene<float>> scenes;
  std::vector<MeasurementOp> ops;
  for (std::size_t i : idx) {
    scenes.push_back(load_scene<float>(m, m.scenes[i]));
    ops.push_back(scene_mask(cfg, m, i, mask_dir));
  }
  std::size_t k = 0;
  auto report = evaluate(scenes, ops, [&](const SceneInput<float>& in) {
    Grid<float> pred = solver->solve(in);
    if (!pgm_dir.empty()) {
      fs::create_directories(pgm_dir);
      write_pgm(fs::path(pgm_dir) / (scenes[k].id + "_recon.pgm"), pred);
      write_pgm(fs::path(pgm_dir) / (scenes[k].id + "_target.pgm"), scenes[k].cgm);
      write_pgm(fs::path(pgm_dir) / (scenes[k].id + "_error.pgm"), abs_error(pred, scenes[k].cgm), 0.0, 0.25);
    }
    ++k;
    return pred;
  });
  const auto& a = report.mean_model;
  const auto& b = report.mean_baseline;
  std::printf("%-16s %10s %8s %10s %8s\n", "", "PSNR(dB)", "SSIM", "NMSE", "RMSE");
  std::printf("%-16s %10.3f %8.4f %10.5f %8.5f\n", "model", a.psnr, a.ssim, a.nmse, a.rmse);
  std::printf("%-16s %10.3f %8.4f %10.5f %8.5f\n", "back-projection", b.psnr, b.ssim, b.nmse, b.rmse);
  std::printf("PSNR gain %.3f dB over %zu scenes\n", report.psnr_gain(), report.scenes.size());
  if (!out.empty()) {
    const fs::path p(out);
    if (p.has_parent_path()) {
      fs::create_directories(p.parent_path());
      echo_config(cfg, p.parent_path());
    }
    std::ofstream(p, std::ios::trunc) << report.to_json().dump(2) << "\n";
  }
  return kExitOk;
}

// ---- checks ---------------------------------------------------------------

int run_gradcheck(const RunConfig& cfg, const std::string& dtype, std::size_t cases, std::size_t size) {
  print_config(cfg);
  bool ok = true;
  if (dtype == "f64") {
    auto rep = gradient_checks(cfg.train.seed, cases);
    std::cout << rep.table();
    ok = rep.pass();
  }
  CheckReport eq;
  const std::size_t base = 8, steps = cfg.solver.schedule.steps(), batch = 2;
  if (dtype == "f64") {
    auto r = mode_equivalence<double>(cfg.train.seed, size, base, steps, batch);
    eq.rows.push_back({"cached vs invertible grads f64", r.tensors, r.max_rel, 1e-8, "worst " + r.worst_tensor});
    eq.rows.push_back({"cached vs invertible loss f64", 1, r.losses_identical ? 0.0 : 1.0, 0.0, "bit-identical"});
  }
  auto r = mode_equivalence<float>(cfg.train.seed, size, base, steps, batch);
  eq.rows.push_back({"cached vs invertible grads f32", r.tensors, r.max_rel, 1e-4, "worst " + r.worst_tensor});
  eq.rows.push_back({"cached vs invertible loss f32", 1, r.losses_identical ? 0.0 : 1.0, 0.0, "bit-identical"});
  std::cout << "\nmode equivalence at " << size << "x" << size << ", base " << base << ", T=" << steps << ", batch " << batch
            << "\n" << eq.table();
  ok = ok && eq.pass();
  std::cout << (ok ? "all checks passed\n" : "some checks FAILED\n");
  return ok ? kExitOk : kExitCheckFailed;
}

int run_roundtrip(const RunConfig& cfg, std::size_t cases) {
  print_config(cfg);
  auto rep = roundtrip_checks(cfg.train.seed, cases);
  std::cout << rep.table();
  return rep.pass() ? kExitOk : kExitCheckFailed;
}

int run_membench(const RunConfig& cfg, const std::string& steps_list, std::size_t reps, const std::string& out) {
  print_config(cfg);
  std::vector<std::size_t> steps;
  std::stringstream ss(steps_list);
  for (std::string item; std::getline(ss, item, ',');) {
    try {
      std::size_t pos = 0;
      const unsigned long v = std::stoul(item, &pos);
      if (pos != item.size() || v == 0) throw std::invalid_argument("");
      steps.push_back(v);
    } catch (const std::exception&) {
      throw InvalidInput("--T expects a comma-separated list of positive integers, got '" + steps_list + "'");
    }
  }
  if (steps.empty()) throw InvalidInput("--T is empty");
  auto report = membench<float>(cfg.solver.unet, steps, cfg.size, cfg.train.seed, cfg.train.mask_ratio, reps);
  std::cout << membench_table(report);
  if (!out.empty()) {
    const fs::path p(out);
    if (p.has_parent_path()) {
      fs::create_directories(p.parent_path());
      echo_config(cfg, p.parent_path());
    }
    std::ofstream(p, std::ios::trunc) << membench_json(report).dump(2) << "\n";
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Invertible unrolled diffusion solver for channel gain map reconstruction"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "show help for every command");

  ConfigSource src;
  std::string out, data, ckpt, mask_dir, split = "test", pgm_dir, dtype = "f64", steps_list = "1,2,3";
  std::vector<std::string> ids;
  bool pgm = false;
  std::size_t cases = 0, reps = 3, check_size = 32;

  auto* gen = app.add_subcommand("gen", "generate a synthetic dataset");
  add_config_options(gen, src, {"seed", "scenes", "size"});
  gen->add_option("--out", out, "output directory")->required();

  auto* mask = app.add_subcommand("mask", "write seeded measurement masks for every scene");
  add_config_options(mask, src, {"seed", "mask_ratio"});
  mask->add_option("--data", data, "dataset directory or manifest")->required();
  mask->add_option("--out", out, "output directory")->required();

  auto* tr = app.add_subcommand("train", "train the solver end to end");
  add_config_options(tr, src, {"seed", "mask_ratio", "epochs", "batch_size", "lr", "mode", "steps", "base_channels", "dtype"});
  tr->add_option("--data", data, "dataset directory or manifest")->required();
  tr->add_option("--out", out, "run directory (checkpoint, log, config)")->required();

  auto* rec = app.add_subcommand("reconstruct", "reconstruct scenes with a trained checkpoint");
  add_config_options(rec, src, {"seed", "mask_ratio"});
  rec->add_option("--checkpoint", ckpt, "checkpoint file")->required();
  rec->add_option("--data", data, "dataset directory or manifest")->required();
  rec->add_option("--scene", ids, "scene id (repeatable, default all)");
  rec->add_option("--masks", mask_dir, "directory of <scene>.cgmm masks (default: seeded test masks)");
  rec->add_option("--out", out, "output directory")->required();
  rec->add_flag("--pgm", pgm, "also write PGM images of prediction, target and error");

  auto* ev = app.add_subcommand("eval", "score a checkpoint against the back-projection baseline");
  add_config_options(ev, src, {"seed", "mask_ratio", "test_fraction"});
  ev->add_option("--checkpoint", ckpt, "checkpoint file")->required();
  ev->add_option("--data", data, "dataset directory or manifest")->required();
  ev->add_option("--masks", mask_dir, "directory of <scene>.cgmm masks (default: seeded test masks)");
  ev->add_option("--split", split, "scenes to evaluate")->check(CLI::IsMember({"test", "all"}));
  ev->add_option("--out", out, "JSON report path");
  ev->add_option("--pgm", pgm_dir, "directory for PGM image dumps");

  auto* gc = app.add_subcommand("gradcheck", "finite-difference and mode-equivalence checks");
  add_config_options(gc, src, {"seed", "steps"});
  gc->add_option("--dtype", dtype, "f64 runs every check, f32 only mode equivalence")->check(CLI::IsMember({"f32", "f64"}));
  gc->add_option("--cases", cases, "random cases per block (default 3)");
  gc->add_option("--size", check_size, "grid size for mode equivalence (default 32)");

  auto* rt = app.add_subcommand("roundtrip", "inversion round-trip errors per component");
  add_config_options(rt, src, {"seed"});
  rt->add_option("--cases", cases, "random cases per component (default 200)");

  auto* mb = app.add_subcommand("membench", "peak saved-for-backward memory per step count and mode");
  add_config_options(mb, src, {"seed", "size", "base_channels", "mask_ratio"});
  mb->add_option("--T", steps_list, "comma-separated step counts (default 1,2,3)");
  mb->add_option("--reps", reps, "timing repetitions per configuration (default 3)");
  mb->add_option("--out", out, "JSON report path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitInvalid;
  }

  try {
    const RunConfig cfg = src.resolve();
    if (*gen) return run_gen(cfg, out);
    if (*mask) return run_mask(cfg, data, out);
    if (*tr) return run_train(cfg, data, out);
    if (*rec) return run_reconstruct(cfg, ckpt, data, ids, mask_dir, out, pgm);
    if (*ev) return run_eval(cfg, ckpt, data, mask_dir, split, out, pgm_dir);
    if (*gc) return run_gradcheck(cfg, dtype, cases ? cases : 3, check_size);
    if (*rt) return run_roundtrip(cfg, cases ? cases : 200);
    if (*mb) return run_membench(cfg, steps_list, reps, out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInvalid;
  }
  return kExitInvalid;
}
