#pragma once

// Command implementations behind the `ddc` executable. Each returns a
// process exit code; all artifacts are written under the configured out_dir.

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "ddc/checkpoint.hpp"
#include "ddc/config.hpp"
#include "ddc/consistency.hpp"
#include "ddc/ddc_train.hpp"
#include "ddc/image_io.hpp"
#include "ddc/metrics.hpp"

#ifndef DDC_REVISION
#define DDC_REVISION "unversioned"
#endif

namespace ddc {

enum ExitCode : int {
  kExitOk = 0,
  kExitInternal = 1,
  kExitValidation = 2,
  kExitDivergence = 3,
  kExitBadCheckpoint = 4,
};

class MissingCheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Command-line overrides applied on top of the config file.
struct CommandOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> strategy;
  std::optional<std::size_t> steps;
  std::optional<double> sigma;
  std::optional<std::size_t> synthetic;
  std::optional<std::string> out;
  std::optional<std::string> axis;
};

inline bool is_training_command(const std::string& cmd) {
  return cmd == "train-denoiser" || cmd == "train-ddc";
}

inline RunConfig resolve_config(const std::string& cmd, const CommandOptions& o) {
  RunConfig c = load_config(o.config_path);
  if (o.seed) c.seed = *o.seed;
  if (o.strategy) c.solve.strategy = *o.strategy;
  if (o.steps) c.solve.steps = *o.steps;
  if (o.sigma) c.solve.sigma_y = *o.sigma;
  if (o.synthetic) (is_training_command(cmd) ? c.train_data : c.eval_data).synthetic = *o.synthetic;
  if (o.out) {
    // Checkpoints a command reads stay where the config puts them; --out only
    // moves what the command writes.
    if (cmd != "train-denoiser") c.denoiser_checkpoint = c.denoiser_checkpoint_path();
    if (!is_training_command(cmd)) c.ddc_checkpoint = c.ddc_checkpoint_path();
    c.out_dir = *o.out;
  }
  if (o.axis) c.sweep.axis = *o.axis;
  validate_config(c);
  return c;
}

/// Worker count: DDC_THREADS if set, else the hardware concurrency.
inline std::size_t worker_count() {
  std::size_t n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("DDC_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v > 0) n = std::min(n, std::size_t(v));
  }
  return n;
}

/// Runs fn(i) for i in [0, n). Results must be written to per-index slots.
template <class F>
void parallel_for(std::size_t n, F fn) {
  const std::size_t workers = std::min(worker_count(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = next++; i < n; i = next++) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

/// Distinct deterministic seeds for the different consumers of the master seed.
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t role) {
  std::uint64_t z = master + 0x9e3779b97f4a7c15ull * (role + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

inline Dataset load_source(const DataSource& src, std::size_t size, const std::string& what) {
  Dataset ds;
  if (src.synthetic > 0) {
    ds = synthetic_dataset(src.synthetic, size, src.synthetic_seed);
  } else {
    if (src.dir.empty()) throw DatasetError(what + ": no dataset directory configured and synthetic count is 0");
    ds = load_dataset(src.dir, size);
  }
  if (src.limit > 0 && ds.images.size() > src.limit) {
    ds.images.resize(src.limit);
    ds.names.resize(src.limit);
  }
  return ds;
}

inline Checkpoint open_checkpoint(const std::string& path, const std::string& what) {
  if (!std::filesystem::exists(path)) throw MissingCheckpointError(what + " checkpoint " + path + " does not exist");
  return load_checkpoint(path);
}

inline json checkpoint_metadata(const RunConfig& c, const std::string& kind, std::size_t steps) {
  json m = {{"format", "ddc-checkpoint"},
            {"kind", kind},
            {"config_hash", config_hash(c)},
            {"revision", DDC_REVISION},
            {"step", steps},
            {"seed", c.seed},
            {"image_size", c.image_size},
            {"schedule", schedule_to_json(c.schedule)},
            {"denoiser", unet_to_json(c.denoiser)},
            {"weights", "ema"}};
  if (kind == "ddc") m["consistency"] = unet_to_json(c.consistency);
  return m;
}

inline void add_schedule_tensors(Checkpoint& ck, const NoiseSchedule& s) {
  const auto& b = s.betas();
  const auto& ab = s.alpha_bars();
  ck.add("schedule.betas", Tensor({b.size()}, std::vector<float>(b.begin(), b.end())));
  ck.add("schedule.alpha_bars", Tensor({ab.size() - 1}, std::vector<float>(ab.begin() + 1, ab.end())));
}

inline DenoiserModel<float> denoiser_from_checkpoint(const Checkpoint& ck) {
  const auto& m = ck.metadata;
  if (!m.contains("denoiser") || !m.contains("schedule")) {
    throw CheckpointFormatError("checkpoint metadata lacks the denoiser configuration");
  }
  DenoiserModel<float> model(unet_from_json(m["denoiser"], UNetConfig{}, "checkpoint.denoiser"),
                             schedule_from_json(m["schedule"]), 0);
  try {
    load_parameter_values(model.parameters(), ck.with_prefix("denoiser."));
  } catch (const std::exception& e) {
    throw CheckpointFormatError(std::string("denoiser tensors do not match the stored configuration: ") + e.what());
  }
  return model;
}

inline ConsistencyModel<float> consistency_from_checkpoint(const Checkpoint& ck) {
  if (!ck.metadata.contains("consistency")) {
    throw CheckpointFormatError("checkpoint does not contain a consistency model");
  }
  ConsistencyModel<float> model(
      unet_from_json(ck.metadata["consistency"], ConsistencyModel<float>::normalize(UNetConfig{}), "checkpoint.consistency"), 0);
  try {
    load_parameter_values(model.parameters(), ck.with_prefix("consistency."));
  } catch (const std::exception& e) {
    throw CheckpointFormatError(std::string("consistency tensors do not match the stored configuration: ") + e.what());
  }
  return model;
}

inline void ensure_dir(const std::string& dir) { std::filesystem::create_directories(dir); }

inline std::string index_name(const std::string& prefix, std::size_t i, const std::string& ext) {
  std::ostringstream os;
  os << prefix << std::setw(4) << std::setfill('0') << i << ext;
  return os.str();
}

inline void write_text(const std::filesystem::path& p, const std::string& s) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + p.string());
  f << s;
}

// ---------------------------------------------------------------------------

inline int cmd_train_denoiser(const RunConfig& c, std::ostream& out) {
  const auto data = load_source(c.train_data, c.image_size, "train_data");
  ensure_dir(c.out_dir);
  DenoiserModel<float> model(c.denoiser, c.schedule, derive_seed(c.seed, 1));
  auto tcfg = c.train_denoiser;
  tcfg.seed = derive_seed(c.seed, 2);
  std::ostringstream log;
  double last = 0;
  train_denoiser(model, data.images, tcfg, [&](const TrainLogEntry& e) {
    log << json{{"step", e.step}, {"loss", e.loss}}.dump() << "\n";
    last = e.loss;
  });
  write_text(std::filesystem::path(c.out_dir) / "denoiser_loss.jsonl", log.str());
  Checkpoint ck;
  ck.metadata = checkpoint_metadata(c, "denoiser", tcfg.steps);
  ck.add_parameters("denoiser.", model.parameters());
  add_schedule_tensors(ck, model.schedule());
  save_checkpoint(c.denoiser_checkpoint_path(), ck);
  out << "trained denoiser on " << data.images.size() << " images for " << tcfg.steps
      << " steps; final loss " << last << "\n"
      << "checkpoint: " << c.denoiser_checkpoint_path() << "\n";
  return kExitOk;
}

inline int cmd_train_ddc(const RunConfig& c, std::ostream& out) {
  const auto den_ck = open_checkpoint(c.denoiser_checkpoint_path(), "denoiser");
  auto denoiser = denoiser_from_checkpoint(den_ck);
  denoiser.freeze();
  const auto data = load_source(c.train_data, c.image_size, "train_data");
  ensure_dir(c.out_dir);
  ConsistencyModel<float> model(c.consistency, derive_seed(c.seed, 3));
  auto tcfg = c.train_ddc;
  tcfg.seed = derive_seed(c.seed, 4);
  std::ostringstream log;
  LossBreakdown last;
  train_ddc(model, denoiser, data.images, c.pool, tcfg, [&](const DdcLogEntry& e) {
    log << json{{"step", e.step}, {"L_mse", e.loss.mse}, {"L_perc", e.loss.perceptual},
                {"L_kl", e.loss.kl}, {"total", e.loss.total}}.dump()
        << "\n";
    last = e.loss;
  });
  write_text(std::filesystem::path(c.out_dir) / "ddc_loss.jsonl", log.str());

  RunConfig meta_cfg = c;
  meta_cfg.denoiser = denoiser.net().config();
  meta_cfg.schedule = denoiser.schedule_config();
  Checkpoint ck;
  ck.metadata = checkpoint_metadata(meta_cfg, "ddc", tcfg.steps);
  ck.metadata["denoiser_checkpoint"] = den_ck.metadata.value("config_hash", "");
  ck.add_parameters("consistency.", model.parameters());
  for (const auto& [name, t] : den_ck.tensors)
    if (name.rfind("denoiser.", 0) == 0 || name.rfind("schedule.", 0) == 0) ck.add(name, t);
  const FeatureExtractor<float> fx(3);
  for (std::size_t l = 0; l < fx.weights().size(); ++l) {
    ck.add("perceptual." + std::to_string(l) + ".w", fx.weights()[l]);
    ck.add("perceptual." + std::to_string(l) + ".b", fx.biases()[l]);
  }
  save_checkpoint(c.ddc_checkpoint_path(), ck);
  out << "trained consistency model for " << tcfg.steps << " steps; final total loss " << last.total << "\n"
      << "checkpoint: " << c.ddc_checkpoint_path() << "\n";
  return kExitOk;
}

/// Models needed by the sampling commands.
struct LoadedModels {
  DenoiserModel<float> denoiser;
  std::optional<ConsistencyModel<float>> consistency;
};

inline LoadedModels load_models(const RunConfig& c, bool need_consistency) {
  LoadedModels m;
  if (need_consistency) {
    const auto ck = open_checkpoint(c.ddc_checkpoint_path(), "DDC");
    m.denoiser = denoiser_from_checkpoint(ck);
    m.consistency = consistency_from_checkpoint(ck);
  } else {
    m.denoiser = denoiser_from_checkpoint(open_checkpoint(c.denoiser_checkpoint_path(), "denoiser"));
  }
  m.denoiser.freeze();
  return m;
}

inline void check_compatible(StrategyKind s, const OperatorSpec& task) {
  if (s == StrategyKind::DDNM && !task.is_linear()) {
    throw ConfigError("strategy ddnm needs a linear operator; task " + task.name() + " is not linear");
  }
}

inline RespacedSchedule make_respacing(const RunConfig& c, const NoiseSchedule& s, std::size_t steps) {
  if (!c.solve.respacing.empty()) return respace(s, c.solve.respacing);
  return respace(s, uniform_subsequence(s.T(), steps));
}

struct ImageResult {
  double psnr = 0, ssim = 0, psnr_baseline = 0, ssim_baseline = 0;
  Tensor restored, measurement;
};

struct EvalResult {
  std::vector<ImageResult> images;
  double mean_psnr = 0, mean_ssim = 0, mean_psnr_baseline = 0, mean_ssim_baseline = 0;
  std::optional<FrechetResult> frechet;
};

/// Degrades every evaluation image, restores it and scores it. Image i uses
/// the generator stream (seed, i) for its mask, measurement noise and sampler.
inline EvalResult evaluate(const RunConfig& c, const LoadedModels& models, const Dataset& data,
                           const OperatorSpec& task, StrategyKind kind, const RespacedSchedule& sched,
                           double sigma_y) {
  check_compatible(kind, task);
  ConsistencyStrategy<float> strategy;
  strategy.kind = kind;
  strategy.zeta = c.solve.zeta;
  strategy.sigma_scale = c.solve.ddnm_scale;
  strategy.clip_x0 = c.solve.clip_x0;
  if (kind == StrategyKind::DDC) {
    if (!models.consistency) throw ConfigError("strategy ddc needs a DDC checkpoint");
    strategy.model = &*models.consistency;
  }
  const std::size_t n = data.images.size();
  EvalResult r;
  r.images.resize(n);
  const ImageGeometry geom{3, c.image_size, c.image_size};
  parallel_for(n, [&](std::size_t i) {
    std::vector<Rng> rngs{Rng::stream(c.seed, i)};
    const DegradationOperator op(task, geom, &rngs[0]);
    const auto x = reshape(data.images[i], {1, 3, c.image_size, c.image_size});
    const auto y = add_noise(op.apply(x), sigma_y, rngs[0]);
    const auto baseline = clamp_image(lift_measurement(y, op));
    const auto restored = solve(y, op, strategy, models.denoiser, sched, rngs, sigma_y);
    auto& ir = r.images[i];
    ir.psnr = psnr(restored, x);
    ir.ssim = ssim(restored, x);
    ir.psnr_baseline = psnr(baseline, x);
    ir.ssim_baseline = ssim(baseline, x);
    ir.restored = reshape(restored, {3, c.image_size, c.image_size});
    const auto& og = op.output_geometry();
    ir.measurement = reshape(clamp_image(y), {og.channels, og.height, og.width});
  });
  for (const auto& ir : r.images) {
    r.mean_psnr += ir.psnr / double(n);
    r.mean_ssim += ir.ssim / double(n);
    r.mean_psnr_baseline += ir.psnr_baseline / double(n);
    r.mean_ssim_baseline += ir.ssim_baseline / double(n);
  }
  if (n >= 2) {
    std::vector<Tensor> restored, clean;
    for (std::size_t i = 0; i < n; ++i) {
      restored.push_back(r.images[i].restored);
      clean.push_back(data.images[i]);
    }
    r.frechet = frechet_proxy(stack_constant(restored), stack_constant(clean));
  }
  return r;
}

inline json eval_summary(const EvalResult& r) {
  json j = {{"mean_psnr", r.mean_psnr},
            {"mean_ssim", r.mean_ssim},
            {"mean_psnr_baseline", r.mean_psnr_baseline},
            {"mean_ssim_baseline", r.mean_ssim_baseline},
            {"frechet_proxy", r.frechet ? json(r.frechet->value) : json(nullptr)},
            {"frechet_small_sample", r.frechet ? r.frechet->small_sample : true}};
  return j;
}

inline int cmd_solve(const RunConfig& c, std::ostream& out) {
  const auto kind = parse_strategy(c.solve.strategy);
  check_compatible(kind, c.solve.task);
  const auto models = load_models(c, kind == StrategyKind::DDC);
  const auto data = load_source(c.eval_data, c.image_size, "eval_data");
  const auto sched = make_respacing(c, models.denoiser.schedule(), c.solve.steps);
  const auto r = evaluate(c, models, data, c.solve.task, kind, sched, c.solve.sigma_y);
  ensure_dir(c.out_dir);
  json images = json::array();
  for (std::size_t i = 0; i < r.images.size(); ++i) {
    const auto& ir = r.images[i];
    json e = {{"index", i}, {"name", data.names[i]}, {"psnr", ir.psnr}, {"ssim", ir.ssim},
              {"psnr_baseline", ir.psnr_baseline}, {"ssim_baseline", ir.ssim_baseline}};
    if (c.solve.save_images) {
      const auto restored = index_name("restored_", i, ".png");
      const auto measured = index_name("measurement_", i, ".png");
      write_png(std::filesystem::path(c.out_dir) / restored, ir.restored);
      write_png(std::filesystem::path(c.out_dir) / measured, ir.measurement);
      e["restored"] = restored;
      e["measurement"] = measured;
    }
    images.push_back(e);
  }
  json report = {{"command", "solve"},
                 {"task", task_to_json(c.solve.task)},
                 {"strategy", c.solve.strategy},
                 {"sigma_y", c.solve.sigma_y},
                 {"steps", sched.num_steps()},
                 {"respacing", sched.timesteps()},
                 {"seed", c.seed},
                 {"config_hash", config_hash(c)},
                 {"images", images}};
  report.update(eval_summary(r));
  write_text(std::filesystem::path(c.out_dir) / "report.json", report.dump(2) + "\n");
  out << "solved " << r.images.size() << " images (" << c.solve.task.name() << ", " << c.solve.strategy
      << ", " << sched.num_steps() << " steps): mean PSNR " << r.mean_psnr << " dB, baseline "
      << r.mean_psnr_baseline << " dB\n";
  return kExitOk;
}

inline int cmd_diagnose_kurtosis(const RunConfig& c, std::ostream& out) {
  std::vector<StrategyKind> kinds;
  bool need_ddc = false;
  for (const auto& s : c.diagnose.strategies) {
    kinds.push_back(parse_strategy(s));
    check_compatible(kinds.back(), c.solve.task);
    need_ddc |= kinds.back() == StrategyKind::DDC;
  }
  const auto models = load_models(c, need_ddc);
  const auto data = load_source(c.eval_data, c.image_size, "eval_data");
  const auto sched = make_respacing(c, models.denoiser.schedule(), c.diagnose.steps);
  const ImageGeometry geom{3, c.image_size, c.image_size};
  const std::size_t n = data.images.size();
  json series = json::array();
  json summary = json::object();
  std::ostringstream csv;
  csv << "strategy,image,step,timestep,kurtosis\n";
  for (std::size_t si = 0; si < kinds.size(); ++si) {
    ConsistencyStrategy<float> strategy;
    strategy.kind = kinds[si];
    strategy.zeta = c.solve.zeta;
    strategy.sigma_scale = c.solve.ddnm_scale;
    strategy.clip_x0 = c.solve.clip_x0;
    if (strategy.kind == StrategyKind::DDC) strategy.model = &*models.consistency;
    std::vector<std::vector<KurtosisPoint>> per_image(n);
    parallel_for(n, [&](std::size_t i) {
      std::vector<Rng> rngs{Rng::stream(c.seed, i)};
      const DegradationOperator op(c.solve.task, geom, &rngs[0]);
      const auto x = reshape(data.images[i], {1, 3, c.image_size, c.image_size});
      const auto y = add_noise(op.apply(x), c.solve.sigma_y, rngs[0]);
      per_image[i] = kurtosis_trajectory(y, op, strategy, models.denoiser, sched, rngs, c.solve.sigma_y);
    });
    double acc = 0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < n; ++i)
      for (const auto& p : per_image[i]) {
        series.push_back({{"strategy", c.diagnose.strategies[si]}, {"image", i}, {"step", p.step},
                          {"timestep", p.timestep}, {"kurtosis", p.kurtosis}});
        csv << c.diagnose.strategies[si] << "," << i << "," << p.step << "," << p.timestep << ","
            << json(p.kurtosis).dump() << "\n";
        acc += std::abs(p.kurtosis);
        ++count;
      }
    summary[c.diagnose.strategies[si]] = {{"mean_abs_kurtosis", count ? acc / double(count) : 0.0}};
  }
  ensure_dir(c.out_dir);
  json report = {{"command", "diagnose-kurtosis"},
                 {"task", task_to_json(c.solve.task)},
                 {"sigma_y", c.solve.sigma_y},
                 {"steps", sched.num_steps()},
                 {"seed", c.seed},
                 {"config_hash", config_hash(c)},
                 {"summary", summary},
                 {"series", series}};
  write_text(std::filesystem::path(c.out_dir) / "kurtosis.json", report.dump(2) + "\n");
  write_text(std::filesystem::path(c.out_dir) / "kurtosis.csv", csv.str());
  for (const auto& [k, v] : summary.items()) out << k << ": mean |kurtosis| " << v["mean_abs_kurtosis"] << "\n";
  return kExitOk;
}

inline int cmd_sweep(const RunConfig& c, std::ostream& out) {
  const auto kind = parse_strategy(c.solve.strategy);
  check_compatible(kind, c.solve.task);
  const auto models = load_models(c, kind == StrategyKind::DDC);
  const auto data = load_source(c.eval_data, c.image_size, "eval_data");
  json rows = json::array();
  std::ostringstream csv;
  csv << "steps,sigma_y,mean_psnr,mean_ssim,mean_psnr_baseline,frechet_proxy\n";
  auto run = [&](std::size_t steps, double sigma) {
    const auto sched = respace(models.denoiser.schedule(), uniform_subsequence(models.denoiser.schedule().T(), steps));
    const auto r = evaluate(c, models, data, c.solve.task, kind, sched, sigma);
    json row = {{"steps", steps}, {"sigma_y", sigma}};
    row.update(eval_summary(r));
    csv << steps << "," << json(sigma).dump() << "," << json(r.mean_psnr).dump() << ","
        << json(r.mean_ssim).dump() << "," << json(r.mean_psnr_baseline).dump() << ","
        << (r.frechet ? json(r.frechet->value).dump() : std::string("")) << "\n";
    out << "steps " << steps << ", sigma_y " << sigma << ": PSNR " << r.mean_psnr << " dB\n";
    rows.push_back(row);
  };
  if (c.sweep.axis == "steps") {
    for (auto s : c.sweep.steps_grid) run(s, c.solve.sigma_y);
  } else {
    for (auto s : c.sweep.sigma_grid) run(c.solve.steps, s);
  }
  json report = {{"command", "sweep"},
                 {"axis", c.sweep.axis},
                 {"task", task_to_json(c.solve.task)},
                 {"strategy", c.solve.strategy},
                 {"seed", c.seed},
                 {"config_hash", config_hash(c)},
                 {"rows", rows}};
  if (!rows.empty()) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < rows.size(); ++i)
      if (rows[i]["mean_psnr"].get<double>() > rows[best]["mean_psnr"].get<double>()) best = i;
    report["best"] = rows[best][c.sweep.axis == "steps" ? "steps" : "sigma_y"];
  }
  ensure_dir(c.out_dir);
  const std::string stem = "sweep_" + c.sweep.axis;
  write_text(std::filesystem::path(c.out_dir) / (stem + ".json"), report.dump(2) + "\n");
  write_text(std::filesystem::path(c.out_dir) / (stem + ".csv"), csv.str());
  return kExitOk;
}

/// Dispatches a subcommand and maps failures to exit codes.
inline int run_command(const std::string& cmd, const CommandOptions& o, std::ostream& out = std::cout,
                       std::ostream& err = std::cerr) {
  try {
    const RunConfig c = resolve_config(cmd, o);
    if (cmd == "train-denoiser") return cmd_train_denoiser(c, out);
    if (cmd == "train-ddc") return cmd_train_ddc(c, out);
    if (cmd == "solve") return cmd_solve(c, out);
    if (cmd == "diagnose-kurtosis") return cmd_diagnose_kurtosis(c, out);
    if (cmd == "sweep") return cmd_sweep(c, out);
    err << "error: unknown command '" << cmd << "'\n";
    return kExitValidation;
  } catch (const DivergenceError& e) {
    err << "error: " << e.what() << "\n";
    return kExitDivergence;
  } catch (const CheckpointFormatError& e) {
    err << "error: corrupt checkpoint: " << e.what() << "\n";
    return kExitBadCheckpoint;
  } catch (const MissingCheckpointError& e) {
    err << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const DatasetError& e) {
    err << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const ConfigError& e) {
    err << "error: invalid configuration: " << e.what() << "\n";
    return kExitValidation;
  } catch (const UnsupportedOperation& e) {
    err << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitInternal;
  }
}

}  // namespace ddc
