#pragma once

// Run configuration: JSON schema, defaults, validation and hashing.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "ddc/consistency.hpp"
#include "ddc/ddc_train.hpp"

namespace ddc {

using nlohmann::json;

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct DataSource {
  std::string dir;             // PNG directory; used when synthetic == 0
  std::size_t synthetic = 0;   // number of procedural images instead of a directory
  std::uint64_t synthetic_seed = 0;
  std::size_t limit = 0;       // 0 = all
};

struct SolveSettings {
  std::string strategy = "ddc";
  std::size_t steps = 5;
  std::vector<std::size_t> respacing;  // explicit subsequence; overrides `steps`
  OperatorSpec task = OperatorSpec::super_res(4);
  double sigma_y = 0.0;
  double zeta = 1.0;
  std::optional<double> ddnm_scale;
  bool clip_x0 = true;
  bool save_images = true;
};

struct DiagnoseSettings {
  std::size_t steps = 100;
  std::vector<std::string> strategies = {"dps", "ddnm", "none"};
};

struct SweepSettings {
  std::string axis = "steps";
  std::vector<std::size_t> steps_grid = {2, 5, 10, 20, 50};
  std::vector<double> sigma_grid = {0.0, 0.05, 0.1, 0.25};
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::size_t image_size = 32;
  ScheduleConfig schedule{};
  UNetConfig denoiser{};
  UNetConfig consistency = ConsistencyModel<float>::normalize(UNetConfig{});
  DataSource train_data{};
  DataSource eval_data{};
  DenoiserTrainConfig train_denoiser{};
  DdcTrainConfig train_ddc{};
  TaskPool pool = TaskPool::generalized();
  SolveSettings solve{};
  DiagnoseSettings diagnose{};
  SweepSettings sweep{};
  std::string out_dir = "ddc_out";
  std::string denoiser_checkpoint;  // default: <out_dir>/denoiser.ddck
  std::string ddc_checkpoint;       // default: <out_dir>/ddc.ddck

  std::string denoiser_checkpoint_path() const {
    return denoiser_checkpoint.empty() ? (std::filesystem::path(out_dir) / "denoiser.ddck").string()
                                       : denoiser_checkpoint;
  }
  std::string ddc_checkpoint_path() const {
    return ddc_checkpoint.empty() ? (std::filesystem::path(out_dir) / "ddc.ddck").string()
                                  : ddc_checkpoint;
  }
};

namespace detail {

/// Rejects keys outside `allowed` so typos do not pass silently.
inline void check_keys(const json& j, const std::string& where, std::set<std::string> allowed) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [k, v] : j.items()) {
    (void)v;
    if (!allowed.count(k)) throw ConfigError("unknown key '" + k + "' in " + where);
  }
}

template <class U>
void read(const json& j, const char* key, U& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<U>();
  } catch (const json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

}  // namespace detail

inline std::string kernel_name(DownsampleKernel k) {
  return k == DownsampleKernel::Bicubic ? "bicubic" : "avgpool";
}

inline json task_to_json(const OperatorSpec& s) {
  switch (s.kind) {
    case OperatorKind::SuperRes:
      return {{"kind", "super_res"}, {"factor", s.factor}, {"kernel", kernel_name(s.kernel)}};
    case OperatorKind::GaussianBlur:
      return {{"kind", "gaussian_blur"}, {"kernel_size", s.kernel_size}, {"sigma", s.blur_sigma},
              {"spectral_floor", s.spectral_floor}};
    case OperatorKind::Inpaint:
      return {{"kind", "inpaint"}, {"ratio", s.mask_ratio}};
    case OperatorKind::Jpeg:
      return {{"kind", "jpeg"}, {"quality", s.quality}};
    case OperatorKind::Denoise:
      return {{"kind", "denoise"}};
  }
  return {};
}

/// Accepts a task object or one of the shorthands sr4, sr8, blur, inpaint, jpeg10, denoise.
inline OperatorSpec task_from_json(const json& j) {
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    if (s == "sr4") return OperatorSpec::super_res(4);
    if (s == "sr8") return OperatorSpec::super_res(8);
    if (s == "blur") return OperatorSpec::gaussian_blur();
    if (s == "inpaint") return OperatorSpec::inpaint();
    if (s == "jpeg10") return OperatorSpec::jpeg(10);
    if (s == "denoise") return OperatorSpec::denoise();
    throw ConfigError("unknown task shorthand '" + s + "'");
  }
  detail::check_keys(j, "task", {"kind", "factor", "kernel", "kernel_size", "sigma", "spectral_floor", "ratio", "quality"});
  std::string kind;
  detail::read(j, "kind", kind, "task");
  OperatorSpec s;
  if (kind == "super_res") {
    s = OperatorSpec::super_res(4);
    detail::read(j, "factor", s.factor, "task");
    std::string kernel = "avgpool";
    detail::read(j, "kernel", kernel, "task");
    if (kernel == "bicubic") s.kernel = DownsampleKernel::Bicubic;
    else if (kernel != "avgpool") throw ConfigError("unknown downsampling kernel '" + kernel + "'");
    if (s.factor < 1) throw ConfigError("super-resolution factor must be >= 1");
  } else if (kind == "gaussian_blur") {
    s = OperatorSpec::gaussian_blur();
    detail::read(j, "kernel_size", s.kernel_size, "task");
    detail::read(j, "sigma", s.blur_sigma, "task");
    detail::read(j, "spectral_floor", s.spectral_floor, "task");
    if (s.kernel_size % 2 == 0 || !(s.blur_sigma > 0)) throw ConfigError("blur needs an odd kernel size and sigma > 0");
  } else if (kind == "inpaint") {
    s = OperatorSpec::inpaint();
    detail::read(j, "ratio", s.mask_ratio, "task");
    if (!(s.mask_ratio >= 0 && s.mask_ratio <= 1)) throw ConfigError("inpainting ratio must be in [0, 1]");
  } else if (kind == "jpeg") {
    s = OperatorSpec::jpeg(10);
    detail::read(j, "quality", s.quality, "task");
    if (s.quality < 1 || s.quality > 100) throw ConfigError("JPEG quality must be in [1, 100]");
  } else if (kind == "denoise") {
    s = OperatorSpec::denoise();
  } else {
    throw ConfigError("unknown task kind '" + kind + "'");
  }
  return s;
}

inline json unet_to_json(const UNetConfig& c) {
  return {{"widths", c.widths},
          {"blocks_per_level", c.blocks_per_level},
          {"max_groups", c.max_groups},
          {"time_embed_dim", c.time_embed_dim},
          {"learn_variance", c.learn_variance}};
}

inline UNetConfig unet_from_json(const json& j, UNetConfig c, const std::string& where) {
  detail::check_keys(j, where, {"widths", "blocks_per_level", "max_groups", "time_embed_dim", "learn_variance"});
  detail::read(j, "widths", c.widths, where);
  detail::read(j, "blocks_per_level", c.blocks_per_level, where);
  detail::read(j, "max_groups", c.max_groups, where);
  detail::read(j, "time_embed_dim", c.time_embed_dim, where);
  detail::read(j, "learn_variance", c.learn_variance, where);
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(where + ": " + e.what());
  }
  return c;
}

inline json schedule_to_json(const ScheduleConfig& s) {
  return {{"T", s.T}, {"beta_start", s.beta_start}, {"beta_end", s.beta_end}};
}

inline ScheduleConfig schedule_from_json(const json& j) {
  detail::check_keys(j, "schedule", {"T", "beta_start", "beta_end"});
  ScheduleConfig s;
  detail::read(j, "T", s.T, "schedule");
  detail::read(j, "beta_start", s.beta_start, "schedule");
  detail::read(j, "beta_end", s.beta_end, "schedule");
  try {
    (void)s.make();
  } catch (const ScheduleError& e) {
    throw ConfigError(std::string("schedule: ") + e.what());
  }
  return s;
}

namespace detail {

inline json data_to_json(const DataSource& d) {
  return {{"dir", d.dir}, {"synthetic", d.synthetic}, {"synthetic_seed", d.synthetic_seed}, {"limit", d.limit}};
}

inline DataSource data_from_json(const json& j, DataSource d, const std::string& where) {
  check_keys(j, where, {"dir", "synthetic", "synthetic_seed", "limit"});
  read(j, "dir", d.dir, where);
  read(j, "synthetic", d.synthetic, where);
  read(j, "synthetic_seed", d.synthetic_seed, where);
  read(j, "limit", d.limit, where);
  return d;
}

inline json adam_to_json(const AdamConfig& a) {
  return {{"lr", a.learning_rate}, {"beta1", a.beta1}, {"beta2", a.beta2}, {"eps", a.eps}};
}

inline void adam_from_json(const json& j, AdamConfig& a, const std::string& where) {
  read(j, "lr", a.learning_rate, where);
  read(j, "beta1", a.beta1, where);
  read(j, "beta2", a.beta2, where);
  read(j, "eps", a.eps, where);
  if (!(a.learning_rate > 0) || !(a.beta1 >= 0 && a.beta1 < 1) || !(a.beta2 >= 0 && a.beta2 < 1) || !(a.eps > 0)) {
    throw ConfigError(where + ": invalid optimizer settings");
  }
}

inline void check_ema(double d, const std::string& where) {
  if (!(d >= 0 && d < 1)) throw ConfigError(where + ".ema_decay must be in [0, 1)");
}

}  // namespace detail

inline json config_to_json(const RunConfig& c) {
  json tasks = json::array();
  for (const auto& t : c.pool.tasks) tasks.push_back(task_to_json(t));
  const auto& td = c.train_denoiser;
  const auto& tc = c.train_ddc;
  json train_den = {{"batch_size", td.batch_size}, {"steps", td.steps}, {"grad_accum", td.grad_accum},
                    {"ema_decay", td.ema_decay}, {"vlb_weight", td.vlb_weight}};
  train_den.update(detail::adam_to_json(td.adam));
  json train_ddc = {{"batch_size", tc.batch_size},
                    {"steps", tc.steps},
                    {"grad_accum", tc.grad_accum},
                    {"ema_decay", tc.ema_decay},
                    {"weights", {{"mse", tc.weights.mse}, {"perceptual", tc.weights.perceptual}, {"kl", tc.weights.kl}}},
                    {"kl_mode", tc.kl_mode == KlMode::Empirical ? "empirical" : "analytic"},
                    {"clip_x0", tc.clip_x0},
                    {"tasks", tasks},
                    {"sigma_min", c.pool.sigma_min},
                    {"sigma_max", c.pool.sigma_max}};
  train_ddc.update(detail::adam_to_json(tc.adam));
  json solve = {{"strategy", c.solve.strategy},
                {"steps", c.solve.steps},
                {"respacing", c.solve.respacing},
                {"task", task_to_json(c.solve.task)},
                {"sigma_y", c.solve.sigma_y},
                {"zeta", c.solve.zeta},
                {"ddnm_scale", c.solve.ddnm_scale ? json(*c.solve.ddnm_scale) : json(nullptr)},
                {"clip_x0", c.solve.clip_x0},
                {"save_images", c.solve.save_images}};
  return {{"seed", c.seed},
          {"image_size", c.image_size},
          {"schedule", schedule_to_json(c.schedule)},
          {"denoiser", unet_to_json(c.denoiser)},
          {"consistency", unet_to_json(c.consistency)},
          {"train_data", detail::data_to_json(c.train_data)},
          {"eval_data", detail::data_to_json(c.eval_data)},
          {"train_denoiser", train_den},
          {"train_ddc", train_ddc},
          {"solve", solve},
          {"diagnose", {{"steps", c.diagnose.steps}, {"strategies", c.diagnose.strategies}}},
          {"sweep", {{"axis", c.sweep.axis}, {"steps_grid", c.sweep.steps_grid}, {"sigma_grid", c.sweep.sigma_grid}}},
          {"paths", {{"out_dir", c.out_dir}, {"denoiser_checkpoint", c.denoiser_checkpoint}, {"ddc_checkpoint", c.ddc_checkpoint}}}};
}

inline RunConfig config_from_json(const json& j) {
  using detail::check_keys;
  using detail::read;
  check_keys(j, "config", {"seed", "image_size", "schedule", "denoiser", "consistency", "train_data", "eval_data",
                           "train_denoiser", "train_ddc", "solve", "diagnose", "sweep", "paths"});
  RunConfig c;
  read(j, "seed", c.seed, "config");
  read(j, "image_size", c.image_size, "config");
  if (j.contains("schedule")) c.schedule = schedule_from_json(j["schedule"]);
  if (j.contains("denoiser")) c.denoiser = unet_from_json(j["denoiser"], c.denoiser, "denoiser");
  if (j.contains("consistency")) {
    c.consistency = ConsistencyModel<float>::normalize(unet_from_json(j["consistency"], c.consistency, "consistency"));
  }
  if (j.contains("train_data")) c.train_data = detail::data_from_json(j["train_data"], c.train_data, "train_data");
  if (j.contains("eval_data")) c.eval_data = detail::data_from_json(j["eval_data"], c.eval_data, "eval_data");
  if (j.contains("train_denoiser")) {
    const auto& t = j["train_denoiser"];
    const std::string w = "train_denoiser";
    check_keys(t, w, {"batch_size", "steps", "grad_accum", "ema_decay", "vlb_weight", "lr", "beta1", "beta2", "eps"});
    auto& d = c.train_denoiser;
    read(t, "batch_size", d.batch_size, w);
    read(t, "steps", d.steps, w);
    read(t, "grad_accum", d.grad_accum, w);
    read(t, "ema_decay", d.ema_decay, w);
    read(t, "vlb_weight", d.vlb_weight, w);
    detail::adam_from_json(t, d.adam, w);
    detail::check_ema(d.ema_decay, w);
  }
  if (j.contains("train_ddc")) {
    const auto& t = j["train_ddc"];
    const std::string w = "train_ddc";
    check_keys(t, w, {"batch_size", "steps", "grad_accum", "ema_decay", "weights", "kl_mode", "clip_x0", "tasks",
                      "sigma_min", "sigma_max", "lr", "beta1", "beta2", "eps"});
    auto& d = c.train_ddc;
    read(t, "batch_size", d.batch_size, w);
    read(t, "steps", d.steps, w);
    read(t, "grad_accum", d.grad_accum, w);
    read(t, "ema_decay", d.ema_decay, w);
    read(t, "clip_x0", d.clip_x0, w);
    detail::adam_from_json(t, d.adam, w);
    detail::check_ema(d.ema_decay, w);
    if (t.contains("weights")) {
      check_keys(t["weights"], "train_ddc.weights", {"mse", "perceptual", "kl"});
      read(t["weights"], "mse", d.weights.mse, "train_ddc.weights");
      read(t["weights"], "perceptual", d.weights.perceptual, "train_ddc.weights");
      read(t["weights"], "kl", d.weights.kl, "train_ddc.weights");
    }
    std::string kl = "analytic";
    read(t, "kl_mode", kl, w);
    if (kl == "empirical") d.kl_mode = KlMode::Empirical;
    else if (kl != "analytic") throw ConfigError("train_ddc.kl_mode must be 'analytic' or 'empirical'");
    if (t.contains("tasks")) {
      if (!t["tasks"].is_array()) throw ConfigError("train_ddc.tasks must be an array");
      c.pool.tasks.clear();
      for (const auto& task : t["tasks"]) c.pool.tasks.push_back(task_from_json(task));
    }
    read(t, "sigma_min", c.pool.sigma_min, w);
    read(t, "sigma_max", c.pool.sigma_max, w);
  }
  if (j.contains("solve")) {
    const auto& t = j["solve"];
    const std::string w = "solve";
    check_keys(t, w, {"strategy", "steps", "respacing", "task", "sigma_y", "zeta", "ddnm_scale", "clip_x0", "save_images"});
    auto& s = c.solve;
    read(t, "strategy", s.strategy, w);
    read(t, "steps", s.steps, w);
    read(t, "respacing", s.respacing, w);
    if (t.contains("task")) s.task = task_from_json(t["task"]);
    read(t, "sigma_y", s.sigma_y, w);
    read(t, "zeta", s.zeta, w);
    if (t.contains("ddnm_scale") && !t["ddnm_scale"].is_null()) s.ddnm_scale = t["ddnm_scale"].get<double>();
    read(t, "clip_x0", s.clip_x0, w);
    read(t, "save_images", s.save_images, w);
  }
  if (j.contains("diagnose")) {
    const auto& t = j["diagnose"];
    check_keys(t, "diagnose", {"steps", "strategies"});
    read(t, "steps", c.diagnose.steps, "diagnose");
    read(t, "strategies", c.diagnose.strategies, "diagnose");
  }
  if (j.contains("sweep")) {
    const auto& t = j["sweep"];
    check_keys(t, "sweep", {"axis", "steps_grid", "sigma_grid"});
    read(t, "axis", c.sweep.axis, "sweep");
    read(t, "steps_grid", c.sweep.steps_grid, "sweep");
    read(t, "sigma_grid", c.sweep.sigma_grid, "sweep");
  }
  if (j.contains("paths")) {
    const auto& t = j["paths"];
    check_keys(t, "paths", {"out_dir", "denoiser_checkpoint", "ddc_checkpoint"});
    read(t, "out_dir", c.out_dir, "paths");
    read(t, "denoiser_checkpoint", c.denoiser_checkpoint, "paths");
    read(t, "ddc_checkpoint", c.ddc_checkpoint, "paths");
  }
  return c;
}

/// Checks cross-field constraints not covered while parsing.
inline void validate_config(const RunConfig& c) {
  if (c.image_size == 0) throw ConfigError("image_size must be positive");
  for (const auto* u : {&c.denoiser, &c.consistency}) {
    if (c.image_size % u->spatial_multiple()) {
      throw ConfigError("image_size " + std::to_string(c.image_size) + " is not divisible by " +
                        std::to_string(u->spatial_multiple()) + " (U-Net levels)");
    }
  }
  if (c.train_denoiser.batch_size == 0 || c.train_ddc.batch_size == 0) throw ConfigError("batch_size must be positive");
  if (c.train_denoiser.grad_accum == 0 || c.train_ddc.grad_accum == 0) throw ConfigError("grad_accum must be positive");
  try {
    c.pool.validate();
    c.train_ddc.weights.validate();
    (void)parse_strategy(c.solve.strategy);
    for (const auto& s : c.diagnose.strategies) (void)parse_strategy(s);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (c.solve.sigma_y < 0) throw ConfigError("solve.sigma_y must be non-negative");
  if (!(c.solve.zeta > 0)) throw ConfigError("solve.zeta must be positive");
  if (c.solve.steps == 0 || c.solve.steps > c.schedule.T) throw ConfigError("solve.steps must be in [1, T]");
  if (c.diagnose.steps == 0 || c.diagnose.steps > c.schedule.T) throw ConfigError("diagnose.steps must be in [1, T]");
  if (c.sweep.axis != "steps" && c.sweep.axis != "sigma") throw ConfigError("sweep.axis must be 'steps' or 'sigma'");
  for (auto s : c.sweep.steps_grid)
    if (s == 0 || s > c.schedule.T) throw ConfigError("sweep.steps_grid entries must be in [1, T]");
  for (auto s : c.sweep.sigma_grid)
    if (s < 0) throw ConfigError("sweep.sigma_grid entries must be non-negative");
  const auto check_task = [&](const OperatorSpec& t) {
    if (t.kind == OperatorKind::SuperRes && c.image_size % t.factor) {
      throw ConfigError("image_size " + std::to_string(c.image_size) + " is not divisible by SR factor " +
                        std::to_string(t.factor));
    }
  };
  check_task(c.solve.task);
  for (const auto& t : c.pool.tasks) check_task(t);
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config file " + path.string());
  json j;
  try {
    j = json::parse(f);
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

/// FNV-1a 64-bit hash of the canonical JSON form, as 16 hex digits.
inline std::string config_hash(const RunConfig& c) {
  const std::string s = config_to_json(c).dump();
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << h;
  return os.str();
}

}  // namespace ddc
