#include "ensforge/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <ostream>
#include <set>
#include <sstream>

#include "ensforge/errors.hpp"
#include "ensforge/fuse.hpp"
#include "ensforge/persist.hpp"
#include "ensforge/rng.hpp"

namespace ensforge {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

const std::vector<std::string> kKinds{"baseline", "tta_dropout", "fge", "swa", "sse", "bagging", "hydra", "stacking"};
const std::set<std::string> kEnsembleKinds{"fge", "sse", "bagging", "hydra"};

// --- small JSON helpers -------------------------------------------------------

void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    const bool known = std::any_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; });
    if (!known) throw ConfigError(where + ": unknown key '" + key + "'");
  }
}

template <class T>
T get_or(const json& j, const char* key, T fallback, const std::string& where) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(where + "." + key + " has the wrong type");
  }
}

template <class Fn>
auto config_context(const std::string& where, Fn&& fn) {
  try {
    return fn();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(where + ": " + e.what());
  }
}

std::uint64_t method_seed(const ExperimentConfig& cfg, const std::string& kind) {
  return derive_seed(cfg.baseline.seed, kind);
}

int ceil_div(int a, int b) { return (a + b - 1) / b; }

// --- schedule / baseline / dataset / eval ----------------------------------------

json schedule_to_json(const ScheduleConfig& s) {
  return json{{"kind", to_string(s.kind)},
              {"lr_max", s.lr_max},
              {"lr_min", s.lr_min},
              {"cycle_epochs", s.cycle_epochs},
              {"burn_in_epochs", s.burn_in_epochs},
              {"decay_factor", s.decay_factor},
              {"decay_every_epochs", s.decay_every_epochs}};
}

ScheduleConfig schedule_from_json(const json& j, const std::string& where) {
  check_keys(j, {"kind", "lr_max", "lr_min", "cycle_epochs", "burn_in_epochs", "decay_factor", "decay_every_epochs"},
             where);
  ScheduleConfig s;
  if (j.contains("kind")) s.kind = config_context(where, [&] { return parse_schedule_kind(j.at("kind").get<std::string>()); });
  s.lr_max = get_or(j, "lr_max", s.lr_max, where);
  s.lr_min = get_or(j, "lr_min", s.lr_min, where);
  s.cycle_epochs = get_or(j, "cycle_epochs", s.cycle_epochs, where);
  s.burn_in_epochs = get_or(j, "burn_in_epochs", s.burn_in_epochs, where);
  s.decay_factor = get_or(j, "decay_factor", s.decay_factor, where);
  s.decay_every_epochs = get_or(j, "decay_every_epochs", s.decay_every_epochs, where);
  return s;
}

AugConfig aug_from_json(const json& j, const std::string& where) {
  check_keys(j, {"geoms", "noise_sigma", "brightness_delta", "seed"}, where);
  return config_context(where, [&] { return j.get<AugConfig>(); });
}

json eval_to_json(const EvalConfig& e) {
  return json{{"thresholds", e.thresholds},
              {"recall_targets", e.recall_targets},
              {"radius_m", e.radius_m},
              {"min_area", e.min_area},
              {"connectivity", e.connectivity}};
}

std::vector<double> threshold_grid(double from, double to, double step) {
  if (!(step > 0.0) || !(from > to)) throw ConfigError("eval.thresholds grid needs from > to and step > 0");
  std::vector<double> out;
  const int n = static_cast<int>(std::floor((from - to) / step + 1e-9));
  for (int i = 0; i <= n; ++i) out.push_back(std::round((from - i * step) * 1e9) / 1e9);
  return out;
}

EvalConfig eval_from_json(const json& j) {
  const std::string where = "eval";
  check_keys(j, {"thresholds", "recall_targets", "radius_m", "min_area", "connectivity"}, where);
  EvalConfig e;
  if (j.contains("thresholds")) {
    const auto& t = j.at("thresholds");
    if (t.is_object()) {
      check_keys(t, {"from", "to", "step"}, "eval.thresholds");
      e.thresholds = threshold_grid(get_or(t, "from", 0.98, "eval.thresholds"), get_or(t, "to", 0.02, "eval.thresholds"),
                                    get_or(t, "step", 0.01, "eval.thresholds"));
    } else {
      e.thresholds = get_or(j, "thresholds", e.thresholds, where);
    }
  }
  e.recall_targets = get_or(j, "recall_targets", e.recall_targets, where);
  e.radius_m = get_or(j, "radius_m", e.radius_m, where);
  e.min_area = get_or(j, "min_area", e.min_area, where);
  e.connectivity = get_or(j, "connectivity", e.connectivity, where);
  return e;
}

// --- method parameters ------------------------------------------------------------

struct TtaParams {
  std::vector<GeomTransform> geoms{GeomTransform::identity(), GeomTransform::of(GeomKind::hflip),
                                   GeomTransform::of(GeomKind::vflip), GeomTransform::of(GeomKind::rot180)};
  int dropout_passes = 3;
  std::uint64_t seed = 0;

  std::vector<TtaMember> members() const {
    std::vector<TtaMember> out;
    for (const auto& g : geoms) out.push_back({g, std::nullopt});
    for (int i = 0; i < dropout_passes; ++i) out.push_back({GeomTransform::identity(), seed + i});
    return out;
  }
};

struct CycleParams {  // fge and sse
  int cycles = 5;
  int cycle_epochs = 2;
  double lr_max = 0.02;
  double lr_min = 0.0005;
  std::uint64_t seed = 0;
};

struct SwaParams {
  int epochs = 5;
  int burn_in_epochs = 0;
  double lr_max = 0.01;  // during burn-in
  double lr = 0.01;      // while averaging
  bool every_iteration = false;
  std::uint64_t seed = 0;
};

struct BaggingParams {
  int replicas = 3;
  BaggingMode mode = BaggingMode::subsample;
  double fraction = 0.8;
  bool with_replacement = false;
  int epochs = 1;
  std::uint64_t seed = 0;
};

struct HydraParams {
  int heads = 3;
  int head_epochs = 1;
  double lr_max = 0.01;
  double lr_min = 0.0;
  double noise_sigma = 0.02;
  double brightness_delta = 0.05;
  std::uint64_t seed = 0;
};

struct StackingParams {
  std::string source = "fge";
  int epochs = 200;
  double lr = 0.5;
};

std::string where_of(const MethodConfig& m) { return "methods." + m.kind; }

TtaParams tta_params(const MethodConfig& m, const ExperimentConfig& cfg) {
  const std::string where = where_of(m);
  check_keys(m.params, {"geoms", "dropout_passes", "seed"}, where);
  TtaParams p;
  p.seed = method_seed(cfg, m.kind);
  if (m.params.contains("geoms")) {
    p.geoms.clear();
    for (const auto& g : get_or(m.params, "geoms", std::vector<std::string>{}, where)) {
      p.geoms.push_back(config_context(where, [&] { return parse_geom(g); }));
    }
  }
  p.dropout_passes = get_or(m.params, "dropout_passes", p.dropout_passes, where);
  p.seed = get_or(m.params, "seed", p.seed, where);
  if (p.dropout_passes < 0) throw ConfigError(where + ".dropout_passes must be >= 0");
  if (p.geoms.size() + p.dropout_passes == 0) throw ConfigError(where + " has no members");
  if (p.dropout_passes > 0 && cfg.net.dropout_rate <= 0.0) {
    throw ConfigError(where + ": dropout passes need net.dropout_rate > 0");
  }
  return p;
}

CycleParams cycle_params(const MethodConfig& m, const ExperimentConfig& cfg) {
  const std::string where = where_of(m);
  check_keys(m.params, {"cycles", "cycle_epochs", "lr_max", "lr_min", "seed"}, where);
  CycleParams p;
  p.seed = method_seed(cfg, m.kind);
  if (m.kind == "sse") {
    // From scratch: the baseline budget split into cycles.
    p.cycle_epochs = std::max(1, ceil_div(cfg.baseline.epochs, p.cycles));
    p.lr_max = cfg.baseline.schedule.lr_max;
    p.lr_min = 0.0;
  }
  p.cycles = get_or(m.params, "cycles", p.cycles, where);
  if (m.kind == "sse" && !m.params.contains("cycle_epochs") && p.cycles > 0) {
    p.cycle_epochs = std::max(1, ceil_div(cfg.baseline.epochs, p.cycles));
  }
  p.cycle_epochs = get_or(m.params, "cycle_epochs", p.cycle_epochs, where);
  p.lr_max = get_or(m.params, "lr_max", p.lr_max, where);
  p.lr_min = get_or(m.params, "lr_min", p.lr_min, where);
  p.seed = get_or(m.params, "seed", p.seed, where);
  if (p.cycles < 1) throw ConfigError(where + ".cycles must be >= 1");
  if (p.cycle_epochs < 1) throw ConfigError(where + ".cycle_epochs must be >= 1");
  return p;
}

SwaParams swa_params(const MethodConfig& m, const ExperimentConfig& cfg) {
  const std::string where = where_of(m);
  check_keys(m.params, {"epochs", "burn_in_epochs", "lr_max", "lr", "every_iteration", "seed"}, where);
  SwaParams p;
  p.seed = method_seed(cfg, m.kind);
  p.epochs = get_or(m.params, "epochs", p.epochs, where);
  p.burn_in_epochs = get_or(m.params, "burn_in_epochs", p.burn_in_epochs, where);
  p.lr_max = get_or(m.params, "lr_max", p.lr_max, where);
  p.lr = get_or(m.params, "lr", p.lr, where);
  p.every_iteration = get_or(m.params, "every_iteration", p.every_iteration, where);
  p.seed = get_or(m.params, "seed", p.seed, where);
  if (p.epochs < 1) throw ConfigError(where + ".epochs must be >= 1");
  if (p.burn_in_epochs < 0 || p.burn_in_epochs >= p.epochs) {
    throw ConfigError(where + ".burn_in_epochs must be in [0, epochs)");
  }
  if (!(p.lr > 0.0) || p.lr > p.lr_max) throw ConfigError(where + ": need 0 < lr <= lr_max");
  return p;
}

BaggingParams bagging_params(const MethodConfig& m, const ExperimentConfig& cfg) {
  const std::string where = where_of(m);
  check_keys(m.params, {"replicas", "mode", "fraction", "with_replacement", "epochs", "seed"}, where);
  BaggingParams p;
  p.seed = method_seed(cfg, m.kind);
  p.epochs = cfg.baseline.epochs;
  p.replicas = get_or(m.params, "replicas", p.replicas, where);
  const std::string mode = get_or(m.params, "mode", std::string("subsample"), where);
  if (mode == "subsample") {
    p.mode = BaggingMode::subsample;
  } else if (mode == "synthetic") {
    p.mode = BaggingMode::synthetic;
  } else {
    throw ConfigError(where + ".mode must be 'subsample' or 'synthetic', got '" + mode + "'");
  }
  p.fraction = get_or(m.params, "fraction", p.fraction, where);
  p.with_replacement = get_or(m.params, "with_replacement", p.with_replacement, where);
  p.epochs = get_or(m.params, "epochs", p.epochs, where);
  p.seed = get_or(m.params, "seed", p.seed, where);
  if (p.replicas < 2) throw ConfigError(where + ".replicas must be >= 2");
  if (!(p.fraction > 0.0 && p.fraction <= 1.0)) throw ConfigError(where + ".fraction must be in (0, 1]");
  if (p.epochs < 1) throw ConfigError(where + ".epochs must be >= 1");
  return p;
}

HydraParams hydra_params(const MethodConfig& m, const ExperimentConfig& cfg) {
  const std::string where = where_of(m);
  check_keys(m.params, {"heads", "head_epochs", "lr_max", "lr_min", "noise_sigma", "brightness_delta", "seed"}, where);
  HydraParams p;
  p.seed = method_seed(cfg, m.kind);
  // The baseline plays the body (70% of a 7:3 budget); heads get the rest.
  p.head_epochs = std::max(1, ceil_div(3 * cfg.baseline.epochs, 7));
  p.lr_max = cfg.baseline.schedule.lr_max * 0.2;
  p.heads = get_or(m.params, "heads", p.heads, where);
  p.head_epochs = get_or(m.params, "head_epochs", p.head_epochs, where);
  p.lr_max = get_or(m.params, "lr_max", p.lr_max, where);
  p.lr_min = get_or(m.params, "lr_min", p.lr_min, where);
  p.noise_sigma = get_or(m.params, "noise_sigma", p.noise_sigma, where);
  p.brightness_delta = get_or(m.params, "brightness_delta", p.brightness_delta, where);
  p.seed = get_or(m.params, "seed", p.seed, where);
  if (p.heads < 2) throw ConfigError(where + ".heads must be >= 2");
  if (p.head_epochs < 0) throw ConfigError(where + ".head_epochs must be >= 0");
  return p;
}

StackingParams stacking_params(const MethodConfig& m) {
  const std::string where = where_of(m);
  check_keys(m.params, {"source", "epochs", "lr"}, where);
  StackingParams p;
  p.source = get_or(m.params, "source", p.source, where);
  p.epochs = get_or(m.params, "epochs", p.epochs, where);
  p.lr = get_or(m.params, "lr", p.lr, where);
  if (!kEnsembleKinds.count(p.source)) {
    throw ConfigError(where + ".source must be one of fge, sse, bagging, hydra; got '" + p.source + "'");
  }
  if (p.epochs < 1 || !(p.lr > 0.0)) throw ConfigError(where + ": need epochs >= 1 and lr > 0");
  return p;
}

/// Epochs of training beyond the baseline that the method needs.
int extra_epochs_of(const MethodConfig& m, const ExperimentConfig& cfg) {
  if (m.kind == "baseline" || m.kind == "tta_dropout") return 0;
  if (m.kind == "fge" || m.kind == "sse") {
    const CycleParams p = cycle_params(m, cfg);
    return p.cycles * p.cycle_epochs;
  }
  if (m.kind == "swa") return swa_params(m, cfg).epochs;
  if (m.kind == "bagging") {
    const BaggingParams p = bagging_params(m, cfg);
    return p.replicas * p.epochs;
  }
  if (m.kind == "hydra") {
    const HydraParams p = hydra_params(m, cfg);
    return p.heads * p.head_epochs;
  }
  if (m.kind == "stacking") {
    const std::string src = stacking_params(m).source;
    for (const auto& o : cfg.methods) {
      if (o.kind == src) return extra_epochs_of(o, cfg);
    }
  }
  throw ConfigError("unknown method kind '" + m.kind + "'");
}

AugConfig derived_aug(const AugConfig& base, std::uint64_t seed) {
  AugConfig a = base;
  a.seed = derive_seed(seed, "augmentation");
  return a;
}

}  // namespace

// --- config --------------------------------------------------------------------

ScheduleSpec to_iterations(const ScheduleConfig& sc, int epochs, std::int64_t spe) {
  ScheduleSpec s;
  s.kind = sc.kind;
  s.lr_max = sc.lr_max;
  s.lr_min = sc.lr_min;
  s.total_iters = static_cast<std::int64_t>(epochs) * spe;
  s.cycle_len = sc.kind == ScheduleKind::swa_const ? spe : sc.cycle_epochs * spe;
  s.burn_in = sc.burn_in_epochs * spe;
  s.decay_factor = sc.decay_factor;
  s.decay_every = sc.decay_every_epochs * spe;
  return s;
}

TrainSpec BaselineConfig::train_spec(std::int64_t spe) const {
  TrainSpec t;
  t.epochs = epochs;
  t.batch_size = batch_size;
  t.schedule = to_iterations(schedule, epochs, spe);
  t.momentum = momentum;
  t.seed = seed;
  t.augmentation = augmentation;
  return t;
}

std::vector<double> default_threshold_grid() { return threshold_grid(0.998, 0.002, 0.002); }

void ExperimentConfig::validate() const {
  if (run_dir.empty()) throw ConfigError("run_dir must not be empty");
  dataset.scene.validate();
  net.validate();
  if (dataset.scene.size != net.input_size) {
    throw ConfigError("dataset.scene.size (" + std::to_string(dataset.scene.size) + ") must equal net.input_size (" +
                      std::to_string(net.input_size) + ")");
  }
  if (dataset.n_train < 1 || dataset.n_test < 1 || dataset.n_val < 0) {
    throw ConfigError("dataset needs n_train >= 1, n_test >= 1, n_val >= 0");
  }
  const std::int64_t spe = steps_per_epoch(dataset.n_train, std::max(1, baseline.batch_size));
  config_context("baseline", [&] {
    baseline.train_spec(spe).validate();
    return 0;
  });

  std::set<std::string> seen;
  for (const auto& m : methods) {
    if (std::find(kKinds.begin(), kKinds.end(), m.kind) == kKinds.end()) {
      throw ConfigError("unknown method kind '" + m.kind + "'");
    }
    if (!seen.insert(m.kind).second) throw ConfigError("method kind '" + m.kind + "' listed twice");
  }
  for (const auto& m : methods) {
    if (m.kind == "baseline") {
      check_keys(m.params, {}, where_of(m));
    } else if (m.kind == "tta_dropout") {
      tta_params(m, *this);
    } else if (m.kind == "fge" || m.kind == "sse") {
      const CycleParams p = cycle_params(m, *this);
      ScheduleConfig sc{m.kind == "fge" ? ScheduleKind::fge_triangular : ScheduleKind::sse_cosine, p.lr_max, p.lr_min,
                        p.cycle_epochs};
      config_context(where_of(m), [&] {
        to_iterations(sc, p.cycles * p.cycle_epochs, spe).validate();
        return 0;
      });
      if (m.kind == "fge" && p.cycle_epochs * spe < 2) {
        throw ConfigError(where_of(m) + ": a triangular cycle needs at least 2 iterations");
      }
    } else if (m.kind == "swa") {
      swa_params(m, *this);
    } else if (m.kind == "bagging") {
      bagging_params(m, *this);
    } else if (m.kind == "hydra") {
      hydra_params(m, *this);
    } else if (m.kind == "stacking") {
      const StackingParams p = stacking_params(m);
      if (!seen.count(p.source)) throw ConfigError("methods.stacking.source '" + p.source + "' is not a listed method");
      if (dataset.n_val < 1) throw ConfigError("stacking is fitted on the validation split; need dataset.n_val >= 1");
    }
  }

  if (eval.thresholds.empty()) throw ConfigError("eval.thresholds must not be empty");
  for (std::size_t i = 0; i < eval.thresholds.size(); ++i) {
    const double t = eval.thresholds[i];
    if (!(t > 0.0 && t < 1.0)) throw ConfigError("eval.thresholds must lie in (0, 1)");
    if (i > 0 && !(t < eval.thresholds[i - 1])) throw ConfigError("eval.thresholds must be strictly descending");
  }
  if (eval.recall_targets.empty()) throw ConfigError("eval.recall_targets must not be empty");
  for (double r : eval.recall_targets) {
    if (!(r > 0.0 && r <= 1.0)) throw ConfigError("eval.recall_targets must lie in (0, 1]");
  }
  if (!(eval.radius_m > 0.0)) throw ConfigError("eval.radius_m must be > 0");
  if (eval.min_area < 1) throw ConfigError("eval.min_area must be >= 1");
  if (eval.connectivity != 4 && eval.connectivity != 8) throw ConfigError("eval.connectivity must be 4 or 8");
}

std::vector<MethodConfig> ExperimentConfig::resolved_methods() const {
  std::vector<MethodConfig> out{MethodConfig{"baseline"}};
  for (const auto& m : methods) {
    if (m.kind != "baseline") out.push_back(m);
  }
  return out;
}

ExperimentConfig parse_config(const json& j) {
  check_keys(j, {"run_dir", "dataset", "net", "baseline", "methods", "eval"}, "config");
  ExperimentConfig cfg;
  cfg.run_dir = get_or(j, "run_dir", cfg.run_dir, "config");

  if (j.contains("dataset")) {
    const auto& d = j.at("dataset");
    check_keys(d, {"scene", "n_train", "n_val", "n_test", "master_seed"}, "dataset");
    if (d.contains("scene")) {
      check_keys(d.at("scene"),
                 {"size", "gsd", "n_vehicles", "n_distractors", "distractor_mix", "background", "contrast"},
                 "dataset.scene");
      cfg.dataset.scene = config_context("dataset.scene", [&] { return d.at("scene").get<SceneSpec>(); });
    }
    cfg.dataset.n_train = get_or(d, "n_train", cfg.dataset.n_train, "dataset");
    cfg.dataset.n_val = get_or(d, "n_val", cfg.dataset.n_val, "dataset");
    cfg.dataset.n_test = get_or(d, "n_test", cfg.dataset.n_test, "dataset");
    cfg.dataset.master_seed = get_or(d, "master_seed", cfg.dataset.master_seed, "dataset");
  }
  if (j.contains("net")) {
    check_keys(j.at("net"), {"input_size", "base_channels", "depth", "dropout_rate", "init_seed"}, "net");
    cfg.net = config_context("net", [&] { return j.at("net").get<NetConfig>(); });
  }
  if (j.contains("baseline")) {
    const auto& b = j.at("baseline");
    check_keys(b, {"epochs", "batch_size", "momentum", "seed", "schedule", "augmentation"}, "baseline");
    cfg.baseline.epochs = get_or(b, "epochs", cfg.baseline.epochs, "baseline");
    cfg.baseline.batch_size = get_or(b, "batch_size", cfg.baseline.batch_size, "baseline");
    cfg.baseline.momentum = get_or(b, "momentum", cfg.baseline.momentum, "baseline");
    cfg.baseline.seed = get_or(b, "seed", cfg.baseline.seed, "baseline");
    if (b.contains("schedule")) cfg.baseline.schedule = schedule_from_json(b.at("schedule"), "baseline.schedule");
    if (b.contains("augmentation")) {
      cfg.baseline.augmentation = aug_from_json(b.at("augmentation"), "baseline.augmentation");
    }
  }
  if (j.contains("methods")) {
    const auto& ms = j.at("methods");
    if (!ms.is_array()) throw ConfigError("methods must be a list");
    for (const auto& m : ms) {
      if (m.is_string()) {
        cfg.methods.push_back({m.get<std::string>()});
        continue;
      }
      check_keys(m, {"kind", "params"}, "methods[]");
      MethodConfig mc;
      mc.kind = get_or(m, "kind", std::string{}, "methods[]");
      if (m.contains("params")) mc.params = m.at("params");
      if (!mc.params.is_object()) throw ConfigError("methods." + mc.kind + ".params must be an object");
      cfg.methods.push_back(std::move(mc));
    }
  }
  if (j.contains("eval")) cfg.eval = eval_from_json(j.at("eval"));
  cfg.validate();
  return cfg;
}

json render_config(const ExperimentConfig& cfg) {
  json methods = json::array();
  for (const auto& m : cfg.methods) methods.push_back({{"kind", m.kind}, {"params", m.params}});
  return json{{"run_dir", cfg.run_dir},
              {"dataset",
               {{"scene", cfg.dataset.scene},
                {"n_train", cfg.dataset.n_train},
                {"n_val", cfg.dataset.n_val},
                {"n_test", cfg.dataset.n_test},
                {"master_seed", cfg.dataset.master_seed}}},
              {"net", cfg.net},
              {"baseline",
               {{"epochs", cfg.baseline.epochs},
                {"batch_size", cfg.baseline.batch_size},
                {"momentum", cfg.baseline.momentum},
                {"seed", cfg.baseline.seed},
                {"schedule", schedule_to_json(cfg.baseline.schedule)},
                {"augmentation", cfg.baseline.augmentation}}},
              {"methods", methods},
              {"eval", eval_to_json(cfg.eval)}};
}

ExperimentConfig load_config(const fs::path& path) {
  if (!fs::exists(path)) throw ConfigError("config file not found: " + path.string());
  json j;
  try {
    j = json::parse(read_text(path));
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return parse_config(j);
}

ExperimentConfig apply_overrides(ExperimentConfig cfg, const RunOptions& opts) {
  if (opts.run_dir) cfg.run_dir = opts.run_dir->string();
  if (opts.seed) cfg.dataset.master_seed = *opts.seed;
  if (opts.jobs < 1) throw ConfigError("--jobs must be >= 1");
  cfg.validate();
  return cfg;
}

// --- comparison table ---------------------------------------------------------------

double delta_fp_pct(double fp_base, double fp_method) {
  if (fp_base == 0.0) return std::nan("");
  return (fp_base - fp_method) / fp_base * 100.0;
}

std::vector<ComparisonRow> comparison_rows(std::span<const RunRecord> records) {
  const auto base = std::find_if(records.begin(), records.end(), [](const RunRecord& r) { return r.method == "baseline"; });
  if (base == records.end()) throw ValidationError("comparison needs a baseline record");
  std::vector<ComparisonRow> rows;
  for (const auto& r : records) {
    if (r.points.size() != base->points.size()) {
      throw ValidationError(r.method + " has a different number of operating points than the baseline");
    }
    for (std::size_t i = 0; i < r.points.size(); ++i) {
      const auto& op = r.points[i];
      const auto& b = base->points[i].achieved;
      ComparisonRow row;
      row.method = r.method;
      row.op_index = static_cast<int>(i);
      row.target_recall = op.target_recall;
      row.reachable = op.reachable;
      row.threshold = op.achieved.threshold;
      row.recall = op.achieved.recall;
      row.delta_recall = op.achieved.recall - b.recall;
      row.fp_per_km2 = op.achieved.fp_per_km2;
      row.delta_fp_pct = delta_fp_pct(b.fp_per_km2, op.achieved.fp_per_km2);
      row.f1 = op.achieved.f1;
      row.n_predictions = r.n_predictions;
      row.extra_epochs = r.extra_epochs;
      rows.push_back(row);
    }
  }
  std::stable_sort(rows.begin(), rows.end(), [](const ComparisonRow& a, const ComparisonRow& b) {
    if (a.method != b.method) return a.method < b.method;
    return a.op_index < b.op_index;
  });
  return rows;
}

namespace {

std::vector<std::vector<std::string>> row_cells(std::span<const ComparisonRow> rows) {
  std::vector<std::vector<std::string>> out;
  out.push_back({"method", "operating_point", "target_recall", "reachable", "threshold", "recall", "delta_recall",
                 "fp_per_km2", "delta_fp_pct", "f1", "n_predictions", "extra_epochs"});
  for (const auto& r : rows) {
    out.push_back({r.method, std::to_string(r.op_index), fmt_num(r.target_recall, 4), r.reachable ? "yes" : "no",
                   fmt_num(r.threshold, 4), fmt_num(r.recall, 4), fmt_num(r.delta_recall, 4),
                   fmt_num(r.fp_per_km2, 2), fmt_num(r.delta_fp_pct, 2), fmt_num(r.f1, 4),
                   std::to_string(r.n_predictions), std::to_string(r.extra_epochs)});
  }
  return out;
}

}  // namespace

std::string comparison_csv(std::span<const ComparisonRow> rows) {
  std::string out;
  for (const auto& cells : row_cells(rows)) {
    for (std::size_t i = 0; i < cells.size(); ++i) out += (i ? "," : "") + csv_field(cells[i]);
    out += "\r\n";
  }
  return out;
}

std::string comparison_text(std::span<const ComparisonRow> rows) {
  const auto cells = row_cells(rows);
  std::vector<std::size_t> width(cells[0].size(), 0);
  for (const auto& row : cells) {
    for (std::size_t i = 0; i < row.size(); ++i) width[i] = std::max(width[i], row[i].size());
  }
  std::string out;
  for (std::size_t r = 0; r < cells.size(); ++r) {
    std::string line;
    for (std::size_t i = 0; i < cells[r].size(); ++i) {
      const std::string& c = cells[r][i];
      const std::string pad(width[i] - c.size(), ' ');
      // Text columns left-aligned, numbers right-aligned.
      line += (i == 0 || i == 3) ? c + pad : pad + c;
      if (i + 1 < cells[r].size()) line += "  ";
    }
    while (!line.empty() && line.back() == ' ') line.pop_back();
    out += line + "\n";
    if (r == 0) {
      std::size_t total = 0;
      for (auto w : width) total += w + 2;
      out += std::string(total - 2, '-') + "\n";
    }
  }
  return out;
}

// --- commands -------------------------------------------------------------------------

namespace {

struct Paths {
  fs::path root;
  fs::path data(const std::string& split) const { return root / "data" / split; }
  fs::path models(const std::string& method) const { return root / "models" / method; }
  fs::path train_records() const { return root / "models" / "train_records.json"; }
  fs::path eval() const { return root / "eval"; }
};

class Progress {
 public:
  explicit Progress(std::ostream* log) : log_(log), start_(std::chrono::steady_clock::now()) {}
  void operator()(const std::string& msg) const {
    if (!log_) return;
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    (*log_) << "[" << fmt_num(s, 1) << "s] " << msg << std::endl;
  }

 private:
  std::ostream* log_;
  std::chrono::steady_clock::time_point start_;
};

std::vector<Scene> load_split(const Paths& paths, const std::string& split) {
  const fs::path dir = paths.data(split);
  if (!fs::exists(dir / "manifest.json")) {
    throw MissingArtifactError("dataset split '" + split + "' not found under " + (paths.root / "data").string() +
                               "; run `ensemble-forge generate` first");
  }
  return load_dataset(dir);
}

SnapshotSet load_models(const Paths& paths, const std::string& method) {
  const fs::path dir = paths.models(method);
  if (!fs::exists(dir / "manifest.json")) {
    throw MissingArtifactError("no trained weights for '" + method + "' under " + dir.string() +
                               "; run `ensemble-forge train` first");
  }
  return load_snapshot_set(dir);
}

SnapshotSet single(std::string id, ParamSet params, std::string provenance) {
  SnapshotSet s;
  s.add({std::move(id), std::move(params), std::move(provenance)});
  return s;
}

json stack_weights_json(const StackWeights& w, const std::string& source) {
  return json{{"source", source}, {"w", w.w}, {"b", w.b}};
}

/// Deterministic per-member maps for every scene.
std::vector<std::vector<ProbMap>> member_maps(const RefNet& net, const SnapshotSet& set, std::span<const Scene> scenes,
                                              int jobs) {
  std::vector<std::vector<ProbMap>> out(scenes.size());
  parallel_for(scenes.size(), jobs, [&](std::size_t s) {
    for (const auto& m : set.members()) out[s].push_back(net.forward(m.params, scenes[s].image, PredictMode::deterministic()));
  });
  return out;
}

}  // namespace

void cmd_generate(const ExperimentConfig& cfg, const RunOptions& opts) {
  cfg.validate();
  const Paths paths{cfg.run_dir};
  const Progress log(opts.log);
  const fs::path data = paths.root / "data";
  if (fs::exists(paths.root) && !fs::is_empty(paths.root) && !opts.force) {
    throw ConfigError("run directory " + paths.root.string() + " already exists; pass --force to regenerate its data");
  }
  if (fs::exists(data)) fs::remove_all(data);

  const std::vector<std::pair<std::string, int>> splits{
      {"train", cfg.dataset.n_train}, {"val", cfg.dataset.n_val}, {"test", cfg.dataset.n_test}};
  for (const auto& [split, count] : splits) {
    std::vector<Scene> scenes(count);
    parallel_for(count, opts.jobs, [&](std::size_t i) {
      scenes[i] = gen_scene(cfg.dataset.scene, scene_seed(cfg.dataset.master_seed, split, i));
    });
    save_dataset(scenes, split, cfg.dataset.master_seed, paths.data(split));
    log("generated " + std::to_string(count) + " " + split + " scenes");
  }
  write_text(paths.root / "config.json", render_config(cfg).dump(2) + "\n");
}

void cmd_train(const ExperimentConfig& cfg, const RunOptions& opts) {
  cfg.validate();
  const Paths paths{cfg.run_dir};
  const Progress log(opts.log);
  const std::vector<Scene> train_scenes = load_split(paths, "train");
  if (train_scenes.size() != static_cast<std::size_t>(cfg.dataset.n_train)) {
    throw ValidationError("train split holds " + std::to_string(train_scenes.size()) + " scenes, config says " +
                          std::to_string(cfg.dataset.n_train) + "; rerun generate");
  }
  const TrainingSet train = TrainingSet::from_scenes(train_scenes);
  const RefNet net(cfg.net);
  const std::int64_t spe = steps_per_epoch(train.size(), cfg.baseline.batch_size);
  const TrainSpec base_spec = cfg.baseline.train_spec(spe);

  json records = json::array();
  auto record = [&](const std::string& method, std::size_t members, int extra) {
    records.push_back({{"method", method}, {"members", members}, {"extra_epochs", extra}});
  };

  log("training baseline: " + std::to_string(base_spec.epochs) + " epochs x " + std::to_string(spe) + " steps");
  ParamSet baseline = train_network(net, net.init_params<float>(), train, base_spec);
  save_snapshot_set(single("baseline", baseline, "baseline"), paths.models("baseline"));
  record("baseline", 1, 0);

  // A TrainSpec that shares the baseline's batch size and momentum.
  auto spec_like = [&](int epochs, const ScheduleConfig& sc, std::uint64_t seed) {
    TrainSpec t = base_spec;
    t.epochs = epochs;
    t.schedule = to_iterations(sc, epochs, spe);
    t.seed = seed;
    t.augmentation = derived_aug(cfg.baseline.augmentation, seed);
    return t;
  };

  std::vector<MethodConfig> ordered = cfg.resolved_methods();
  std::stable_partition(ordered.begin(), ordered.end(), [](const MethodConfig& m) { return m.kind != "stacking"; });
  for (const auto& m : ordered) {
    if (m.kind == "baseline") continue;
    const int extra = extra_epochs_of(m, cfg);
    log("training " + m.kind + " (" + std::to_string(extra) + " extra epochs)");
    const fs::path out = paths.models(m.kind);
    if (fs::exists(out)) fs::remove_all(out);

    if (m.kind == "tta_dropout") {
      // Prediction-space only: reuses the baseline weights.
      record(m.kind, 1, 0);
      continue;
    }
    if (m.kind == "fge" || m.kind == "sse") {
      const CycleParams p = cycle_params(m, cfg);
      const ScheduleConfig sc{m.kind == "fge" ? ScheduleKind::fge_triangular : ScheduleKind::sse_cosine, p.lr_max,
                              p.lr_min, p.cycle_epochs};
      const TrainSpec spec = spec_like(p.cycles * p.cycle_epochs, sc, p.seed);
      // FGE fine-tunes the baseline; SSE starts over from a fresh init.
      ParamSet init = m.kind == "fge" ? baseline : net.init_params<float>();
      const SnapshotSet set = train_snapshot_cycles(net, std::move(init), train, spec);
      save_snapshot_set(set, out);
      record(m.kind, set.size(), extra);
    } else if (m.kind == "swa") {
      const SwaParams p = swa_params(m, cfg);
      ScheduleConfig sc;
      sc.kind = ScheduleKind::swa_const;
      sc.lr_max = p.lr_max;
      sc.lr_min = p.lr;
      sc.burn_in_epochs = p.burn_in_epochs;
      TrainSpec spec = spec_like(p.epochs, sc, p.seed);
      spec.swa_every_iteration = p.every_iteration;
      SwaResult res = train_swa(net, baseline, train, spec);
      save_snapshot_set(single("swa", std::move(res.averaged), "swa/folded-" + std::to_string(res.folded)), out);
      record(m.kind, 1, extra);
    } else if (m.kind == "bagging") {
      const BaggingParams p = bagging_params(m, cfg);
      // Baseline schedule, with a cosine cycle no longer than the replica budget.
      ScheduleConfig sc = cfg.baseline.schedule;
      sc.cycle_epochs = std::min(sc.cycle_epochs, p.epochs);
      TrainSpec spec = spec_like(p.epochs, sc, p.seed);
      BaggingOptions bo;
      bo.mode = p.mode;
      bo.fraction = p.fraction;
      bo.with_replacement = p.with_replacement;
      bo.jobs = opts.jobs;
      const SnapshotSet set = train_bagged(net, train, p.replicas, spec, bo);
      save_snapshot_set(set, out);
      record(m.kind, set.size(), extra);
    } else if (m.kind == "hydra") {
      const HydraParams p = hydra_params(m, cfg);
      const auto d4 = square_symmetries();
      std::vector<TrainSpec> heads;
      for (int k = 0; k < p.heads; ++k) {
        const std::uint64_t seed = derive_seed(p.seed, "head-" + std::to_string(k + 1));
        ScheduleConfig sc{ScheduleKind::sse_cosine, p.lr_max, p.lr_min, std::max(1, p.head_epochs)};
        TrainSpec h = spec_like(std::max(1, p.head_epochs), sc, seed);
        h.epochs = p.head_epochs;
        // Each head sees its own augmentation regime.
        h.augmentation.geom_pool = {GeomTransform::identity(), d4[(k + 1) % d4.size()]};
        h.augmentation.noise_sigma = p.noise_sigma;
        h.augmentation.brightness_delta = p.brightness_delta;
        heads.push_back(h);
      }
      TrainSpec body = base_spec;
      body.epochs = 0;
      HydraResult res = train_hydra(net, baseline, train, body, heads, opts.jobs);
      save_snapshot_set(res.heads, out);
      record(m.kind, res.heads.size(), extra);
    } else if (m.kind == "stacking") {
      const StackingParams p = stacking_params(m);
      const std::vector<Scene> val = load_split(paths, "val");
      const SnapshotSet source = load_models(paths, p.source);
      const auto maps = member_maps(net, source, val, opts.jobs);
      std::vector<Tensor> masks;
      for (const auto& s : val) masks.push_back(s.mask);
      StackFitOptions so;
      so.epochs = p.epochs;
      so.lr = p.lr;
      const StackWeights w = stack_fit(maps, masks, so);
      write_text(out / "weights.json", stack_weights_json(w, p.source).dump(2) + "\n");
      record(m.kind, source.size(), extra);
    }
  }
  write_text(paths.train_records(), json{{"methods", records}}.dump(2) + "\n");
  log("training done");
}

namespace {

json report_json(const EvalReport& r) {
  return json{{"tp", r.tp},
              {"fp", r.fp},
              {"fn", r.fn},
              {"recall", r.recall},
              {"precision", r.precision},
              {"f1", r.f1},
              {"fp_per_km2", r.fp_per_km2},
              {"threshold", r.threshold},
              {"n_predictions", r.n_predictions},
              {"area_km2", r.area_km2},
              {"recall_undefined", r.recall_undefined}};
}

EvalReport report_from_json(const json& j) {
  EvalReport r;
  r.tp = j.at("tp").get<int>();
  r.fp = j.at("fp").get<int>();
  r.fn = j.at("fn").get<int>();
  r.recall = j.at("recall").get<double>();
  r.precision = j.at("precision").get<double>();
  r.f1 = j.at("f1").get<double>();
  r.fp_per_km2 = j.at("fp_per_km2").get<double>();
  r.threshold = j.at("threshold").get<double>();
  r.n_predictions = j.at("n_predictions").get<int>();
  r.area_km2 = j.at("area_km2").get<double>();
  r.recall_undefined = j.at("recall_undefined").get<bool>();
  return r;
}

json record_json(const RunRecord& r) {
  json points = json::array();
  for (const auto& op : r.points) {
    points.push_back({{"target_recall", op.target_recall}, {"reachable", op.reachable}, {"report", report_json(op.achieved)}});
  }
  json sweep = json::array();
  for (const auto& s : r.sweep) sweep.push_back(report_json(s));
  return json{{"method", r.method},
              {"n_predictions", r.n_predictions},
              {"extra_epochs", r.extra_epochs},
              {"operating_points", points},
              {"sweep", sweep}};
}

std::string reports_csv(std::span<const RunRecord> records) {
  std::string out = "method,operating_point,target_recall,reachable,threshold,tp,fp,fn,recall,precision,f1,fp_per_km2,"
                    "n_predictions\r\n";
  for (const auto& r : records) {
    for (std::size_t i = 0; i < r.points.size(); ++i) {
      const auto& op = r.points[i];
      const auto& a = op.achieved;
      out += csv_field(r.method) + "," + std::to_string(i) + "," + fmt_num(op.target_recall, 4) + "," +
             (op.reachable ? "yes" : "no") + "," + fmt_num(a.threshold, 4) + "," + std::to_string(a.tp) + "," +
             std::to_string(a.fp) + "," + std::to_string(a.fn) + "," + fmt_num(a.recall, 6) + "," +
             fmt_num(a.precision, 6) + "," + fmt_num(a.f1, 6) + "," + fmt_num(a.fp_per_km2, 4) + "," +
             std::to_string(r.n_predictions) + "\r\n";
    }
  }
  return out;
}

std::string curves_csv(std::span<const RunRecord> records) {
  std::string out = "method,threshold,tp,fp,fn,recall,precision,f1,fp_per_km2\r\n";
  for (const auto& r : records) {
    for (const auto& s : r.sweep) {
      out += csv_field(r.method) + "," + fmt_num(s.threshold, 4) + "," + std::to_string(s.tp) + "," +
             std::to_string(s.fp) + "," + std::to_string(s.fn) + "," + fmt_num(s.recall, 6) + "," +
             fmt_num(s.precision, 6) + "," + fmt_num(s.f1, 6) + "," + fmt_num(s.fp_per_km2, 4) + "\r\n";
    }
  }
  return out;
}

std::map<std::string, int> read_train_records(const Paths& paths) {
  if (!fs::exists(paths.train_records())) {
    throw MissingArtifactError("no training records under " + (paths.root / "models").string() +
                               "; run `ensemble-forge train` first");
  }
  std::map<std::string, int> extra;
  try {
    const json j = json::parse(read_text(paths.train_records()));
    for (const auto& m : j.at("methods")) extra[m.at("method").get<std::string>()] = m.at("extra_epochs").get<int>();
  } catch (const json::exception& e) {
    throw FormatError(paths.train_records().string() + ": " + e.what());
  }
  return extra;
}

}  // namespace

std::vector<RunRecord> cmd_evaluate(const ExperimentConfig& cfg, const RunOptions& opts) {
  cfg.validate();
  const Paths paths{cfg.run_dir};
  const Progress log(opts.log);
  const std::vector<Scene> test = load_split(paths, "test");
  const std::map<std::string, int> trained = read_train_records(paths);
  const RefNet net(cfg.net);
  const VectorizeOptions vopts = cfg.eval.vectorize();
  const SnapshotSet baseline = load_models(paths, "baseline");

  std::vector<RunRecord> records;
  std::vector<std::pair<std::string, std::string>> detection_files;
  for (const auto& m : cfg.resolved_methods()) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto it = trained.find(m.kind);
    if (it == trained.end()) {
      throw MissingArtifactError("method '" + m.kind + "' was not trained; rerun `ensemble-forge train`");
    }

    // Weights the method predicts with; counting predictors meter every pass.
    SnapshotSet weights;
    std::optional<StackWeights> stack;
    std::optional<TtaParams> tta;
    if (m.kind == "baseline" || m.kind == "tta_dropout") {
      weights = baseline;
      if (m.kind == "tta_dropout") tta = tta_params(m, cfg);
    } else if (m.kind == "stacking") {
      const StackingParams p = stacking_params(m);
      weights = load_models(paths, p.source);
      const fs::path wfile = paths.models("stacking") / "weights.json";
      if (!fs::exists(wfile)) throw MissingArtifactError("no stacking weights at " + wfile.string());
      const json wj = json::parse(read_text(wfile));
      stack = StackWeights{wj.at("w").get<std::vector<double>>(), wj.at("b").get<double>()};
    } else {
      weights = load_models(paths, m.kind);
    }
    std::vector<CountingPredictor> predictors;
    for (const auto& member : weights.members()) {
      net.check_params(member.params);
      predictors.emplace_back(net, member.params);
    }

    std::vector<ProbMap> maps(test.size());
    parallel_for(test.size(), opts.jobs, [&](std::size_t s) {
      const Tensor& image = test[s].image;
      if (tta) {
        const auto members = tta->members();
        maps[s] = tta_predict(predictors[0].fn(), image, members).mean;
        return;
      }
      std::vector<ProbMap> per_member;
      for (const auto& p : predictors) per_member.push_back(p(image, PredictMode::deterministic()));
      maps[s] = stack ? stack_apply(*stack, per_member) : fuse_mean(per_member).mean;
    });

    std::int64_t passes = 0;
    for (const auto& p : predictors) passes += p.passes();
    if (passes % static_cast<std::int64_t>(test.size()) != 0) {
      throw Error(m.kind + ": forward passes are not a multiple of the test scene count");
    }

    RunRecord rec;
    rec.method = m.kind;
    rec.n_predictions = static_cast<int>(passes / static_cast<std::int64_t>(test.size()));
    rec.extra_epochs = it->second;

    std::vector<EvalScene> scenes;
    for (std::size_t s = 0; s < test.size(); ++s) {
      scenes.push_back({&maps[s], test[s].gt_points,
                        SceneGeometry{static_cast<int>(test[s].image.rows()), static_cast<int>(test[s].image.cols()),
                                      test[s].spec.gsd}});
    }
    rec.sweep = sweep_thresholds(scenes, cfg.eval.thresholds, vopts, rec.n_predictions);
    rec.points = select_operating_points(rec.sweep, cfg.eval.recall_targets);

    // Detections at the first (higher-recall) operating point.
    std::vector<std::pair<std::string, std::vector<Detection>>> dets;
    for (std::size_t s = 0; s < test.size(); ++s) {
      char id[32];
      std::snprintf(id, sizeof id, "scene_%04zu", s);
      dets.emplace_back(id, vectorize(maps[s], rec.points[0].achieved.threshold, vopts.min_area, vopts.connectivity,
                                      m.kind));
    }
    detection_files.emplace_back("detections_" + m.kind + ".csv", detections_csv(dets));

    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::string summary;
    for (const auto& op : rec.points) {
      summary += " | target " + fmt_num(op.target_recall, 2) + ": recall " + fmt_num(op.achieved.recall, 3) +
                 ", fp/km2 " + fmt_num(op.achieved.fp_per_km2, 1) + (op.reachable ? "" : " (unreachable)");
    }
    log("evaluated " + m.kind + " (" + std::to_string(rec.n_predictions) + " predictions)" + summary);
    records.push_back(std::move(rec));
  }

  const std::vector<ComparisonRow> rows = comparison_rows(records);
  const fs::path out = paths.eval();
  fs::create_directories(out);
  json reports = json::array();
  json timed = json::array();
  for (const auto& r : records) {
    reports.push_back(record_json(r));
    timed.push_back({{"method", r.method},
                     {"n_predictions", r.n_predictions},
                     {"extra_epochs", r.extra_epochs},
                     {"wall_seconds", r.wall_seconds}});
  }
  write_text(out / "reports.json", json{{"records", reports}}.dump(2) + "\n");
  write_text(out / "records.json", json{{"records", timed}}.dump(2) + "\n");
  write_text(out / "reports.csv", reports_csv(records));
  write_text(out / "curves.csv", curves_csv(records));
  write_text(out / "comparison.csv", comparison_csv(rows));
  write_text(out / "comparison.txt", comparison_text(rows));
  for (const auto& [name, text] : detection_files) write_text(out / name, text);
  return records;
}

std::vector<RunRecord> load_run_records(const fs::path& run_dir) {
  const fs::path file = run_dir / "eval" / "reports.json";
  if (!fs::exists(file)) {
    throw MissingArtifactError("no evaluation results in " + run_dir.string() + "; run `ensemble-forge evaluate` first");
  }
  std::vector<RunRecord> records;
  try {
    const json j = json::parse(read_text(file));
    for (const auto& rj : j.at("records")) {
      RunRecord r;
      r.method = rj.at("method").get<std::string>();
      r.n_predictions = rj.at("n_predictions").get<int>();
      r.extra_epochs = rj.at("extra_epochs").get<int>();
      for (const auto& op : rj.at("operating_points")) {
        r.points.push_back({op.at("target_recall").get<double>(), op.at("reachable").get<bool>(),
                            report_from_json(op.at("report"))});
      }
      for (const auto& s : rj.at("sweep")) r.sweep.push_back(report_from_json(s));
      records.push_back(std::move(r));
    }
  } catch (const json::exception& e) {
    throw FormatError(file.string() + ": " + e.what());
  }
  const fs::path timed = run_dir / "eval" / "records.json";
  if (fs::exists(timed)) {
    try {
      const json j = json::parse(read_text(timed));
      for (const auto& t : j.at("records")) {
        for (auto& r : records) {
          if (r.method == t.at("method").get<std::string>()) r.wall_seconds = t.at("wall_seconds").get<double>();
        }
      }
    } catch (const json::exception&) {
      // Timing is informational only.
    }
  }
  return records;
}

}  // namespace ensforge
