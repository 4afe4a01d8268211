#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ensforge/ens_train.hpp"
#include "ensforge/objects.hpp"
#include "ensforge/refnet.hpp"
#include "ensforge/sched.hpp"
#include "ensforge/synthdata.hpp"

namespace ensforge {

/// Learning-rate schedule in epoch units, as written in config files.
struct ScheduleConfig {
  ScheduleKind kind = ScheduleKind::step_decay;
  double lr_max = 0.05;
  double lr_min = 0.0;
  int cycle_epochs = 1;
  int burn_in_epochs = 0;
  double decay_factor = 1.0;
  int decay_every_epochs = 1;
  friend bool operator==(const ScheduleConfig&, const ScheduleConfig&) = default;
};

/// Iteration-unit schedule for `epochs` epochs of `spe` steps each.
ScheduleSpec to_iterations(const ScheduleConfig& sc, int epochs, std::int64_t spe);

struct DatasetConfig {
  SceneSpec scene;
  int n_train = 20;
  int n_val = 5;
  int n_test = 10;
  std::uint64_t master_seed = 0;
  friend bool operator==(const DatasetConfig&, const DatasetConfig&) = default;
};

struct BaselineConfig {
  int epochs = 30;
  int batch_size = 4;
  double momentum = 0.9;
  std::uint64_t seed = 1;
  ScheduleConfig schedule;
  AugConfig augmentation;

  TrainSpec train_spec(std::int64_t spe) const;
  friend bool operator==(const BaselineConfig&, const BaselineConfig&) = default;
};

/// kind is one of baseline, tta_dropout, fge, swa, sse, bagging, hydra,
/// stacking. params holds the kind-specific keys; omitted keys take defaults.
struct MethodConfig {
  std::string kind;
  nlohmann::json params = nlohmann::json::object();
  friend bool operator==(const MethodConfig&, const MethodConfig&) = default;
};

/// 0.998, 0.996, ..., 0.002.
std::vector<double> default_threshold_grid();

struct EvalConfig {
  std::vector<double> thresholds = default_threshold_grid();  // strictly descending
  std::vector<double> recall_targets{0.92, 0.86};
  double radius_m = 5.0;
  int min_area = 2;
  int connectivity = 8;

  VectorizeOptions vectorize() const { return {radius_m, min_area, connectivity}; }
  friend bool operator==(const EvalConfig&, const EvalConfig&) = default;
};

struct ExperimentConfig {
  std::string run_dir = "run";
  DatasetConfig dataset;
  NetConfig net;
  BaselineConfig baseline;
  std::vector<MethodConfig> methods;
  EvalConfig eval;

  /// Throws ConfigError naming the offending field.
  void validate() const;
  /// Methods in run order: baseline first (always present), the rest as listed.
  std::vector<MethodConfig> resolved_methods() const;
  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

ExperimentConfig parse_config(const nlohmann::json& j);
nlohmann::json render_config(const ExperimentConfig& cfg);
ExperimentConfig load_config(const std::filesystem::path& path);

struct RunOptions {
  std::optional<std::filesystem::path> run_dir;  // overrides config
  std::optional<std::uint64_t> seed;             // overrides dataset.master_seed
  bool force = false;
  int jobs = 1;
  std::ostream* log = nullptr;  // progress lines; silent when null
};

/// Config with command-line overrides applied, validated.
ExperimentConfig apply_overrides(ExperimentConfig cfg, const RunOptions& opts);

struct RunRecord {
  std::string method;
  int n_predictions = 1;
  int extra_epochs = 0;
  std::vector<OperatingPoint> points;  // one per recall target, in config order
  std::vector<EvalReport> sweep;       // full threshold sweep (pooled)
  double wall_seconds = 0.0;           // not part of any metric file
};

struct ComparisonRow {
  std::string method;
  int op_index = 0;
  double target_recall = 0.0;
  bool reachable = true;
  double threshold = 0.0;
  double recall = 0.0;
  double delta_recall = 0.0;  // recall - baseline recall at the same operating point
  double fp_per_km2 = 0.0;
  double delta_fp_pct = 0.0;  // (fp_base - fp) / fp_base * 100; positive = fewer FPs
  double f1 = 0.0;
  int n_predictions = 1;
  int extra_epochs = 0;
};

/// NaN when fp_base is zero.
double delta_fp_pct(double fp_base, double fp_method);

/// Rows ordered by method name, then operating point. Needs a baseline record.
std::vector<ComparisonRow> comparison_rows(std::span<const RunRecord> records);
std::string comparison_csv(std::span<const ComparisonRow> rows);
std::string comparison_text(std::span<const ComparisonRow> rows);

void cmd_generate(const ExperimentConfig& cfg, const RunOptions& opts);
void cmd_train(const ExperimentConfig& cfg, const RunOptions& opts);
std::vector<RunRecord> cmd_evaluate(const ExperimentConfig& cfg, const RunOptions& opts);

/// Reads eval/reports.json under run_dir.
std::vector<RunRecord> load_run_records(const std::filesystem::path& run_dir);

}  // namespace ensforge
