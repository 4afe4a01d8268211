#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ensforge/params.hpp"
#include "ensforge/refnet.hpp"
#include "ensforge/sched.hpp"
#include "ensforge/synthdata.hpp"

namespace ensforge {

/// Images and binary masks used for training or validation.
struct TrainingSet {
  std::vector<Tensor> images;
  std::vector<Tensor> masks;

  std::size_t size() const noexcept { return images.size(); }
  static TrainingSet from_scenes(std::span<const Scene> scenes);
};

struct TrainSpec {
  int epochs = 1;
  int batch_size = 4;
  ScheduleSpec schedule;  // iteration units; total_iters == epochs * steps_per_epoch
  double momentum = 0.9;
  std::uint64_t seed = 0;
  AugConfig augmentation;
  bool swa_every_iteration = false;  // train_swa: fold at every iteration past burn-in

  void validate() const;
  friend bool operator==(const TrainSpec&, const TrainSpec&) = default;
};

std::int64_t steps_per_epoch(std::size_t dataset_size, int batch_size);

/// Called after the update of iteration t with the current weights.
using IterationHook = std::function<void(std::int64_t t, const ParamSet& params)>;

/// Mini-batch momentum SGD over `dataset` (or the `subset` of it).
/// Shuffling, augmentation, and dropout masks are all derived from spec.seed,
/// so a run is a pure function of its inputs.
ParamSet train_network(const RefNet& net, ParamSet init, const TrainingSet& dataset, const TrainSpec& spec,
                       std::span<const std::size_t> subset = {}, const IterationHook& hook = {});

struct SnapshotMember {
  std::string member_id;
  ParamSet params;
  std::string provenance;
};

/// Non-empty ordered set of same-architecture weight snapshots.
class SnapshotSet {
 public:
  void add(SnapshotMember member);
  const std::vector<SnapshotMember>& members() const noexcept { return members_; }
  std::size_t size() const noexcept { return members_.size(); }
  bool empty() const noexcept { return members_.empty(); }
  std::uint64_t fingerprint() const;

 private:
  std::vector<SnapshotMember> members_;
};

template <class T>
struct BasicSwaState {
  std::optional<BasicParamSet<T>> mean;
  std::int64_t count = 0;
};
using SwaState = BasicSwaState<float>;
using SwaState64 = BasicSwaState<double>;

/// mean <- (mean*count + params) / (count + 1), evaluated in double.
template <class T>
void swa_update(BasicSwaState<T>& state, const BasicParamSet<T>& params);

/// round(fraction*n) indices in [0,n); sorted and distinct without replacement.
std::vector<std::size_t> bootstrap_indices(std::size_t n, double fraction, std::uint64_t seed, bool with_replacement);

enum class BaggingMode { subsample, synthetic };

struct BaggingOptions {
  BaggingMode mode = BaggingMode::subsample;
  double fraction = 0.8;
  bool with_replacement = false;
  std::vector<AugConfig> replica_augs;  // synthetic mode; derived from spec.augmentation when empty
  int jobs = 1;
};

/// B independently seeded replicas trained from scratch. Each replica's
/// streams come from hash(seed, member_id), so the result does not depend on
/// `jobs` or the order replicas finish in.
SnapshotSet train_bagged(const RefNet& net, const TrainingSet& dataset, int replicas, const TrainSpec& spec,
                         const BaggingOptions& opts = {});

/// One member per capture point of a cyclic schedule, ordered by capture iteration.
SnapshotSet train_snapshot_cycles(const RefNet& net, ParamSet init, const TrainingSet& dataset,
                                  const TrainSpec& spec);

struct SwaResult {
  ParamSet averaged;
  std::int64_t folded = 0;
  std::vector<ParamSet> snapshots;  // only filled when keep_snapshots
};

SwaResult train_swa(const RefNet& net, ParamSet init, const TrainingSet& dataset, const TrainSpec& spec,
                    bool keep_snapshots = false);

struct HydraResult {
  ParamSet body;
  SnapshotSet heads;
};

/// Body epochs / head epochs for a total budget (70% / 30%).
std::pair<int, int> hydra_budget_split(int total_epochs);

/// Trains the body once (skipped when body_spec.epochs == 0), then fine-tunes
/// each head from the body weights under its own spec.
HydraResult train_hydra(const RefNet& net, ParamSet init, const TrainingSet& dataset, const TrainSpec& body_spec,
                        std::span<const TrainSpec> head_specs, int jobs = 1);

/// Runs fn(i) for i in [0, n) on up to `jobs` threads. Rethrows the first failure.
void parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)>& fn);

}  // namespace ensforge
