#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "ensforge/ens_train.hpp"
#include "ensforge/refnet.hpp"
#include "ensforge/synthdata.hpp"

namespace ensforge {

/// One network pass: image -> probability map.
using PredictFn = std::function<ProbMap(const Tensor& image, const PredictMode& mode)>;

/// Wraps a network + weights and counts every forward pass it performs.
class CountingPredictor {
 public:
  CountingPredictor(const RefNet& net, const ParamSet& params);

  ProbMap operator()(const Tensor& image, const PredictMode& mode) const;
  PredictFn fn() const;
  std::int64_t passes() const noexcept { return passes_->load(); }

 private:
  const RefNet* net_;
  const ParamSet* params_;
  std::shared_ptr<std::atomic<std::int64_t>> passes_;
};

struct TtaMember {
  GeomTransform geom;
  std::optional<std::uint64_t> dropout_seed;  // stochastic pass when set
  friend bool operator==(const TtaMember&, const TtaMember&) = default;
};

/// {identity, hflip, vflip, rot180} deterministic, plus `dropout_passes`
/// identity passes with seeds base_seed, base_seed+1, ...
std::vector<TtaMember> default_tta_members(std::uint64_t base_seed, int dropout_passes = 3);

struct FusedMap {
  ProbMap mean;
  std::optional<Tensor> stddev;       // per-pixel population std (MC dropout)
  std::vector<ProbMap> member_maps;   // kept only on request
  int n_members = 0;                  // forward passes performed
};

/// Pixelwise mean (and optional std) of equally shaped maps. Each pixel is
/// reduced over its values sorted ascending, so member order never matters.
FusedMap fuse_mean(std::span<const ProbMap> maps, bool with_stddev = false, bool keep_members = false);

FusedMap tta_predict(const PredictFn& predict, const Tensor& image, std::span<const TtaMember> members,
                     bool keep_members = false);

FusedMap mc_dropout_predict(const PredictFn& predict, const Tensor& image, int samples, std::uint64_t base_seed,
                            bool keep_members = false);

/// One deterministic pass per snapshot (times each TTA member when given).
FusedMap ensemble_predict(const RefNet& net, const SnapshotSet& snapshots, const Tensor& image,
                          std::span<const TtaMember> per_member = {}, bool keep_members = false);

/// Pixel on (1) iff at least min_votes maps reach pixel_threshold.
Tensor fuse_vote(std::span<const ProbMap> maps, double pixel_threshold, int min_votes);

// ---------------------------------------------------------------------------
// Stacking: per-pixel logistic combiner over member maps.
// ---------------------------------------------------------------------------

struct StackWeights {
  std::vector<double> w;
  double b = 0.0;
  friend bool operator==(const StackWeights&, const StackWeights&) = default;
};

inline constexpr double kStackClamp = 1e-6;

struct StackFitOptions {
  int epochs = 200;    // full-batch gradient steps
  double lr = 0.5;
  std::optional<StackWeights> init;  // default: w_k = 1/K, b = 0
};

/// member_maps[s][k] is detector k's map on training scene s.
StackWeights stack_fit(std::span<const std::vector<ProbMap>> member_maps, std::span<const Tensor> gt_masks,
                       const StackFitOptions& opts = {});

ProbMap stack_apply(const StackWeights& weights, std::span<const ProbMap> member_maps);

/// Mean pixel BCE of a combiner on the training scenes.
double stack_loss(const StackWeights& weights, std::span<const std::vector<ProbMap>> member_maps,
                  std::span<const Tensor> gt_masks);

/// Writes mean.ensr (+ stddev.ensr, member_k.ensr) and manifest.json into dir.
void save_fused(const FusedMap& fused, const std::filesystem::path& dir);
FusedMap load_fused(const std::filesystem::path& dir);

}  // namespace ensforge
