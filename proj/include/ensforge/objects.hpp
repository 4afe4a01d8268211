#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ensforge/synthdata.hpp"
#include "ensforge/tensor.hpp"

namespace ensforge {

struct BBox {
  int r0 = 0, c0 = 0, r1 = 0, c1 = 0;  // inclusive
  bool contains(const PixelPoint& p) const noexcept {
    return p.row >= r0 && p.row <= r1 && p.col >= c0 && p.col <= c1;
  }
  friend bool operator==(const BBox&, const BBox&) = default;
};

struct Detection {
  PixelPoint centroid;
  BBox bbox;
  int area_px = 0;
  double score = 0.0;
  std::string source;
  int votes = 1;  // distinct members agreeing (group_votes output)
  friend bool operator==(const Detection&, const Detection&) = default;
};

/// Connected components of (map >= threshold). Components under `min_area`
/// pixels are dropped. score = mean probability over the component; centroid
/// is the probability-weighted pixel centroid. Ordered by first pixel in
/// raster order.
std::vector<Detection> vectorize(const ProbMap& map, double threshold, int min_area, int connectivity,
                                 const std::string& source = {});

/// Total order used by object voting: score desc, then row, col, area, bbox.
bool canonical_less(const Detection& a, const Detection& b);

/// Object-wise vote across members. Detections are visited in canonical
/// order; each unassigned one seeds a cluster that takes, from every other
/// member, the nearest unassigned detection within radius_px of the seed.
/// Clusters with >= min_votes distinct members survive as one detection:
/// member-count-weighted centroid, mean score, union bbox.
std::vector<Detection> group_votes(std::span<const std::vector<Detection>> per_member, double radius_px,
                                   int min_votes);

struct MatchResult {
  int tp = 0;
  int fp = 0;
  int fn = 0;
  std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (detection idx, gt idx)
};

/// Greedy one-to-one matching: detections by descending score (ties to the
/// lower index) each claim the nearest unclaimed ground-truth point within
/// radius_m / gsd pixels.
MatchResult match_detections(std::span<const Detection> dets, std::span<const PixelPoint> gt, double radius_m,
                             double gsd);

struct SceneGeometry {
  int height = 0;
  int width = 0;
  double gsd = 0.5;
  double area_km2() const noexcept { return static_cast<double>(height) * width * gsd * gsd / 1e6; }
};

struct EvalReport {
  int tp = 0, fp = 0, fn = 0;
  double recall = 0.0;
  double precision = 0.0;
  double f1 = 0.0;
  double fp_per_km2 = 0.0;
  double threshold = 0.0;
  int n_predictions = 1;
  double area_km2 = 0.0;
  bool recall_undefined = false;  // no ground truth: recall reported as 1.0
};

/// Metrics from pooled counts.
EvalReport make_report(int tp, int fp, int fn, double area_km2, double threshold, int n_predictions);

EvalReport evaluate(std::span<const Detection> dets, std::span<const PixelPoint> gt, const SceneGeometry& geometry,
                    double threshold, int n_predictions, double radius_m);

struct VectorizeOptions {
  double radius_m = 5.0;
  int min_area = 2;
  int connectivity = 8;
};

/// One scene's fused probability map plus its ground truth.
struct EvalScene {
  const ProbMap* map = nullptr;
  std::vector<PixelPoint> gt;
  SceneGeometry geometry;
};

/// Pooled (all scenes) report at every threshold of the grid.
std::vector<EvalReport> sweep_thresholds(std::span<const EvalScene> scenes, std::span<const double> thresholds,
                                         const VectorizeOptions& opts, int n_predictions);

struct OperatingPoint {
  double target_recall = 0.0;
  bool reachable = true;
  EvalReport achieved;
};

/// thresholds must be strictly descending in (0,1). For each target picks the
/// highest threshold whose pooled recall reaches it; otherwise the
/// max-recall report, flagged unreachable.
std::vector<OperatingPoint> sweep_operating_points(std::span<const EvalScene> scenes,
                                                   std::span<const double> thresholds,
                                                   std::span<const double> targets, const VectorizeOptions& opts,
                                                   int n_predictions);

/// Same selection rule applied to an already computed sweep.
std::vector<OperatingPoint> select_operating_points(std::span<const EvalReport> sweep,
                                                    std::span<const double> targets);

}  // namespace ensforge
