#include "ensforge/objects.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <tuple>

#include "ensforge/errors.hpp"

namespace ensforge {

std::vector<Detection> vectorize(const ProbMap& map, double threshold, int min_area, int connectivity,
                                 const std::string& source) {
  if (!map.is_raster()) throw DimensionError("vectorize expects a rank-2 probability map");
  if (!(threshold > 0.0 && threshold < 1.0)) throw DomainError("vectorize threshold must be in (0,1)");
  if (connectivity != 4 && connectivity != 8) throw ConfigError("connectivity must be 4 or 8");

  const int h = static_cast<int>(map.rows());
  const int w = static_cast<int>(map.cols());
  std::vector<std::uint8_t> seen(map.size(), 0);
  std::vector<int> stack;
  std::vector<Detection> out;
  static constexpr int kNbr[8][2] = {{-1, 0}, {1, 0}, {0, -1}, {0, 1}, {-1, -1}, {-1, 1}, {1, -1}, {1, 1}};

  for (int start = 0; start < h * w; ++start) {
    if (seen[start] || !(map[start] >= threshold)) continue;
    seen[start] = 1;
    stack.assign(1, start);
    double mass = 0.0, mr = 0.0, mc = 0.0;
    int area = 0;
    BBox box{h, w, -1, -1};
    while (!stack.empty()) {
      const int p = stack.back();
      stack.pop_back();
      const int r = p / w, c = p % w;
      const double v = map[p];
      mass += v;
      mr += v * r;
      mc += v * c;
      ++area;
      box.r0 = std::min(box.r0, r);
      box.c0 = std::min(box.c0, c);
      box.r1 = std::max(box.r1, r);
      box.c1 = std::max(box.c1, c);
      for (int k = 0; k < connectivity; ++k) {
        const int rr = r + kNbr[k][0], cc = c + kNbr[k][1];
        if (rr < 0 || rr >= h || cc < 0 || cc >= w) continue;
        const int q = rr * w + cc;
        if (!seen[q] && map[q] >= threshold) {
          seen[q] = 1;
          stack.push_back(q);
        }
      }
    }
    if (area < min_area) continue;
    Detection d;
    d.centroid = {mr / mass, mc / mass};
    d.bbox = box;
    d.area_px = area;
    d.score = mass / area;
    d.source = source;
    out.push_back(std::move(d));
  }
  return out;
}

bool canonical_less(const Detection& a, const Detection& b) {
  return std::make_tuple(-a.score, a.centroid.row, a.centroid.col, -a.area_px, a.bbox.r0, a.bbox.c0, a.bbox.r1,
                         a.bbox.c1) < std::make_tuple(-b.score, b.centroid.row, b.centroid.col, -b.area_px, b.bbox.r0,
                                                      b.bbox.c0, b.bbox.r1, b.bbox.c1);
}

namespace {

double dist(const PixelPoint& a, const PixelPoint& b) { return std::hypot(a.row - b.row, a.col - b.col); }

}  // namespace

std::vector<Detection> group_votes(std::span<const std::vector<Detection>> per_member, double radius_px,
                                   int min_votes) {
  if (min_votes < 1 || static_cast<std::size_t>(min_votes) > per_member.size()) {
    throw ConfigError("group_votes: min_votes must be in [1, member count]");
  }
  struct Item {
    const Detection* det;
    std::size_t member;
  };
  std::vector<Item> items;
  for (std::size_t m = 0; m < per_member.size(); ++m) {
    for (const auto& d : per_member[m]) items.push_back({&d, m});
  }
  std::stable_sort(items.begin(), items.end(),
                   [](const Item& a, const Item& b) { return canonical_less(*a.det, *b.det); });

  std::vector<bool> used(items.size(), false);
  std::vector<Detection> out;
  for (std::size_t s = 0; s < items.size(); ++s) {
    if (used[s]) continue;
    used[s] = true;
    std::vector<std::size_t> cluster{s};
    const PixelPoint seed = items[s].det->centroid;
    for (std::size_t m = 0; m < per_member.size(); ++m) {
      if (m == items[s].member) continue;
      std::size_t best = items.size();
      double best_d = std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < items.size(); ++j) {
        if (used[j] || items[j].member != m) continue;
        const double d = dist(seed, items[j].det->centroid);
        if (d <= radius_px && d < best_d) {  // strict: earlier canonical item wins ties
          best = j;
          best_d = d;
        }
      }
      if (best != items.size()) {
        used[best] = true;
        cluster.push_back(best);
      }
    }
    if (static_cast<int>(cluster.size()) < min_votes) continue;
    // canonical summation order, independent of member order
    std::sort(cluster.begin(), cluster.end());

    Detection f;
    double sr = 0.0, sc = 0.0, ss = 0.0, sa = 0.0;
    f.bbox = items[s].det->bbox;
    for (std::size_t k : cluster) {
      const Detection& d = *items[k].det;
      sr += d.centroid.row;
      sc += d.centroid.col;
      ss += d.score;
      sa += d.area_px;
      f.bbox.r0 = std::min(f.bbox.r0, d.bbox.r0);
      f.bbox.c0 = std::min(f.bbox.c0, d.bbox.c0);
      f.bbox.r1 = std::max(f.bbox.r1, d.bbox.r1);
      f.bbox.c1 = std::max(f.bbox.c1, d.bbox.c1);
    }
    const double n = static_cast<double>(cluster.size());
    f.centroid = {sr / n, sc / n};
    f.score = ss / n;
    f.area_px = static_cast<int>(std::lround(sa / n));
    f.votes = static_cast<int>(cluster.size());
    f.source = "vote";
    out.push_back(std::move(f));
  }
  std::stable_sort(out.begin(), out.end(), canonical_less);
  return out;
}

MatchResult match_detections(std::span<const Detection> dets, std::span<const PixelPoint> gt, double radius_m,
                             double gsd) {
  if (!(radius_m > 0.0)) throw DomainError("match radius must be > 0");
  if (!(gsd > 0.0)) throw DomainError("gsd must be > 0");
  const double radius_px = radius_m / gsd;
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });

  MatchResult res;
  std::vector<bool> claimed(gt.size(), false);
  for (std::size_t i : order) {
    std::size_t best = gt.size();
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t g = 0; g < gt.size(); ++g) {
      if (claimed[g]) continue;
      const double d = dist(dets[i].centroid, gt[g]);
      if (d <= radius_px && d < best_d) {
        best = g;
        best_d = d;
      }
    }
    if (best != gt.size()) {
      claimed[best] = true;
      res.pairs.emplace_back(i, best);
    }
  }
  res.tp = static_cast<int>(res.pairs.size());
  res.fp = static_cast<int>(dets.size()) - res.tp;
  res.fn = static_cast<int>(gt.size()) - res.tp;
  return res;
}

EvalReport make_report(int tp, int fp, int fn, double area_km2, double threshold, int n_predictions) {
  if (!(area_km2 > 0.0)) throw DomainError("evaluation area must be > 0 km^2");
  EvalReport r;
  r.tp = tp;
  r.fp = fp;
  r.fn = fn;
  r.area_km2 = area_km2;
  r.threshold = threshold;
  r.n_predictions = n_predictions;
  if (tp + fn == 0) {
    r.recall = 1.0;
    r.recall_undefined = true;
  } else {
    r.recall = static_cast<double>(tp) / (tp + fn);
  }
  r.precision = tp + fp == 0 ? 0.0 : static_cast<double>(tp) / (tp + fp);
  r.f1 = r.precision + r.recall > 0.0 ? 2.0 * r.precision * r.recall / (r.precision + r.recall) : 0.0;
  r.fp_per_km2 = fp / area_km2;
  return r;
}

EvalReport evaluate(std::span<const Detection> dets, std::span<const PixelPoint> gt, const SceneGeometry& geometry,
                    double threshold, int n_predictions, double radius_m) {
  const MatchResult m = match_detections(dets, gt, radius_m, geometry.gsd);
  return make_report(m.tp, m.fp, m.fn, geometry.area_km2(), threshold, n_predictions);
}

namespace {

void check_grid(std::span<const double> thresholds) {
  if (thresholds.empty()) throw ConfigError("threshold grid is empty");
  for (std::size_t i = 0; i < thresholds.size(); ++i) {
    if (!(thresholds[i] > 0.0 && thresholds[i] < 1.0)) throw ConfigError("thresholds must lie in (0,1)");
    if (i > 0 && !(thresholds[i] < thresholds[i - 1])) throw ConfigError("thresholds must be strictly descending");
  }
}

}  // namespace

std::vector<EvalReport> sweep_thresholds(std::span<const EvalScene> scenes, std::span<const double> thresholds,
                                         const VectorizeOptions& opts, int n_predictions) {
  check_grid(thresholds);
  double area = 0.0;
  for (const auto& s : scenes) area += s.geometry.area_km2();
  std::vector<EvalReport> out;
  out.reserve(thresholds.size());
  for (double th : thresholds) {
    int tp = 0, fp = 0, fn = 0;
    for (const auto& s : scenes) {
      const auto dets = vectorize(*s.map, th, opts.min_area, opts.connectivity);
      const MatchResult m = match_detections(dets, s.gt, opts.radius_m, s.geometry.gsd);
      tp += m.tp;
      fp += m.fp;
      fn += m.fn;
    }
    out.push_back(make_report(tp, fp, fn, area, th, n_predictions));
  }
  return out;
}

std::vector<OperatingPoint> select_operating_points(std::span<const EvalReport> sweep,
                                                    std::span<const double> targets) {
  if (sweep.empty()) throw ConfigError("threshold grid is empty");
  std::vector<OperatingPoint> out;
  for (double target : targets) {
    OperatingPoint op;
    op.target_recall = target;
    auto hit = std::find_if(sweep.begin(), sweep.end(),
                            [&](const EvalReport& r) { return r.recall >= target - 1e-12; });
    if (hit != sweep.end()) {
      op.achieved = *hit;
    } else {
      op.reachable = false;
      op.achieved = *std::max_element(sweep.begin(), sweep.end(), [](const EvalReport& a, const EvalReport& b) {
        return a.recall < b.recall;  // first maximum = highest threshold
      });
    }
    out.push_back(op);
  }
  return out;
}

std::vector<OperatingPoint> sweep_operating_points(std::span<const EvalScene> scenes,
                                                   std::span<const double> thresholds,
                                                   std::span<const double> targets, const VectorizeOptions& opts,
                                                   int n_predictions) {
  const auto sweep = sweep_thresholds(scenes, thresholds, opts, n_predictions);
  return select_operating_points(sweep, targets);
}

}  // namespace ensforge
