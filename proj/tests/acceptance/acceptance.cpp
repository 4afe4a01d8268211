// One PASS/FAIL line per acceptance criterion; exit status 1 if any fails.
// Lines starting with "info" are context, not verdicts.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "ensforge/ens_train.hpp"
#include "ensforge/experiment.hpp"
#include "ensforge/fuse.hpp"
#include "ensforge/objects.hpp"
#include "ensforge/persist.hpp"
#include "ensforge/rng.hpp"
#include "ensforge/sched.hpp"
#include "ensforge/synthdata.hpp"
#include "oracles.hpp"

using namespace ensforge;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string num(double v, int digits = 3) {
  std::ostringstream os;
  os.precision(digits);
  os << v;
  return os.str();
}

struct Verdict {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void report(int id, const std::string& title, const Verdict& v) {
  std::cout << (v.pass ? "PASS" : "FAIL") << " criterion " << id << " (" << title << "): " << v.detail << std::endl;
  failures += !v.pass;
}

void info(const std::string& line) { std::cout << "info " << line << std::endl; }

// --- 1 ---------------------------------------------------------------------------

Verdict gradient_oracle() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  std::string where;
  std::size_t checked = 0;
  const auto cases = oracle::micro_cases();
  for (std::size_t i = 0; i < cases.size(); ++i) {
    const auto g = oracle::run_micro_case(cases[i], 101 + i, 1e-5);
    checked += g.checked;
    if (g.max_rel_error > worst) {
      worst = g.max_rel_error;
      where = "case " + std::to_string(i) + " " + g.worst;
    }
  }
  const double secs = seconds_since(t0);
  return {worst < 1e-4 && secs < 60.0, std::to_string(cases.size()) + " nets, " + std::to_string(checked) +
                                           " coordinates, max rel error " + num(worst) + " at " + where + ", " +
                                           num(secs, 3) + " s"};
}

// --- 2 ---------------------------------------------------------------------------

Verdict swa_equivalence() {
  ParamSet64 shape;
  shape.add("w", Tensor64({4, 3, 3, 3}));
  shape.add("b", Tensor64({4}));
  shape.add("head", Tensor64({1, 4, 1, 1}));
  std::vector<ParamSet64> sets;
  for (std::uint64_t k = 0; k < 10; ++k) {
    ParamSet64 p = shape.zeros_like();
    CounterRng r(hash_words({0x5a, k}));
    for (auto& e : p.entries()) {
      for (auto& v : e.tensor.values()) v = r.uniform(-3, 3);
    }
    sets.push_back(p);
  }
  SwaState64 state;
  for (const auto& p : sets) swa_update(state, p);
  double worst = 0.0;
  for (std::size_t e = 0; e < shape.size(); ++e) {
    for (std::size_t i = 0; i < shape.tensor(e).size(); ++i) {
      double sum = 0.0;
      for (const auto& p : sets) sum += p.tensor(e)[i];
      worst = std::max(worst, std::abs(state.mean->tensor(e)[i] - sum / 10.0));
    }
  }
  return {worst <= 1e-12 && state.count == 10, "10 sets, max |fold - mean| = " + num(worst)};
}

// --- 3 ---------------------------------------------------------------------------

Verdict schedule_suite() {
  int bad = 0;
  std::string first_bad;
  auto fail = [&](const std::string& why) {
    if (bad++ == 0) first_bad = why;
  };
  for (std::uint64_t k = 0; k < 20; ++k) {
    CounterRng r(hash_words({0xacc3, k}));
    ScheduleSpec s;
    s.kind = k % 2 == 0 ? ScheduleKind::sse_cosine : ScheduleKind::fge_triangular;
    s.cycle_len = r.range(1, 30) * 2;  // even, so the half-cycle is an iteration
    s.total_iters = s.cycle_len + r.range(0, 300);
    s.lr_max = r.uniform(0.001, 1.0);
    s.lr_min = s.kind == ScheduleKind::sse_cosine ? 0.0 : r.uniform(0.0, s.lr_max / 2.0);
    const std::string tag = to_string(s.kind) + " #" + std::to_string(k);
    for (std::int64_t c = 0; c * s.cycle_len < s.total_iters; ++c) {
      const std::int64_t start = c * s.cycle_len, mid = start + s.cycle_len / 2;
      if (lr_at(s, start) != s.lr_max) fail(tag + " start");
      if (mid >= s.total_iters) continue;
      if (s.kind == ScheduleKind::sse_cosine && lr_at(s, mid) != s.lr_max / 2.0) fail(tag + " midpoint");
      if (s.kind == ScheduleKind::fge_triangular && lr_at(s, mid) != s.lr_min) fail(tag + " trough");
    }
    if (capture_count(s) != s.total_iters / s.cycle_len) fail(tag + " capture count");
  }
  return {bad == 0, bad == 0 ? "20 random specs, exact cycle start/midpoint/trough values and capture counts"
                             : std::to_string(bad) + " violations, first: " + first_bad};
}

// --- 4 ---------------------------------------------------------------------------

Tensor random_raster(std::size_t h, std::size_t w, std::uint64_t seed) {
  CounterRng r(seed);
  Tensor t({h, w});
  for (auto& v : t.values()) v = static_cast<float>(r.uniform());
  return t;
}

Verdict tta_round_trip() {
  int bad = 0;
  const Tensor sq = random_raster(17, 17, 1);
  for (const auto& g : square_symmetries()) {
    bad += !(invert_geom(g, apply_geom(g, sq)) == sq) || !(apply_geom(g, invert_geom(g, sq)) == sq);
  }
  for (std::uint64_t k = 0; k < 100; ++k) {
    CounterRng r(hash_words({0x7a7a, k}));
    const Tensor x = random_raster(static_cast<std::size_t>(r.range(2, 40)), static_cast<std::size_t>(r.range(2, 40)), k);
    const auto t = GeomTransform::translate(r.range(-50, 50), r.range(-50, 50));
    bad += !(invert_geom(t, apply_geom(t, x)) == x);
  }

  const RefNet net(NetConfig{16, 4, 2, 0.25, 3});
  const ParamSet params = oracle::randomised_params(net, 9).cast<float>();
  CountingPredictor pred(net, params);
  const std::vector<TtaMember> id{{GeomTransform::identity(), std::nullopt}};
  int tta_bad = 0;
  for (std::uint64_t k = 0; k < 5; ++k) {
    const Tensor img = random_raster(16, 16, 50 + k);
    tta_bad += !(tta_predict(pred.fn(), img, id).mean == net.forward(params, img, PredictMode::deterministic()));
  }
  return {bad == 0 && tta_bad == 0, "8 symmetries + 100 translations, " + std::to_string(bad) +
                                        " inexact; identity-only TTA differs on " + std::to_string(tta_bad) + "/5 images"};
}

// --- 5 ---------------------------------------------------------------------------

Verdict fusion_oracles() {
  int vote_bad = 0, group_bad = 0, perm_bad = 0, ambiguous = 0;
  for (std::uint64_t k = 0; k < 100; ++k) {
    CounterRng r(hash_words({0xf5, k}));
    const std::size_t members = static_cast<std::size_t>(r.range(1, 5));
    std::vector<ProbMap> maps;
    for (std::size_t m = 0; m < members; ++m) {
      ProbMap p({5, 5});
      for (auto& v : p.values()) v = static_cast<float>(r.range(0, 10)) / 10.0f;
      maps.push_back(p);
    }
    const double thr = r.range(1, 9) / 10.0;
    const int mv = r.range(1, static_cast<int>(members));
    const Tensor fused = fuse_vote(maps, thr, mv);
    vote_bad += !(fused == oracle::vote_by_subsets(maps, thr, mv));
    std::vector<std::size_t> idx(members);
    std::iota(idx.begin(), idx.end(), 0);
    while (std::next_permutation(idx.begin(), idx.end())) {
      std::vector<ProbMap> p;
      for (auto i : idx) p.push_back(maps[i]);
      perm_bad += !(fuse_vote(p, thr, mv) == fused);
    }

    int min_votes = 1;
    double radius = 1.0;
    const auto per = oracle::random_vote_instance(k, &min_votes, &radius);
    const auto ref = oracle::group_votes_by_partitions(per, radius, min_votes);
    ambiguous += ref.qualifying_partitions != 1;
    auto got = group_votes(per, radius, min_votes);
    auto sorted = got;
    std::sort(sorted.begin(), sorted.end(), oracle::canonical_before);
    group_bad += !oracle::same_fused(sorted, ref.fused);
    std::vector<std::size_t> pidx(per.size());
    std::iota(pidx.begin(), pidx.end(), 0);
    while (std::next_permutation(pidx.begin(), pidx.end())) {
      std::vector<std::vector<Detection>> p;
      for (auto i : pidx) p.push_back(per[i]);
      perm_bad += !(group_votes(p, radius, min_votes) == got);
    }
  }
  return {vote_bad + group_bad + perm_bad + ambiguous == 0,
          "100 pixel-vote and 100 object-vote instances; mismatches " + std::to_string(vote_bad) + " / " +
              std::to_string(group_bad) + ", permutation failures " + std::to_string(perm_bad) +
              ", non-unique oracle partitions " + std::to_string(ambiguous)};
}

// --- 6 ---------------------------------------------------------------------------

Verdict matching_oracle() {
  int agree = 0, blocking = 0, ties = 0, unexplained = 0;
  for (std::uint64_t k = 0; k < 100; ++k) {
    std::vector<Detection> dets;
    std::vector<PixelPoint> gt;
    oracle::random_match_instance(k, &dets, &gt);
    const auto m = match_detections(dets, gt, 5.0, 0.5);
    switch (oracle::classify(dets, gt, 10.0, m)) {
      case oracle::Disagreement::none: ++agree; break;
      case oracle::Disagreement::blocking: ++blocking; break;
      case oracle::Disagreement::score_tie: ++ties; break;
      case oracle::Disagreement::unexplained: ++unexplained; break;
    }
  }
  return {agree >= 95 && unexplained == 0, std::to_string(agree) + "/100 agree; disagreements: " +
                                               std::to_string(blocking) + " crossing/blocking, " +
                                               std::to_string(ties) + " score ties, " + std::to_string(unexplained) +
                                               " unexplained"};
}

// --- 7, 8, 9 -----------------------------------------------------------------------

struct PipelineRun {
  fs::path dir;
  std::vector<RunRecord> records;
  double seconds = 0.0;
};

PipelineRun run_pipeline(const ExperimentConfig& base, const fs::path& dir, int jobs) {
  RunOptions o;
  o.run_dir = dir;
  o.force = true;
  o.jobs = jobs;
  fs::remove_all(dir);
  const auto cfg = apply_overrides(base, o);
  const auto t0 = Clock::now();
  cmd_generate(cfg, o);
  cmd_train(cfg, o);
  PipelineRun run{dir, cmd_evaluate(cfg, o), 0.0};
  run.seconds = seconds_since(t0);
  return run;
}

const RunRecord* find(const std::vector<RunRecord>& recs, const std::string& method) {
  for (const auto& r : recs) {
    if (r.method == method) return &r;
  }
  return nullptr;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Verdict directional(const ExperimentConfig& cfg, const PipelineRun& run) {
  const RunRecord* base = find(run.records, "baseline");
  const RunRecord* tta = find(run.records, "tta_dropout");
  const RunRecord* fge = find(run.records, "fge");
  const RunRecord* swa = find(run.records, "swa");
  if (!base || !tta || !fge || !swa) return {false, "benchmark config lacks one of baseline/tta_dropout/fge/swa"};
  if (cfg.eval.recall_targets.size() < 2) return {false, "benchmark config needs two recall targets"};
  // higher-recall point first in the config
  const std::size_t hi = cfg.eval.recall_targets[0] >= cfg.eval.recall_targets[1] ? 0 : 1, lo = 1 - hi;
  auto fp = [](const RunRecord* r, std::size_t i) { return r->points[i].achieved.fp_per_km2; };
  auto reach = [](const RunRecord* r, std::size_t i) { return r->points[i].reachable; };

  for (const auto* r : {base, tta, fge, swa}) {
    for (std::size_t i = 0; i < r->points.size(); ++i) {
      const auto& a = r->points[i].achieved;
      info(r->method + " @recall>=" + num(r->points[i].target_recall) + ": threshold " + num(a.threshold) +
           " recall " + num(a.recall, 4) + " fp/km2 " + num(a.fp_per_km2, 6) + " dFP% " +
           num(delta_fp_pct(fp(base, i), a.fp_per_km2), 4) + (r->points[i].reachable ? "" : " (unreachable)"));
    }
  }
  const bool reachable = reach(base, hi) && reach(tta, hi) && reach(fge, hi) && reach(base, lo) && reach(swa, lo);
  const bool a = fp(tta, hi) <= 0.95 * fp(base, hi);
  const bool b = fp(fge, hi) < fp(base, hi);
  const bool c = swa->n_predictions == 1 && fp(swa, lo) <= fp(base, lo);
  const bool fast = run.seconds < 15 * 60;
  std::string d = "(a) TTA " + num(delta_fp_pct(fp(base, hi), fp(tta, hi)), 4) + "% fewer FP " + (a ? "ok" : "NO") +
                  "; (b) FGE " + num(delta_fp_pct(fp(base, hi), fp(fge, hi)), 4) + "% " + (b ? "ok" : "NO") +
                  "; (c) SWA " + num(delta_fp_pct(fp(base, lo), fp(swa, lo)), 4) + "% " + (c ? "ok" : "NO") +
                  "; pipeline " + num(run.seconds, 4) + " s";
  if (!reachable) d += "; an operating point was unreachable";
  return {a && b && c && fast && reachable, d};
}

Verdict cost_accounting(const PipelineRun& run) {
  const auto rows = comparison_rows(run.records);
  std::map<std::string, std::set<int>> seen;
  for (const auto& r : rows) seen[r.method].insert(r.n_predictions);
  const std::map<std::string, int> want{{"baseline", 1}, {"swa", 1}, {"fge", 5}, {"tta_dropout", 7}};
  bool ok = true;
  std::string d;
  for (const auto& [m, n] : want) {
    const bool good = seen.count(m) && seen[m] == std::set<int>{n};
    ok = ok && good;
    d += m + "=" + (seen.count(m) ? std::to_string(*seen[m].begin()) : "missing") + (good ? "" : " (want " + std::to_string(n) + ")") + " ";
  }
  return {ok, d};
}

Verdict determinism(const PipelineRun& a, const PipelineRun& b) {
  std::vector<std::string> csvs;
  for (const auto& e : fs::directory_iterator(a.dir / "eval")) {
    if (e.path().extension() == ".csv") csvs.push_back(e.path().filename().string());
  }
  std::sort(csvs.begin(), csvs.end());
  std::string differing;
  for (const auto& f : csvs) {
    if (!fs::exists(b.dir / "eval" / f) || slurp(a.dir / "eval" / f) != slurp(b.dir / "eval" / f)) differing += f + " ";
  }
  return {!csvs.empty() && differing.empty(),
          std::to_string(csvs.size()) + " metric CSVs compared" + (differing.empty() ? ", all byte-identical" : "; differ: " + differing)};
}

// How much the TTA result depends on the dropout seed, on the same baseline weights.
void tta_seed_spread(const ExperimentConfig& cfg, const PipelineRun& run) {
  const RefNet net(cfg.net);
  const SnapshotSet base = load_snapshot_set(run.dir / "models" / "baseline");
  const auto test = load_dataset(run.dir / "data" / "test");
  const RunRecord* b = find(run.records, "baseline");
  CountingPredictor pred(net, base.members().front().params);
  std::string line = "TTA dropout-seed spread, dFP% at recall>=" + num(cfg.eval.recall_targets[0]) + ":";
  for (std::uint64_t seed : {1000ull, 1ull, 2ull, 3ull, 4ull, 5ull}) {
    const auto members = default_tta_members(seed);
    std::vector<ProbMap> maps;
    for (const auto& s : test) maps.push_back(tta_predict(pred.fn(), s.image, members).mean);
    std::vector<EvalScene> scenes;
    for (std::size_t i = 0; i < test.size(); ++i) {
      scenes.push_back({&maps[i], test[i].gt_points,
                        SceneGeometry{static_cast<int>(test[i].image.rows()), static_cast<int>(test[i].image.cols()),
                                      cfg.dataset.scene.gsd}});
    }
    const auto ops = sweep_operating_points(scenes, cfg.eval.thresholds, cfg.eval.recall_targets,
                                            cfg.eval.vectorize(), static_cast<int>(members.size()));
    line += " seed " + std::to_string(seed) + " " +
            num(delta_fp_pct(b->points[0].achieved.fp_per_km2, ops[0].achieved.fp_per_km2), 3) + ";";
  }
  info(line + " (seed 1000 is the committed config)");
}

}  // namespace

int main() {
  report(1, "gradient oracle", gradient_oracle());
  report(2, "SWA equivalence", swa_equivalence());
  report(3, "schedule suite", schedule_suite());
  report(4, "TTA round trip", tta_round_trip());
  report(5, "fusion oracles", fusion_oracles());
  report(6, "matching oracle", matching_oracle());

  const fs::path cfg_path = fs::path(ENSFORGE_SOURCE_DIR) / "configs" / "desk_benchmark.json";
  try {
    const ExperimentConfig cfg = load_config(cfg_path);
    info("benchmark " + cfg_path.string() + ": " + std::to_string(cfg.dataset.n_train) + " train / " +
         std::to_string(cfg.dataset.n_test) + " test scenes of " + std::to_string(cfg.dataset.scene.size) +
         " px, master seed " + std::to_string(cfg.dataset.master_seed));
    const fs::path work = fs::current_path() / "acceptance_runs";
    const PipelineRun a = run_pipeline(cfg, work / "a", 1);
    report(7, "directional desk-scale reproduction", directional(cfg, a));
    report(8, "cost accounting", cost_accounting(a));
    const PipelineRun b = run_pipeline(cfg, work / "b", 2);
    report(9, "end-to-end determinism", determinism(a, b));
    tta_seed_spread(cfg, a);
  } catch (const std::exception& e) {
    std::cout << "FAIL pipeline criteria 7-9: " << e.what() << std::endl;
    ++failures;
  }
  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures == 0 ? 0 : 1;
}
