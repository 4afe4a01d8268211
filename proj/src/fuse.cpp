#include "ensforge/fuse.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>

#include "ensforge/binary_io.hpp"
#include "ensforge/errors.hpp"

namespace ensforge {

CountingPredictor::CountingPredictor(const RefNet& net, const ParamSet& params)
    : net_(&net), params_(&params), passes_(std::make_shared<std::atomic<std::int64_t>>(0)) {
  net.check_params(params);
}

ProbMap CountingPredictor::operator()(const Tensor& image, const PredictMode& mode) const {
  ++*passes_;
  return net_->forward(*params_, image, mode);
}

PredictFn CountingPredictor::fn() const {
  return [self = *this](const Tensor& image, const PredictMode& mode) { return self(image, mode); };
}

std::vector<TtaMember> default_tta_members(std::uint64_t base_seed, int dropout_passes) {
  std::vector<TtaMember> out;
  for (GeomKind k : {GeomKind::identity, GeomKind::hflip, GeomKind::vflip, GeomKind::rot180}) {
    out.push_back({GeomTransform::of(k), std::nullopt});
  }
  for (int i = 0; i < dropout_passes; ++i) {
    out.push_back({GeomTransform::identity(), base_seed + static_cast<std::uint64_t>(i)});
  }
  return out;
}

FusedMap fuse_mean(std::span<const ProbMap> maps, bool with_stddev, bool keep_members) {
  if (maps.empty()) throw ConfigError("cannot fuse an empty list of maps");
  for (const auto& m : maps) {
    if (!m.same_shape(maps[0])) throw DimensionError("fused maps must share a shape");
  }
  const std::size_t k = maps.size();
  FusedMap out;
  out.n_members = static_cast<int>(k);
  out.mean = ProbMap(maps[0].dims());
  if (with_stddev) out.stddev = Tensor(maps[0].dims());
  std::vector<float> vals(k);
  for (std::size_t i = 0; i < out.mean.size(); ++i) {
    for (std::size_t j = 0; j < k; ++j) vals[j] = maps[j][i];
    std::sort(vals.begin(), vals.end());
    double sum = 0.0;
    for (float v : vals) sum += v;
    const double mean = sum / static_cast<double>(k);
    out.mean[i] = static_cast<float>(mean);
    if (with_stddev) {
      double ss = 0.0;
      for (float v : vals) ss += (v - mean) * (v - mean);
      (*out.stddev)[i] = static_cast<float>(std::sqrt(ss / static_cast<double>(k)));
    }
  }
  if (keep_members) out.member_maps.assign(maps.begin(), maps.end());
  return out;
}

FusedMap tta_predict(const PredictFn& predict, const Tensor& image, std::span<const TtaMember> members,
                     bool keep_members) {
  if (members.empty()) throw ConfigError("TTA needs at least one member");
  for (const auto& m : members) {
    if (!m.geom.invertible()) throw ConfigError("TTA transform " + m.geom.name() + " is not invertible");
  }
  std::vector<ProbMap> maps;
  maps.reserve(members.size());
  for (const auto& m : members) {
    const PredictMode mode = m.dropout_seed ? PredictMode::stochastic(*m.dropout_seed) : PredictMode::deterministic();
    if (m.geom.kind == GeomKind::identity) {
      maps.push_back(predict(image, mode));
    } else {
      maps.push_back(invert_geom(m.geom, predict(apply_geom(m.geom, image), mode)));
    }
  }
  return fuse_mean(maps, false, keep_members);
}

FusedMap mc_dropout_predict(const PredictFn& predict, const Tensor& image, int samples, std::uint64_t base_seed,
                            bool keep_members) {
  if (samples < 1) throw DomainError("MC dropout needs K >= 1 samples");
  std::vector<ProbMap> maps;
  maps.reserve(samples);
  for (int i = 0; i < samples; ++i) {
    maps.push_back(predict(image, PredictMode::stochastic(base_seed + static_cast<std::uint64_t>(i))));
  }
  return fuse_mean(maps, true, keep_members);
}

FusedMap ensemble_predict(const RefNet& net, const SnapshotSet& snapshots, const Tensor& image,
                          std::span<const TtaMember> per_member, bool keep_members) {
  if (snapshots.empty()) throw ConfigError("ensemble_predict needs a non-empty snapshot set");
  std::vector<ProbMap> maps;
  for (const auto& member : snapshots.members()) {
    const PredictFn predict = [&](const Tensor& img, const PredictMode& mode) {
      return net.forward(member.params, img, mode);
    };
    if (per_member.empty()) {
      maps.push_back(predict(image, PredictMode::deterministic()));
    } else {
      FusedMap tta = tta_predict(predict, image, per_member, true);
      for (auto& m : tta.member_maps) maps.push_back(std::move(m));
    }
  }
  return fuse_mean(maps, false, keep_members);
}

Tensor fuse_vote(std::span<const ProbMap> maps, double pixel_threshold, int min_votes) {
  if (maps.empty()) throw ConfigError("fuse_vote needs at least one map");
  if (min_votes < 1 || static_cast<std::size_t>(min_votes) > maps.size()) {
    throw ConfigError("fuse_vote: min_votes must be in [1, number of maps]");
  }
  for (const auto& m : maps) {
    if (!m.same_shape(maps[0])) throw DimensionError("fuse_vote maps must share a shape");
  }
  Tensor out(maps[0].dims());
  for (std::size_t i = 0; i < out.size(); ++i) {
    int votes = 0;
    for (const auto& m : maps) votes += m[i] >= pixel_threshold ? 1 : 0;
    out[i] = votes >= min_votes ? 1.0f : 0.0f;
  }
  return out;
}

// --- stacking ---------------------------------------------------------------

namespace {

double clamped_logit(double z) {
  const double c = std::clamp(z, kStackClamp, 1.0 - kStackClamp);
  return std::log(c / (1.0 - c));
}

double sigmoid(double a) {
  if (a >= 0) return 1.0 / (1.0 + std::exp(-a));
  const double e = std::exp(a);
  return e / (1.0 + e);
}

double bce_logit(double a, double y) { return std::max(a, 0.0) - a * y + std::log1p(std::exp(-std::abs(a))); }

struct StackData {
  std::size_t k = 0;
  std::vector<double> features;  // pixel-major, k per pixel
  std::vector<double> targets;
};

StackData stack_data(std::span<const std::vector<ProbMap>> member_maps, std::span<const Tensor> gt_masks) {
  if (member_maps.empty() || member_maps.size() != gt_masks.size()) {
    throw ConfigError("stacking needs >= 1 scene and one ground-truth mask per scene");
  }
  StackData d;
  d.k = member_maps[0].size();
  if (d.k == 0) throw ConfigError("stacking needs >= 1 detector");
  for (std::size_t s = 0; s < member_maps.size(); ++s) {
    if (member_maps[s].size() != d.k) throw ConfigError("every scene must provide the same number of detector maps");
    for (const auto& m : member_maps[s]) {
      if (!m.same_shape(gt_masks[s])) throw DimensionError("detector map shape differs from its ground-truth mask");
    }
    for (std::size_t i = 0; i < gt_masks[s].size(); ++i) {
      for (std::size_t j = 0; j < d.k; ++j) d.features.push_back(clamped_logit(member_maps[s][j][i]));
      d.targets.push_back(gt_masks[s][i] >= 0.5f ? 1.0 : 0.0);
    }
  }
  return d;
}

double activation(const StackWeights& w, const double* x) {
  double a = w.b;
  for (std::size_t j = 0; j < w.w.size(); ++j) a += w.w[j] * x[j];
  return a;
}

}  // namespace

StackWeights stack_fit(std::span<const std::vector<ProbMap>> member_maps, std::span<const Tensor> gt_masks,
                       const StackFitOptions& opts) {
  if (opts.epochs < 0) throw ConfigError("stacking epochs must be >= 0");
  const StackData d = stack_data(member_maps, gt_masks);
  StackWeights w;
  if (opts.init) {
    if (opts.init->w.size() != d.k) throw ConfigError("stacking init arity does not match detector count");
    w = *opts.init;
  } else {
    w.w.assign(d.k, 1.0 / static_cast<double>(d.k));
  }
  const double n = static_cast<double>(d.targets.size());
  std::vector<double> gw(d.k);
  for (int e = 0; e < opts.epochs; ++e) {
    std::fill(gw.begin(), gw.end(), 0.0);
    double gb = 0.0;
    for (std::size_t i = 0; i < d.targets.size(); ++i) {
      const double* x = d.features.data() + i * d.k;
      const double r = sigmoid(activation(w, x)) - d.targets[i];
      for (std::size_t j = 0; j < d.k; ++j) gw[j] += r * x[j];
      gb += r;
    }
    for (std::size_t j = 0; j < d.k; ++j) w.w[j] -= opts.lr * gw[j] / n;
    w.b -= opts.lr * gb / n;
  }
  for (double v : w.w) {
    if (!std::isfinite(v)) throw Error("stacking fit diverged");
  }
  if (!std::isfinite(w.b)) throw Error("stacking fit diverged");
  return w;
}

double stack_loss(const StackWeights& weights, std::span<const std::vector<ProbMap>> member_maps,
                  std::span<const Tensor> gt_masks) {
  const StackData d = stack_data(member_maps, gt_masks);
  if (weights.w.size() != d.k) throw ConfigError("stacking weight arity does not match detector count");
  double sum = 0.0;
  for (std::size_t i = 0; i < d.targets.size(); ++i) {
    sum += bce_logit(activation(weights, d.features.data() + i * d.k), d.targets[i]);
  }
  return sum / static_cast<double>(d.targets.size());
}

ProbMap stack_apply(const StackWeights& weights, std::span<const ProbMap> member_maps) {
  if (member_maps.size() != weights.w.size()) {
    throw ConfigError("stack_apply: got " + std::to_string(member_maps.size()) + " maps for " +
                      std::to_string(weights.w.size()) + " weights");
  }
  if (member_maps.empty()) throw ConfigError("stack_apply needs at least one map");
  for (const auto& m : member_maps) {
    if (!m.same_shape(member_maps[0])) throw DimensionError("stack_apply maps must share a shape");
  }
  ProbMap out(member_maps[0].dims());
  std::vector<double> x(member_maps.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    for (std::size_t j = 0; j < x.size(); ++j) x[j] = clamped_logit(member_maps[j][i]);
    out[i] = static_cast<float>(std::clamp(sigmoid(activation(weights, x.data())), kStackClamp, 1.0 - kStackClamp));
  }
  return out;
}

// --- persistence ------------------------------------------------------------

void save_fused(const FusedMap& fused, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json manifest;
  manifest["n_members"] = fused.n_members;
  manifest["mean"] = "mean.ensr";
  save_raster(fused.mean, dir / "mean.ensr");
  if (fused.stddev) {
    manifest["stddev"] = "stddev.ensr";
    save_raster(*fused.stddev, dir / "stddev.ensr");
  }
  auto members = nlohmann::ordered_json::array();
  for (std::size_t k = 0; k < fused.member_maps.size(); ++k) {
    const std::string name = "member_" + std::to_string(k) + ".ensr";
    save_raster(fused.member_maps[k], dir / name);
    members.push_back(name);
  }
  manifest["members"] = members;
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << "\n";
}

FusedMap load_fused(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw MissingArtifactError("no fused-map manifest in " + dir.string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError((dir / "manifest.json").string() + ": " + e.what());
  }
  FusedMap out;
  out.n_members = manifest.at("n_members").get<int>();
  out.mean = load_raster(dir / manifest.at("mean").get<std::string>());
  if (manifest.contains("stddev")) out.stddev = load_raster(dir / manifest.at("stddev").get<std::string>());
  for (const auto& m : manifest.at("members")) out.member_maps.push_back(load_raster(dir / m.get<std::string>()));
  return out;
}

}  // namespace ensforge
