#include <algorithm>
#include <cmath>
#include <filesystem>

#include <gtest/gtest.h>

#include "ensforge/errors.hpp"
#include "ensforge/fuse.hpp"
#include "ensforge/rng.hpp"
#include "oracles.hpp"

using namespace ensforge;

namespace {

struct Fixture {
  RefNet net{NetConfig{16, 4, 2, 0.25, 7}};
  ParamSet params = oracle::randomised_params(net, 70).cast<float>();
  Tensor image = [] {
    CounterRng r(3);
    Tensor t({16, 16});
    for (auto& v : t.values()) v = static_cast<float>(r.uniform());
    return t;
  }();
};

ProbMap map_of(std::vector<float> v, std::size_t rows, std::size_t cols) { return ProbMap({rows, cols}, std::move(v)); }

double sigma(double a) { return 1.0 / (1.0 + std::exp(-a)); }
double logit(double p) { return std::log(p / (1.0 - p)); }

std::vector<ProbMap> random_maps(std::uint64_t seed, std::size_t k, std::size_t n, bool coarse) {
  CounterRng r(seed);
  std::vector<ProbMap> out;
  for (std::size_t m = 0; m < k; ++m) {
    ProbMap p({n, n});
    for (auto& v : p.values()) v = coarse ? static_cast<float>(r.range(1, 9)) / 10.0f : static_cast<float>(r.uniform());
    out.push_back(p);
  }
  return out;
}

}  // namespace

TEST(Tta, IdentityMemberEqualsPlainPrediction) {
  Fixture f;
  CountingPredictor pred(f.net, f.params);
  const std::vector<TtaMember> id{{GeomTransform::identity(), std::nullopt}};
  const auto fused = tta_predict(pred.fn(), f.image, id);
  EXPECT_EQ(fused.mean, f.net.forward(f.params, f.image, PredictMode::deterministic()));
  EXPECT_EQ(fused.n_members, 1);
}

TEST(Tta, FlipIsAnInvolution) {
  Fixture f;
  const auto m = f.net.forward(f.params, f.image, PredictMode::deterministic());
  const auto h = GeomTransform::of(GeomKind::hflip);
  EXPECT_EQ(apply_geom(h.inverse(), apply_geom(h, m)), m);
}

TEST(Tta, DefaultSetHasSevenCountedPasses) {
  Fixture f;
  CountingPredictor pred(f.net, f.params);
  const auto members = default_tta_members(100);
  ASSERT_EQ(members.size(), 7u);
  EXPECT_EQ(members[4].dropout_seed, std::optional<std::uint64_t>(100));
  EXPECT_EQ(members[6].dropout_seed, std::optional<std::uint64_t>(102));
  const auto fused = tta_predict(pred.fn(), f.image, members, true);
  EXPECT_EQ(fused.n_members, 7);
  EXPECT_EQ(pred.passes(), 7);
  ASSERT_EQ(fused.member_maps.size(), 7u);
  const auto direct = fuse_mean(fused.member_maps);
  for (std::size_t i = 0; i < fused.mean.size(); ++i) EXPECT_NEAR(fused.mean[i], direct.mean[i], 1e-6);
}

TEST(Tta, MembersMapsAreWarpedBackBeforeFusion) {
  // a rot180 member, inverse-warped, equals the plain pass on the rotated image rotated back
  Fixture f;
  CountingPredictor pred(f.net, f.params);
  const auto g = GeomTransform::of(GeomKind::rot180);
  const std::vector<TtaMember> one{{g, std::nullopt}};
  const auto fused = tta_predict(pred.fn(), f.image, one);
  const auto expect = apply_geom(g, f.net.forward(f.params, apply_geom(g, f.image), PredictMode::deterministic()));
  EXPECT_EQ(fused.mean, expect);
}

TEST(McDropout, SingleSampleDeterminismAndZeroRate) {
  Fixture f;
  CountingPredictor pred(f.net, f.params);
  const auto one = mc_dropout_predict(pred.fn(), f.image, 1, 40);
  EXPECT_EQ(one.mean, f.net.forward(f.params, f.image, PredictMode::stochastic(40)));
  ASSERT_TRUE(one.stddev.has_value());
  for (float v : one.stddev->values()) EXPECT_EQ(v, 0.0f);

  const auto a = mc_dropout_predict(pred.fn(), f.image, 4, 9);
  const auto b = mc_dropout_predict(pred.fn(), f.image, 4, 9);
  EXPECT_EQ(a.mean, b.mean);
  EXPECT_EQ(*a.stddev, *b.stddev);
  EXPECT_EQ(a.n_members, 4);

  const RefNet plain(NetConfig{16, 4, 2, 0.0, 7});
  CountingPredictor p0(plain, f.params);
  const auto z = mc_dropout_predict(p0.fn(), f.image, 5, 1);
  for (float v : z.stddev->values()) EXPECT_EQ(v, 0.0f);
  EXPECT_THROW(mc_dropout_predict(pred.fn(), f.image, 0, 1), DomainError);
}

TEST(Ensemble, DegenerateAndIdenticalMembers) {
  Fixture f;
  SnapshotSet one;
  one.add({"a", f.params, "t"});
  const auto plain = f.net.forward(f.params, f.image, PredictMode::deterministic());
  EXPECT_EQ(ensemble_predict(f.net, one, f.image).mean, plain);

  SnapshotSet five;
  for (int k = 0; k < 5; ++k) five.add({"m" + std::to_string(k), f.params, "t"});
  const auto fused = ensemble_predict(f.net, five, f.image);
  EXPECT_EQ(fused.n_members, 5);
  EXPECT_EQ(fused.mean, plain);

  const auto tta = default_tta_members(1, 1);
  EXPECT_EQ(ensemble_predict(f.net, five, f.image, tta).n_members, 25);
}

TEST(Ensemble, ForeignSnapshotIsCombinabilityError) {
  Fixture f;
  const RefNet other(NetConfig{16, 2, 2, 0.25, 7});
  SnapshotSet set;
  set.add({"x", other.init_params<float>(), "t"});
  EXPECT_THROW(ensemble_predict(f.net, set, f.image), CombinabilityError);
}

TEST(FuseMean, BoundsOrderIndependenceAndStd) {
  auto maps = random_maps(5, 4, 6, false);
  const auto a = fuse_mean(maps, true);
  std::reverse(maps.begin(), maps.end());
  std::swap(maps[0], maps[2]);
  const auto b = fuse_mean(maps, true);
  EXPECT_EQ(a.mean, b.mean);
  EXPECT_EQ(*a.stddev, *b.stddev);
  for (std::size_t i = 0; i < a.mean.size(); ++i) {
    float lo = 1, hi = 0;
    double s = 0, s2 = 0;
    for (const auto& m : maps) {
      lo = std::min(lo, m[i]);
      hi = std::max(hi, m[i]);
      s += m[i];
      s2 += static_cast<double>(m[i]) * m[i];
    }
    EXPECT_GE(a.mean[i], lo);
    EXPECT_LE(a.mean[i], hi);
    EXPECT_NEAR(a.mean[i], s / 4.0, 1e-6);
    EXPECT_NEAR((*a.stddev)[i], std::sqrt(std::max(0.0, s2 / 4.0 - (s / 4.0) * (s / 4.0))), 1e-5);
  }
  EXPECT_THROW(fuse_mean(std::vector<ProbMap>{}), ConfigError);
  EXPECT_THROW(fuse_mean(std::vector<ProbMap>{ProbMap({2, 2}), ProbMap({2, 3})}), DimensionError);
}

TEST(FuseVote, HandEnumeratedTwoPixels) {
  const std::vector<ProbMap> maps{map_of({0.9f, 0.2f}, 1, 2), map_of({0.8f, 0.6f}, 1, 2)};
  EXPECT_EQ(fuse_vote(maps, 0.5, 2), map_of({1.0f, 0.0f}, 1, 2));
  EXPECT_EQ(fuse_vote(maps, 0.5, 1), map_of({1.0f, 1.0f}, 1, 2));
}

TEST(FuseVote, DegenerateCasesEqualThresholding) {
  const auto maps = random_maps(8, 1, 5, true);
  const auto t = fuse_vote(maps, 0.5, 1);
  for (std::size_t i = 0; i < t.size(); ++i) EXPECT_EQ(t[i], maps[0][i] >= 0.5f ? 1.0f : 0.0f);
  const std::vector<ProbMap> same(3, maps[0]);
  EXPECT_EQ(fuse_vote(same, 0.5, 3), t);
  EXPECT_THROW(fuse_vote(maps, 0.5, 2), ConfigError);
  EXPECT_THROW(fuse_vote(std::vector<ProbMap>{ProbMap({2, 2}), ProbMap({3, 2})}, 0.5, 1), DimensionError);
}

TEST(FuseVote, SubsetOracleMonotoneAndOrderFree) {
  for (std::uint64_t s = 0; s < 100; ++s) {
    CounterRng r(hash_words({0xf0, s}));
    const std::size_t k = static_cast<std::size_t>(r.range(1, 5));
    auto maps = random_maps(s, k, 4, true);
    const double thr = r.range(1, 9) / 10.0;
    Tensor prev;
    for (int v = 1; v <= static_cast<int>(k); ++v) {
      const auto got = fuse_vote(maps, thr, v);
      ASSERT_EQ(got, oracle::vote_by_subsets(maps, thr, v)) << "instance " << s;
      if (v > 1) {
        for (std::size_t i = 0; i < got.size(); ++i) ASSERT_LE(got[i], prev[i]);
      }
      prev = got;
      auto shuffled = maps;
      std::rotate(shuffled.begin(), shuffled.begin() + 1, shuffled.end());
      ASSERT_EQ(fuse_vote(shuffled, thr, v), got);
    }
  }
}

TEST(Stacking, IdentityAndZeroWeights) {
  const auto m = map_of({0.1f, 0.5f, 0.93f, 0.0001f}, 2, 2);
  const StackWeights id{{1.0}, 0.0};
  const auto out = stack_apply(id, std::vector<ProbMap>{m});
  for (std::size_t i = 0; i < m.size(); ++i) EXPECT_NEAR(out[i], m[i], 1e-6);

  const StackWeights zero{{0.0, 0.0}, 0.0};
  const auto half = stack_apply(zero, std::vector<ProbMap>{m, m});
  for (float v : half.values()) EXPECT_EQ(v, 0.5f);
  EXPECT_THROW(stack_apply(zero, std::vector<ProbMap>{m}), ConfigError);
}

TEST(Stacking, ClosedFormCombiner) {
  const auto a = map_of({0.8f, 0.3f}, 1, 2), b = map_of({0.6f, 0.9f}, 1, 2);
  const StackWeights w{{2.0, -1.0}, 0.0};
  const auto out = stack_apply(w, std::vector<ProbMap>{a, b});
  for (std::size_t i = 0; i < 2; ++i) {
    const double expect = sigma(2.0 * logit(a[i]) - logit(b[i]));
    EXPECT_NEAR(out[i], expect, 1e-6);
  }
}

TEST(Stacking, ZeroEpochFitFromIdentityIsIdentity) {
  const auto m = random_maps(2, 1, 6, false)[0];
  Tensor gt({6, 6});
  StackFitOptions opts;
  opts.epochs = 0;
  opts.init = StackWeights{{1.0}, 0.0};
  const std::vector<std::vector<ProbMap>> mm{{m}};
  const auto w = stack_fit(mm, std::vector<Tensor>{gt}, opts);
  const auto out = stack_apply(w, std::vector<ProbMap>{m});
  for (std::size_t i = 0; i < m.size(); ++i) EXPECT_NEAR(out[i], m[i], 1e-6);
}

TEST(Stacking, DuplicatedDetectorFitsNoWorse) {
  CounterRng r(12);
  Tensor gt({8, 8});
  ProbMap det({8, 8});
  for (std::size_t i = 0; i < gt.size(); ++i) {
    gt[i] = r.uniform() < 0.3 ? 1.0f : 0.0f;
    det[i] = static_cast<float>(std::clamp(0.25 + 0.5 * gt[i] + r.uniform(-0.2, 0.2), 0.01, 0.99));
  }
  const std::vector<Tensor> gts{gt};
  const std::vector<std::vector<ProbMap>> single{{det}}, twice{{det, det}};
  const auto w1 = stack_fit(single, gts);
  const auto w2 = stack_fit(twice, gts);
  EXPECT_LE(stack_loss(w2, twice, gts), stack_loss(w1, single, gts) + 1e-6);
}

TEST(Stacking, InformativePlusConstantBeatsUniform) {
  CounterRng r(13);
  Tensor gt({8, 8});
  ProbMap good({8, 8}), flat({8, 8}, 0.5f);
  for (std::size_t i = 0; i < gt.size(); ++i) {
    gt[i] = r.uniform() < 0.4 ? 1.0f : 0.0f;
    good[i] = gt[i] > 0 ? 0.7f : 0.25f;
  }
  const std::vector<Tensor> gts{gt};
  const std::vector<std::vector<ProbMap>> mm{{good, flat}};
  const auto w = stack_fit(mm, gts);
  EXPECT_LE(stack_loss(w, mm, gts), std::log(2.0));
  const auto w_again = stack_fit(mm, gts);
  EXPECT_EQ(w, w_again);
}

TEST(FusedPersistence, RoundTrip) {
  Fixture f;
  CountingPredictor pred(f.net, f.params);
  const auto fused = mc_dropout_predict(pred.fn(), f.image, 3, 5, true);
  const auto dir = std::filesystem::temp_directory_path() / "ensforge_fused_rt";
  std::filesystem::remove_all(dir);
  save_fused(fused, dir);
  const auto back = load_fused(dir);
  EXPECT_EQ(back.mean, fused.mean);
  EXPECT_EQ(back.stddev, fused.stddev);
  EXPECT_EQ(back.member_maps, fused.member_maps);
  EXPECT_EQ(back.n_members, 3);
}
