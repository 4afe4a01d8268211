#include <cmath>
#include <filesystem>

#include <gtest/gtest.h>

#include "ensforge/binary_io.hpp"
#include "ensforge/ens_train.hpp"
#include "ensforge/errors.hpp"
#include "ensforge/refnet.hpp"
#include "ensforge/rng.hpp"
#include "oracles.hpp"

using namespace ensforge;

namespace {

Tensor random_image(std::size_t n, std::uint64_t seed) {
  CounterRng r(seed);
  Tensor t({n, n});
  for (auto& v : t.values()) v = static_cast<float>(r.uniform());
  return t;
}

Tensor random_mask(std::size_t n, std::uint64_t seed) {
  CounterRng r(seed);
  Tensor t({n, n});
  for (auto& v : t.values()) v = r.uniform() < 0.2 ? 1.0f : 0.0f;
  return t;
}

}  // namespace

TEST(NetConfig, RejectsImpossibleShapes) {
  EXPECT_THROW(RefNet(NetConfig{30, 4, 2, 0.25, 0}), ConfigError);   // 30 not divisible by 4
  EXPECT_THROW(RefNet(NetConfig{32, 4, 2, 1.0, 0}), ConfigError);    // rate must be < 1
  EXPECT_THROW(RefNet(NetConfig{32, 0, 2, 0.25, 0}), ConfigError);
  EXPECT_NO_THROW(RefNet(NetConfig{32, 4, 3, 0.0, 0}));
}

TEST(RefNetInit, DeterministicPerSeedAndSeedSensitive) {
  const RefNet a(NetConfig{32, 4, 2, 0.25, 1});
  const RefNet b(NetConfig{32, 4, 2, 0.25, 2});
  EXPECT_EQ(a.init_params<float>(), a.init_params<float>());
  EXPECT_NE(a.init_params<float>(), b.init_params<float>());
}

TEST(RefNetInit, FingerprintIsShapeOnly) {
  const RefNet a(NetConfig{32, 4, 3, 0.25, 1});
  const RefNet b(NetConfig{32, 4, 3, 0.25, 99});
  EXPECT_EQ(a.init_params<float>().fingerprint(), b.init_params<float>().fingerprint());
  EXPECT_EQ(a.fingerprint(), b.fingerprint());
  const RefNet c(NetConfig{32, 6, 3, 0.25, 1});
  EXPECT_NE(a.fingerprint(), c.fingerprint());
}

TEST(RefNetInit, HeadStartsAtZeroBiasesAtZero) {
  const RefNet net(NetConfig{16, 4, 2, 0.25, 3});
  const auto p = net.init_params<float>();
  for (const auto& e : p.entries()) {
    if (e.tensor.rank() == 1 || e.name == "head.weight") {
      for (float v : e.tensor.values()) EXPECT_EQ(v, 0.0f) << e.name;
    }
  }
}

TEST(RefNetForward, DeterministicAndStrictlyInsideUnitInterval) {
  const RefNet net(NetConfig{32, 4, 2, 0.25, 5});
  const auto p = oracle::randomised_params(net, 8).cast<float>();
  const Tensor img = random_image(32, 1);
  const auto a = net.forward(p, img, PredictMode::deterministic());
  const auto b = net.forward(p, img, PredictMode::deterministic());
  EXPECT_EQ(a, b);
  ASSERT_EQ(a.dims(), img.dims());
  for (float v : a.values()) {
    EXPECT_GT(v, 0.0f);
    EXPECT_LT(v, 1.0f);
  }
}

TEST(RefNetForward, DeterministicModeIgnoresSeed) {
  const RefNet net(NetConfig{16, 4, 1, 0.5, 5});
  const auto p = oracle::randomised_params(net, 8).cast<float>();
  const Tensor img = random_image(16, 2);
  PredictMode m1 = PredictMode::deterministic(), m2 = PredictMode::deterministic();
  m2.dropout_seed = 1234;
  EXPECT_EQ(net.forward(p, img, m1), net.forward(p, img, m2));
}

TEST(RefNetForward, StochasticReproducibleGivenSeed) {
  const RefNet net(NetConfig{32, 4, 2, 0.25, 5});
  const auto p = oracle::randomised_params(net, 8).cast<float>();
  const Tensor img = random_image(32, 3);
  const auto s1 = net.forward(p, img, PredictMode::stochastic(10));
  EXPECT_EQ(s1, net.forward(p, img, PredictMode::stochastic(10)));
  EXPECT_NE(s1, net.forward(p, img, PredictMode::stochastic(11)));
}

TEST(RefNetForward, ShapeMismatchIsDimensionError) {
  const RefNet net(NetConfig{16, 4, 1, 0.25, 5});
  const auto p = net.init_params<float>();
  EXPECT_THROW(net.forward(p, Tensor({8, 8}), PredictMode::deterministic()), DimensionError);
  EXPECT_THROW(net.forward(p, Tensor({16, 8}), PredictMode::deterministic()), DimensionError);
}

TEST(RefNetForward, ForeignParamsAreNotCombinable) {
  const RefNet a(NetConfig{16, 4, 1, 0.25, 5});
  const RefNet b(NetConfig{16, 2, 1, 0.25, 5});
  EXPECT_THROW(a.forward(b.init_params<float>(), Tensor({16, 16}), PredictMode::deterministic()),
               CombinabilityError);
}

TEST(RefNetLoss, ZeroHeadGivesLn2) {
  // zero head weight and bias: every output is exactly 0.5
  const RefNet net(NetConfig{16, 4, 2, 0.25, 5});
  const auto p = net.init_params<double>();
  std::vector<Tensor64> imgs{random_image(16, 4).cast<double>()};
  std::vector<Tensor64> msks{random_mask(16, 5).cast<double>()};
  EXPECT_NEAR(net.loss<double>(p, imgs, msks), std::log(2.0), 1e-6);
}

TEST(RefNetLoss, NonBinaryMaskIsValidationError) {
  const RefNet net(NetConfig{8, 2, 1, 0.0, 5});
  const auto p = net.init_params<float>();
  std::vector<Tensor> imgs{Tensor({8, 8})};
  Tensor m({8, 8});
  m[3] = 0.5f;
  std::vector<Tensor> msks{m};
  EXPECT_THROW(net.loss_and_grad<float>(p, imgs, msks), ValidationError);
}

TEST(RefNetLoss, GradientsHaveParamFingerprint) {
  const RefNet net(NetConfig{16, 4, 2, 0.25, 5});
  const auto p = net.init_params<float>();
  std::vector<Tensor> imgs{random_image(16, 1)}, msks{random_mask(16, 2)};
  EXPECT_EQ(net.loss_and_grad<float>(p, imgs, msks).grads.fingerprint(), p.fingerprint());
}

TEST(RefNetGradient, Depth1Size8EveryParameter) {
  const oracle::MicroCase mc{8, 3, 1, 1, false};
  const auto gc = oracle::run_micro_case(mc, 21, 1e-5);
  EXPECT_GT(gc.checked, 100u);
  EXPECT_LT(gc.max_rel_error, 1e-4) << "worst at " << gc.worst;
}

TEST(RefNetGradient, Depth2WithDropoutMasks) {
  const oracle::MicroCase mc{16, 2, 2, 2, true};
  const auto gc = oracle::run_micro_case(mc, 22, 1e-5);
  EXPECT_LT(gc.max_rel_error, 1e-4) << "worst at " << gc.worst;
}

TEST(RefNetGradient, LossOnlyAgreesWithLossAndGrad) {
  const RefNet net(NetConfig{16, 2, 2, 0.25, 5});
  const auto p = oracle::randomised_params(net, 3);
  std::vector<Tensor64> imgs{random_image(16, 1).cast<double>()}, msks{random_mask(16, 2).cast<double>()};
  EXPECT_EQ(net.loss<double>(p, imgs, msks), net.loss_and_grad<double>(p, imgs, msks).loss);
}

TEST(RefNetLoss, SaveLoadRoundTripKeepsLossBitEqual) {
  const RefNet net(NetConfig{16, 4, 2, 0.25, 5});
  const auto p = oracle::randomised_params(net, 4).cast<float>();
  const auto path = std::filesystem::temp_directory_path() / "ensforge_refnet_rt.ensw";
  save_params(p, path);
  const auto q = load_params(path);
  std::vector<Tensor> imgs{random_image(16, 6)}, msks{random_mask(16, 7)};
  EXPECT_EQ(net.loss<float>(p, imgs, msks), net.loss<float>(q, imgs, msks));
}

TEST(SgdStep, ZeroLearningRateLeavesParamsUnchanged) {
  const RefNet net(NetConfig{8, 2, 1, 0.0, 5});
  auto p = oracle::randomised_params(net, 1);
  const auto before = p;
  auto g = oracle::randomised_params(net, 2);
  auto v = p.zeros_like();
  sgd_step(p, g, v, 0.0, 0.9);
  EXPECT_EQ(p, before);
}

TEST(SgdStep, ZeroMomentumIsPlainSgd) {
  const RefNet net(NetConfig{8, 2, 1, 0.0, 5});
  auto p = oracle::randomised_params(net, 1);
  const auto p0 = p;
  const auto g = oracle::randomised_params(net, 2);
  auto v = p.zeros_like();
  sgd_step(p, g, v, 0.1, 0.0);
  for (std::size_t e = 0; e < p.size(); ++e) {
    for (std::size_t i = 0; i < p.tensor(e).size(); ++i) {
      EXPECT_DOUBLE_EQ(p.tensor(e)[i], p0.tensor(e)[i] - 0.1 * g.tensor(e)[i]);
    }
  }
}

TEST(SgdStep, TwoMomentumStepsWithConstantGradient) {
  // v1 = g, v2 = 0.9 g + g  ->  displacement lr * g * (1 + 1.9)
  ParamSet64 p, g;
  p.add("w", Tensor64({3}, std::vector<double>{1.0, -2.0, 0.5}));
  g.add("w", Tensor64({3}, std::vector<double>{0.3, -0.7, 2.0}));
  const auto p0 = p;
  auto v = p.zeros_like();
  const double lr = 0.05;
  sgd_step(p, g, v, lr, 0.9);
  sgd_step(p, g, v, lr, 0.9);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_NEAR(p0.tensor(0)[i] - p.tensor(0)[i], lr * g.tensor(0)[i] * 2.9, 1e-15);
  }
}

TEST(SgdStep, FingerprintMismatchIsCombinabilityError) {
  ParamSet p, g;
  p.add("w", Tensor({3}));
  g.add("w", Tensor({4}));
  auto v = p.zeros_like();
  EXPECT_THROW(sgd_step(p, g, v, 0.1, 0.9), CombinabilityError);
}

TEST(Dropout, InvertedScaleHasUnitExpectation) {
  // E[scale] = 1 for inverted dropout; an activation a maps to a*scale.
  for (double rate : {0.25, 0.5}) {
    const int n = 10000;
    double s = 0, s2 = 0;
    for (int seed = 0; seed < n; ++seed) {
      const double x = dropout_scale(rate, static_cast<std::uint64_t>(seed), 1, 3);
      EXPECT_TRUE(x == 0.0 || std::abs(x - 1.0 / (1.0 - rate)) < 1e-12);
      s += x;
      s2 += x * x;
    }
    const double mean = s / n;
    const double se = std::sqrt((s2 / n - mean * mean) / n);
    EXPECT_LE(std::abs(mean - 1.0), 3.0 * se) << "rate " << rate;
  }
}

TEST(Training, OneEpochTwiceIsBitIdentical) {
  const RefNet net(NetConfig{16, 4, 2, 0.25, 5});
  TrainingSet ds;
  for (int i = 0; i < 4; ++i) {
    ds.images.push_back(random_image(16, 100 + i));
    ds.masks.push_back(random_mask(16, 200 + i));
  }
  TrainSpec spec;
  spec.epochs = 1;
  spec.batch_size = 2;
  spec.seed = 9;
  spec.schedule = {ScheduleKind::step_decay, 0.05, 0.0, 1, steps_per_epoch(ds.size(), 2)};
  const auto a = train_network(net, net.init_params<float>(), ds, spec);
  const auto b = train_network(net, net.init_params<float>(), ds, spec);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, net.init_params<float>());
}
