#include <cmath>

#include <gtest/gtest.h>

#include "ensforge/errors.hpp"
#include "ensforge/rng.hpp"
#include "ensforge/sched.hpp"

using namespace ensforge;

namespace {

ScheduleSpec spec(ScheduleKind k, double hi, double lo, std::int64_t cycle, std::int64_t total) {
  ScheduleSpec s;
  s.kind = k;
  s.lr_max = hi;
  s.lr_min = lo;
  s.cycle_len = cycle;
  s.total_iters = total;
  return s;
}

}  // namespace

TEST(SseCosine, StartAndMidCycleValues) {
  const auto s = spec(ScheduleKind::sse_cosine, 0.1, 0.0, 100, 500);
  for (std::int64_t c = 0; c < 5; ++c) {
    EXPECT_EQ(lr_at(s, c * 100), 0.1);
    EXPECT_EQ(lr_at(s, c * 100 + 50), 0.05);
  }
}

TEST(SseCosine, CapturesAtCycleEnd) {
  const auto s = spec(ScheduleKind::sse_cosine, 0.1, 0.0, 100, 500);
  EXPECT_TRUE(is_capture_point(s, 99));
  EXPECT_FALSE(is_capture_point(s, 50));
  EXPECT_FALSE(is_capture_point(s, 100));
  EXPECT_EQ(capture_count(s), 5);
  EXPECT_EQ(capture_points(s), (std::vector<std::int64_t>{99, 199, 299, 399, 499}));
}

TEST(FgeTriangular, HandInterpolatedValue) {
  const auto s = spec(ScheduleKind::fge_triangular, 0.05, 0.005, 100, 500);
  EXPECT_NEAR(lr_at(s, 25), (0.05 + 0.005) / 2.0, 1e-15);
  EXPECT_NEAR(lr_at(s, 75), (0.05 + 0.005) / 2.0, 1e-15);
  EXPECT_EQ(lr_at(s, 0), 0.05);
  EXPECT_EQ(lr_at(s, 50), 0.005);
}

TEST(FgeTriangular, CapturesAtTroughOfCompleteCycles) {
  const auto s = spec(ScheduleKind::fge_triangular, 0.05, 0.005, 100, 550);
  EXPECT_EQ(capture_points(s), (std::vector<std::int64_t>{50, 150, 250, 350, 450}));
  for (auto t : capture_points(s)) EXPECT_EQ(lr_at(s, t), s.lr_min);
}

TEST(SwaConst, BurnInThenConstantAndEpochCaptures) {
  auto s = spec(ScheduleKind::swa_const, 0.1, 0.02, 10, 50);
  s.burn_in = 20;
  EXPECT_EQ(lr_at(s, 19), 0.1);
  EXPECT_EQ(lr_at(s, 20), 0.02);
  EXPECT_EQ(capture_points(s), (std::vector<std::int64_t>{29, 39, 49}));
}

TEST(StepDecay, GeometricDropsAndNoCaptures) {
  auto s = spec(ScheduleKind::step_decay, 0.1, 0.0, 1, 30);
  s.decay_factor = 0.5;
  s.decay_every = 10;
  EXPECT_EQ(lr_at(s, 9), 0.1);
  EXPECT_EQ(lr_at(s, 10), 0.05);
  EXPECT_EQ(lr_at(s, 29), 0.025);
  EXPECT_EQ(capture_count(s), 0);
}

TEST(Schedule, OutOfRangeIterationIsDomainError) {
  const auto s = spec(ScheduleKind::sse_cosine, 0.1, 0.0, 10, 20);
  EXPECT_THROW(lr_at(s, -1), DomainError);
  EXPECT_THROW(lr_at(s, 20), DomainError);
  EXPECT_FALSE(is_capture_point(s, 20));
}

TEST(Schedule, ValidationRejectsBadSpecs) {
  EXPECT_THROW(spec(ScheduleKind::sse_cosine, 0.1, 0.2, 10, 20).validate(), ConfigError);
  EXPECT_THROW(spec(ScheduleKind::sse_cosine, 0.1, 0.0, 30, 20).validate(), ConfigError);
  EXPECT_THROW(spec(ScheduleKind::sse_cosine, 0.0, 0.0, 10, 20).validate(), ConfigError);
  auto swa = spec(ScheduleKind::swa_const, 0.1, 0.0, 10, 20);
  swa.burn_in = 20;
  EXPECT_THROW(swa.validate(), ConfigError);
  EXPECT_THROW(parse_schedule_kind("cosine"), ConfigError);
  EXPECT_EQ(parse_schedule_kind("fge_triangular"), ScheduleKind::fge_triangular);
}

class RandomSpecs : public ::testing::TestWithParam<int> {};

TEST_P(RandomSpecs, PeriodicBoundedPureAndCountMatches) {
  CounterRng r(hash_words({0x5c4ed, static_cast<std::uint64_t>(GetParam())}));
  const auto kind = r.uniform() < 0.5 ? ScheduleKind::sse_cosine : ScheduleKind::fge_triangular;
  const std::int64_t cycle = r.range(2, 40) * (kind == ScheduleKind::fge_triangular ? 2 : 1);
  const std::int64_t total = cycle + r.range(0, 200);
  const double hi = r.uniform(0.01, 0.5);
  const double lo = r.uniform(0.0, hi / 2.0);
  const auto s = spec(kind, hi, lo, cycle, total);
  ASSERT_NO_THROW(s.validate());

  for (std::int64_t t = 0; t < total; ++t) {
    const double v = lr_at(s, t);
    ASSERT_GE(v, lo);
    ASSERT_LE(v, hi);
    ASSERT_EQ(v, lr_at(s, t));
    if (t + cycle < total) ASSERT_EQ(v, lr_at(s, t + cycle));
  }
  EXPECT_EQ(capture_count(s), total / cycle);
  for (std::int64_t c = 0; c * cycle < total; ++c) {
    EXPECT_EQ(lr_at(s, c * cycle), hi);
    if (c * cycle + cycle / 2 < total) {
      if (kind == ScheduleKind::fge_triangular) EXPECT_EQ(lr_at(s, c * cycle + cycle / 2), lo);
    }
  }
}

INSTANTIATE_TEST_SUITE_P(Seeds, RandomSpecs, ::testing::Range(0, 20));
