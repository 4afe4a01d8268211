#include <cmath>
#include <set>

#include <gtest/gtest.h>

#include "ensforge/rng.hpp"

using namespace ensforge;

TEST(Rng, StreamIsPureFunctionOfKeyAndCounter) {
  CounterRng a(42), b(42);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
  EXPECT_EQ(a.counter(), 100u);

  CounterRng c(42);
  for (int i = 0; i < 7; ++i) c.next_u64();
  EXPECT_DOUBLE_EQ(c.uniform(), uniform_at(42, 7));
}

TEST(Rng, DifferentKeysGiveDifferentStreams) {
  CounterRng a(1), b(2);
  int same = 0;
  for (int i = 0; i < 64; ++i) same += a.next_u64() == b.next_u64();
  EXPECT_EQ(same, 0);
}

TEST(Rng, UniformAndBelowStayInRange) {
  CounterRng r(7);
  for (int i = 0; i < 10000; ++i) {
    const double u = r.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    ASSERT_LT(r.below(13), 13u);
    const int k = r.range(-3, 3);
    ASSERT_GE(k, -3);
    ASSERT_LE(k, 3);
  }
}

TEST(Rng, NormalMomentsRoughlyStandard) {
  CounterRng r(11);
  const int n = 200000;
  double s = 0, s2 = 0;
  for (int i = 0; i < n; ++i) {
    const double x = r.normal();
    s += x;
    s2 += x * x;
  }
  const double mean = s / n;
  EXPECT_NEAR(mean, 0.0, 4.0 / std::sqrt(n));
  EXPECT_NEAR(s2 / n - mean * mean, 1.0, 0.02);
}

TEST(Rng, DerivedSeedsAreDistinctAndOrderSensitive) {
  std::set<std::uint64_t> seen;
  for (const char* id : {"replica-0", "replica-1", "replica-2", "head-0", "head-1"}) {
    seen.insert(derive_seed(5, id));
  }
  EXPECT_EQ(seen.size(), 5u);
  EXPECT_NE(derive_seed(5, "a"), derive_seed(6, "a"));
  EXPECT_NE(hash_words({1, 2}), hash_words({2, 1}));
}
