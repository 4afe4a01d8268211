#pragma once

#include <cstdint>
#include <initializer_list>
#include <string_view>

namespace ensforge {

/// splitmix64 finalizer. Bijective on 64-bit words.
std::uint64_t mix64(std::uint64_t x) noexcept;

/// Order-sensitive hash of a list of words; used to derive stream keys
/// such as (seed, epoch) or (seed, stage, channel).
std::uint64_t hash_words(std::initializer_list<std::uint64_t> words) noexcept;

/// Stream key for a named ensemble member: hash(seed, member_id).
std::uint64_t derive_seed(std::uint64_t seed, std::string_view member_id) noexcept;

/// Counter-based generator: the n-th draw is a pure function of (key, n),
/// so streams can be split and replayed without shared state.
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t key) noexcept : key_(key) {}

  std::uint64_t next_u64() noexcept { return mix64(key_ ^ mix64(counter_++)); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() noexcept;
  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n). n must be > 0.
  std::uint64_t below(std::uint64_t n) noexcept;
  /// Inclusive integer range.
  int range(int lo, int hi) noexcept;
  /// Standard normal via Box-Muller (one value per call).
  double normal() noexcept;

  std::uint64_t counter() const noexcept { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

/// Uniform in [0, 1) for a single (key, index) pair without constructing a stream.
double uniform_at(std::uint64_t key, std::uint64_t index) noexcept;

}  // namespace ensforge
