#include "ensforge/rng.hpp"

#include <cmath>
#include <numbers>

namespace ensforge {

std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t hash_words(std::initializer_list<std::uint64_t> words) noexcept {
  std::uint64_t h = 0x6a09e667f3bcc908ULL;
  for (std::uint64_t w : words) {
    h = mix64(h ^ mix64(w + 0x632be59bd9b4e019ULL));
  }
  return h;
}

std::uint64_t derive_seed(std::uint64_t seed, std::string_view member_id) noexcept {
  // FNV-1a over the id, then folded with the seed.
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : member_id) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return hash_words({seed, h});
}

double CounterRng::uniform() noexcept {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

std::uint64_t CounterRng::below(std::uint64_t n) noexcept {
  // Lemire-style multiply-shift; bias is < n / 2^64 and irrelevant here.
  const unsigned __int128 m = static_cast<unsigned __int128>(next_u64()) * n;
  return static_cast<std::uint64_t>(m >> 64);
}

int CounterRng::range(int lo, int hi) noexcept {
  return lo + static_cast<int>(below(static_cast<std::uint64_t>(hi - lo + 1)));
}

double CounterRng::normal() noexcept {
  double u1 = uniform();
  const double u2 = uniform();
  if (u1 < 1e-300) u1 = 1e-300;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

double uniform_at(std::uint64_t key, std::uint64_t index) noexcept {
  return static_cast<double>(mix64(key ^ mix64(index)) >> 11) * 0x1.0p-53;
}

}  // namespace ensforge
