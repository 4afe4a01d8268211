#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ensforge/errors.hpp"
#include "ensforge/tensor.hpp"

namespace ensforge {

/// Hash of an ordered list of (name, dims). Values never enter it.
std::uint64_t shape_fingerprint(const std::vector<std::pair<std::string, std::vector<std::size_t>>>& layout);

std::string fingerprint_hex(std::uint64_t fp);

/// Named, ordered collection of weight tensors: the unit that gets
/// snapshotted, averaged, and measured.
template <class T>
class BasicParamSet {
 public:
  struct Entry {
    std::string name;
    BasicTensor<T> tensor;
    friend bool operator==(const Entry&, const Entry&) = default;
  };

  BasicParamSet() = default;

  void add(std::string name, BasicTensor<T> tensor) {
    for (const auto& e : entries_) {
      if (e.name == name) throw ValidationError("duplicate parameter name '" + name + "'");
    }
    entries_.push_back({std::move(name), std::move(tensor)});
  }

  const std::vector<Entry>& entries() const noexcept { return entries_; }
  std::vector<Entry>& entries() noexcept { return entries_; }
  std::size_t size() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }

  const BasicTensor<T>& tensor(std::size_t i) const { return entries_.at(i).tensor; }
  BasicTensor<T>& tensor(std::size_t i) { return entries_.at(i).tensor; }

  const BasicTensor<T>* find(const std::string& name) const {
    for (const auto& e : entries_) {
      if (e.name == name) return &e.tensor;
    }
    return nullptr;
  }

  std::size_t value_count() const noexcept {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.tensor.size();
    return n;
  }

  std::uint64_t fingerprint() const {
    std::vector<std::pair<std::string, std::vector<std::size_t>>> layout;
    layout.reserve(entries_.size());
    for (const auto& e : entries_) layout.emplace_back(e.name, e.tensor.dims());
    return shape_fingerprint(layout);
  }

  BasicParamSet zeros_like() const {
    BasicParamSet out;
    for (const auto& e : entries_) out.entries_.push_back({e.name, BasicTensor<T>(e.tensor.dims())});
    return out;
  }

  template <class U>
  BasicParamSet<U> cast() const {
    BasicParamSet<U> out;
    for (const auto& e : entries_) out.add(e.name, e.tensor.template cast<U>());
    return out;
  }

  bool all_finite() const noexcept {
    for (const auto& e : entries_) {
      if (!e.tensor.all_finite()) return false;
    }
    return true;
  }

  friend bool operator==(const BasicParamSet&, const BasicParamSet&) = default;

 private:
  std::vector<Entry> entries_;
};

using ParamSet = BasicParamSet<float>;
using ParamSet64 = BasicParamSet<double>;

/// Throws CombinabilityError unless both sets share an architecture fingerprint.
template <class T>
void require_combinable(const BasicParamSet<T>& a, const BasicParamSet<T>& b, const std::string& context) {
  if (a.fingerprint() != b.fingerprint()) {
    throw CombinabilityError(context + ": architecture fingerprints differ (" + fingerprint_hex(a.fingerprint()) +
                             " vs " + fingerprint_hex(b.fingerprint()) + ")");
  }
}

/// Euclidean distance over all weights.
template <class T>
double l2_distance(const BasicParamSet<T>& a, const BasicParamSet<T>& b) {
  require_combinable(a, b, "l2_distance");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto& x = a.tensor(i).values();
    const auto& y = b.tensor(i).values();
    for (std::size_t j = 0; j < x.size(); ++j) {
      const double d = static_cast<double>(x[j]) - static_cast<double>(y[j]);
      acc += d * d;
    }
  }
  return std::sqrt(acc);
}

}  // namespace ensforge
