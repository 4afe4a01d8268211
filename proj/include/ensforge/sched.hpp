#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace ensforge {

enum class ScheduleKind { sse_cosine, fge_triangular, swa_const, step_decay };

std::string to_string(ScheduleKind kind);
ScheduleKind parse_schedule_kind(const std::string& name);

/// Learning-rate schedule in iteration units. For swa_const, cycle_len is
/// the epoch length (averaging happens at epoch boundaries past burn_in).
struct ScheduleSpec {
  ScheduleKind kind = ScheduleKind::step_decay;
  double lr_max = 0.05;
  double lr_min = 0.0;
  std::int64_t cycle_len = 1;
  std::int64_t total_iters = 1;
  std::int64_t burn_in = 0;       // swa_const only
  double decay_factor = 1.0;      // step_decay only
  std::int64_t decay_every = 1;   // step_decay only

  bool cyclic() const noexcept { return kind == ScheduleKind::sse_cosine || kind == ScheduleKind::fge_triangular; }
  void validate() const;
  friend bool operator==(const ScheduleSpec&, const ScheduleSpec&) = default;
};

/// lr at iteration t in [0, total_iters). Throws DomainError otherwise.
double lr_at(const ScheduleSpec& spec, std::int64_t t);

/// Snapshot predicate, always at a learning-rate minimum: the last iteration
/// of each cycle for sse_cosine, the mid-cycle trough of each complete cycle
/// for fge_triangular, every epoch boundary from burn_in on for swa_const,
/// never for step_decay.
bool is_capture_point(const ScheduleSpec& spec, std::int64_t t);

std::vector<std::int64_t> capture_points(const ScheduleSpec& spec);
std::int64_t capture_count(const ScheduleSpec& spec);

}  // namespace ensforge
