#include "ensforge/sched.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "ensforge/errors.hpp"

namespace ensforge {

std::string to_string(ScheduleKind kind) {
  switch (kind) {
    case ScheduleKind::sse_cosine: return "sse_cosine";
    case ScheduleKind::fge_triangular: return "fge_triangular";
    case ScheduleKind::swa_const: return "swa_const";
    case ScheduleKind::step_decay: return "step_decay";
  }
  return "?";
}

ScheduleKind parse_schedule_kind(const std::string& name) {
  for (auto k : {ScheduleKind::sse_cosine, ScheduleKind::fge_triangular, ScheduleKind::swa_const,
                 ScheduleKind::step_decay}) {
    if (to_string(k) == name) return k;
  }
  throw ConfigError("unknown schedule kind '" + name + "'");
}

void ScheduleSpec::validate() const {
  if (!(lr_max > 0.0)) throw ConfigError("schedule.lr_max must be > 0");
  if (!(lr_min >= 0.0)) throw ConfigError("schedule.lr_min must be >= 0");
  if (lr_min > lr_max) throw ConfigError("schedule.lr_min must not exceed lr_max");
  if (total_iters < 1) throw ConfigError("schedule.total_iters must be >= 1");
  if (cycle_len < 1) throw ConfigError("schedule.cycle_len must be >= 1");
  if (cyclic() && cycle_len > total_iters) throw ConfigError("schedule.cycle_len exceeds total_iters");
  if (kind == ScheduleKind::swa_const && (burn_in < 0 || burn_in >= total_iters)) {
    throw ConfigError("schedule.burn_in must be in [0, total_iters)");
  }
  if (kind == ScheduleKind::step_decay) {
    if (decay_every < 1) throw ConfigError("schedule.decay_every must be >= 1");
    if (!(decay_factor > 0.0 && decay_factor <= 1.0)) throw ConfigError("schedule.decay_factor must be in (0, 1]");
  }
}

double lr_at(const ScheduleSpec& spec, std::int64_t t) {
  if (t < 0 || t >= spec.total_iters) {
    throw DomainError("iteration " + std::to_string(t) + " outside [0, " + std::to_string(spec.total_iters) + ")");
  }
  switch (spec.kind) {
    case ScheduleKind::sse_cosine: {
      const double phase = static_cast<double>(t % spec.cycle_len) / static_cast<double>(spec.cycle_len);
      const double lr = spec.lr_max / 2.0 * (std::cos(std::numbers::pi * phase) + 1.0);
      return std::clamp(lr, spec.lr_min, spec.lr_max);
    }
    case ScheduleKind::fge_triangular: {
      // Descend over the first half of the cycle, climb back over the second.
      const double c = static_cast<double>(spec.cycle_len);
      const double pos = static_cast<double>(t % spec.cycle_len);
      const double dist = 2.0 * std::abs(pos - c / 2.0) / c;  // 1 at the ends, 0 at mid-cycle
      // written so both ends come out exact
      return std::clamp(spec.lr_max * dist + spec.lr_min * (1.0 - dist), spec.lr_min, spec.lr_max);
    }
    case ScheduleKind::swa_const:
      return t < spec.burn_in ? spec.lr_max : spec.lr_min;
    case ScheduleKind::step_decay: {
      const double lr = spec.lr_max * std::pow(spec.decay_factor, static_cast<double>(t / spec.decay_every));
      return std::max(lr, spec.lr_min);
    }
  }
  return spec.lr_max;
}

bool is_capture_point(const ScheduleSpec& spec, std::int64_t t) {
  if (t < 0 || t >= spec.total_iters) return false;
  switch (spec.kind) {
    case ScheduleKind::sse_cosine:
      return t % spec.cycle_len == spec.cycle_len - 1;
    case ScheduleKind::fge_triangular: {
      // The triangle bottoms out mid-cycle; only complete cycles count.
      const std::int64_t start = t - t % spec.cycle_len;
      return t % spec.cycle_len == spec.cycle_len / 2 && start + spec.cycle_len <= spec.total_iters;
    }
    case ScheduleKind::swa_const:
      return t >= spec.burn_in && (t + 1) % spec.cycle_len == 0;
    case ScheduleKind::step_decay:
      return false;
  }
  return false;
}

std::vector<std::int64_t> capture_points(const ScheduleSpec& spec) {
  std::vector<std::int64_t> out;
  for (std::int64_t t = 0; t < spec.total_iters; ++t) {
    if (is_capture_point(spec, t)) out.push_back(t);
  }
  return out;
}

std::int64_t capture_count(const ScheduleSpec& spec) { return static_cast<std::int64_t>(capture_points(spec).size()); }

}  // namespace ensforge
