#include "ensforge/ens_train.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <numeric>
#include <thread>

#include "ensforge/errors.hpp"
#include "ensforge/rng.hpp"

namespace ensforge {

TrainingSet TrainingSet::from_scenes(std::span<const Scene> scenes) {
  TrainingSet ts;
  for (const auto& s : scenes) {
    ts.images.push_back(s.image);
    ts.masks.push_back(s.mask);
  }
  return ts;
}

void TrainSpec::validate() const {
  if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("train.momentum must be in [0, 1)");
  schedule.validate();
  augmentation.validate();
}

std::int64_t steps_per_epoch(std::size_t dataset_size, int batch_size) {
  return static_cast<std::int64_t>((dataset_size + batch_size - 1) / batch_size);
}

ParamSet train_network(const RefNet& net, ParamSet params, const TrainingSet& dataset, const TrainSpec& spec,
                       std::span<const std::size_t> subset, const IterationHook& hook) {
  spec.validate();
  net.check_params(params);
  if (dataset.images.size() != dataset.masks.size()) throw DimensionError("training set image/mask count mismatch");
  const std::size_t m = subset.empty() ? dataset.size() : subset.size();
  if (m == 0) throw ConfigError("training set is empty");
  const std::int64_t spe = steps_per_epoch(m, spec.batch_size);
  if (spec.schedule.total_iters != spe * spec.epochs) {
    throw ConfigError("schedule.total_iters is " + std::to_string(spec.schedule.total_iters) + " but " +
                      std::to_string(spec.epochs) + " epochs of " + std::to_string(spe) + " steps need " +
                      std::to_string(spe * spec.epochs));
  }

  std::vector<std::size_t> order(m);
  if (subset.empty()) {
    std::iota(order.begin(), order.end(), std::size_t{0});
  } else {
    std::copy(subset.begin(), subset.end(), order.begin());
    for (std::size_t i : order) {
      if (i >= dataset.size()) throw DomainError("training subset index out of range");
    }
  }
  const bool augment = !spec.augmentation.is_noop();
  const bool dropout = net.config().dropout_rate > 0.0;

  ParamSet velocity = params.zeros_like();
  std::vector<Tensor> images, masks;
  std::vector<PredictMode> modes;
  std::int64_t t = 0;
  for (int epoch = 0; epoch < spec.epochs; ++epoch) {
    std::vector<std::size_t> perm = order;
    CounterRng shuffle(hash_words({spec.seed, 0x5f0u, static_cast<std::uint64_t>(epoch)}));
    for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[shuffle.below(i)]);

    for (std::int64_t step = 0; step < spe; ++step, ++t) {
      const std::size_t lo = static_cast<std::size_t>(step) * spec.batch_size;
      const std::size_t hi = std::min(m, lo + spec.batch_size);
      images.clear();
      masks.clear();
      modes.clear();
      for (std::size_t pos = lo; pos < hi; ++pos) {
        const std::size_t k = perm[pos];
        if (augment) {
          auto [img, msk] = augment_sample(spec.augmentation, static_cast<std::uint64_t>(epoch) * m + pos,
                                           dataset.images[k], dataset.masks[k]);
          images.push_back(std::move(img));
          masks.push_back(std::move(msk));
        } else {
          images.push_back(dataset.images[k]);
          masks.push_back(dataset.masks[k]);
        }
        modes.push_back(dropout ? PredictMode::stochastic(hash_words({spec.seed, 0xd40u, static_cast<std::uint64_t>(t),
                                                                       pos - lo}))
                                : PredictMode::deterministic());
      }
      const auto lg = net.loss_and_grad<float>(params, images, masks, modes);
      if (!std::isfinite(lg.loss) || !lg.grads.all_finite()) {
        throw Error("training diverged at iteration " + std::to_string(t) + " (loss " + std::to_string(lg.loss) +
                    ")");
      }
      sgd_step(params, lg.grads, velocity, lr_at(spec.schedule, t), spec.momentum);
      if (hook) hook(t, params);
    }
  }
  return params;
}

// --- SnapshotSet ------------------------------------------------------------

void SnapshotSet::add(SnapshotMember member) {
  for (const auto& m : members_) {
    if (m.member_id == member.member_id) throw ValidationError("duplicate member id '" + member.member_id + "'");
  }
  if (!members_.empty() && members_.front().params.fingerprint() != member.params.fingerprint()) {
    throw CombinabilityError("member '" + member.member_id + "' does not share the snapshot set architecture");
  }
  members_.push_back(std::move(member));
}

std::uint64_t SnapshotSet::fingerprint() const {
  if (members_.empty()) throw ValidationError("empty snapshot set has no fingerprint");
  return members_.front().params.fingerprint();
}

// --- SWA --------------------------------------------------------------------

template <class T>
void swa_update(BasicSwaState<T>& state, const BasicParamSet<T>& params) {
  if (!state.mean) {
    state.mean = params;
    state.count = 1;
    return;
  }
  require_combinable(*state.mean, params, "swa_update");
  const double n = static_cast<double>(state.count);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& mean = state.mean->tensor(i).values();
    const auto& p = params.tensor(i).values();
    for (std::size_t j = 0; j < mean.size(); ++j) {
      mean[j] = static_cast<T>((static_cast<double>(mean[j]) * n + static_cast<double>(p[j])) / (n + 1.0));
    }
  }
  ++state.count;
}

template void swa_update<float>(SwaState&, const ParamSet&);
template void swa_update<double>(SwaState64&, const ParamSet64&);

// --- bagging ----------------------------------------------------------------

std::vector<std::size_t> bootstrap_indices(std::size_t n, double fraction, std::uint64_t seed, bool with_replacement) {
  if (n < 1) throw DomainError("bootstrap needs n >= 1");
  if (!(fraction > 0.0 && fraction <= 1.0)) throw DomainError("bootstrap fraction must be in (0, 1]");
  const auto k = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
  if (k == 0) throw DomainError("bootstrap fraction*n rounds to 0");
  CounterRng rng(hash_words({seed, 0xb007u}));
  std::vector<std::size_t> out;
  out.reserve(k);
  if (with_replacement) {
    for (std::size_t i = 0; i < k; ++i) out.push_back(rng.below(n));
    return out;
  }
  std::vector<std::size_t> pool(n);
  std::iota(pool.begin(), pool.end(), std::size_t{0});
  for (std::size_t i = 0; i < k; ++i) std::swap(pool[i], pool[i + rng.below(n - i)]);
  out.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(k));
  std::sort(out.begin(), out.end());
  return out;
}

void parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, jobs)));
  std::vector<std::exception_ptr> errors(n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < n; i = next++) {
          try {
            fn(i);
          } catch (...) {
            errors[i] = std::current_exception();
          }
        }
      });
    }
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

namespace {

ScheduleSpec rescale_schedule(const ScheduleSpec& s, std::int64_t from_spe, std::int64_t to_spe, int epochs) {
  if (from_spe == to_spe) return s;
  auto scale = [&](std::int64_t x) {
    return std::max<std::int64_t>(1, std::llround(static_cast<double>(x) * to_spe / from_spe));
  };
  ScheduleSpec out = s;
  out.total_iters = to_spe * epochs;
  out.cycle_len = std::min(scale(s.cycle_len), out.total_iters);
  out.burn_in = s.burn_in == 0 ? 0 : std::min(scale(s.burn_in), out.total_iters - 1);
  out.decay_every = scale(s.decay_every);
  return out;
}

ParamSet fresh_params(const RefNet& net, const std::string& member_id) {
  NetConfig cfg = net.config();
  cfg.init_seed = derive_seed(cfg.init_seed, member_id);
  return RefNet(cfg).init_params<float>();
}

template <class Fn>
auto with_member_context(const std::string& member_id, Fn&& fn) {
  try {
    return fn();
  } catch (const ConfigError& e) {
    throw ConfigError(member_id + ": " + e.what());
  } catch (const std::exception& e) {
    throw Error(member_id + ": " + e.what());
  }
}

}  // namespace

SnapshotSet train_bagged(const RefNet& net, const TrainingSet& dataset, int replicas, const TrainSpec& spec,
                         const BaggingOptions& opts) {
  if (replicas < 2) throw ConfigError("bagging needs at least 2 replicas");
  spec.validate();
  if (opts.mode == BaggingMode::synthetic && !opts.replica_augs.empty() &&
      opts.replica_augs.size() != static_cast<std::size_t>(replicas)) {
    throw ConfigError("bagging: replica_augs must list one AugConfig per replica");
  }
  const std::int64_t full_spe = steps_per_epoch(dataset.size(), spec.batch_size);

  std::vector<std::optional<SnapshotMember>> results(replicas);
  parallel_for(static_cast<std::size_t>(replicas), opts.jobs, [&](std::size_t b) {
    const std::string id = "replica-" + std::to_string(b + 1);
    results[b] = with_member_context(id, [&] {
      TrainSpec member = spec;
      member.seed = derive_seed(spec.seed, id);
      std::vector<std::size_t> subset;
      if (opts.mode == BaggingMode::subsample) {
        subset = bootstrap_indices(dataset.size(), opts.fraction, spec.seed + b, opts.with_replacement);
        member.schedule =
            rescale_schedule(spec.schedule, full_spe, steps_per_epoch(subset.size(), spec.batch_size), spec.epochs);
      } else if (!opts.replica_augs.empty()) {
        member.augmentation = opts.replica_augs[b];
      } else {
        member.augmentation.seed = derive_seed(spec.augmentation.seed, id);
        if (member.augmentation.is_noop()) member.augmentation.geom_pool = square_symmetries();
      }
      ParamSet p = train_network(net, fresh_params(net, id), dataset, member, subset);
      return SnapshotMember{id, std::move(p), "bagging/" + id};
    });
  });
  SnapshotSet set;
  for (auto& r : results) set.add(std::move(*r));
  return set;
}

SnapshotSet train_snapshot_cycles(const RefNet& net, ParamSet init, const TrainingSet& dataset,
                                  const TrainSpec& spec) {
  if (!spec.schedule.cyclic()) throw ConfigError("snapshot training needs a cyclic schedule (sse_cosine or fge_triangular)");
  spec.validate();
  if (capture_count(spec.schedule) == 0) throw ConfigError("schedule has no capture points");
  const std::string method = spec.schedule.kind == ScheduleKind::sse_cosine ? "sse" : "fge";
  SnapshotSet set;
  int cycle = 0;
  train_network(net, std::move(init), dataset, spec, {}, [&](std::int64_t t, const ParamSet& p) {
    if (!is_capture_point(spec.schedule, t)) return;
    const std::string id = "cycle-" + std::to_string(++cycle);
    set.add({id, p, method + "/" + id});
  });
  return set;
}

SwaResult train_swa(const RefNet& net, ParamSet init, const TrainingSet& dataset, const TrainSpec& spec,
                    bool keep_snapshots) {
  if (spec.schedule.kind != ScheduleKind::swa_const) throw ConfigError("SWA training needs a swa_const schedule");
  spec.validate();
  if (!spec.swa_every_iteration && capture_count(spec.schedule) == 0) {
    throw ConfigError("SWA schedule has no capture points past burn-in");
  }
  SwaState state;
  SwaResult res;
  train_network(net, std::move(init), dataset, spec, {}, [&](std::int64_t t, const ParamSet& p) {
    const bool fold = spec.swa_every_iteration ? t >= spec.schedule.burn_in : is_capture_point(spec.schedule, t);
    if (!fold) return;
    swa_update(state, p);
    if (keep_snapshots) res.snapshots.push_back(p);
  });
  res.averaged = std::move(*state.mean);
  res.folded = state.count;
  return res;
}

std::pair<int, int> hydra_budget_split(int total_epochs) {
  if (total_epochs < 2) throw ConfigError("hydra needs a budget of at least 2 epochs");
  const int body = std::clamp(static_cast<int>(std::lround(0.7 * total_epochs)), 1, total_epochs - 1);
  return {body, total_epochs - body};
}

HydraResult train_hydra(const RefNet& net, ParamSet init, const TrainingSet& dataset, const TrainSpec& body_spec,
                        std::span<const TrainSpec> head_specs, int jobs) {
  if (head_specs.size() < 2) throw ConfigError("hydra needs at least 2 heads");
  for (const auto& h : head_specs) {
    if (h.epochs > 0) h.validate();
  }
  HydraResult res;
  res.body = body_spec.epochs > 0 ? with_member_context("body", [&] {
    return train_network(net, std::move(init), dataset, body_spec);
  })
                                  : std::move(init);
  net.check_params(res.body);

  std::vector<std::optional<SnapshotMember>> heads(head_specs.size());
  parallel_for(head_specs.size(), jobs, [&](std::size_t k) {
    const std::string id = "head-" + std::to_string(k + 1);
    heads[k] = with_member_context(id, [&] {
      ParamSet p = head_specs[k].epochs > 0 ? train_network(net, res.body, dataset, head_specs[k]) : res.body;
      return SnapshotMember{id, std::move(p), "hydra/" + id};
    });
  });
  for (auto& h : heads) res.heads.add(std::move(*h));
  return res;
}

}  // namespace ensforge
