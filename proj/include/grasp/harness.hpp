#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "grasp/controller.hpp"
#include "grasp/error.hpp"
#include "grasp/hashing.hpp"
#include "grasp/lora.hpp"
#include "grasp/masking.hpp"
#include "grasp/optimizer.hpp"
#include "grasp/toy_task.hpp"

namespace grasp {

struct LoraConfig {
  std::size_t rank = 8;
  double alpha = 32.0;
  // Recorded for parity with the shared training table; the toy model is
  // deterministic so dropout is only applied when TrainConfig enables it.
  double dropout = 0.05;
};

struct TrainConfig {
  AdamWConfig adamw{};
  std::size_t batch_size = 1;
  std::size_t epochs = 10;
  std::size_t patience = 3;       // dev evaluations without improvement; 0 disables
  std::size_t eval_interval = 0;  // steps between dev evaluations; 0 means once per epoch
  bool dropout_enabled = false;

  void validate() const {
    if (batch_size == 0) throw UsageError("TrainConfig: batch_size must be >= 1");
    if (!(adamw.lr > 0.0)) throw UsageError("TrainConfig: learning rate must be > 0");
    if (dropout_enabled) {
      throw UsageError("TrainConfig: dropout is not supported by the deterministic toy model");
    }
  }
};

inline std::size_t steps_per_epoch(std::size_t n_train, std::size_t batch) {
  return (n_train + batch - 1) / batch;
}

// T = epochs * ceil(n_train / batch).
inline std::size_t total_steps(std::size_t n_train, const TrainConfig& cfg) {
  return cfg.epochs * steps_per_epoch(n_train, cfg.batch_size);
}

// Independent stream per pipeline role, derived from the run seed.
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view role) {
  std::uint64_t x = seed ^ fnv1a(role);
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Reshuffled pass over the training rows, one batch at a time.
class BatchSchedule {
 public:
  BatchSchedule(std::size_t n, std::size_t batch, std::uint64_t seed)
      : rng_(seed), order_(n), batch_(batch) {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
  }

  std::span<const std::size_t> next() {
    if (pos_ >= order_.size()) pos_ = 0;
    if (pos_ == 0) std::shuffle(order_.begin(), order_.end(), rng_);
    const std::size_t len = std::min(batch_, order_.size() - pos_);
    std::span<const std::size_t> out(order_.data() + pos_, len);
    pos_ += len;
    return out;
  }

 private:
  std::mt19937_64 rng_;
  std::vector<std::size_t> order_;
  std::size_t batch_;
  std::size_t pos_ = 0;
};

// A ~ U(-1/sqrt(d_in), 1/sqrt(d_in)), B = 0, so every fresh adapter has a
// zero update.
inline std::vector<LoraAdapter> init_adapters(const FrozenBackbone& backbone,
                                              const LoraConfig& cfg, std::uint64_t seed) {
  if (cfg.rank == 0) throw UsageError("LoraConfig: rank must be >= 1");
  std::mt19937_64 rng(seed);
  const double bound = 1.0 / std::sqrt(static_cast<double>(backbone.embedding_dim()));
  std::uniform_real_distribution<double> draw(-bound, bound);
  std::vector<LoraAdapter> out;
  for (const auto& site : backbone.sites()) {
    Matrix a(cfg.rank, site.w.cols());
    for (double& v : a.values()) v = draw(rng);
    out.push_back({site.site_id, std::move(a), Matrix(site.w.rows(), cfg.rank), cfg.alpha});
  }
  return out;
}

struct AdapterTrainResult {
  std::vector<LoraAdapter> adapters;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  std::size_t steps = 0;
};

inline AdapterTrainResult train_adapter(const FrozenBackbone& backbone, const EvalSet& train,
                                        const LoraConfig& lora, const TrainConfig& cfg,
                                        std::uint64_t seed) {
  cfg.validate();
  MergedAdapterSet params =
      as_parameter_set(init_adapters(backbone, lora, derive_seed(seed, "adapter-init")));
  AdamW opt(params, cfg.adamw);
  BatchSchedule schedule(train.size(), cfg.batch_size, derive_seed(seed, "adapter-shuffle"));
  AdapterTrainResult out;
  out.initial_loss = dataset_loss(params, train);
  TensorGrads grads = zero_grads(params);
  const std::size_t steps = total_steps(train.size(), cfg);
  for (std::size_t step = 0; step < steps; ++step) {
    const double loss = batch_loss_and_grad(params, train, schedule.next(), grads);
    if (!std::isfinite(loss)) {
      throw NumericalError("train_adapter: loss diverged at step " + std::to_string(step));
    }
    opt.step(params, grads);
  }
  out.final_loss = dataset_loss(params, train);
  if (!std::isfinite(out.final_loss)) throw NumericalError("train_adapter: final loss is not finite");
  out.steps = steps;
  out.adapters = to_adapters(params);
  return out;
}

inline double microdev_loss(const MergedAdapterSet& params, const EvalSet& slice) {
  if (slice.size() == 0) throw UsageError("microdev_loss: empty micro-dev slice");
  return dataset_loss(params, slice);
}

// Number of coordinates pruned by `mask` that are not exactly zero.
inline std::size_t count_zero_violations(const MergedAdapterSet& params, const SparsityMask& mask) {
  std::size_t bad = 0;
  for (std::size_t t = 0; t < params.tensor_count(); ++t) {
    auto w = params.tensor(t);
    for (std::size_t j = 0; j < w.size(); ++j) bad += mask.keep[t][j] == 0 && w[j] != 0.0;
  }
  return bad;
}

struct ProbeCheck {
  std::size_t round = 0;
  double p = 0.0;
  std::uint64_t before = 0;
  std::uint64_t after = 0;
};

// Binds the controller to live training state: the committed mask, the
// optimizer, and the fixed micro-dev slice.
class MaskedTrainingEnvironment {
 public:
  MaskedTrainingEnvironment(MergedAdapterSet& params, SparsityMask& mask, AdamW& opt,
                            const EvalSet& slice, ImportanceScale scale, bool record_checks = true)
      : params_(params),
        mask_(mask),
        opt_(opt),
        slice_(slice),
        scale_(scale),
        record_checks_(record_checks) {}

  double committed_loss() { return microdev_loss(params_, slice_); }

  // Evaluates the candidate mask on a scratch copy; the live parameters are
  // only read.
  double probe_loss(double p) {
    const std::uint64_t before = record_checks_ ? checksum(params_) : 0;
    scratch_ = params_;
    prune_ratio_inplace(scratch_, p, scale_, work_);
    const double loss = microdev_loss(scratch_, slice_);
    if (record_checks_) checks_.push_back({round_, p, before, checksum(params_)});
    return loss;
  }

  void commit(double p) {
    SparsityMask next = build_mask(params_, p, scale_);
    reset_pruned_state(params_, opt_, newly_pruned(mask_, next));
    mask_ = std::move(next);
  }

  void set_round(std::size_t r) noexcept { round_ = r; }
  const std::vector<ProbeCheck>& probe_checks() const noexcept { return checks_; }

 private:
  MergedAdapterSet& params_;
  SparsityMask& mask_;
  AdamW& opt_;
  const EvalSet& slice_;
  ImportanceScale scale_;
  bool record_checks_;
  std::size_t round_ = 0;
  std::vector<ProbeCheck> checks_;
  MergedAdapterSet scratch_;
  std::vector<double> work_;
};

struct PolicyLearningOptions {
  ControllerConfig controller{};
  TrainConfig train{};
  std::uint64_t seed = 0;
  bool audit = false;  // zero checks after every step, checksums around every probe
  std::function<void(const ControllerRecord&)> on_record;
};

struct PolicyLearningResult {
  std::vector<ControllerRecord> log;
  double p_star = std::numeric_limits<double>::quiet_NaN();
  PolicyState final_policy;
  MergedAdapterSet params;
  SparsityMask mask;
  std::size_t steps = 0;
  std::size_t budget_steps = 0;
  bool aborted = false;
  std::string abort_reason;
  std::vector<ProbeCheck> probe_checks;
  std::size_t zero_violations = 0;
};

// Target fine-tuning with a controller round after every K optimizer
// steps; the committed mask is reapplied after each step.
inline PolicyLearningResult sparsity_policy_learning(const MergedAdapterSet& merged_init,
                                                     ImportanceScale scale,
                                                     const EvalSet& target_train,
                                                     const EvalSet& microdev,
                                                     const PolicyLearningOptions& opts) {
  const auto& ctl = opts.controller;
  ctl.validate();
  opts.train.validate();
  if (microdev.size() != ctl.microdev) {
    throw UsageError("sparsity_policy_learning: micro-dev slice has " +
                     std::to_string(microdev.size()) + " examples, config expects m = " +
                     std::to_string(ctl.microdev));
  }
  TrainConfig train = opts.train;
  train.epochs = ctl.epochs;

  PolicyLearningResult out;
  out.params = merged_init;
  PolicyState policy = init_policy(ctl);
  out.mask = build_mask(out.params, policy.p_curr, scale);
  apply_mask_inplace(out.params, out.mask);
  AdamW opt(out.params, train.adamw);
  MaskedTrainingEnvironment env(out.params, out.mask, opt, microdev, scale, opts.audit);
  BatchSchedule schedule(target_train.size(), train.batch_size,
                         derive_seed(opts.seed, "policy-shuffle"));
  std::mt19937_64 rng(derive_seed(opts.seed, "policy-sampling"));
  TensorGrads grads = zero_grads(out.params);

  out.budget_steps = total_steps(target_train.size(), train);
  std::size_t round = 0;
  for (std::size_t step = 1; step <= out.budget_steps; ++step) {
    const double loss = batch_loss_and_grad(out.params, target_train, schedule.next(), grads);
    if (!std::isfinite(loss)) {
      out.aborted = true;
      out.abort_reason = "training loss diverged at step " + std::to_string(step);
      break;
    }
    optimizer_step_and_reset(out.params, grads, opt, out.mask);
    out.steps = step;
    if (opts.audit) out.zero_violations += count_zero_violations(out.params, out.mask);
    if (step % ctl.interval == 0) {
      env.set_round(round);
      RoundResult r = controller_round(policy, env, ctl, rng, round, step);
      policy = r.policy;
      if (opts.audit) out.zero_violations += count_zero_violations(out.params, out.mask);
      if (opts.on_record) opts.on_record(r.record);
      out.log.push_back(std::move(r.record));
      ++round;
    }
  }
  out.final_policy = policy;
  out.probe_checks = env.probe_checks();
  bool any_success = false;
  for (const auto& rec : out.log) any_success |= !rec.failed;
  if (any_success) out.p_star = select_p_star(out.log);
  return out;
}

struct FinetuneOptions {
  TrainConfig train{};
  std::uint64_t seed = 0;
  bool audit = false;
};

struct FinetuneResult {
  double p = 0.0;
  MergedAdapterSet params;  // best-by-dev checkpoint
  SparsityMask mask;
  double dev_loss_initial = 0.0;
  double dev_loss = 0.0;
  double test_loss = 0.0;
  std::size_t steps = 0;
  std::size_t budget_steps = 0;
  bool stopped_early = false;
  std::uint64_t start_checksum = 0;
  std::uint64_t mask_checksum_first = 0;
  std::uint64_t mask_checksum_last = 0;
  std::size_t zero_violations = 0;
  std::vector<double> dev_history;
};

// One fixed-mask training run from `init` at ratio p, early-stopped on dev.
inline FinetuneResult prune_and_finetune(const MergedAdapterSet& init, double p,
                                         ImportanceScale scale, const EvalSet& train,
                                         const EvalSet& dev, const EvalSet& test,
                                         const FinetuneOptions& opts) {
  opts.train.validate();
  FinetuneResult out;
  out.p = p;
  out.start_checksum = checksum(init);
  out.mask = build_mask(init, p, scale);
  const SparsityMask& mask = out.mask;
  out.mask_checksum_first = checksum(mask);

  MergedAdapterSet params = mask_apply(init, mask);
  AdamW opt(params, opts.train.adamw);
  BatchSchedule schedule(train.size(), opts.train.batch_size, derive_seed(opts.seed, "finetune"));
  TensorGrads grads = zero_grads(params);
  const std::size_t eval_every = opts.train.eval_interval != 0
                                     ? opts.train.eval_interval
                                     : steps_per_epoch(train.size(), opts.train.batch_size);

  out.budget_steps = total_steps(train.size(), opts.train);
  out.dev_loss_initial = dataset_loss(params, dev);
  out.dev_history.push_back(out.dev_loss_initial);
  double best = out.dev_loss_initial;
  out.params = params;
  std::size_t since_best = 0;
  for (std::size_t step = 1; step <= out.budget_steps; ++step) {
    const double loss = batch_loss_and_grad(params, train, schedule.next(), grads);
    if (!std::isfinite(loss)) {
      throw NumericalError("prune_and_finetune: loss diverged at step " + std::to_string(step) +
                           " (p = " + std::to_string(p) + ")");
    }
    optimizer_step_and_reset(params, grads, opt, mask);
    out.steps = step;
    if (opts.audit) out.zero_violations += count_zero_violations(params, mask);
    if (step % eval_every == 0 || step == out.budget_steps) {
      const double dev_loss = dataset_loss(params, dev);
      out.dev_history.push_back(dev_loss);
      if (dev_loss < best) {
        best = dev_loss;
        out.params = params;
        since_best = 0;
      } else if (opts.train.patience != 0 && ++since_best >= opts.train.patience) {
        out.stopped_early = step < out.budget_steps;
        break;
      }
    }
  }
  out.mask_checksum_last = checksum(mask);
  out.dev_loss = best;
  out.test_loss = dataset_loss(out.params, test);
  return out;
}

inline FinetuneResult final_prune_finetune(const MergedAdapterSet& merged_init, double p_star,
                                           const ControllerConfig& range, ImportanceScale scale,
                                           const EvalSet& train, const EvalSet& dev,
                                           const EvalSet& test, const FinetuneOptions& opts) {
  if (!(p_star >= range.p_min && p_star <= range.p_max)) {
    throw UsageError("final_prune_finetune: p_star " + std::to_string(p_star) + " outside [" +
                     std::to_string(range.p_min) + ", " + std::to_string(range.p_max) + "]");
  }
  return prune_and_finetune(merged_init, p_star, scale, train, dev, test, opts);
}

inline std::uint64_t data_seed(std::uint64_t seed) { return derive_seed(seed, "data"); }

// Phase 1: data, the two task adapters, and the pre-controller merge.
struct Phase1Result {
  ToyData data;
  AdapterTrainResult source;
  AdapterTrainResult target;
  MergedAdapterSet merged_init;
};

inline Phase1Result train_and_merge(const ToyTaskConfig& task, const LoraConfig& lora,
                                    const TrainConfig& train, std::uint64_t seed) {
  ToyData data = gen_toy_data(task, data_seed(seed));
  AdapterTrainResult source = train_adapter(data.backbone, prepare(data.backbone, data.source_train),
                                            lora, train, derive_seed(seed, "source-adapter"));
  AdapterTrainResult target = train_adapter(data.backbone, prepare(data.backbone, data.target_train),
                                            lora, train, derive_seed(seed, "target-adapter"));
  MergedAdapterSet merged = merge_adapter_sets({source.adapters, target.adapters});
  return {std::move(data), std::move(source), std::move(target), std::move(merged)};
}

// Everything phases 2 and 3 consume, with backbone contributions folded into
// the residuals.
struct GraspInputs {
  MergedAdapterSet merged_init;
  ImportanceScale scale;
  EvalSet train;
  EvalSet microdev;
  EvalSet dev;
  EvalSet test;
};

inline GraspInputs make_grasp_inputs(const ToyData& data, const MergedAdapterSet& merged_init,
                                     std::size_t m) {
  if (m > data.microdev_pool.size()) {
    throw UsageError("micro-dev size m = " + std::to_string(m) + " exceeds the target dev pool of " +
                     std::to_string(data.microdev_pool.size()));
  }
  Split slice = data.microdev_pool.head(m);
  return {merged_init,
          estimate_scale(slice.inputs),
          prepare(data.backbone, data.target_train),
          prepare(data.backbone, slice),
          prepare(data.backbone, data.dev),
          prepare(data.backbone, data.test)};
}

struct GraspRun {
  PolicyLearningResult policy;
  FinetuneResult final;
  double controller_seconds = 0.0;
  double final_seconds = 0.0;
};

// Phases 2 and 3: learn p* online, then prune once from the pre-controller
// merge and fine-tune.
inline GraspRun run_grasp(const GraspInputs& in, const ControllerConfig& ctl,
                          const TrainConfig& train, std::uint64_t seed, bool audit = false) {
  using clock = std::chrono::steady_clock;
  GraspRun run;
  PolicyLearningOptions popts{ctl, train, derive_seed(seed, "phase2"), audit, {}};
  const auto t0 = clock::now();
  run.policy = sparsity_policy_learning(in.merged_init, in.scale, in.train, in.microdev, popts);
  const auto t1 = clock::now();
  if (run.policy.aborted || !std::isfinite(run.policy.p_star)) {
    throw NumericalError("run_grasp: sparsity policy learning failed: " + run.policy.abort_reason);
  }
  FinetuneOptions fopts{train, derive_seed(seed, "phase3"), audit};
  run.final = final_prune_finetune(in.merged_init, run.policy.p_star, ctl, in.scale, in.train,
                                   in.dev, in.test, fopts);
  const auto t2 = clock::now();
  run.controller_seconds = std::chrono::duration<double>(t1 - t0).count();
  run.final_seconds = std::chrono::duration<double>(t2 - t1).count();
  return run;
}

}  // namespace grasp
