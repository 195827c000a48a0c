#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "grasp/controller.hpp"
#include "grasp/error.hpp"
#include "grasp/format.hpp"
#include "grasp/harness.hpp"

namespace grasp {

inline constexpr const char* kReferenceBand = "3.90× to 7.45×";

struct GridSpec {
  std::vector<double> ratios{0.10, 0.20, 0.30, 0.40, 0.50, 0.60, 0.70, 0.80};

  void validate() const {
    if (ratios.empty()) throw UsageError("GridSpec: no ratios");
    for (std::size_t i = 0; i < ratios.size(); ++i) {
      if (!(ratios[i] >= 0.0 && ratios[i] <= 1.0)) {
        throw UsageError("GridSpec: ratio " + format_real(ratios[i]) + " outside [0, 1]");
      }
      if (i > 0 && !(ratios[i] > ratios[i - 1])) {
        throw UsageError("GridSpec: ratios must be strictly increasing");
      }
    }
  }
};

struct GridPoint {
  double p = 0.0;
  bool failed = false;
  std::string error;
  FinetuneResult result;
  double seconds = 0.0;
};

struct GridResult {
  std::vector<GridPoint> points;
  std::optional<std::size_t> best_index;
  double best_p = std::numeric_limits<double>::quiet_NaN();
  std::size_t total_steps = 0;
  std::size_t total_budget_steps = 0;
  double total_seconds = 0.0;
};

// One fixed-mask run per ratio from the same merged init and training
// config the GRASP final run uses. Best ratio by dev loss, ties to smaller p.
inline GridResult grid_search(const GraspInputs& in, const GridSpec& grid, const TrainConfig& train,
                              std::uint64_t seed, bool audit = false) {
  grid.validate();
  using clock = std::chrono::steady_clock;
  GridResult out;
  for (double p : grid.ratios) {
    GridPoint pt;
    pt.p = p;
    const auto t0 = clock::now();
    try {
      FinetuneOptions opts{train, derive_seed(seed, "phase3"), audit};
      pt.result = prune_and_finetune(in.merged_init, p, in.scale, in.train, in.dev, in.test, opts);
    } catch (const NumericalError& e) {
      pt.failed = true;
      pt.error = e.what();
    }
    pt.seconds = std::chrono::duration<double>(clock::now() - t0).count();
    out.total_seconds += pt.seconds;
    if (!pt.failed) {
      out.total_steps += pt.result.steps;
      out.total_budget_steps += pt.result.budget_steps;
      if (!out.best_index || pt.result.dev_loss < out.points[*out.best_index].result.dev_loss) {
        out.best_index = out.points.size();
      }
    }
    out.points.push_back(std::move(pt));
  }
  if (out.best_index) out.best_p = out.points[*out.best_index].p;
  return out;
}

inline std::string grid_csv(const GridResult& grid) {
  std::ostringstream out;
  out << "p,dev_loss,test_loss,steps\n";
  for (const auto& pt : grid.points) {
    const double nan = std::numeric_limits<double>::quiet_NaN();
    out << format_real(pt.p) << ',' << format_real(pt.failed ? nan : pt.result.dev_loss) << ','
        << format_real(pt.failed ? nan : pt.result.test_loss) << ','
        << (pt.failed ? 0 : pt.result.steps) << '\n';
  }
  return out.str();
}

struct BaselineRow {
  std::string method;
  double dev_loss = 0.0;
  double test_loss = 0.0;
};

// Zero-adapter (frozen backbone), target-only adapter, and the merged
// adapters fine-tuned without pruning.
inline std::vector<BaselineRow> run_noprune_baselines(const MergedAdapterSet& target,
                                                      const GraspInputs& in,
                                                      const TrainConfig& train,
                                                      std::uint64_t seed) {
  std::vector<BaselineRow> rows;
  MergedAdapterSet zero = target;
  for (std::size_t s = 0; s < zero.site_count(); ++s) {
    auto& site = zero.site(s);
    site.b = Matrix(site.b.rows(), site.b.cols());
  }
  rows.push_back({"zero-adapter", dataset_loss(zero, in.dev), dataset_loss(zero, in.test)});
  rows.push_back({"target-only", dataset_loss(target, in.dev), dataset_loss(target, in.test)});
  FinetuneOptions opts{train, derive_seed(seed, "phase3"), false};
  const FinetuneResult merged =
      prune_and_finetune(in.merged_init, 0.0, in.scale, in.train, in.dev, in.test, opts);
  rows.push_back({"merge-no-prune", merged.dev_loss, merged.test_loss});
  return rows;
}

inline std::string baselines_csv(const std::vector<BaselineRow>& rows) {
  std::ostringstream out;
  out << "method,dev_loss,test_loss\n";
  for (const auto& r : rows) {
    out << r.method << ',' << format_real(r.dev_loss) << ',' << format_real(r.test_loss) << '\n';
  }
  return out.str();
}

struct MethodCost {
  std::size_t runs = 0;
  std::size_t steps = 0;
  double seconds = 0.0;
};

struct RuntimeReport {
  std::string method;
  std::string dataset;
  std::size_t runs = 0;
  std::size_t steps = 0;
  double seconds = 0.0;
  double speedup = 1.0;       // grid seconds / method seconds
  double step_speedup = 1.0;  // grid steps / method steps
};

// Grid search is the reference row.
inline std::pair<RuntimeReport, RuntimeReport> runtime_report(const MethodCost& grasp,
                                                              const MethodCost& grid,
                                                              const std::string& dataset) {
  if (grasp.steps == 0 || grid.steps == 0) throw UsageError("runtime_report: a method has no steps");
  if (!(grasp.seconds > 0.0) || !(grid.seconds > 0.0)) {
    throw UsageError("runtime_report: durations must be positive");
  }
  RuntimeReport g{"Adaptive LoRA (grid search)", dataset, grid.runs, grid.steps, grid.seconds, 1.0, 1.0};
  RuntimeReport r{"GRASP LoRA (policy learning + final run)",
                  dataset,
                  grasp.runs,
                  grasp.steps,
                  grasp.seconds,
                  grid.seconds / grasp.seconds,
                  static_cast<double>(grid.steps) / static_cast<double>(grasp.steps)};
  return {g, r};
}

inline std::string runtime_csv(const std::pair<RuntimeReport, RuntimeReport>& rows) {
  std::ostringstream out;
  out << "method,dataset,runs,runtime,speedup,steps,step_speedup\n";
  for (const RuntimeReport* r : {&rows.first, &rows.second}) {
    char runtime[32];
    char speed[32];
    char step_speed[32];
    std::snprintf(runtime, sizeof runtime, "%.3fs", r->seconds);
    std::snprintf(speed, sizeof speed, "%.2f", r->speedup);
    std::snprintf(step_speed, sizeof step_speed, "%.2f", r->step_speedup);
    out << r->method << ',' << r->dataset << ',' << r->runs << ',' << runtime << ',' << speed
        << "×," << r->steps << ',' << step_speed << "×\n";
  }
  return out.str();
}

struct RegularizerCell {
  std::string variant;
  double beta = 0.0;
  double tau = 0.0;
};

inline std::vector<RegularizerCell> default_regularizer_sweep() {
  return {{"default", 0.05, 0.01},      {"no entropy bonus", 0.05, 0.0},
          {"strong entropy bonus", 0.05, 0.05}, {"weak anchoring", 0.01, 0.01},
          {"no anchoring", 0.0, 0.01},  {"no regularization", 0.0, 0.0}};
}

struct CellOutcome {
  double p_star = 0.0;
  double dev_loss = std::numeric_limits<double>::quiet_NaN();
};

struct RegularizerRow {
  RegularizerCell cell;
  std::vector<CellOutcome> per_seed;
  double p_star_mean = 0.0;
  double dev_loss_mean = 0.0;
};

struct RegularizerTable {
  std::vector<RegularizerRow> rows;
  // Set when the sweep holds both the default cell and (0, 0): whether the
  // unregularized mean p* sits above the default one.
  std::optional<bool> drift_toward_pmax;
};

using RegularizerRunner = std::function<CellOutcome(const ControllerConfig&, std::uint64_t seed)>;

namespace detail {

inline std::pair<double, double> outcome_means(const std::vector<CellOutcome>& v) {
  double p = 0.0;
  double d = 0.0;
  for (const auto& o : v) {
    p += o.p_star;
    d += o.dev_loss;
  }
  const double n = static_cast<double>(v.size());
  return {p / n, d / n};
}

}  // namespace detail

inline RegularizerTable ablate_regularizers(const ControllerConfig& base,
                                            const std::vector<RegularizerCell>& sweep,
                                            const std::vector<std::uint64_t>& seeds,
                                            const RegularizerRunner& run) {
  if (seeds.empty() && !sweep.empty()) throw UsageError("ablate_regularizers: empty seed list");
  RegularizerTable table;
  std::optional<double> default_p;
  std::optional<double> bare_p;
  for (const auto& cell : sweep) {
    ControllerConfig cfg = base;
    cfg.beta = cell.beta;
    cfg.tau_ent = cell.tau;
    RegularizerRow row{cell, {}, 0.0, 0.0};
    for (auto seed : seeds) row.per_seed.push_back(run(cfg, seed));
    std::tie(row.p_star_mean, row.dev_loss_mean) = detail::outcome_means(row.per_seed);
    if (cell.beta == 0.05 && cell.tau == 0.01) default_p = row.p_star_mean;
    if (cell.beta == 0.0 && cell.tau == 0.0) bare_p = row.p_star_mean;
    table.rows.push_back(std::move(row));
  }
  if (default_p && bare_p) table.drift_toward_pmax = *bare_p > *default_p;
  return table;
}

inline std::string regularizer_csv(const RegularizerTable& table) {
  std::ostringstream out;
  out << "variant,beta,tau,p_star,dev_loss,seeds\n";
  for (const auto& r : table.rows) {
    out << r.cell.variant << ',' << format_real(r.cell.beta) << ',' << format_real(r.cell.tau)
        << ',' << format_real(r.p_star_mean) << ',' << format_real(r.dev_loss_mean) << ','
        << r.per_seed.size() << '\n';
  }
  return out.str();
}

struct MicrodevRow {
  std::size_t m = 0;
  std::vector<CellOutcome> per_seed;
  double p_star_mean = 0.0;
  double dev_loss_mean = 0.0;
  bool non_micro = false;  // m reaches the target training-set size
};

using MicrodevRunner = std::function<CellOutcome(std::size_t m, std::uint64_t seed)>;

// `pool_size` bounds m; slices are taken as prefixes of one pool so smaller
// slices are nested in larger ones.
inline std::vector<MicrodevRow> ablate_microdev(const std::vector<std::size_t>& sizes,
                                                const std::vector<std::uint64_t>& seeds,
                                                std::size_t pool_size, std::size_t target_train_n,
                                                const MicrodevRunner& run) {
  if (seeds.empty() && !sizes.empty()) throw UsageError("ablate_microdev: empty seed list");
  for (auto m : sizes) {
    if (m == 0) throw UsageError("ablate_microdev: m must be >= 1");
    if (m > pool_size) {
      throw UsageError("ablate_microdev: m = " + std::to_string(m) +
                       " exceeds the target dev pool of " + std::to_string(pool_size));
    }
  }
  std::vector<MicrodevRow> rows;
  for (auto m : sizes) {
    MicrodevRow row;
    row.m = m;
    row.non_micro = m >= target_train_n;
    for (auto seed : seeds) row.per_seed.push_back(run(m, seed));
    std::tie(row.p_star_mean, row.dev_loss_mean) = detail::outcome_means(row.per_seed);
    rows.push_back(std::move(row));
  }
  return rows;
}

inline std::string microdev_csv(const std::vector<MicrodevRow>& rows) {
  std::ostringstream out;
  out << "m,p_star,dev_loss,non_micro,seeds\n";
  for (const auto& r : rows) {
    out << r.m << ',' << format_real(r.p_star_mean) << ',' << format_real(r.dev_loss_mean) << ','
        << (r.non_micro ? 1 : 0) << ',' << r.per_seed.size() << '\n';
  }
  return out.str();
}

struct RollingPoint {
  std::size_t round = 0;
  double mean = 0.0;
  double std = 0.0;
};

// Trailing-window mean and population std of the committed ratio each round
// was evaluated at (p_curr_before).
inline std::vector<RollingPoint> rolling_pcurr(std::span<const ControllerRecord> log,
                                               std::size_t window = 10) {
  if (log.empty()) throw UsageError("rolling_pcurr: empty controller log");
  if (window == 0) throw UsageError("rolling_pcurr: window must be >= 1");
  std::vector<RollingPoint> out;
  for (std::size_t i = 0; i < log.size(); ++i) {
    const std::size_t begin = i + 1 >= window ? i + 1 - window : 0;
    const double n = static_cast<double>(i + 1 - begin);
    double mean = 0.0;
    for (std::size_t j = begin; j <= i; ++j) mean += log[j].p_curr_before;
    mean /= n;
    double var = 0.0;
    for (std::size_t j = begin; j <= i; ++j) {
      const double d = log[j].p_curr_before - mean;
      var += d * d;
    }
    out.push_back({log[i].round, mean, std::sqrt(var / n)});
  }
  return out;
}

inline std::string rolling_csv(const std::vector<RollingPoint>& series) {
  std::ostringstream out;
  out << "round,mean,std\n";
  for (const auto& pt : series) {
    out << pt.round << ',' << format_real(pt.mean) << ',' << format_real(pt.std) << '\n';
  }
  return out.str();
}

// Phase-1 results per seed, shared by every ablation cell on that seed.
class ToyPipeline {
 public:
  ToyPipeline(ToyTaskConfig task, LoraConfig lora, TrainConfig train)
      : task_(task), lora_(lora), train_(train) {}

  const Phase1Result& phase1(std::uint64_t seed) {
    auto it = cache_.find(seed);
    if (it == cache_.end()) it = cache_.emplace(seed, train_and_merge(task_, lora_, train_, seed)).first;
    return it->second;
  }

  CellOutcome run(const ControllerConfig& ctl, std::uint64_t seed) {
    const Phase1Result& p1 = phase1(seed);
    const GraspInputs in = make_grasp_inputs(p1.data, p1.merged_init, ctl.microdev);
    const GraspRun r = run_grasp(in, ctl, train_, seed);
    return {r.policy.p_star, r.final.dev_loss};
  }

  const ToyTaskConfig& task() const noexcept { return task_; }
  const TrainConfig& train() const noexcept { return train_; }

 private:
  ToyTaskConfig task_;
  LoraConfig lora_;
  TrainConfig train_;
  std::map<std::uint64_t, Phase1Result> cache_;
};

}  // namespace grasp
