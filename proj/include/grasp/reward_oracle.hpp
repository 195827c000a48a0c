#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "grasp/controller.hpp"
#include "grasp/harness.hpp"

namespace grasp {

// Synthetic micro-dev reward as a function of the prune ratio: a mean curve
// plus Gaussian observation noise whose std may depend on p.
struct RewardLandscape {
  std::string name;
  std::function<double(double)> mean;
  std::function<double(double)> noise_std;
};

// R(p) = -(p - p_target)^2 + N(0, noise^2).
inline RewardLandscape quadratic_landscape(double p_target, double noise = 0.01) {
  return {"quadratic",
          [p_target](double p) { return -(p - p_target) * (p - p_target); },
          [noise](double) { return noise; }};
}

inline RewardLandscape flat_landscape(double level = -1.0, double noise = 0.0) {
  return {"flat", [level](double) { return level; }, [noise](double) { return noise; }};
}

// Broad hill toward heavy pruning plus a narrow peak at light pruning, with
// observation noise that grows as p approaches p_max. A controller that keeps
// exploring finds the narrow peak; one whose sigma collapses chases noisy
// wins up the hill.
inline RewardLandscape noisy_ceiling_landscape() {
  auto mean = [](double p) {
    const double hill = -0.5 * (p - 0.75) * (p - 0.75);
    const double x = (p - 0.10) / 0.02;
    const double peak = std::abs(p - 0.10) < 0.02 ? 0.06 * (1.0 - x * x) : -9.0;
    return std::max(hill, peak);
  };
  auto noise = [](double p) { return 0.005 + 0.01 * std::max(0.0, p - 0.6) / 0.2; };
  return {"noisy-ceiling", mean, noise};
}

// Controller environment backed by a landscape instead of a model. Losses
// are negated noisy rewards; commits only move the ratio.
class OracleEnvironment {
 public:
  OracleEnvironment(RewardLandscape landscape, double p_init, std::uint64_t noise_seed)
      : landscape_(std::move(landscape)), p_(p_init), rng_(noise_seed) {}

  double committed_loss() { return loss_at(p_); }
  double probe_loss(double p) { return loss_at(p); }
  void commit(double p) { p_ = p; }
  double committed_ratio() const noexcept { return p_; }

 private:
  double loss_at(double p) {
    const double sd = landscape_.noise_std(p);
    double r = landscape_.mean(p);
    if (sd > 0.0) r += std::normal_distribution<double>(0.0, sd)(rng_);
    return -r;
  }

  RewardLandscape landscape_;
  double p_;
  std::mt19937_64 rng_;
};

struct OracleRun {
  std::vector<ControllerRecord> log;
  double p_star = 0.0;
  PolicyState final_policy;
};

inline OracleRun run_controller_on_oracle(const RewardLandscape& landscape,
                                          const ControllerConfig& cfg, std::size_t rounds,
                                          std::uint64_t seed) {
  OracleRun out;
  PolicyState policy = init_policy(cfg);
  OracleEnvironment env(landscape, policy.p_curr, derive_seed(seed, "oracle-noise"));
  std::mt19937_64 rng(derive_seed(seed, "oracle-policy"));
  for (std::size_t r = 0; r < rounds; ++r) {
    RoundResult res = controller_round(policy, env, cfg, rng, r, (r + 1) * cfg.interval);
    policy = res.policy;
    out.log.push_back(std::move(res.record));
  }
  out.final_policy = policy;
  if (!out.log.empty()) out.p_star = select_p_star(out.log);
  return out;
}

}  // namespace grasp
