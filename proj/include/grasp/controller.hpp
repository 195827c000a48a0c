#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "grasp/error.hpp"

namespace grasp {

inline constexpr double kSigmaFloor = 1e-3;

// Controller hyperparameters. Defaults follow the shared training table:
// prune range [0.10, 0.80], p_init 0.40, eta 0.05, K 10, C 3, m 16,
// delta_max 0.10, with beta 0.05 and tau 0.01 as the regularization defaults.
struct ControllerConfig {
  double p_min = 0.10;
  double p_max = 0.80;
  double p_init = 0.40;
  std::size_t interval = 10;    // K: optimizer steps between rounds
  std::size_t candidates = 3;   // C
  std::size_t microdev = 16;    // m
  double eta = 0.05;
  double beta = 0.05;
  double tau_ent = 0.01;
  double delta_max = 0.10;
  std::size_t epochs = 10;
  double sigma_floor = kSigmaFloor;

  void validate() const {
    auto fail = [](const std::string& what) { throw UsageError("ControllerConfig: " + what); };
    if (!(p_min >= 0.0 && p_min < p_max && p_max <= 1.0)) fail("need 0 <= p_min < p_max <= 1");
    if (!(p_init >= p_min && p_init <= p_max)) fail("p_init outside [p_min, p_max]");
    if (interval < 1 || candidates < 1 || microdev < 1) fail("K, C and m must be >= 1");
    if (!(delta_max > 0.0)) fail("delta_max must be > 0");
    if (!(eta > 0.0)) fail("eta must be > 0");
    if (!(beta >= 0.0)) fail("beta must be >= 0");
    if (!(tau_ent >= 0.0)) fail("tau_ent must be >= 0");
    if (!(sigma_floor > 0.0)) fail("sigma_floor must be > 0");
  }
};

struct PolicyState {
  double mu = 0.0;
  double sigma = 0.0;
  double p_curr = 0.0;

  friend bool operator==(const PolicyState&, const PolicyState&) = default;
};

struct Candidate {
  double z = 0.0;                // raw Gaussian draw, used in the score terms
  double p = 0.0;                // clamped ratio, used for mask and reward
  double reward = 0.0;           // R~(p)
  double relative_reward = 0.0;  // R_i = R~(p) - R~(p_curr)
  bool valid = true;             // false when the probe produced a non-finite loss
};

struct ControllerRecord {
  std::size_t round = 0;
  std::size_t step = 0;
  double p_curr_before = 0.0;
  double baseline_reward = 0.0;
  std::vector<Candidate> candidates;
  bool committed = false;
  bool failed = false;
  double p_curr_after = 0.0;
  double mu_after = 0.0;
  double sigma_after = 0.0;
};

inline PolicyState init_policy(const ControllerConfig& cfg) {
  cfg.validate();
  return {cfg.p_init, (cfg.p_max - cfg.p_min) / 6.0, cfg.p_init};
}

struct CandidateDraw {
  double z;
  double p;
};

inline std::vector<CandidateDraw> sample_candidates(const PolicyState& policy,
                                                    const ControllerConfig& cfg,
                                                    std::mt19937_64& rng) {
  std::normal_distribution<double> draw(policy.mu, policy.sigma);
  std::vector<CandidateDraw> out;
  out.reserve(cfg.candidates);
  for (std::size_t i = 0; i < cfg.candidates; ++i) {
    const double z = draw(rng);
    out.push_back({z, std::clamp(z, cfg.p_min, cfg.p_max)});
  }
  return out;
}

inline double reward_from_loss(double loss) {
  if (!std::isfinite(loss)) throw NumericalError("reward_from_loss: non-finite micro-dev loss");
  return -loss;
}

inline double relative_reward(double reward_candidate, double reward_baseline) {
  return reward_candidate - reward_baseline;
}

inline std::vector<double> centered_advantages(std::span<const double> rewards) {
  if (rewards.empty()) throw UsageError("centered_advantages: no rewards");
  const double mean =
      std::accumulate(rewards.begin(), rewards.end(), 0.0) / static_cast<double>(rewards.size());
  std::vector<double> out(rewards.size());
  for (std::size_t i = 0; i < rewards.size(); ++i) out[i] = rewards[i] - mean;
  return out;
}

struct PolicyGradient {
  double mu = 0.0;
  double sigma = 0.0;
};

// Score-function estimators over raw draws z with advantages A:
//   g_mu    = mean(A_i (z_i - mu) / sigma^2)
//   g_sigma = mean(A_i ((z_i - mu)^2 - sigma^2) / sigma^3)
inline PolicyGradient score_gradients(std::span<const double> z, std::span<const double> advantages,
                                      double mu, double sigma,
                                      double sigma_floor = kSigmaFloor) {
  if (z.size() != advantages.size()) throw DimensionError("score_gradients: length mismatch");
  if (z.empty()) throw UsageError("score_gradients: no samples");
  if (!(sigma >= sigma_floor)) throw UsageError("score_gradients: sigma below floor");
  const double s2 = sigma * sigma;
  const double s3 = s2 * sigma;
  PolicyGradient g;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double d = z[i] - mu;
    g.mu += advantages[i] * d / s2;
    g.sigma += advantages[i] * (d * d - s2) / s3;
  }
  const double n = static_cast<double>(z.size());
  g.mu /= n;
  g.sigma /= n;
  return g;
}

// Mean step with anchoring toward p_curr, sigma step with the constant
// exploration offset, then sigma floor and mean clamp.
inline PolicyState policy_update(const PolicyState& policy, double g_mu, double g_sigma,
                                 const ControllerConfig& cfg) {
  PolicyState next = policy;
  next.mu = policy.mu + cfg.eta * g_mu - cfg.eta * cfg.beta * (policy.mu - policy.p_curr);
  next.sigma = std::max(cfg.sigma_floor, policy.sigma + cfg.eta * g_sigma + cfg.tau_ent);
  next.mu = std::clamp(next.mu, cfg.p_min, cfg.p_max);
  return next;
}

struct CommitDecision {
  bool committed = false;
  double p_new = 0.0;
  std::size_t best_index = 0;
};

inline CommitDecision commit_decision(std::span<const double> ratios,
                                      std::span<const double> relative_rewards, double p_curr,
                                      const ControllerConfig& cfg) {
  if (ratios.empty() || ratios.size() != relative_rewards.size()) {
    throw UsageError("commit_decision: need one relative reward per candidate");
  }
  const auto best = static_cast<std::size_t>(
      std::max_element(relative_rewards.begin(), relative_rewards.end()) -
      relative_rewards.begin());
  CommitDecision out{false, p_curr, best};
  if (relative_rewards[best] < 0.0) return out;
  const double step = std::clamp(ratios[best] - p_curr, -cfg.delta_max, cfg.delta_max);
  out.committed = true;
  out.p_new = std::clamp(p_curr + step, cfg.p_min, cfg.p_max);
  return out;
}

// What a controller round needs from the model it steers. Losses are on the
// fixed micro-dev slice; probe_loss must leave the committed parameters
// untouched.
template <class Env>
concept ProbeEnvironment = requires(Env& env, double p) {
  { env.committed_loss() } -> std::convertible_to<double>;
  { env.probe_loss(p) } -> std::convertible_to<double>;
  env.commit(p);
};

struct RoundResult {
  PolicyState policy;
  ControllerRecord record;
};

template <ProbeEnvironment Env>
RoundResult controller_round(const PolicyState& policy, Env& env, const ControllerConfig& cfg,
                             std::mt19937_64& rng, std::size_t round, std::size_t step) {
  ControllerRecord rec;
  rec.round = round;
  rec.step = step;
  rec.p_curr_before = policy.p_curr;
  rec.p_curr_after = policy.p_curr;
  rec.mu_after = policy.mu;
  rec.sigma_after = policy.sigma;

  const double base_loss = env.committed_loss();
  if (!std::isfinite(base_loss)) {
    rec.failed = true;
    rec.baseline_reward = std::numeric_limits<double>::quiet_NaN();
    return {policy, rec};
  }
  rec.baseline_reward = reward_from_loss(base_loss);

  std::vector<double> z;
  std::vector<double> ratios;
  std::vector<double> rel;
  for (const auto& draw : sample_candidates(policy, cfg, rng)) {
    Candidate c;
    c.z = draw.z;
    c.p = draw.p;
    const double loss = env.probe_loss(draw.p);
    if (std::isfinite(loss)) {
      c.reward = reward_from_loss(loss);
      c.relative_reward = relative_reward(c.reward, rec.baseline_reward);
      z.push_back(c.z);
      ratios.push_back(c.p);
      rel.push_back(c.relative_reward);
    } else {
      c.valid = false;
      c.reward = std::numeric_limits<double>::quiet_NaN();
      c.relative_reward = std::numeric_limits<double>::quiet_NaN();
    }
    rec.candidates.push_back(c);
  }
  if (rel.empty()) {
    rec.failed = true;
    return {policy, rec};
  }

  const auto adv = centered_advantages(rel);
  const auto grad = score_gradients(z, adv, policy.mu, policy.sigma, cfg.sigma_floor);
  PolicyState next = policy_update(policy, grad.mu, grad.sigma, cfg);

  const auto decision = commit_decision(ratios, rel, policy.p_curr, cfg);
  if (decision.committed) {
    next.p_curr = decision.p_new;
    env.commit(decision.p_new);
  }
  rec.committed = decision.committed;
  rec.p_curr_after = next.p_curr;
  rec.mu_after = next.mu;
  rec.sigma_after = next.sigma;
  return {next, rec};
}

struct PStarChoice {
  double p = 0.0;
  double implied_reward = 0.0;
  std::size_t round = 0;
};

// Highest implied micro-dev reward over every logged (p_curr, baseline) and
// (p_i, baseline + R_i). Ties go to the earlier round, then the smaller p.
inline PStarChoice select_p_star_detail(std::span<const ControllerRecord> log) {
  if (log.empty()) throw UsageError("select_p_star: empty controller log");
  bool found = false;
  PStarChoice best;
  auto offer = [&](double p, double implied, std::size_t round) {
    if (!std::isfinite(implied)) return;
    if (!found || implied > best.implied_reward ||
        (implied == best.implied_reward && round == best.round && p < best.p)) {
      best = {p, implied, round};
      found = true;
    }
  };
  for (const auto& rec : log) {
    if (rec.failed) continue;
    offer(rec.p_curr_before, rec.baseline_reward, rec.round);
    for (const auto& c : rec.candidates)
      if (c.valid) offer(c.p, rec.baseline_reward + c.relative_reward, rec.round);
  }
  if (!found) throw UsageError("select_p_star: no successful round in log");
  return best;
}

inline double select_p_star(std::span<const ControllerRecord> log) {
  return select_p_star_detail(log).p;
}

}  // namespace grasp
