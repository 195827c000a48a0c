#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <numbers>
#include <limits>
#include <numeric>
#include <random>
#include <vector>

#include "grasp/controller.hpp"
#include "grasp/reward_oracle.hpp"

using namespace grasp;

namespace {

// Scripted environment: loss per ratio from a function, with a record of
// every probe and commit.
struct FakeEnv {
  std::function<double(double)> loss;
  double p_committed = 0.0;
  std::vector<double> probes;
  std::vector<double> commits;
  double base_override = std::numeric_limits<double>::quiet_NaN();
  bool use_override = false;

  FakeEnv(std::function<double(double)> f, double p0) : loss(std::move(f)), p_committed(p0) {}

  double committed_loss() { return use_override ? base_override : loss(p_committed); }
  double probe_loss(double p) {
    probes.push_back(p);
    return loss(p);
  }
  void commit(double p) {
    commits.push_back(p);
    p_committed = p;
  }
};

double log_density(double z, double mu, double sigma) {
  return -0.5 * std::log(2.0 * std::numbers::pi) - std::log(sigma) - (z - mu) * (z - mu) / (2.0 * sigma * sigma);
}

}  // namespace

TEST(InitPolicy, DefaultsAndFormula) {
  ControllerConfig cfg;
  PolicyState p = init_policy(cfg);
  EXPECT_DOUBLE_EQ(p.mu, 0.40);
  EXPECT_NEAR(p.sigma, 0.116667, 1e-6);
  EXPECT_DOUBLE_EQ(p.p_curr, 0.40);
  cfg.p_min = 0.0;
  cfg.p_max = 1.0;
  cfg.p_init = 0.5;
  EXPECT_DOUBLE_EQ(init_policy(cfg).sigma, 1.0 / 6.0);
}

TEST(ControllerConfig, Validation) {
  ControllerConfig cfg;
  cfg.p_min = cfg.p_max = 0.4;
  EXPECT_THROW(init_policy(cfg), UsageError);
  cfg = {};
  cfg.p_init = 0.9;
  EXPECT_THROW(cfg.validate(), UsageError);
  cfg = {};
  cfg.candidates = 0;
  EXPECT_THROW(cfg.validate(), UsageError);
  cfg = {};
  cfg.delta_max = 0.0;
  EXPECT_THROW(cfg.validate(), UsageError);
  cfg = {};
  cfg.beta = -0.1;
  EXPECT_THROW(cfg.validate(), UsageError);
  cfg = {};
  cfg.tau_ent = -0.1;
  EXPECT_THROW(cfg.validate(), UsageError);
  EXPECT_NO_THROW(ControllerConfig{}.validate());
}

TEST(SampleCandidates, ClampAndDeterminism) {
  ControllerConfig cfg;
  cfg.candidates = 64;
  PolicyState policy{0.75, 0.3, 0.4};
  std::mt19937_64 a(9), b(9);
  auto x = sample_candidates(policy, cfg, a);
  auto y = sample_candidates(policy, cfg, b);
  ASSERT_EQ(x.size(), 64u);
  bool saw_clamp = false;
  for (std::size_t i = 0; i < x.size(); ++i) {
    EXPECT_EQ(x[i].z, y[i].z);
    EXPECT_GE(x[i].p, cfg.p_min);
    EXPECT_LE(x[i].p, cfg.p_max);
    EXPECT_EQ(x[i].p, std::clamp(x[i].z, cfg.p_min, cfg.p_max));
    saw_clamp |= x[i].z > cfg.p_max;
  }
  EXPECT_TRUE(saw_clamp);
}

TEST(Rewards, SignAndRelative) {
  EXPECT_DOUBLE_EQ(reward_from_loss(1.25), -1.25);
  EXPECT_DOUBLE_EQ(reward_from_loss(0.0), 0.0);
  EXPECT_DOUBLE_EQ(reward_from_loss(-0.3), 0.3);
  EXPECT_THROW(reward_from_loss(std::nan("")), NumericalError);
  EXPECT_NEAR(relative_reward(-1.2, -1.3), 0.1, 1e-15);
  EXPECT_EQ(relative_reward(-0.7, -0.7), 0.0);
  EXPECT_LT(relative_reward(-1.0, -0.5), 0.0);
}

TEST(CenteredAdvantages, Examples) {
  EXPECT_EQ(centered_advantages(std::vector<double>{1, 2, 3}), (std::vector<double>{-1, 0, 1}));
  EXPECT_EQ(centered_advantages(std::vector<double>{0.4, 0.4}), (std::vector<double>{0, 0}));
  auto a = centered_advantages(std::vector<double>{0.1, -0.3});
  EXPECT_NEAR(a[0], 0.2, 1e-15);
  EXPECT_NEAR(a[1], -0.2, 1e-15);
  EXPECT_THROW(centered_advantages(std::vector<double>{}), UsageError);
  std::mt19937_64 rng(3);
  std::normal_distribution<double> d;
  for (int t = 0; t < 100; ++t) {
    std::vector<double> r(1 + t % 7);
    for (auto& x : r) x = d(rng);
    auto c = centered_advantages(r);
    EXPECT_LT(std::abs(std::accumulate(c.begin(), c.end(), 0.0)), 1e-12);
  }
}

TEST(ScoreGradients, HandExamples) {
  const double mu = 0.4, sigma = 0.1;
  std::vector<double> z{mu + sigma, mu - sigma};
  std::vector<double> adv{1.0, -1.0};
  auto g = score_gradients(z, adv, mu, sigma);
  EXPECT_NEAR(g.mu, 10.0, 1e-9);
  EXPECT_NEAR(g.sigma, 0.0, 1e-9);
  auto zero = score_gradients(z, std::vector<double>{0.0, 0.0}, mu, sigma);
  EXPECT_EQ(zero.mu, 0.0);
  EXPECT_EQ(zero.sigma, 0.0);
  auto at_mean = score_gradients(std::vector<double>{mu}, std::vector<double>{3.0}, mu, sigma);
  EXPECT_EQ(at_mean.mu, 0.0);
  EXPECT_THROW(score_gradients(z, adv, mu, 5e-4), UsageError);
  EXPECT_THROW(score_gradients(z, std::vector<double>{1.0}, mu, sigma), DimensionError);
}

TEST(ScoreGradients, MatchLogDensityFiniteDifferences) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> um(0.1, 0.8), us(0.02, 0.3), uz(-1.5, 1.5);
  for (int t = 0; t < 100; ++t) {
    const double mu = um(rng), sigma = us(rng), z = mu + uz(rng) * sigma * 2.0;
    const double h = 1e-6 * sigma;
    const double fd_mu = (log_density(z, mu + h, sigma) - log_density(z, mu - h, sigma)) / (2 * h);
    const double fd_sigma = (log_density(z, mu, sigma + h) - log_density(z, mu, sigma - h)) / (2 * h);
    auto g = score_gradients(std::vector<double>{z}, std::vector<double>{1.0}, mu, sigma);
    EXPECT_LT(std::abs(g.mu - fd_mu), 1e-6 * std::max(1.0, std::abs(fd_mu)));
    EXPECT_LT(std::abs(g.sigma - fd_sigma), 1e-6 * std::max(1.0, std::abs(fd_sigma)));
  }
}

TEST(PolicyUpdate, HandExamples) {
  ControllerConfig cfg;
  PolicyState p{0.5, 0.05, 0.4};
  auto n = policy_update(p, 0.0, 0.0, cfg);
  EXPECT_NEAR(n.mu, 0.49975, 1e-15);
  EXPECT_NEAR(n.sigma, 0.06, 1e-15);
  EXPECT_EQ(n.p_curr, 0.4);
  // sigma + eta*g + tau = 0.0004 hits the floor.
  cfg.tau_ent = 0.0;
  auto f = policy_update({0.5, 0.0014, 0.5}, 0.0, -0.02, cfg);
  EXPECT_NEAR(0.0014 + 0.05 * -0.02, 0.0004, 1e-15);
  EXPECT_EQ(f.sigma, 1e-3);
  auto c = policy_update({0.79, 0.1, 0.79}, 100.0, 0.0, cfg);
  EXPECT_EQ(c.mu, cfg.p_max);
}

TEST(CommitDecision, Examples) {
  ControllerConfig cfg;
  auto d1 = commit_decision(std::vector<double>{0.55}, std::vector<double>{0.02}, 0.40, cfg);
  EXPECT_TRUE(d1.committed);
  EXPECT_NEAR(d1.p_new, 0.50, 1e-15);
  auto d2 = commit_decision(std::vector<double>{0.35}, std::vector<double>{0.01}, 0.40, cfg);
  EXPECT_TRUE(d2.committed);
  EXPECT_NEAR(d2.p_new, 0.35, 1e-15);
  auto d3 = commit_decision(std::vector<double>{0.3, 0.5, 0.6}, std::vector<double>{-0.01, -0.01, -0.01},
                            0.40, cfg);
  EXPECT_FALSE(d3.committed);
  EXPECT_EQ(d3.p_new, 0.40);
  auto d4 = commit_decision(std::vector<double>{0.02}, std::vector<double>{0.3}, 0.15, cfg);
  EXPECT_TRUE(d4.committed);
  EXPECT_EQ(d4.p_new, 0.10);
  auto d5 = commit_decision(std::vector<double>{0.7, 0.45}, std::vector<double>{-0.2, 0.0}, 0.40, cfg);
  EXPECT_TRUE(d5.committed);
  EXPECT_EQ(d5.best_index, 1u);
}

TEST(ControllerRound, SequenceAndRecord) {
  ControllerConfig cfg;
  FakeEnv env{[](double p) { return (p - 0.6) * (p - 0.6); }, 0.40};
  PolicyState policy = init_policy(cfg);
  std::mt19937_64 rng(5);
  auto r = controller_round(policy, env, cfg, rng, 0, 10);
  EXPECT_EQ(r.record.p_curr_before, cfg.p_init);
  EXPECT_DOUBLE_EQ(r.record.baseline_reward, -0.04);
  ASSERT_EQ(r.record.candidates.size(), cfg.candidates);
  ASSERT_EQ(env.probes.size(), cfg.candidates);
  double best = -1e9;
  for (std::size_t i = 0; i < cfg.candidates; ++i) {
    const auto& c = r.record.candidates[i];
    EXPECT_EQ(c.p, env.probes[i]);
    EXPECT_EQ(c.relative_reward, c.reward - r.record.baseline_reward);
    best = std::max(best, c.relative_reward);
  }
  EXPECT_EQ(r.record.committed, best >= 0.0);
  EXPECT_EQ(env.commits.size(), r.record.committed ? 1u : 0u);
  EXPECT_EQ(r.record.p_curr_after, r.policy.p_curr);
  EXPECT_EQ(r.record.mu_after, r.policy.mu);
  EXPECT_EQ(r.record.sigma_after, r.policy.sigma);
  EXPECT_LE(std::abs(r.record.p_curr_after - r.record.p_curr_before), cfg.delta_max + 1e-12);
}

TEST(ControllerRound, PolicyUpdatesEvenWithoutCommit) {
  ControllerConfig cfg;
  // Every probe is worse than the committed state.
  FakeEnv env{[](double) { return 1.0; }, 0.40};
  env.use_override = true;
  env.base_override = 0.5;
  PolicyState policy = init_policy(cfg);
  std::mt19937_64 rng(6);
  auto r = controller_round(policy, env, cfg, rng, 0, 10);
  EXPECT_FALSE(r.record.committed);
  EXPECT_TRUE(env.commits.empty());
  EXPECT_EQ(r.policy.p_curr, policy.p_curr);
  EXPECT_NEAR(r.policy.sigma, policy.sigma + cfg.tau_ent, 1e-15);
}

TEST(ControllerRound, NanBaselineFailsRound) {
  ControllerConfig cfg;
  FakeEnv env{[](double) { return 0.1; }, 0.40};
  env.use_override = true;
  PolicyState policy = init_policy(cfg);
  std::mt19937_64 rng(7);
  auto r = controller_round(policy, env, cfg, rng, 3, 40);
  EXPECT_TRUE(r.record.failed);
  EXPECT_FALSE(r.record.committed);
  EXPECT_TRUE(env.probes.empty());
  EXPECT_EQ(r.policy, policy);
}

TEST(ControllerRound, NanCandidateIsSkipped) {
  ControllerConfig cfg;
  cfg.candidates = 8;
  FakeEnv env{[](double p) { return p > 0.4 ? std::nan("") : 1.0 - p; }, 0.40};
  PolicyState policy{0.4, 0.2, 0.4};
  std::mt19937_64 rng(8);
  auto r = controller_round(policy, env, cfg, rng, 0, 10);
  std::size_t invalid = 0;
  for (const auto& c : r.record.candidates) {
    if (!c.valid) {
      ++invalid;
      EXPECT_TRUE(std::isnan(c.reward));
    }
  }
  EXPECT_GT(invalid, 0u);
  EXPECT_LT(invalid, cfg.candidates);
  EXPECT_FALSE(r.record.failed);
  EXPECT_TRUE(std::isfinite(r.policy.mu));
  EXPECT_TRUE(std::isfinite(r.policy.sigma));
}

TEST(ControllerRound, AllCandidatesNanFailsRound) {
  ControllerConfig cfg;
  FakeEnv env{[](double) { return std::nan(""); }, 0.40};
  env.use_override = true;
  env.base_override = 0.5;
  PolicyState policy = init_policy(cfg);
  std::mt19937_64 rng(9);
  auto r = controller_round(policy, env, cfg, rng, 0, 10);
  EXPECT_TRUE(r.record.failed);
  EXPECT_EQ(r.policy, policy);
}

TEST(SelectPStar, Examples) {
  ControllerRecord r0;
  r0.round = 0;
  r0.p_curr_before = 0.4;
  r0.baseline_reward = -1.0;
  r0.candidates = {{0.5, 0.5, -0.8, 0.2, true}, {0.7, 0.7, -1.1, -0.1, true}};
  std::vector<ControllerRecord> log{r0};
  EXPECT_EQ(select_p_star(log), 0.5);

  ControllerRecord a = r0;
  a.candidates = {{0.5, 0.5, -1.2, -0.2, true}};
  ControllerRecord b = a;
  b.round = 1;
  b.p_curr_before = 0.3;
  b.baseline_reward = -0.9;
  log = {a, b};
  EXPECT_EQ(select_p_star(log), 0.3);

  ControllerRecord c = r0;
  c.round = 1;
  c.p_curr_before = 0.2;
  c.candidates = {{0.45, 0.45, -0.8, 0.2, true}};
  log = {r0, c};
  auto choice = select_p_star_detail(log);
  EXPECT_EQ(choice.p, 0.5);
  EXPECT_EQ(choice.round, 0u);

  EXPECT_THROW(select_p_star(std::vector<ControllerRecord>{}), UsageError);
}

TEST(SelectPStar, SkipsFailedRoundsAndInvalidCandidates) {
  ControllerRecord r0;
  r0.p_curr_before = 0.4;
  r0.baseline_reward = -1.0;
  r0.candidates = {{0.6, 0.6, std::nan(""), std::nan(""), false}, {0.3, 0.3, -1.2, -0.2, true}};
  ControllerRecord r1;
  r1.round = 1;
  r1.failed = true;
  r1.p_curr_before = 0.7;
  r1.baseline_reward = std::nan("");
  std::vector<ControllerRecord> log{r0, r1};
  EXPECT_EQ(select_p_star(log), 0.4);
}

TEST(Oracle, FlatRewardKeepsBoundsAndDeterminism) {
  ControllerConfig cfg;
  auto run = run_controller_on_oracle(flat_landscape(-1.0), cfg, 200, 11);
  double prev = cfg.p_init;
  for (const auto& r : run.log) {
    EXPECT_EQ(r.p_curr_before, prev);
    EXPECT_LE(std::abs(r.p_curr_after - r.p_curr_before), cfg.delta_max + 1e-12);
    EXPECT_GE(r.p_curr_after, cfg.p_min);
    EXPECT_LE(r.p_curr_after, cfg.p_max);
    EXPECT_GE(r.sigma_after, 1e-3);
    prev = r.p_curr_after;
  }
  auto again = run_controller_on_oracle(flat_landscape(-1.0), cfg, 200, 11);
  ASSERT_EQ(again.log.size(), run.log.size());
  for (std::size_t i = 0; i < run.log.size(); ++i) {
    EXPECT_EQ(again.log[i].p_curr_after, run.log[i].p_curr_after);
    EXPECT_EQ(again.log[i].sigma_after, run.log[i].sigma_after);
  }
}

TEST(Oracle, QuadraticConverges) {
  ControllerConfig cfg;
  auto run = run_controller_on_oracle(quadratic_landscape(0.25, 0.0), cfg, 100, 1);
  EXPECT_NEAR(run.p_star, 0.25, 0.05);
}
