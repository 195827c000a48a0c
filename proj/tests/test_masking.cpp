#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include "grasp/lora.hpp"
#include "grasp/masking.hpp"

using namespace grasp;

namespace {

using Rows = std::vector<std::vector<double>>;

// One site whose A factor holds `a_values` (1 x n) and B is a single 1.
MergedAdapterSet single_tensor_set(const std::vector<double>& a_values) {
  MergedSite s{"s", Matrix(1, a_values.size(), a_values), Matrix{{1.0}}, 1.0};
  return MergedAdapterSet({s});
}

std::vector<std::uint8_t> keep_of(const std::vector<double>& values, double p, double s = 1.0) {
  return build_mask(single_tensor_set(values), p, ImportanceScale(s)).keep[0];
}

}  // namespace

TEST(EstimateScale, MeanOfNorms) {
  EXPECT_DOUBLE_EQ(estimate_scale(Rows{{3.0, 4.0}, {0.0, 0.0}}).value(), 2.5);
  EXPECT_DOUBLE_EQ(estimate_scale(Rows{{0.0, 1.0, 0.0}}).value(), 1.0);
  EXPECT_DOUBLE_EQ(estimate_scale(Rows{{1.0, 2.0, 2.0}, {1.0, 2.0, 2.0}, {1.0, 2.0, 2.0}}).value(), 3.0);
}

TEST(EstimateScale, Errors) {
  EXPECT_THROW(estimate_scale(std::vector<std::vector<double>>{}), UsageError);
  EXPECT_THROW(estimate_scale(Rows{{0.0, 0.0}, {0.0, 0.0}}), NumericalError);
  EXPECT_THROW(estimate_scale(Rows{{1.0}, {1.0, 2.0}}), DimensionError);
  EXPECT_THROW(ImportanceScale(0.0), NumericalError);
  EXPECT_THROW(ImportanceScale(-1.0), NumericalError);
}

TEST(ImportanceScores, HandValues) {
  std::vector<double> v{-2.0, 1.0, 0.0};
  EXPECT_EQ(importance_scores(v, ImportanceScale(2.0)), (std::vector<double>{4.0, 2.0, 0.0}));
  EXPECT_EQ(importance_scores(v, ImportanceScale(1.0)), (std::vector<double>{2.0, 1.0, 0.0}));
}

TEST(ImportanceScores, OrderMatchesMagnitude) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> d;
  std::vector<double> v(200);
  for (auto& x : v) x = d(rng);
  for (double s : {1e-3, 0.7, 12.0, 1e3}) {
    auto scores = importance_scores(v, ImportanceScale(s));
    for (std::size_t i = 0; i < v.size(); ++i)
      for (std::size_t j = 0; j < v.size(); ++j)
        if (std::abs(v[i]) < std::abs(v[j])) {
          ASSERT_LE(scores[i], scores[j]);
        }
  }
}

TEST(PruneThreshold, HandExamples) {
  std::vector<double> s{0.1, 0.5, 0.3, 0.9};
  auto t = prune_threshold(s, 0.5);
  EXPECT_EQ(t.k, 2u);
  EXPECT_DOUBLE_EQ(t.tau, 0.3);
  auto zero = prune_threshold(s, 0.0);
  EXPECT_EQ(zero.k, 0u);
  EXPECT_EQ(zero.tau, -std::numeric_limits<double>::infinity());
  auto full = prune_threshold(s, 1.0);
  EXPECT_EQ(full.k, 4u);
  EXPECT_DOUBLE_EQ(full.tau, 0.9);
}

TEST(PruneThreshold, Errors) {
  std::vector<double> s{0.1, 0.2};
  EXPECT_THROW(prune_threshold(s, -0.01), UsageError);
  EXPECT_THROW(prune_threshold(s, 1.01), UsageError);
  EXPECT_THROW(prune_threshold({}, 0.5), UsageError);
}

TEST(BuildMask, HandExamples) {
  EXPECT_EQ(keep_of({0.1, 0.5, 0.3, 0.9}, 0.5), (std::vector<std::uint8_t>{0, 1, 0, 1}));
  // Ties at the threshold are all pruned.
  EXPECT_EQ(keep_of({0.3, 0.3, 0.5, 0.9}, 0.25), (std::vector<std::uint8_t>{0, 0, 1, 1}));
}

TEST(BuildMask, MinRatioOnTenEntries) {
  std::vector<double> v{0.5, 0.2, 0.9, 0.1, 0.7, 0.3, 0.8, 0.4, 0.6, 1.0};
  auto keep = keep_of(v, 0.10);
  std::size_t pruned = 0;
  for (auto k : keep) pruned += k == 0;
  EXPECT_EQ(pruned, 1u);
  EXPECT_EQ(keep[3], 0);
}

TEST(BuildMask, RecordsThresholdsAndFractions) {
  MergedSite s{"s", Matrix{{0.1, -0.5, 0.3, 0.9}}, Matrix{{1.0}, {-2.0}, {0.5}}, 1.0};
  MergedAdapterSet set({s});
  auto m = build_mask(set, 0.5, ImportanceScale(2.0));
  ASSERT_EQ(m.tensor_count(), 2u);
  EXPECT_EQ(m.k[0], 2u);
  EXPECT_DOUBLE_EQ(m.tau[0], 0.6);
  EXPECT_DOUBLE_EQ(m.realized_fraction[0], 0.5);
  EXPECT_EQ(m.k[1], 1u);
  EXPECT_DOUBLE_EQ(m.realized_fraction[1], 1.0 / 3.0);
}

TEST(BuildMask, ZeroWeightsArePrunedFirst) {
  auto keep = keep_of({0.0, 0.4, 0.0, 0.2, 0.3}, 0.2);
  // k = 1 but both zeros tie at tau = 0.
  EXPECT_EQ(keep, (std::vector<std::uint8_t>{0, 1, 0, 1, 1}));
}

TEST(BuildMask, ScaleInvarianceAndNestedness) {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> d;
  std::uniform_real_distribution<double> up(0.0, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> v(37 + trial);
    for (auto& x : v) x = d(rng);
    const double p = up(rng);
    EXPECT_EQ(keep_of(v, p, 1.0), keep_of(v, p, 1e-3));
    EXPECT_EQ(keep_of(v, p, 1.0), keep_of(v, p, 1e3));
    const double p2 = p + (1.0 - p) * up(rng);
    auto k1 = keep_of(v, p);
    auto k2 = keep_of(v, p2);
    for (std::size_t j = 0; j < v.size(); ++j)
      if (k1[j] == 0) {
        EXPECT_EQ(k2[j], 0);
      }
  }
}

TEST(BuildMask, FractionBoundWithTies) {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> level(0, 5);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> v(40);
    for (auto& x : v) x = 0.1 * level(rng);
    const double p = 0.1 + 0.07 * (trial % 10);
    auto m = build_mask(single_tensor_set(v), p, ImportanceScale(1.0));
    const std::size_t k = prune_count(p, v.size());
    std::size_t ties = 0;
    for (double x : v) ties += std::abs(x) == m.tau[0];
    EXPECT_GE(m.pruned_count(0), k);
    EXPECT_LE(m.pruned_count(0), k + ties);
  }
}

TEST(MaskApply, IdentityAnnihilationAndOracle) {
  MergedSite s{"s", Matrix{{1.0, -2.0, 3.0, -4.0}}, Matrix{{5.0}, {6.0}}, 1.0};
  MergedAdapterSet set({s});
  SparsityMask ones;
  ones.keep = {{1, 1, 1, 1}, {1, 1}};
  EXPECT_EQ(mask_apply(set, ones), set);
  SparsityMask zeros;
  zeros.keep = {{0, 0, 0, 0}, {0, 0}};
  MergedAdapterSet z = mask_apply(set, zeros);
  for (std::size_t t = 0; t < 2; ++t)
    for (double v : z.tensor(t)) EXPECT_EQ(v, 0.0);
  SparsityMask half;
  half.keep = {{1, 0, 1, 0}, {0, 1}};
  MergedAdapterSet h = mask_apply(set, half);
  EXPECT_EQ(h.site(0).a, (Matrix{{1.0, 0.0, 3.0, 0.0}}));
  EXPECT_EQ(h.site(0).b, (Matrix{{0.0}, {6.0}}));
  EXPECT_EQ(mask_apply(h, half), h);
}

TEST(MaskApply, ShapeMismatch) {
  MergedAdapterSet set = single_tensor_set({1.0, 2.0});
  SparsityMask bad;
  bad.keep = {{1, 1, 1}, {1}};
  EXPECT_THROW(mask_apply(set, bad), DimensionError);
  bad.keep = {{1, 1}};
  EXPECT_THROW(mask_apply(set, bad), DimensionError);
}

TEST(PruneRatioInplace, MatchesBuildThenApply) {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<double> work;
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<MergedSite> sites;
    for (int k = 0; k < 3; ++k) {
      Matrix a(4, 9), b(7, 4);
      for (auto& v : a.values()) v = g(rng);
      for (auto& v : b.values()) v = trial % 5 == 0 ? std::round(g(rng)) : g(rng);  // ties
      sites.push_back({"s" + std::to_string(k), a, b, 0.5});
    }
    MergedAdapterSet set(sites);
    const double p = (trial % 11) / 10.0;
    MergedAdapterSet fast = set;
    prune_ratio_inplace(fast, p, ImportanceScale(2.5), work);
    EXPECT_EQ(fast, mask_apply(set, build_mask(set, p, ImportanceScale(2.5))));
  }
  MergedAdapterSet set = single_tensor_set({1.0, 2.0});
  EXPECT_THROW(prune_ratio_inplace(set, 1.5, ImportanceScale(1.0), work), UsageError);
}

TEST(MaskCsv, FixedColumnsAndSentinel) {
  MergedAdapterSet set = single_tensor_set({0.1, 0.5, 0.3, 0.9});
  auto m = build_mask(set, 0.5, ImportanceScale(1.0));
  const std::string csv = mask_csv(m);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "tensor_id,d,k,tau,fraction");
  EXPECT_NE(csv.find("0,4,2,0.29"), std::string::npos);
  EXPECT_NE(csv.find("1,1,0,-inf,0"), std::string::npos);
}
