#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <random>
#include <vector>

#include "grasp/checkpoint.hpp"
#include "grasp/harness.hpp"
#include "grasp/lora.hpp"
#include "grasp/matrix.hpp"

using namespace grasp;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng) {
  std::normal_distribution<double> d(0.0, 1.0);
  Matrix m(r, c);
  for (double& v : m.values()) v = d(rng);
  return m;
}

LoraAdapter random_adapter(const std::string& id, std::size_t rank, std::size_t d_in,
                           std::size_t d_out, double alpha, std::mt19937_64& rng) {
  return {id, random_matrix(rank, d_in, rng), random_matrix(d_out, rank, rng), alpha};
}

}  // namespace

TEST(Matrix, RejectsWrongLengthAndNonFinite) {
  EXPECT_THROW(Matrix(2, 2, std::vector<double>(3, 0.0)), DimensionError);
  EXPECT_THROW(Matrix(1, 2, {1.0, std::nan("")}), NumericalError);
  EXPECT_THROW(Matrix(1, 1, {INFINITY}), NumericalError);
  Matrix ok(2, 3);
  EXPECT_EQ(ok.size(), 6u);
}

TEST(Matrix, MatmulMatchesHand) {
  Matrix a{{1, 2}, {3, 4}};
  Matrix b{{5}, {6}};
  Matrix c = matmul(a, b);
  EXPECT_EQ(c, (Matrix{{17}, {39}}));
  EXPECT_THROW(matmul(b, b), DimensionError);
}

TEST(LoraDelta, HandExample) {
  LoraAdapter ad{"s", Matrix{{2, 3}}, Matrix{{1}, {0}}, 1.0};
  EXPECT_EQ(lora_delta(ad), (Matrix{{2, 3}, {0, 0}}));
}

TEST(LoraDelta, ZeroBGivesZeroMatrix) {
  std::mt19937_64 rng(1);
  LoraAdapter ad{"s", random_matrix(3, 5, rng), Matrix(4, 3), 32.0};
  Matrix d = lora_delta(ad);
  EXPECT_EQ(d.rows(), 4u);
  EXPECT_EQ(d.cols(), 5u);
  for (double v : d.values()) EXPECT_EQ(v, 0.0);
}

TEST(LoraDelta, RankTwoIsSumOfOuterProducts) {
  std::mt19937_64 rng(2);
  LoraAdapter ad = random_adapter("s", 2, 4, 3, 8.0, rng);
  Matrix expect(3, 4);
  for (std::size_t k = 0; k < 2; ++k)
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 4; ++j) expect(i, j) += 4.0 * ad.b(i, k) * ad.a(k, j);
  EXPECT_LT(max_abs_diff(lora_delta(ad), expect), 1e-12);
}

TEST(LoraDelta, ShapeMismatchThrows) {
  LoraAdapter ad{"s", Matrix(2, 3), Matrix(3, 1), 1.0};
  EXPECT_THROW(lora_delta(ad), DimensionError);
}

TEST(MergeAdapters, SingleAdapterIsIdentity) {
  std::mt19937_64 rng(3);
  std::vector<LoraAdapter> one{random_adapter("s", 2, 3, 3, 4.0, rng)};
  MergedSite m = merge_adapters(one, "s");
  EXPECT_LT(relative_error(m.delta(), lora_delta(one[0])), 1e-12);
  EXPECT_EQ(m.rank(), 2u);
}

TEST(MergeAdapters, ZeroSecondAdapter) {
  std::mt19937_64 rng(4);
  std::vector<LoraAdapter> two{random_adapter("s", 2, 3, 3, 4.0, rng),
                               {"s", Matrix(1, 3), Matrix(3, 1), 1.0}};
  MergedSite m = merge_adapters(two, "s");
  EXPECT_LT(relative_error(m.delta(), lora_delta(two[0])), 1e-12);
  EXPECT_EQ(m.rank(), 3u);
}

TEST(MergeAdapters, TwoRankOneMatchesDenseSum) {
  std::mt19937_64 rng(5);
  std::vector<LoraAdapter> two{random_adapter("s", 1, 3, 3, 1.0, rng),
                               random_adapter("s", 1, 3, 3, 1.0, rng)};
  Matrix dense = lora_delta(two[0]) + lora_delta(two[1]);
  EXPECT_LT(relative_error(merge_adapters(two, "s").delta(), dense), 1e-10);
}

TEST(MergeAdapters, DifferentScalesAreFolded) {
  std::mt19937_64 rng(6);
  std::vector<LoraAdapter> two{random_adapter("s", 2, 4, 5, 32.0, rng),
                               random_adapter("s", 3, 4, 5, 6.0, rng)};
  Matrix dense = lora_delta(two[0]) + lora_delta(two[1]);
  MergedSite m = merge_adapters(two, "s");
  EXPECT_EQ(m.rank(), 5u);
  EXPECT_LT(relative_error(m.delta(), dense), 1e-10);
}

TEST(MergeAdapters, OrderDoesNotChangeDelta) {
  std::mt19937_64 rng(7);
  std::vector<LoraAdapter> ab{random_adapter("s", 2, 6, 4, 16.0, rng),
                              random_adapter("s", 2, 6, 4, 16.0, rng)};
  std::vector<LoraAdapter> ba{ab[1], ab[0]};
  EXPECT_LT(relative_error(merge_adapters(ab, "s").delta(), merge_adapters(ba, "s").delta()), 1e-10);
}

TEST(MergeAdapters, Errors) {
  std::vector<LoraAdapter> none;
  EXPECT_THROW(merge_adapters(none, "s"), UsageError);
  std::vector<LoraAdapter> bad{{"s", Matrix(1, 3), Matrix(3, 1), 1.0},
                               {"s", Matrix(1, 4), Matrix(3, 1), 1.0}};
  EXPECT_THROW(merge_adapters(bad, "s"), DimensionError);
}

TEST(MergedAdapterSet, TensorIndexing) {
  std::mt19937_64 rng(8);
  std::vector<LoraAdapter> set{random_adapter("q", 2, 3, 4, 1.0, rng),
                               random_adapter("v", 2, 3, 4, 1.0, rng)};
  MergedAdapterSet m = as_parameter_set(set);
  EXPECT_EQ(m.tensor_count(), 4u);
  EXPECT_EQ(m.total_entries(), 2u * (6 + 8));
  EXPECT_EQ(m.tensor_ref(2).site, 1u);
  EXPECT_EQ(m.tensor_ref(2).factor, Factor::A);
  EXPECT_EQ(m.tensor_ref(3).factor, Factor::B);
  EXPECT_EQ(m.tensor_ref(3).entries, 8u);
  EXPECT_EQ(m.tensor(1)[0], set[0].b(0, 0));
}

namespace {

Matrix dense_masked_projection(const Matrix& h, const Matrix& w, const MergedSite& s,
                               const std::vector<std::uint8_t>& ma,
                               const std::vector<std::uint8_t>& mb) {
  Matrix out(h.rows(), w.rows());
  for (std::size_t n = 0; n < h.rows(); ++n)
    for (std::size_t i = 0; i < w.rows(); ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < w.cols(); ++j) {
        double delta = 0.0;
        for (std::size_t k = 0; k < s.rank(); ++k) {
          delta += mb[i * s.rank() + k] * s.b(i, k) * ma[k * w.cols() + j] * s.a(k, j);
        }
        acc += h(n, j) * (w(i, j) + s.scale * delta);
      }
      out(n, i) = acc;
    }
  return out;
}

}  // namespace

TEST(ApplyProjection, ZeroMasksGiveBackboneOnly) {
  std::mt19937_64 rng(9);
  Matrix h = random_matrix(3, 4, rng);
  Matrix w = random_matrix(4, 4, rng);
  MergedSite s{"s", random_matrix(2, 4, rng), random_matrix(4, 2, rng), 0.5};
  std::vector<std::uint8_t> za(8, 0), zb(8, 0);
  EXPECT_LT(max_abs_diff(apply_projection(h, w, s, za, zb), matmul(h, transpose(w))), 1e-12);
}

TEST(ApplyProjection, OnesMasksEqualUnmasked) {
  std::mt19937_64 rng(10);
  Matrix h = random_matrix(3, 4, rng);
  Matrix w = random_matrix(4, 4, rng);
  MergedSite s{"s", random_matrix(2, 4, rng), random_matrix(4, 2, rng), 0.5};
  std::vector<std::uint8_t> oa(8, 1), ob(8, 1);
  Matrix expect = matmul(h, transpose(w)) + matmul(h, transpose(s.delta()));
  EXPECT_LT(max_abs_diff(apply_projection(h, w, s, oa, ob), expect), 1e-12);
  EXPECT_LT(max_abs_diff(apply_projection(h, w, s), expect), 1e-12);
}

TEST(ApplyProjection, RandomHalfMaskMatchesDenseOracle) {
  std::mt19937_64 rng(11);
  Matrix h = random_matrix(5, 4, rng);
  Matrix w = random_matrix(4, 4, rng);
  MergedSite s{"s", random_matrix(4, 4, rng), random_matrix(4, 4, rng), 2.0};
  std::vector<std::uint8_t> ma(16), mb(16);
  std::bernoulli_distribution half(0.5);
  for (auto& v : ma) v = half(rng);
  for (auto& v : mb) v = half(rng);
  Matrix got = apply_projection(h, w, s, ma, mb);
  EXPECT_LT(max_abs_diff(got, dense_masked_projection(h, w, s, ma, mb)), 1e-12);
  // The masked LoRA term decomposes from the backbone term.
  MergedSite zeroed = s;
  for (std::size_t i = 0; i < 16; ++i) {
    zeroed.a.values()[i] *= ma[i];
    zeroed.b.values()[i] *= mb[i];
  }
  EXPECT_LT(max_abs_diff(got - matmul(h, transpose(w)), matmul(h, transpose(zeroed.delta()))), 1e-12);
}

TEST(ApplyProjection, ShapeErrors) {
  MergedSite s{"s", Matrix(2, 4), Matrix(4, 2), 1.0};
  EXPECT_THROW(apply_projection(Matrix(1, 3), Matrix(4, 4), s), DimensionError);
  std::vector<std::uint8_t> short_mask(3, 1);
  EXPECT_THROW(apply_projection(Matrix(1, 4), Matrix(4, 4), s, short_mask), DimensionError);
}

TEST(FrozenBackbone, UnchangedByPipelineRun) {
  ToyTaskConfig task;
  task.source_train_n = 32;
  task.target_train_n = 16;
  TrainConfig train;
  train.epochs = 1;
  ToyData data = gen_toy_data(task, 3);
  std::vector<double> before;
  for (const auto& s : data.backbone.sites())
    before.insert(before.end(), s.w.values().begin(), s.w.values().end());
  LoraConfig lora;
  AdapterTrainResult r = train_adapter(data.backbone, prepare(data.backbone, data.target_train), lora,
                                       train, 1);
  MergedAdapterSet merged = merge_adapter_sets({r.adapters, r.adapters});
  ControllerConfig ctl;
  ctl.epochs = 1;
  GraspInputs in = make_grasp_inputs(data, merged, 16);
  run_grasp(in, ctl, train, 1);
  std::vector<double> after;
  for (const auto& s : data.backbone.sites())
    after.insert(after.end(), s.w.values().begin(), s.w.values().end());
  ASSERT_EQ(before.size(), after.size());
  EXPECT_EQ(std::memcmp(before.data(), after.data(), before.size() * sizeof(double)), 0);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  std::mt19937_64 rng(12);
  std::vector<LoraAdapter> a{random_adapter("layer0.q_proj", 2, 5, 3, 32.0, rng),
                             random_adapter("layer0.v_proj", 2, 5, 3, 32.0, rng)};
  std::vector<LoraAdapter> b{random_adapter("layer0.q_proj", 3, 5, 3, 7.0, rng),
                             random_adapter("layer0.v_proj", 3, 5, 3, 7.0, rng)};
  MergedAdapterSet merged = merge_adapter_sets({a, b});
  merged.site(0).a(0, 0) = -0.0;
  merged.site(1).b(2, 4) = 5e-324;
  CheckpointMeta meta{"merged-init", "0123456789abcdef", {{"note", "x"}}};
  const std::string bytes = encode_checkpoint(merged, meta);
  Checkpoint back = decode_checkpoint(bytes);
  EXPECT_EQ(back.meta.kind, "merged-init");
  EXPECT_EQ(back.meta.config_hash, "0123456789abcdef");
  EXPECT_EQ(back.meta.extra["note"], "x");
  ASSERT_EQ(back.params.tensor_count(), merged.tensor_count());
  for (std::size_t t = 0; t < merged.tensor_count(); ++t) {
    auto x = merged.tensor(t);
    auto y = back.params.tensor(t);
    ASSERT_EQ(x.size(), y.size());
    EXPECT_EQ(std::memcmp(x.data(), y.data(), x.size_bytes()), 0);
  }
  EXPECT_EQ(encode_checkpoint(back.params, back.meta), bytes);
}

TEST(Checkpoint, HeaderListsSitesRanksAndAlpha) {
  std::mt19937_64 rng(13);
  MergedAdapterSet set = as_parameter_set({random_adapter("q", 8, 4, 4, 32.0, rng)});
  const std::string bytes = encode_checkpoint(set, {"source", "h"});
  std::uint64_t len = 0;
  std::memcpy(&len, bytes.data() + 12, sizeof len);
  const auto header = nlohmann::json::parse(bytes.substr(20, len));
  EXPECT_EQ(header["sites"][0]["site_id"], "q");
  EXPECT_EQ(header["sites"][0]["rank"], 8);
  EXPECT_DOUBLE_EQ(header["sites"][0]["alpha"].get<double>(), 32.0);
  EXPECT_DOUBLE_EQ(header["sites"][0]["scale"].get<double>(), 4.0);
}

TEST(Checkpoint, CorruptInputIsParseError) {
  std::mt19937_64 rng(14);
  MergedAdapterSet set = as_parameter_set({random_adapter("q", 2, 3, 3, 4.0, rng)});
  std::string bytes = encode_checkpoint(set, {"source", "h"});
  EXPECT_THROW(decode_checkpoint(bytes.substr(0, bytes.size() - 3)), ParseError);
  EXPECT_THROW(decode_checkpoint(bytes + "x"), ParseError);
  std::string bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bad), ParseError);
  EXPECT_THROW(decode_checkpoint(""), ParseError);
}

TEST(Checkpoint, MissingFileIsIoError) {
  EXPECT_THROW(read_checkpoint("/nonexistent/dir/x.gck"), IoError);
}
