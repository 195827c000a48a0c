#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "grasp/error.hpp"
#include "grasp/lora.hpp"
#include "grasp/matrix.hpp"

namespace grasp {

// The single global importance multiplier s > 0.
class ImportanceScale {
 public:
  explicit ImportanceScale(double value) : value_(value) {
    if (!(value > 0.0) || !std::isfinite(value)) {
      throw NumericalError("ImportanceScale: scale must be positive and finite");
    }
  }
  double value() const noexcept { return value_; }

 private:
  double value_;
};

// Mean Euclidean norm of the rows of `inputs` (one vector per row).
inline ImportanceScale estimate_scale(const Matrix& inputs) {
  if (inputs.rows() == 0) throw UsageError("estimate_scale: no input vectors");
  double total = 0.0;
  for (std::size_t i = 0; i < inputs.rows(); ++i) {
    double sq = 0.0;
    for (double v : inputs.row(i)) sq += v * v;
    total += std::sqrt(sq);
  }
  const double s = total / static_cast<double>(inputs.rows());
  if (s == 0.0) throw NumericalError("estimate_scale: all inputs are zero, scale would be 0");
  return ImportanceScale(s);
}

inline ImportanceScale estimate_scale(const std::vector<std::vector<double>>& vectors) {
  if (vectors.empty()) throw UsageError("estimate_scale: no input vectors");
  const std::size_t dim = vectors[0].size();
  std::vector<double> flat;
  flat.reserve(vectors.size() * dim);
  for (const auto& v : vectors) {
    if (v.size() != dim) throw DimensionError("estimate_scale: vectors differ in dimension");
    flat.insert(flat.end(), v.begin(), v.end());
  }
  return estimate_scale(Matrix(vectors.size(), dim, std::move(flat)));
}

inline std::vector<double> importance_scores(std::span<const double> values, ImportanceScale s) {
  std::vector<double> scores(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) scores[i] = std::abs(values[i]) * s.value();
  return scores;
}

struct PruneThreshold {
  std::size_t k = 0;
  // k-th smallest score; -inf when k == 0 so that nothing satisfies score <= tau.
  double tau = -std::numeric_limits<double>::infinity();
};

inline void check_ratio(double p, const char* where) {
  if (!(p >= 0.0 && p <= 1.0)) {
    throw UsageError(std::string(where) + ": prune ratio " + std::to_string(p) +
                     " outside [0, 1]");
  }
}

inline std::size_t prune_count(double p, std::size_t entries) {
  return static_cast<std::size_t>(std::floor(p * static_cast<double>(entries)));
}

inline PruneThreshold prune_threshold(std::span<const double> scores, double p) {
  check_ratio(p, "prune_threshold");
  if (scores.empty()) throw UsageError("prune_threshold: empty score tensor");
  PruneThreshold out;
  out.k = prune_count(p, scores.size());
  if (out.k == 0) return out;
  std::vector<double> copy(scores.begin(), scores.end());
  auto nth = copy.begin() + static_cast<std::ptrdiff_t>(out.k - 1);
  std::nth_element(copy.begin(), nth, copy.end());
  out.tau = *nth;
  return out;
}

// Per-tensor keep masks at one global ratio. keep[t][j] == 1 keeps entry j of
// tensor t.
struct SparsityMask {
  double ratio = 0.0;
  std::vector<std::vector<std::uint8_t>> keep;
  std::vector<std::size_t> k;
  std::vector<double> tau;
  std::vector<double> realized_fraction;

  std::size_t tensor_count() const noexcept { return keep.size(); }

  std::size_t pruned_count(std::size_t t) const {
    std::size_t n = 0;
    for (auto bit : keep.at(t)) n += bit == 0;
    return n;
  }

  std::size_t total_pruned() const {
    std::size_t n = 0;
    for (std::size_t t = 0; t < keep.size(); ++t) n += pruned_count(t);
    return n;
  }

  friend bool operator==(const SparsityMask& lhs, const SparsityMask& rhs) {
    return lhs.keep == rhs.keep;
  }
};

// Keep mask for a single flat score tensor: entry pruned iff score <= tau.
inline std::vector<std::uint8_t> threshold_keep(std::span<const double> scores,
                                                const PruneThreshold& threshold) {
  std::vector<std::uint8_t> keep(scores.size());
  for (std::size_t j = 0; j < scores.size(); ++j) keep[j] = scores[j] <= threshold.tau ? 0 : 1;
  return keep;
}

namespace detail {
// k-th smallest of |values| * s. Exact zeros are the smallest possible
// scores, so they are counted up front and the selection runs only over the
// nonzero rest. Params pruned at the previous ratio are mostly zeros.
inline double kth_score(std::span<const double> values, std::size_t k, double s,
                        std::vector<double>& work) {
  work.clear();
  for (double v : values) {
    if (v != 0.0) work.push_back(std::abs(v) * s);
  }
  const std::size_t zeros = values.size() - work.size();
  if (k <= zeros) return 0.0;
  auto nth = work.begin() + static_cast<std::ptrdiff_t>(k - zeros - 1);
  std::nth_element(work.begin(), nth, work.end());
  return *nth;
}
}  // namespace detail

// Same result as importance_scores + prune_threshold + threshold_keep per
// tensor, with one work buffer; keep recomputes each score from the weight.
inline SparsityMask build_mask(const MergedAdapterSet& merged, double p, ImportanceScale s) {
  check_ratio(p, "build_mask");
  SparsityMask mask;
  mask.ratio = p;
  const std::size_t tensors = merged.tensor_count();
  mask.keep.reserve(tensors);
  mask.k.reserve(tensors);
  mask.tau.reserve(tensors);
  mask.realized_fraction.reserve(tensors);
  std::vector<double> work;
  for (std::size_t t = 0; t < tensors; ++t) {
    const auto values = merged.tensor(t);
    if (values.empty()) throw UsageError("build_mask: empty tensor " + std::to_string(t));
    PruneThreshold threshold;
    threshold.k = prune_count(p, values.size());
    if (threshold.k > 0) {
      work.reserve(values.size());
      threshold.tau = detail::kth_score(values, threshold.k, s.value(), work);
    }
    std::vector<std::uint8_t> keep(values.size());
    std::size_t pruned = 0;
    for (std::size_t j = 0; j < values.size(); ++j) {
      const bool drop = std::abs(values[j]) * s.value() <= threshold.tau;
      keep[j] = drop ? 0 : 1;
      pruned += drop;
    }
    mask.keep.push_back(std::move(keep));
    mask.k.push_back(threshold.k);
    mask.tau.push_back(threshold.tau);
    mask.realized_fraction.push_back(static_cast<double>(pruned) / static_cast<double>(values.size()));
  }
  return mask;
}

inline void check_mask_shape(const MergedAdapterSet& merged, const SparsityMask& mask) {
  if (mask.tensor_count() != merged.tensor_count()) {
    throw DimensionError("mask covers " + std::to_string(mask.tensor_count()) + " tensors, set has " +
                         std::to_string(merged.tensor_count()));
  }
  for (std::size_t t = 0; t < merged.tensor_count(); ++t) {
    if (mask.keep[t].size() != merged.tensor(t).size()) {
      throw DimensionError("mask for tensor " + std::to_string(t) + " has wrong length");
    }
  }
}

// Zeroes pruned coordinates in place.
inline void apply_mask_inplace(MergedAdapterSet& merged, const SparsityMask& mask) {
  check_mask_shape(merged, mask);
  for (std::size_t t = 0; t < merged.tensor_count(); ++t) {
    auto values = merged.tensor(t);
    const auto& keep = mask.keep[t];
    for (std::size_t j = 0; j < values.size(); ++j) values[j] = keep[j] != 0 ? values[j] : 0.0;
  }
}

// build_mask followed by apply_mask_inplace, without materializing keep
// vectors. `work` is caller-owned scratch so repeated calls do not allocate.
inline void prune_ratio_inplace(MergedAdapterSet& merged, double p, ImportanceScale s,
                                std::vector<double>& work) {
  check_ratio(p, "prune_ratio_inplace");
  for (std::size_t t = 0; t < merged.tensor_count(); ++t) {
    auto values = merged.tensor(t);
    if (values.empty()) throw UsageError("prune_ratio_inplace: empty tensor " + std::to_string(t));
    const std::size_t k = prune_count(p, values.size());
    if (k == 0) continue;
    work.reserve(values.size());
    const double tau = detail::kth_score(values, k, s.value(), work);
    for (std::size_t j = 0; j < values.size(); ++j) {
      if (std::abs(values[j]) * s.value() <= tau) values[j] = 0.0;
    }
  }
}

inline MergedAdapterSet mask_apply(MergedAdapterSet merged, const SparsityMask& mask) {
  apply_mask_inplace(merged, mask);
  return merged;
}

// CSV dump: tensor_id,d,k,tau,fraction. tau is "-inf" when nothing is pruned.
inline std::string mask_csv(const SparsityMask& mask) {
  std::ostringstream out;
  out.precision(17);
  out << "tensor_id,d,k,tau,fraction\n";
  for (std::size_t t = 0; t < mask.tensor_count(); ++t) {
    out << t << ',' << mask.keep[t].size() << ',' << mask.k[t] << ',';
    if (std::isinf(mask.tau[t])) {
      out << "-inf";
    } else {
      out << mask.tau[t];
    }
    out << ',' << mask.realized_fraction[t] << '\n';
  }
  return out.str();
}

}  // namespace grasp
