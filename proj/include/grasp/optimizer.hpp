#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "grasp/error.hpp"
#include "grasp/lora.hpp"
#include "grasp/masking.hpp"

namespace grasp {

// One flat gradient buffer per parameter tensor, indexed like
// MergedAdapterSet::tensor(t).
using TensorGrads = std::vector<std::vector<double>>;

inline TensorGrads zero_grads(const MergedAdapterSet& params) {
  TensorGrads g(params.tensor_count());
  for (std::size_t t = 0; t < params.tensor_count(); ++t) g[t].assign(params.tensor(t).size(), 0.0);
  return g;
}

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

// AdamW with decoupled weight decay and per-parameter moments.
class AdamW {
 public:
  AdamW(const MergedAdapterSet& params, AdamWConfig cfg) : cfg_(cfg) {
    m_.resize(params.tensor_count());
    v_.resize(params.tensor_count());
    for (std::size_t t = 0; t < params.tensor_count(); ++t) {
      m_[t].assign(params.tensor(t).size(), 0.0);
      v_[t].assign(params.tensor(t).size(), 0.0);
    }
  }

  const AdamWConfig& config() const noexcept { return cfg_; }
  std::size_t step_count() const noexcept { return step_; }
  const std::vector<double>& first_moment(std::size_t t) const { return m_.at(t); }
  const std::vector<double>& second_moment(std::size_t t) const { return v_.at(t); }

  // Updates coordinates whose keep bit is 1 (every coordinate when mask is
  // null); masked coordinates keep their moments and value.
  void step(MergedAdapterSet& params, const TensorGrads& grads, const SparsityMask* mask = nullptr) {
    if (grads.size() != params.tensor_count() || m_.size() != params.tensor_count()) {
      throw DimensionError("AdamW::step: gradient/parameter tensor count mismatch");
    }
    if (mask != nullptr) check_mask_shape(params, *mask);
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    const double step_size = cfg_.lr / bc1;
    const double decay = 1.0 - cfg_.lr * cfg_.weight_decay;
    for (std::size_t t = 0; t < params.tensor_count(); ++t) {
      auto w = params.tensor(t);
      const auto& g = grads[t];
      if (g.size() != w.size()) throw DimensionError("AdamW::step: gradient shape mismatch");
      auto& m = m_[t];
      auto& v = v_[t];
      const std::uint8_t* keep = mask != nullptr ? mask->keep[t].data() : nullptr;
      for (std::size_t j = 0; j < w.size(); ++j) {
        if (keep != nullptr && keep[j] == 0) continue;
        m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g[j];
        v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
        w[j] = w[j] * decay - step_size * m[j] / (std::sqrt(v[j] / bc2) + cfg_.eps);
      }
    }
  }

  void reset_moments(std::size_t t, std::size_t j) {
    m_.at(t).at(j) = 0.0;
    v_.at(t).at(j) = 0.0;
  }

 private:
  AdamWConfig cfg_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  std::size_t step_ = 0;
};

// Coordinates kept by `before` and pruned by `after`, per tensor.
inline std::vector<std::vector<std::size_t>> newly_pruned(const SparsityMask& before,
                                                          const SparsityMask& after) {
  if (before.tensor_count() != after.tensor_count()) {
    throw DimensionError("newly_pruned: masks cover different tensor counts");
  }
  std::vector<std::vector<std::size_t>> out(before.tensor_count());
  for (std::size_t t = 0; t < before.tensor_count(); ++t) {
    if (before.keep[t].size() != after.keep[t].size()) {
      throw DimensionError("newly_pruned: mask lengths differ");
    }
    for (std::size_t j = 0; j < before.keep[t].size(); ++j)
      if (before.keep[t][j] == 1 && after.keep[t][j] == 0) out[t].push_back(j);
  }
  return out;
}

// Clears moments of coordinates pruned at a commit and zeroes them.
inline void reset_pruned_state(MergedAdapterSet& params, AdamW& opt,
                               const std::vector<std::vector<std::size_t>>& pruned_now) {
  for (std::size_t t = 0; t < pruned_now.size(); ++t) {
    auto w = params.tensor(t);
    for (auto j : pruned_now[t]) {
      w[j] = 0.0;
      opt.reset_moments(t, j);
    }
  }
}

// One training update under a mask: AdamW on kept coordinates, optional
// state reset at coordinates pruned by the latest commit, mask reapplied.
inline void optimizer_step_and_reset(MergedAdapterSet& params, const TensorGrads& grads, AdamW& opt,
                                     const SparsityMask& mask,
                                     const std::vector<std::vector<std::size_t>>& pruned_now = {}) {
  reset_pruned_state(params, opt, pruned_now);
  opt.step(params, grads, &mask);
  apply_mask_inplace(params, mask);
}

}  // namespace grasp
