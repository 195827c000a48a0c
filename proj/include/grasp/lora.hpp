#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "grasp/error.hpp"
#include "grasp/matrix.hpp"

namespace grasp {

// Low-rank update at one projection site: delta = (alpha / rank) * B * A,
// with A of shape rank x d_in and B of shape d_out x rank.
struct LoraAdapter {
  std::string site_id;
  Matrix a;
  Matrix b;
  double alpha = 1.0;

  std::size_t rank() const noexcept { return a.rows(); }
  std::size_t d_in() const noexcept { return a.cols(); }
  std::size_t d_out() const noexcept { return b.rows(); }
  double scale() const noexcept { return alpha / static_cast<double>(rank()); }

  void validate() const {
    if (a.rows() == 0) throw DimensionError("LoraAdapter " + site_id + ": rank must be >= 1");
    if (b.cols() != a.rows()) {
      throw DimensionError("LoraAdapter " + site_id + ": A is " + shape_string(a) + ", B is " +
                           shape_string(b));
    }
  }
};

inline Matrix lora_delta(const LoraAdapter& adapter) {
  adapter.validate();
  return scaled(matmul(adapter.b, adapter.a), adapter.scale());
}

// Stacked merge at one site. `scale` multiplies B*A; for a merge of adapters
// sharing one scale the factors are stacked verbatim, otherwise each
// constituent scale is folded into its B columns and `scale` is 1.
struct MergedSite {
  std::string site_id;
  Matrix a;  // merged_rank x d_in
  Matrix b;  // d_out x merged_rank
  double scale = 1.0;

  std::size_t rank() const noexcept { return a.rows(); }
  Matrix delta() const { return scaled(matmul(b, a), scale); }
};

inline MergedSite merge_adapters(std::span<const LoraAdapter> adapters, const std::string& site_id) {
  if (adapters.empty()) throw UsageError("merge_adapters: empty adapter list for site " + site_id);
  for (const auto& adapter : adapters) {
    adapter.validate();
    if (adapter.site_id != site_id) {
      throw UsageError("merge_adapters: adapter for site " + adapter.site_id + " passed for " +
                       site_id);
    }
    if (adapter.d_in() != adapters[0].d_in() || adapter.d_out() != adapters[0].d_out()) {
      throw DimensionError("merge_adapters: incompatible adapter shapes at site " + site_id);
    }
  }
  bool shared_scale = true;
  for (const auto& adapter : adapters) shared_scale &= adapter.scale() == adapters[0].scale();

  std::size_t total_rank = 0;
  for (const auto& adapter : adapters) total_rank += adapter.rank();
  const std::size_t d_in = adapters[0].d_in();
  const std::size_t d_out = adapters[0].d_out();

  MergedSite merged{site_id, Matrix(total_rank, d_in), Matrix(d_out, total_rank),
                    shared_scale ? adapters[0].scale() : 1.0};
  std::size_t offset = 0;
  for (const auto& adapter : adapters) {
    const double fold = shared_scale ? 1.0 : adapter.scale();
    for (std::size_t r = 0; r < adapter.rank(); ++r) {
      for (std::size_t j = 0; j < d_in; ++j) merged.a(offset + r, j) = adapter.a(r, j);
      for (std::size_t i = 0; i < d_out; ++i) merged.b(i, offset + r) = fold * adapter.b(i, r);
    }
    offset += adapter.rank();
  }
  return merged;
}

enum class Factor { A, B };

struct TensorRef {
  std::size_t site;
  Factor factor;
  std::size_t entries;
};

// Trainable merged LoRA parameters across all sites. Tensor id t maps to
// site t / 2; even ids are A factors, odd ids are B factors.
class MergedAdapterSet {
 public:
  MergedAdapterSet() = default;
  explicit MergedAdapterSet(std::vector<MergedSite> sites) : sites_(std::move(sites)) {
    for (const auto& s : sites_) {
      if (s.b.cols() != s.a.rows()) {
        throw DimensionError("MergedAdapterSet: site " + s.site_id + " has A " +
                             shape_string(s.a) + " and B " + shape_string(s.b));
      }
    }
  }

  std::size_t site_count() const noexcept { return sites_.size(); }
  std::size_t tensor_count() const noexcept { return 2 * sites_.size(); }
  const std::vector<MergedSite>& sites() const noexcept { return sites_; }
  const MergedSite& site(std::size_t i) const { return sites_.at(i); }
  MergedSite& site(std::size_t i) { return sites_.at(i); }

  TensorRef tensor_ref(std::size_t t) const {
    const auto& s = sites_.at(t / 2);
    const Factor f = t % 2 == 0 ? Factor::A : Factor::B;
    return {t / 2, f, f == Factor::A ? s.a.size() : s.b.size()};
  }

  std::span<double> tensor(std::size_t t) {
    auto& s = sites_.at(t / 2);
    return t % 2 == 0 ? s.a.values() : s.b.values();
  }
  std::span<const double> tensor(std::size_t t) const {
    const auto& s = sites_.at(t / 2);
    return t % 2 == 0 ? s.a.values() : s.b.values();
  }

  std::size_t total_entries() const noexcept {
    std::size_t n = 0;
    for (const auto& s : sites_) n += s.a.size() + s.b.size();
    return n;
  }

  friend bool operator==(const MergedAdapterSet& lhs, const MergedAdapterSet& rhs) {
    if (lhs.sites_.size() != rhs.sites_.size()) return false;
    for (std::size_t i = 0; i < lhs.sites_.size(); ++i) {
      const auto& l = lhs.sites_[i];
      const auto& r = rhs.sites_[i];
      if (l.site_id != r.site_id || l.scale != r.scale || !(l.a == r.a) || !(l.b == r.b))
        return false;
    }
    return true;
  }

 private:
  std::vector<MergedSite> sites_;
};

// Merges adapter sets site by site. Every set must cover the same sites in
// the same order.
inline MergedAdapterSet merge_adapter_sets(const std::vector<std::vector<LoraAdapter>>& sets) {
  if (sets.empty()) throw UsageError("merge_adapter_sets: no adapter sets");
  std::vector<MergedSite> merged;
  for (std::size_t s = 0; s < sets[0].size(); ++s) {
    std::vector<LoraAdapter> at_site;
    for (const auto& set : sets) {
      if (set.size() != sets[0].size()) throw UsageError("merge_adapter_sets: site count differs");
      at_site.push_back(set[s]);
    }
    merged.push_back(merge_adapters(at_site, sets[0][s].site_id));
  }
  return MergedAdapterSet(std::move(merged));
}

// A single adapter set viewed as trainable parameters (merge of one).
inline MergedAdapterSet as_parameter_set(const std::vector<LoraAdapter>& adapters) {
  return merge_adapter_sets({adapters});
}

// Inverse of as_parameter_set for an unmerged set: rank and alpha recovered
// from the stored scale.
inline std::vector<LoraAdapter> to_adapters(const MergedAdapterSet& params) {
  std::vector<LoraAdapter> out;
  for (const auto& s : params.sites()) {
    out.push_back({s.site_id, s.a, s.b, s.scale * static_cast<double>(s.rank())});
  }
  return out;
}

struct BackboneSite {
  std::string site_id;
  Matrix w;  // d_out x d_in
};

// Frozen per-site base weights. Immutable after construction.
class FrozenBackbone {
 public:
  FrozenBackbone(std::vector<BackboneSite> sites, std::size_t embedding_dim)
      : sites_(std::move(sites)), embedding_dim_(embedding_dim) {
    for (const auto& s : sites_) {
      if (s.w.cols() != embedding_dim_) {
        throw DimensionError("FrozenBackbone: site " + s.site_id + " weight " +
                             shape_string(s.w) + " does not take inputs of dim " +
                             std::to_string(embedding_dim_));
      }
    }
  }

  std::size_t site_count() const noexcept { return sites_.size(); }
  const BackboneSite& site(std::size_t i) const { return sites_.at(i); }
  const std::vector<BackboneSite>& sites() const noexcept { return sites_; }
  std::size_t embedding_dim() const noexcept { return embedding_dim_; }

 private:
  std::vector<BackboneSite> sites_;
  std::size_t embedding_dim_;
};

// h * W^T + scale * h * (M_B (.) B  *  M_A (.) A)^T. Masks hold one byte per
// factor entry (1 keeps, 0 prunes); empty spans mean "keep everything".
inline Matrix apply_projection(const Matrix& h, const Matrix& w, const MergedSite& merged,
                               std::span<const std::uint8_t> mask_a = {},
                               std::span<const std::uint8_t> mask_b = {}) {
  if (h.cols() != w.cols() || merged.a.cols() != w.cols() || merged.b.rows() != w.rows()) {
    throw DimensionError("apply_projection: h " + shape_string(h) + ", W " + shape_string(w) +
                         ", A " + shape_string(merged.a) + ", B " + shape_string(merged.b));
  }
  if ((!mask_a.empty() && mask_a.size() != merged.a.size()) ||
      (!mask_b.empty() && mask_b.size() != merged.b.size())) {
    throw DimensionError("apply_projection: mask length does not match factor");
  }
  Matrix a = merged.a;
  Matrix b = merged.b;
  if (!mask_a.empty())
    for (std::size_t i = 0; i < a.size(); ++i) a.values()[i] *= mask_a[i];
  if (!mask_b.empty())
    for (std::size_t i = 0; i < b.size(); ++i) b.values()[i] *= mask_b[i];

  Matrix base = matmul(h, transpose(w));
  Matrix low = matmul(matmul(h, transpose(a)), transpose(b));
  return base + scaled(std::move(low), merged.scale);
}

}  // namespace grasp
