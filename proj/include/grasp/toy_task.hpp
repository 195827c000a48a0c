#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "grasp/error.hpp"
#include "grasp/lora.hpp"
#include "grasp/matrix.hpp"
#include "grasp/optimizer.hpp"

namespace grasp {

// Teacher-generated regression task standing in for a high-resource source
// language and a low-resource target language on a shared frozen backbone.
struct ToyTaskConfig {
  std::size_t d_in = 32;
  std::size_t d_out = 32;
  std::size_t n_sites = 2;
  std::size_t true_rank = 3;  // rank of each teacher perturbation factor
  double perturbation_rms = 0.05;
  std::size_t source_train_n = 512;
  std::size_t target_train_n = 64;
  std::size_t dev_n = 64;
  std::size_t microdev_pool_n = 64;  // micro-dev slices are prefixes of this pool
  std::size_t test_n = 256;
  double noise_std = 0.05;
  double interference = 0.5;

  void validate() const {
    auto fail = [](const std::string& what) { throw UsageError("ToyTaskConfig: " + what); };
    if (d_in == 0 || d_out == 0 || n_sites == 0) fail("dimensions and site count must be >= 1");
    if (true_rank == 0 || true_rank > std::min(d_in, d_out)) fail("true_rank out of range");
    if (source_train_n == 0 || target_train_n == 0 || dev_n == 0 || microdev_pool_n == 0 ||
        test_n == 0) {
      fail("every split needs at least one example");
    }
    if (!(noise_std >= 0.0)) fail("noise_std must be >= 0");
    if (!(interference >= 0.0 && interference <= 1.0)) fail("interference must be in [0, 1]");
    if (!(perturbation_rms >= 0.0)) fail("perturbation_rms must be >= 0");
  }
};

// Examples of one split. `pool_index` identifies each row within the split's
// generation pool (dev and micro-dev share one pool).
struct Split {
  Matrix inputs;                 // n x d_in
  std::vector<Matrix> targets;   // per site, n x d_out
  std::vector<std::size_t> pool_index;

  std::size_t size() const noexcept { return inputs.rows(); }

  Split head(std::size_t m) const {
    if (m > size()) {
      throw UsageError("Split::head: requested " + std::to_string(m) + " of " +
                       std::to_string(size()) + " examples");
    }
    Split out;
    out.inputs = Matrix(m, inputs.cols(),
                        std::vector<double>(inputs.values().begin(),
                                            inputs.values().begin() +
                                                static_cast<std::ptrdiff_t>(m * inputs.cols())));
    for (const auto& t : targets) {
      out.targets.emplace_back(
          m, t.cols(),
          std::vector<double>(t.values().begin(),
                              t.values().begin() + static_cast<std::ptrdiff_t>(m * t.cols())));
    }
    out.pool_index.assign(pool_index.begin(), pool_index.begin() + static_cast<std::ptrdiff_t>(m));
    return out;
  }
};

struct ToyData {
  FrozenBackbone backbone;
  std::vector<Matrix> source_delta;
  std::vector<Matrix> target_delta;
  Split source_train;
  Split target_train;
  Split dev;
  Split microdev_pool;
  Split test;
};

inline std::string site_name(std::size_t i, std::size_t n_sites) {
  if (n_sites % 2 == 0) {
    return "layer" + std::to_string(i / 2) + (i % 2 == 0 ? ".q_proj" : ".v_proj");
  }
  return "site" + std::to_string(i);
}

namespace detail {

inline Matrix gaussian_matrix(std::size_t rows, std::size_t cols, double std_dev,
                              std::mt19937_64& rng) {
  std::normal_distribution<double> draw(0.0, std_dev);
  Matrix m(rows, cols);
  for (double& v : m.values()) v = draw(rng);
  return m;
}

inline double frobenius_dot(const Matrix& lhs, const Matrix& rhs) {
  double acc = 0.0;
  for (std::size_t i = 0; i < lhs.size(); ++i) acc += lhs.values()[i] * rhs.values()[i];
  return acc;
}

inline Matrix low_rank(const ToyTaskConfig& cfg, std::mt19937_64& rng) {
  return matmul(gaussian_matrix(cfg.d_out, cfg.true_rank, 1.0, rng),
                gaussian_matrix(cfg.true_rank, cfg.d_in, 1.0, rng));
}

inline Matrix with_norm(Matrix m, double norm) {
  const double current = frobenius_norm(m);
  return current == 0.0 ? m : scaled(std::move(m), norm / current);
}

inline Split make_split(const std::vector<Matrix>& teacher, std::size_t n, double noise_std,
                        std::size_t d_in, std::mt19937_64& rng) {
  Split s;
  s.inputs = gaussian_matrix(n, d_in, 1.0, rng);
  std::normal_distribution<double> noise(0.0, 1.0);
  for (const auto& w : teacher) {
    Matrix y = matmul(s.inputs, transpose(w));
    if (noise_std > 0.0)
      for (double& v : y.values()) v += noise_std * noise(rng);
    s.targets.push_back(std::move(y));
  }
  s.pool_index.resize(n);
  for (std::size_t i = 0; i < n; ++i) s.pool_index[i] = i;
  return s;
}

inline Split rows_of(const Split& s, std::size_t begin, std::size_t end) {
  Split out;
  const std::size_t n = end - begin;
  const std::size_t d = s.inputs.cols();
  std::vector<double> x(s.inputs.values().begin() + static_cast<std::ptrdiff_t>(begin * d),
                        s.inputs.values().begin() + static_cast<std::ptrdiff_t>(end * d));
  out.inputs = Matrix(n, d, std::move(x));
  for (const auto& t : s.targets) {
    const std::size_t c = t.cols();
    std::vector<double> y(t.values().begin() + static_cast<std::ptrdiff_t>(begin * c),
                          t.values().begin() + static_cast<std::ptrdiff_t>(end * c));
    out.targets.emplace_back(n, c, std::move(y));
  }
  out.pool_index.assign(s.pool_index.begin() + static_cast<std::ptrdiff_t>(begin),
                        s.pool_index.begin() + static_cast<std::ptrdiff_t>(end));
  return out;
}

}  // namespace detail

// Backbone W ~ N(0, 1/d_in). Source perturbation is a random rank-r matrix
// with the configured rms entry; the target perturbation is
// -interference * source + sqrt(1 - interference^2) * other, where `other`
// is Frobenius-orthogonal to the source and has the same norm.
inline ToyData gen_toy_data(const ToyTaskConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  std::vector<BackboneSite> sites;
  std::vector<Matrix> source_delta;
  std::vector<Matrix> target_delta;
  const double norm = cfg.perturbation_rms * std::sqrt(static_cast<double>(cfg.d_in * cfg.d_out));
  for (std::size_t s = 0; s < cfg.n_sites; ++s) {
    sites.push_back({site_name(s, cfg.n_sites),
                     detail::gaussian_matrix(cfg.d_out, cfg.d_in,
                                             1.0 / std::sqrt(static_cast<double>(cfg.d_in)), rng)});
    Matrix src = detail::with_norm(detail::low_rank(cfg, rng), norm);
    Matrix other = detail::low_rank(cfg, rng);
    const double src_sq = detail::frobenius_dot(src, src);
    if (src_sq > 0.0) other = other - scaled(src, detail::frobenius_dot(other, src) / src_sq);
    other = detail::with_norm(std::move(other), norm);
    const double i = cfg.interference;
    Matrix tgt = scaled(src, -i) + scaled(other, std::sqrt(1.0 - i * i));
    source_delta.push_back(std::move(src));
    target_delta.push_back(std::move(tgt));
  }
  std::vector<Matrix> source_teacher;
  std::vector<Matrix> target_teacher;
  for (std::size_t s = 0; s < cfg.n_sites; ++s) {
    source_teacher.push_back(sites[s].w + source_delta[s]);
    target_teacher.push_back(sites[s].w + target_delta[s]);
  }

  ToyData data{FrozenBackbone(std::move(sites), cfg.d_in), std::move(source_delta),
               std::move(target_delta), {}, {}, {}, {}, {}};
  data.source_train =
      detail::make_split(source_teacher, cfg.source_train_n, cfg.noise_std, cfg.d_in, rng);
  data.target_train =
      detail::make_split(target_teacher, cfg.target_train_n, cfg.noise_std, cfg.d_in, rng);
  // One held-out target pool: the first microdev_pool_n rows feed micro-dev
  // slices, the rest is the early-stopping dev split.
  Split pool = detail::make_split(target_teacher, cfg.microdev_pool_n + cfg.dev_n, cfg.noise_std,
                                  cfg.d_in, rng);
  data.microdev_pool = detail::rows_of(pool, 0, cfg.microdev_pool_n);
  data.dev = detail::rows_of(pool, cfg.microdev_pool_n, cfg.microdev_pool_n + cfg.dev_n);
  data.test = detail::make_split(target_teacher, cfg.test_n, cfg.noise_std, cfg.d_in, rng);
  return data;
}

// A split with the frozen backbone's contribution subtracted once:
// residual = target - h W^T. The toy loss only depends on the adapters
// through the residual.
struct EvalSet {
  Matrix inputs;
  std::vector<Matrix> residuals;

  std::size_t size() const noexcept { return inputs.rows(); }
};

inline EvalSet prepare(const FrozenBackbone& backbone, const Split& split) {
  if (split.targets.size() != backbone.site_count()) {
    throw DimensionError("prepare: split has " + std::to_string(split.targets.size()) +
                         " target blocks for " + std::to_string(backbone.site_count()) + " sites");
  }
  EvalSet out{split.inputs, {}};
  for (std::size_t s = 0; s < backbone.site_count(); ++s) {
    out.residuals.push_back(split.targets[s] -
                            matmul(split.inputs, transpose(backbone.site(s).w)));
  }
  return out;
}

namespace detail {

inline void check_compatible(const MergedAdapterSet& params, const EvalSet& set) {
  if (params.site_count() != set.residuals.size()) {
    throw DimensionError("toy model: parameter set and data disagree on site count");
  }
  for (std::size_t s = 0; s < params.site_count(); ++s) {
    const auto& site = params.site(s);
    if (site.a.cols() != set.inputs.cols() || site.b.rows() != set.residuals[s].cols()) {
      throw DimensionError("toy model: adapter shape does not match data at site " +
                           site.site_id);
    }
  }
}

// Squared error of one example at one site; fills u = A h and e = scale B u - r.
inline double example_error(const MergedSite& site, std::span<const double> h,
                            std::span<const double> r, std::vector<double>& u,
                            std::vector<double>& e) {
  const std::size_t rank = site.a.rows();
  const std::size_t d_in = site.a.cols();
  const std::size_t d_out = site.b.rows();
  u.assign(rank, 0.0);
  for (std::size_t k = 0; k < rank; ++k) {
    const double* a_row = site.a.values().data() + k * d_in;
    double acc = 0.0;
    for (std::size_t j = 0; j < d_in; ++j) acc += a_row[j] * h[j];
    u[k] = acc;
  }
  e.resize(d_out);
  double sq = 0.0;
  for (std::size_t i = 0; i < d_out; ++i) {
    const double* b_row = site.b.values().data() + i * rank;
    double acc = 0.0;
    for (std::size_t k = 0; k < rank; ++k) acc += b_row[k] * u[k];
    e[i] = site.scale * acc - r[i];
    sq += e[i] * e[i];
  }
  return sq;
}

}  // namespace detail

namespace detail {

// Summed squared error of examples n0..n0+B-1 at site s. Every product entry
// is a plain ascending sum, so blocking changes speed, not values; the B
// independent accumulators are what lets the loop pipeline.
template <std::size_t B>
double block_squared_error(const MergedSite& site, const EvalSet& set, std::size_t s,
                           std::size_t n0, double* u) {
  const std::size_t rank = site.a.rows();
  const std::size_t d_in = site.a.cols();
  const std::size_t d_out = site.b.rows();
  const double* a = site.a.values().data();
  const double* b = site.b.values().data();
  const double* h[B];
  const double* r[B];
  for (std::size_t q = 0; q < B; ++q) {
    h[q] = set.inputs.row(n0 + q).data();
    r[q] = set.residuals[s].row(n0 + q).data();
  }
  for (std::size_t k = 0; k < rank; ++k) {
    const double* ak = a + k * d_in;
    double acc[B] = {};
    for (std::size_t j = 0; j < d_in; ++j) {
      const double w = ak[j];
      #pragma GCC unroll 8
      for (std::size_t q = 0; q < B; ++q) acc[q] += w * h[q][j];
    }
    #pragma GCC unroll 8
    for (std::size_t q = 0; q < B; ++q) u[q * rank + k] = acc[q];
  }
  double sq = 0.0;
  for (std::size_t i = 0; i < d_out; ++i) {
    const double* bi = b + i * rank;
    double acc[B] = {};
    for (std::size_t k = 0; k < rank; ++k) {
      const double w = bi[k];
      #pragma GCC unroll 8
      for (std::size_t q = 0; q < B; ++q) acc[q] += w * u[q * rank + k];
    }
    #pragma GCC unroll 8
    for (std::size_t q = 0; q < B; ++q) {
      const double e = site.scale * acc[q] - r[q][i];
      sq += e * e;
    }
  }
  return sq;
}

}  // namespace detail

// Mean squared error over every example, site and output coordinate.
inline double dataset_loss(const MergedAdapterSet& params, const EvalSet& set) {
  detail::check_compatible(params, set);
  if (set.size() == 0) throw UsageError("dataset_loss: empty split");
  constexpr std::size_t kBlock = 4;
  double total = 0.0;
  std::size_t count = 0;
  std::vector<double> u;
  for (std::size_t s = 0; s < params.site_count(); ++s) {
    const auto& site = params.site(s);
    u.resize(kBlock * site.a.rows());
    std::size_t n = 0;
    for (; n + kBlock <= set.size(); n += kBlock) {
      total += detail::block_squared_error<kBlock>(site, set, s, n, u.data());
    }
    for (; n < set.size(); ++n) total += detail::block_squared_error<1>(site, set, s, n, u.data());
    count += set.size() * site.b.rows();
  }
  return total / static_cast<double>(count);
}

// Loss over `rows` and its analytic gradient w.r.t. every A and B entry.
inline double batch_loss_and_grad(const MergedAdapterSet& params, const EvalSet& set,
                                  std::span<const std::size_t> rows, TensorGrads& grads) {
  detail::check_compatible(params, set);
  if (rows.empty()) throw UsageError("batch_loss_and_grad: empty batch");
  if (grads.size() != params.tensor_count()) grads = zero_grads(params);
  for (std::size_t t = 0; t < params.tensor_count(); ++t) {
    grads[t].assign(params.tensor(t).size(), 0.0);
  }
  std::size_t count = 0;
  for (std::size_t s = 0; s < params.site_count(); ++s) count += rows.size() * params.site(s).b.rows();
  const double norm = 2.0 / static_cast<double>(count);

  std::vector<double> u;
  std::vector<double> e;
  std::vector<double> gu;
  double total = 0.0;
  for (std::size_t s = 0; s < params.site_count(); ++s) {
    const auto& site = params.site(s);
    const std::size_t rank = site.a.rows();
    const std::size_t d_in = site.a.cols();
    const std::size_t d_out = site.b.rows();
    auto& ga = grads[2 * s];
    auto& gb = grads[2 * s + 1];
    for (auto n : rows) {
      const auto h = set.inputs.row(n);
      total += detail::example_error(site, h, set.residuals[s].row(n), u, e);
      gu.assign(rank, 0.0);
      for (std::size_t i = 0; i < d_out; ++i) {
        const double gy = norm * site.scale * e[i];
        const double* b_row = site.b.values().data() + i * rank;
        double* gb_row = gb.data() + i * rank;
        for (std::size_t k = 0; k < rank; ++k) {
          gb_row[k] += gy * u[k];
          gu[k] += gy * b_row[k];
        }
      }
      for (std::size_t k = 0; k < rank; ++k) {
        double* ga_row = ga.data() + k * d_in;
        const double g = gu[k];
        for (std::size_t j = 0; j < d_in; ++j) ga_row[j] += g * h[j];
      }
    }
  }
  return total / static_cast<double>(count);
}

}  // namespace grasp
