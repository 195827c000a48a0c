#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "grasp/error.hpp"

namespace grasp {

// Dense row-major matrix of doubles. Entries are finite at construction.
class Matrix {
 public:
  Matrix() = default;

  Matrix(std::size_t rows, std::size_t cols)
      : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {}

  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw DimensionError("Matrix: data length " + std::to_string(data_.size()) +
                           " != " + std::to_string(rows_) + "x" + std::to_string(cols_));
    }
    for (double v : data_) {
      if (!std::isfinite(v)) throw NumericalError("Matrix: non-finite entry at construction");
    }
  }

  Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& row : rows) {
      if (row.size() != cols_) throw DimensionError("Matrix: ragged initializer");
      for (double v : row) {
        if (!std::isfinite(v)) throw NumericalError("Matrix: non-finite entry at construction");
        data_.push_back(v);
      }
    }
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  bool same_shape(const Matrix& other) const noexcept {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline std::string shape_string(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

inline Matrix matmul(const Matrix& lhs, const Matrix& rhs) {
  if (lhs.cols() != rhs.rows()) {
    throw DimensionError("matmul: " + shape_string(lhs) + " * " + shape_string(rhs));
  }
  Matrix out(lhs.rows(), rhs.cols());
  for (std::size_t i = 0; i < lhs.rows(); ++i) {
    auto out_row = out.row(i);
    for (std::size_t k = 0; k < lhs.cols(); ++k) {
      const double a = lhs(i, k);
      if (a == 0.0) continue;
      auto rhs_row = rhs.row(k);
      for (std::size_t j = 0; j < rhs.cols(); ++j) out_row[j] += a * rhs_row[j];
    }
  }
  return out;
}

inline Matrix transpose(const Matrix& m) {
  Matrix out(m.cols(), m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) out(j, i) = m(i, j);
  return out;
}

inline Matrix scaled(Matrix m, double factor) {
  for (double& v : m.values()) v *= factor;
  return m;
}

inline Matrix operator+(const Matrix& lhs, const Matrix& rhs) {
  if (!lhs.same_shape(rhs)) {
    throw DimensionError("add: " + shape_string(lhs) + " + " + shape_string(rhs));
  }
  Matrix out = lhs;
  auto o = out.values();
  auto r = rhs.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += r[i];
  return out;
}

inline Matrix operator-(const Matrix& lhs, const Matrix& rhs) {
  if (!lhs.same_shape(rhs)) {
    throw DimensionError("sub: " + shape_string(lhs) + " - " + shape_string(rhs));
  }
  Matrix out = lhs;
  auto o = out.values();
  auto r = rhs.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] -= r[i];
  return out;
}

inline double frobenius_norm(const Matrix& m) {
  double acc = 0.0;
  for (double v : m.values()) acc += v * v;
  return std::sqrt(acc);
}

inline double max_abs_diff(const Matrix& lhs, const Matrix& rhs) {
  if (!lhs.same_shape(rhs)) throw DimensionError("max_abs_diff: shape mismatch");
  double worst = 0.0;
  auto l = lhs.values();
  auto r = rhs.values();
  for (std::size_t i = 0; i < l.size(); ++i) worst = std::max(worst, std::abs(l[i] - r[i]));
  return worst;
}

// ||lhs - rhs||_F / max(||rhs||_F, tiny). Zero when both are zero.
inline double relative_error(const Matrix& lhs, const Matrix& rhs) {
  const double denom = frobenius_norm(rhs);
  const double num = frobenius_norm(lhs - rhs);
  if (denom == 0.0) return num;
  return num / denom;
}

}  // namespace grasp
