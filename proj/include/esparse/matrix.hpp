#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "esparse/errors.hpp"

namespace esparse {

/// Dense row-major matrix. Value type, owns its storage.
template <typename T>
class Matrix {
 public:
  using value_type = T;

  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, T fill = T{})
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw ShapeError("matrix buffer does not match its shape");
    }
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  std::span<T> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }
  std::vector<T> release() && { return std::move(data_); }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

using MatrixF = Matrix<float>;
using MatrixD = Matrix<double>;
using Mask = Matrix<std::uint8_t>;

/// Column k of the result is column order[k] of the input.
template <typename T>
Matrix<T> permute_columns(const Matrix<T>& m, std::span<const std::size_t> order) {
  if (order.size() != m.cols()) throw ShapeError("permutation length does not match column count");
  Matrix<T> out(m.rows(), m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const auto src = m.row(r);
    auto dst = out.row(r);
    for (std::size_t k = 0; k < order.size(); ++k) dst[k] = src[order[k]];
  }
  return out;
}

/// Inverse of permute_columns: column order[k] of the result is column k of the input.
template <typename T>
Matrix<T> unpermute_columns(const Matrix<T>& m, std::span<const std::size_t> order) {
  if (order.size() != m.cols()) throw ShapeError("permutation length does not match column count");
  Matrix<T> out(m.rows(), m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const auto src = m.row(r);
    auto dst = out.row(r);
    for (std::size_t k = 0; k < order.size(); ++k) dst[order[k]] = src[k];
  }
  return out;
}

}  // namespace esparse
