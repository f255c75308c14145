/*
 * Copyright (c) 2026 The oac-quant Authors. All Rights Reserved.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include "oac/matrix.hpp"
#include "oac/error.hpp"

#include <cmath>
#include <string>

namespace oac {

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    throw Error(Errc::kDimMismatch, "matrix data length " + std::to_string(data_.size()) +
                                        " != " + std::to_string(rows) + "x" + std::to_string(cols));
  }
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

bool Matrix::all_finite() const noexcept {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

Matrix Matrix::transposed() const {
  Matrix t(cols_, rows_);
  for (std::size_t r = 0; r < rows_; ++r) {
    for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
  }
  return t;
}

SymMatrix::SymMatrix(std::size_t dim) : dim_(dim), data_(dim * dim, 0.0) {}

SymMatrix::SymMatrix(const Matrix& m) : dim_(m.rows()), data_(m.rows() * m.rows()) {
  if (m.rows() != m.cols() || m.rows() == 0) {
    throw Error(Errc::kShapeMismatch, "symmetric matrix requires a non-empty square input, got " +
                                          std::to_string(m.rows()) + "x" + std::to_string(m.cols()));
  }
  for (std::size_t r = 0; r < dim_; ++r) {
    data_[r * dim_ + r] = m(r, r);
    for (std::size_t c = r + 1; c < dim_; ++c) {
      const double v = 0.5 * (m(r, c) + m(c, r));
      data_[r * dim_ + c] = v;
      data_[c * dim_ + r] = v;
    }
  }
}

SymMatrix SymMatrix::identity(std::size_t n) {
  SymMatrix s(n);
  s.add_diagonal(1.0);
  return s;
}

SymMatrix SymMatrix::diagonal(std::span<const double> diag) {
  SymMatrix s(diag.size());
  for (std::size_t i = 0; i < diag.size(); ++i) s.data_[i * s.dim_ + i] = diag[i];
  return s;
}

std::vector<double> SymMatrix::diagonal_values() const {
  std::vector<double> d(dim_);
  for (std::size_t i = 0; i < dim_; ++i) d[i] = data_[i * dim_ + i];
  return d;
}

double SymMatrix::mean_diagonal() const {
  double sum = 0.0;
  for (std::size_t i = 0; i < dim_; ++i) sum += data_[i * dim_ + i];
  return dim_ == 0 ? 0.0 : sum / static_cast<double>(dim_);
}

void SymMatrix::add_outer(std::span<const double> x, double scale) {
  assert(x.size() == dim_);
  for (std::size_t r = 0; r < dim_; ++r) {
    const double xr = scale * x[r];
    if (xr == 0.0) continue;
    double* row = data_.data() + r * dim_;
    for (std::size_t c = r; c < dim_; ++c) row[c] += xr * x[c];
  }
  // Mirror the upper triangle so both halves hold identical bits.
  for (std::size_t r = 0; r < dim_; ++r) {
    for (std::size_t c = r + 1; c < dim_; ++c) data_[c * dim_ + r] = data_[r * dim_ + c];
  }
}

void SymMatrix::add_gram(const Matrix& g) {
  assert(g.cols() == dim_);
  for (std::size_t j = 0; j < g.rows(); ++j) {
    const auto gr = g.row(j);
    for (std::size_t r = 0; r < dim_; ++r) {
      const double v = gr[r];
      if (v == 0.0) continue;
      double* row = data_.data() + r * dim_;
      for (std::size_t c = r; c < dim_; ++c) row[c] += v * gr[c];
    }
  }
  for (std::size_t r = 0; r < dim_; ++r) {
    for (std::size_t c = r + 1; c < dim_; ++c) data_[c * dim_ + r] = data_[r * dim_ + c];
  }
}

void SymMatrix::add_diagonal(double value) {
  for (std::size_t i = 0; i < dim_; ++i) data_[i * dim_ + i] += value;
}

void SymMatrix::add(const SymMatrix& other) {
  assert(other.dim_ == dim_);
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
}

void SymMatrix::scale(double factor) {
  for (double& v : data_) v *= factor;
}

void SymMatrix::divide(double divisor) {
  for (double& v : data_) v /= divisor;
}

bool SymMatrix::all_finite() const noexcept {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

Matrix SymMatrix::to_matrix() const { return Matrix(dim_, dim_, data_); }

}  // namespace oac
