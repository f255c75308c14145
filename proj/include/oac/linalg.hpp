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

#pragma once

#include "oac/matrix.hpp"

#include <span>

namespace oac {

/// Lower-triangular L with L L^T equal to the factored matrix. Only
/// obtainable through cholesky(), which guarantees a strictly positive
/// diagonal.
class CholeskyFactor {
 public:
  std::size_t dim() const noexcept { return lower_.rows(); }
  const Matrix& lower() const noexcept { return lower_; }

 private:
  friend CholeskyFactor cholesky(const SymMatrix& m);
  explicit CholeskyFactor(Matrix lower) : lower_(std::move(lower)) {}
  Matrix lower_;
};

/// Throws NotPositiveDefinite when a pivot is not safely positive; callers are
/// expected to add diagonal damping and retry.
CholeskyFactor cholesky(const SymMatrix& m);

/// (L L^T)^{-1} from the factor, via triangular inversion.
SymMatrix cholesky_inverse(const CholeskyFactor& f);

/// Upper-triangular U with U^T U == (L L^T)^{-1}. The column sweep of the
/// calibrator reads its rows as the sequential inverse-Hessian updates.
Matrix inverse_upper_factor(const CholeskyFactor& f);

Matrix matmul(const Matrix& a, const Matrix& b);
/// a * b^T
Matrix matmul_transposed(const Matrix& a, const Matrix& b);
/// (b - a) with shape check.
Matrix difference(const Matrix& b, const Matrix& a);

/// tr(dw * h * dw^T); the layer-wise quadratic error.
double quadratic_trace(const Matrix& dw, const SymMatrix& h);
/// x h x^T for a single row vector.
double quadratic_form(std::span<const double> x, const SymMatrix& h);

double frobenius_norm(const Matrix& m);
double max_abs_difference(const Matrix& a, const Matrix& b);
double max_abs_difference(const SymMatrix& a, const SymMatrix& b);

/// Jacobi eigenvalue sweep; used for PSD checks on small matrices.
std::vector<double> symmetric_eigenvalues(const SymMatrix& m);

void require_finite(const Matrix& m, const char* what);
void require_finite(const SymMatrix& m, const char* what);
void require_finite(std::span<const double> v, const char* what);

}  // namespace oac
