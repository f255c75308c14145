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

#include "oac/linalg.hpp"
#include "oac/error.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace oac {

namespace {

// Pivots below this fraction of the largest diagonal entry are treated as
// zero: the matrix is singular to working precision.
constexpr double kRelativePivotFloor = 1e-13;

Matrix invert_lower(const Matrix& l) {
  const std::size_t n = l.rows();
  Matrix inv(n, n);
  for (std::size_t col = 0; col < n; ++col) {
    inv(col, col) = 1.0 / l(col, col);
    for (std::size_t i = col + 1; i < n; ++i) {
      double sum = 0.0;
      for (std::size_t k = col; k < i; ++k) sum += l(i, k) * inv(k, col);
      inv(i, col) = -sum / l(i, i);
    }
  }
  return inv;
}

}  // namespace

CholeskyFactor cholesky(const SymMatrix& m) {
  const std::size_t n = m.dim();
  if (n == 0) throw Error(Errc::kShapeMismatch, "cholesky of an empty matrix");
  require_finite(m, "cholesky input");

  double max_diag = 0.0;
  for (std::size_t i = 0; i < n; ++i) max_diag = std::max(max_diag, std::abs(m(i, i)));
  const double floor = kRelativePivotFloor * max_diag;

  Matrix l(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    double d = m(j, j);
    for (std::size_t k = 0; k < j; ++k) d -= l(j, k) * l(j, k);
    if (!(d > floor) || max_diag == 0.0) {
      throw Error(Errc::kNotPositiveDefinite,
                  "pivot " + std::to_string(j) + " is " + std::to_string(d) + " (dim " +
                      std::to_string(n) + "); add diagonal damping");
    }
    const double ljj = std::sqrt(d);
    l(j, j) = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = m(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
      l(i, j) = s / ljj;
    }
  }
  return CholeskyFactor(std::move(l));
}

SymMatrix cholesky_inverse(const CholeskyFactor& f) {
  const Matrix linv = invert_lower(f.lower());
  const std::size_t n = f.dim();
  // (L L^T)^{-1} = L^{-T} L^{-1}; entry (i,j) sums over k >= max(i,j).
  Matrix inv(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      double s = 0.0;
      for (std::size_t k = i; k < n; ++k) s += linv(k, i) * linv(k, j);
      inv(i, j) = s;
      inv(j, i) = s;
    }
  }
  if (!inv.all_finite()) throw Error(Errc::kNonFinite, "cholesky_inverse overflowed");
  return SymMatrix(inv);
}

Matrix inverse_upper_factor(const CholeskyFactor& f) {
  return cholesky(cholesky_inverse(f)).lower().transposed();
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw Error(Errc::kDimMismatch, "matmul " + std::to_string(a.rows()) + "x" +
                                        std::to_string(a.cols()) + " by " +
                                        std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  }
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto orow = out.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double v = a(i, k);
      if (v == 0.0) continue;
      const auto brow = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) orow[j] += v * brow[j];
    }
  }
  return out;
}

Matrix matmul_transposed(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) throw Error(Errc::kDimMismatch, "matmul_transposed inner dims differ");
  Matrix out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const auto arow = a.row(i);
    for (std::size_t j = 0; j < b.rows(); ++j) {
      const auto brow = b.row(j);
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += arow[k] * brow[k];
      out(i, j) = s;
    }
  }
  return out;
}

Matrix difference(const Matrix& b, const Matrix& a) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw Error(Errc::kShapeMismatch, "difference of differently shaped matrices");
  }
  Matrix d(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) d.data()[i] = b.data()[i] - a.data()[i];
  return d;
}

double quadratic_form(std::span<const double> x, const SymMatrix& h) {
  assert(x.size() == h.dim());
  double total = 0.0;
  for (std::size_t r = 0; r < h.dim(); ++r) {
    if (x[r] == 0.0) continue;
    const auto hr = h.row(r);
    double s = 0.0;
    for (std::size_t c = 0; c < h.dim(); ++c) s += hr[c] * x[c];
    total += x[r] * s;
  }
  return total;
}

double quadratic_trace(const Matrix& dw, const SymMatrix& h) {
  if (dw.cols() != h.dim()) throw Error(Errc::kDimMismatch, "quadratic_trace: cols != dim");
  double total = 0.0;
  for (std::size_t j = 0; j < dw.rows(); ++j) total += quadratic_form(dw.row(j), h);
  return total;
}

double frobenius_norm(const Matrix& m) {
  double s = 0.0;
  for (double v : m.data()) s += v * v;
  return std::sqrt(s);
}

double max_abs_difference(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw Error(Errc::kShapeMismatch, "max_abs_difference shape mismatch");
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

double max_abs_difference(const SymMatrix& a, const SymMatrix& b) {
  if (a.dim() != b.dim()) throw Error(Errc::kShapeMismatch, "max_abs_difference dim mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.data().size(); ++i) {
    m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  }
  return m;
}

std::vector<double> symmetric_eigenvalues(const SymMatrix& m) {
  const std::size_t n = m.dim();
  Matrix a = m.to_matrix();
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
    }
    if (off < 1e-30) break;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        if (a(p, q) == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * a(p, q));
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p);
          const double akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k);
          const double aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
      }
    }
  }
  std::vector<double> ev(n);
  for (std::size_t i = 0; i < n; ++i) ev[i] = a(i, i);
  std::sort(ev.begin(), ev.end());
  return ev;
}

void require_finite(const Matrix& m, const char* what) {
  if (!m.all_finite()) throw Error(Errc::kNonFinite, std::string(what) + " contains NaN/Inf");
}

void require_finite(const SymMatrix& m, const char* what) {
  if (!m.all_finite()) throw Error(Errc::kNonFinite, std::string(what) + " contains NaN/Inf");
}

void require_finite(std::span<const double> v, const char* what) {
  for (double x : v) {
    if (!std::isfinite(x)) throw Error(Errc::kNonFinite, std::string(what) + " contains NaN/Inf");
  }
}

}  // namespace oac
