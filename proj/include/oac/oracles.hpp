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

// Reference computations that the library is checked against. Nothing here
// calls into the Cholesky path or the column sweep except as the subject of a
// comparison.

#include "oac/matrix.hpp"

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace oac::oracle {

/// Solves a x = b by Gaussian elimination with partial pivoting. Throws
/// DimMismatch on shape errors and NonFinite when a pivot vanishes.
std::vector<double> solve_dense(Matrix a, std::vector<double> b);

/// Minimizer of tr(dW h dW^T) subject to dW[:, k] = target[:, k] - w0[:, k]
/// for every k in fixed, solved row by row through the full KKT system
///   [2h  E^T] [d]   [0]
///   [E   0  ] [l] = [c].
Matrix constrained_update(const Matrix& w0, const Matrix& target, std::span<const std::size_t> fixed,
                          const SymMatrix& h);

/// (f(x + step) - f(x - step)) / (2 step)
double central_difference(const std::function<double(double)>& f, double x, double step);

/// Row-wise Hessians H_j = sum_i G_j[i]^T G_j[i], one d_col x d_col matrix per
/// output row, kept separately so the aggregated form can be compared to them.
class RowHessianSet {
 public:
  RowHessianSet(std::size_t rows, std::size_t cols);
  void add(const Matrix& g);
  const SymMatrix& row(std::size_t j) const { return rows_[j]; }
  std::size_t size() const { return rows_.size(); }
  SymMatrix aggregate() const;

 private:
  std::vector<SymMatrix> rows_;
};

struct PropertyResult {
  std::string name;
  bool passed = false;
  /// Worst observed value of the checked quantity (an error or a count).
  double measured = 0.0;
  double tolerance = 0.0;
  std::size_t trials = 0;
  std::string detail;
};

nlohmann::json to_json(const PropertyResult& r);

/// E_y[g g^T] built from both label gradients vs the exact logistic Hessian.
PropertyResult check_fisher_identity(std::uint64_t seed, std::size_t draws = 50, std::size_t max_dim = 16);
/// Sampled-label Fisher estimate: error at N=10^4 below error at N=10^2 in at
/// least 95% of the trials.
PropertyResult check_sampled_fisher_convergence(std::uint64_t seed, std::size_t trials = 20);
/// Column sweep vs constrained_update after every column. update_scale != 1
/// corrupts the sweep and must make this fail.
PropertyResult check_update_optimality(std::uint64_t seed, std::size_t layers = 100, double update_scale = 1.0);
/// tr(dW (sum_j H_j) dW^T) >= sum_j dW_j H_j dW_j^T - 1e-9.
PropertyResult check_aggregation_bound(std::uint64_t seed, std::size_t instances = 100);
/// Accumulated G^T G equals sum_j H_j within 1e-10.
PropertyResult check_gram_equivalence(std::uint64_t seed, std::size_t instances = 100);

struct SuiteOptions {
  double update_scale = 1.0;
};

/// {"seed", "all_passed", "properties": [...]}
nlohmann::json run_oracle_suite(std::uint64_t seed, const SuiteOptions& options = {});
/// Empty when the document matches the oracle report schema.
std::vector<std::string> validate_oracle_report(const nlohmann::json& report);

}  // namespace oac::oracle
