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

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

namespace oac {

enum class HessianMode { kAgnostic, kAdaptive };
enum class Reduction { kSum, kMean };

std::string_view to_string(HessianMode mode);
std::string_view to_string(Reduction reduction);
/// Accepts "agnostic"/"adaptive" and "sum"/"mean"; throws Config otherwise.
HessianMode parse_hessian_mode(std::string_view s);
Reduction parse_reduction(std::string_view s);

/// Streaming d_col x d_col Hessian estimate for one linear layer.
///
/// Agnostic mode accumulates input outer products x x^T (the layer-wise l2
/// objective). Adaptive mode accumulates G^T G for each per-sample weight
/// gradient G, which sums the row-wise Fisher blocks of every output row
/// without materializing them. The accumulator is single-writer; parallel
/// producers keep one each and merge().
class HessianAccumulator {
 public:
  HessianAccumulator(std::size_t dim, HessianMode mode, Reduction reduction = Reduction::kSum);

  std::size_t dim() const noexcept { return sum_.dim(); }
  HessianMode mode() const noexcept { return mode_; }
  Reduction reduction() const noexcept { return reduction_; }
  std::uint64_t n_samples() const noexcept { return n_samples_; }
  const SymMatrix& sum() const noexcept { return sum_; }

  /// Agnostic only. Throws DimMismatch / NonFinite, or Config on mode misuse.
  void accumulate_agnostic(std::span<const double> x);
  /// Adaptive only; g is one calibration sample's d_row x d_col gradient.
  void accumulate_adaptive(const Matrix& g);
  /// Sums another accumulator of the same dim/mode into this one.
  void merge(const HessianAccumulator& other);

  /// Sum mode returns the raw sum; Mean divides by n_samples. Throws
  /// EmptyAccumulator before the first sample.
  SymMatrix finalize() const;

 private:
  SymMatrix sum_;
  HessianMode mode_;
  Reduction reduction_;
  std::uint64_t n_samples_ = 0;
};

/// h + alpha * mean(diag(h)) * I. Throws NegativeAlpha.
SymMatrix regularize(const SymMatrix& h, double alpha);

// Binomial logistic regression: P(y=1|x) = sigmoid(w.x). This is the model on
// which the gradient outer product and the exact Hessian can be compared in
// closed form.
struct LogisticModel {
  std::vector<double> w;
};

/// Overflow-free sigmoid (branches on the sign of z).
double stable_sigmoid(double z);
/// Per-sample cross-entropy, computed with log1p to stay finite for large |w.x|.
double logistic_loss(const LogisticModel& m, std::span<const double> x, int y);
double logistic_mean_loss(const LogisticModel& m, const std::vector<std::vector<double>>& xs,
                          std::span<const int> ys);
/// x * (pi(x) - y). Throws DimMismatch.
std::vector<double> logistic_gradient(const LogisticModel& m, std::span<const double> x, int y);
/// (1/N) sum_i x_i pi_i (1 - pi_i) x_i^T. Throws EmptyInput / DimMismatch.
SymMatrix logistic_exact_hessian(const LogisticModel& m, const std::vector<std::vector<double>>& xs);
/// (1/N) sum_i E_{y ~ P(y|x_i)}[g g^T], evaluated by summing both labels
/// weighted by their model probabilities.
SymMatrix fisher_expected_outer(const LogisticModel& m, const std::vector<std::vector<double>>& xs);
/// (1/N) sum_i g_i g_i^T for supplied labels; with y drawn from the model
/// this is the sampled Fisher estimate.
SymMatrix empirical_fisher(const LogisticModel& m, const std::vector<std::vector<double>>& xs,
                           std::span<const int> ys);

}  // namespace oac
