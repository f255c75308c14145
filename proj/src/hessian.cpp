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

#include "oac/hessian.hpp"
#include "oac/error.hpp"
#include "oac/linalg.hpp"

#include <cmath>
#include <string>

namespace oac {

std::string_view to_string(HessianMode mode) {
  return mode == HessianMode::kAgnostic ? "agnostic" : "adaptive";
}

std::string_view to_string(Reduction reduction) {
  return reduction == Reduction::kSum ? "sum" : "mean";
}

HessianMode parse_hessian_mode(std::string_view s) {
  if (s == "agnostic") return HessianMode::kAgnostic;
  if (s == "adaptive") return HessianMode::kAdaptive;
  throw Error(Errc::kConfig, "unknown hessian mode '" + std::string(s) + "'");
}

Reduction parse_reduction(std::string_view s) {
  if (s == "sum") return Reduction::kSum;
  if (s == "mean") return Reduction::kMean;
  throw Error(Errc::kConfig, "unknown reduction '" + std::string(s) + "'");
}

HessianAccumulator::HessianAccumulator(std::size_t dim, HessianMode mode, Reduction reduction)
    : sum_(dim), mode_(mode), reduction_(reduction) {
  if (dim == 0) throw Error(Errc::kDimMismatch, "Hessian accumulator needs dim >= 1");
}

void HessianAccumulator::accumulate_agnostic(std::span<const double> x) {
  if (mode_ != HessianMode::kAgnostic) {
    throw Error(Errc::kConfig, "accumulate_agnostic on an adaptive accumulator");
  }
  if (x.size() != dim()) {
    throw Error(Errc::kDimMismatch, "input length " + std::to_string(x.size()) + " != " +
                                        std::to_string(dim()));
  }
  require_finite(x, "agnostic Hessian input");
  sum_.add_outer(x);
  ++n_samples_;
}

void HessianAccumulator::accumulate_adaptive(const Matrix& g) {
  if (mode_ != HessianMode::kAdaptive) {
    throw Error(Errc::kConfig, "accumulate_adaptive on an agnostic accumulator");
  }
  if (g.cols() != dim()) {
    throw Error(Errc::kDimMismatch, "gradient cols " + std::to_string(g.cols()) + " != " +
                                        std::to_string(dim()));
  }
  require_finite(g, "adaptive Hessian gradient");
  sum_.add_gram(g);
  ++n_samples_;
}

void HessianAccumulator::merge(const HessianAccumulator& other) {
  if (other.dim() != dim() || other.mode_ != mode_) {
    throw Error(Errc::kDimMismatch, "merging incompatible Hessian accumulators");
  }
  sum_.add(other.sum_);
  n_samples_ += other.n_samples_;
}

SymMatrix HessianAccumulator::finalize() const {
  if (n_samples_ == 0) throw Error(Errc::kEmptyAccumulator, "no samples accumulated");
  SymMatrix h = sum_;
  if (reduction_ == Reduction::kMean) h.divide(static_cast<double>(n_samples_));
  return h;
}

SymMatrix regularize(const SymMatrix& h, double alpha) {
  if (alpha < 0.0 || std::isnan(alpha)) {
    throw Error(Errc::kNegativeAlpha, "alpha = " + std::to_string(alpha));
  }
  if (h.dim() == 0) throw Error(Errc::kDimMismatch, "regularize of an empty matrix");
  SymMatrix out = h;
  const double shift = alpha * h.mean_diagonal();
  if (shift != 0.0) out.add_diagonal(shift);
  return out;
}

double stable_sigmoid(double z) {
  if (z >= 0.0) {
    return 1.0 / (1.0 + std::exp(-z));
  }
  const double e = std::exp(z);
  return e / (1.0 + e);
}

namespace {

double dot_checked(const LogisticModel& m, std::span<const double> x) {
  if (x.size() != m.w.size()) {
    throw Error(Errc::kDimMismatch, "input length " + std::to_string(x.size()) +
                                        " != weight length " + std::to_string(m.w.size()));
  }
  double z = 0.0;
  for (std::size_t k = 0; k < x.size(); ++k) z += m.w[k] * x[k];
  return z;
}

// log(1 + e^z) without overflow.
double softplus(double z) { return z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

void check_inputs(const LogisticModel& m, const std::vector<std::vector<double>>& xs) {
  if (xs.empty()) throw Error(Errc::kEmptyInput, "logistic Hessian over zero samples");
  for (const auto& x : xs) {
    if (x.size() != m.w.size()) throw Error(Errc::kDimMismatch, "inconsistent sample dims");
  }
}

}  // namespace

double logistic_loss(const LogisticModel& m, std::span<const double> x, int y) {
  const double z = dot_checked(m, x);
  // -[y log pi + (1-y) log(1-pi)] with log pi = -softplus(-z), log(1-pi) = -softplus(z).
  return y == 1 ? softplus(-z) : softplus(z);
}

double logistic_mean_loss(const LogisticModel& m, const std::vector<std::vector<double>>& xs,
                          std::span<const int> ys) {
  if (xs.empty() || xs.size() != ys.size()) throw Error(Errc::kEmptyInput, "logistic loss inputs");
  double total = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) total += logistic_loss(m, xs[i], ys[i]);
  return total / static_cast<double>(xs.size());
}

std::vector<double> logistic_gradient(const LogisticModel& m, std::span<const double> x, int y) {
  const double pi = stable_sigmoid(dot_checked(m, x));
  const double r = pi - static_cast<double>(y);
  std::vector<double> g(x.size());
  for (std::size_t k = 0; k < x.size(); ++k) g[k] = x[k] * r;
  return g;
}

SymMatrix logistic_exact_hessian(const LogisticModel& m, const std::vector<std::vector<double>>& xs) {
  check_inputs(m, xs);
  SymMatrix h(m.w.size());
  for (const auto& x : xs) {
    const double pi = stable_sigmoid(dot_checked(m, x));
    h.add_outer(x, pi * (1.0 - pi));
  }
  h.divide(static_cast<double>(xs.size()));
  return h;
}

SymMatrix fisher_expected_outer(const LogisticModel& m, const std::vector<std::vector<double>>& xs) {
  check_inputs(m, xs);
  SymMatrix h(m.w.size());
  for (const auto& x : xs) {
    const double pi = stable_sigmoid(dot_checked(m, x));
    // E_y[(pi - y)^2] = pi (pi - 1)^2 + (1 - pi) pi^2
    const double second_moment = pi * (pi - 1.0) * (pi - 1.0) + (1.0 - pi) * pi * pi;
    h.add_outer(x, second_moment);
  }
  h.divide(static_cast<double>(xs.size()));
  return h;
}

SymMatrix empirical_fisher(const LogisticModel& m, const std::vector<std::vector<double>>& xs,
                           std::span<const int> ys) {
  check_inputs(m, xs);
  if (ys.size() != xs.size()) throw Error(Errc::kDimMismatch, "labels/samples length mismatch");
  SymMatrix h(m.w.size());
  for (std::size_t i = 0; i < xs.size(); ++i) h.add_outer(logistic_gradient(m, xs[i], ys[i]));
  h.divide(static_cast<double>(xs.size()));
  return h;
}

}  // namespace oac
