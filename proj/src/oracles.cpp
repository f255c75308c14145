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

#include "oac/oracles.hpp"
#include "oac/calibrator.hpp"
#include "oac/error.hpp"
#include "oac/hessian.hpp"
#include "oac/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

namespace oac::oracle {

std::vector<double> solve_dense(Matrix a, std::vector<double> b) {
  const std::size_t n = a.rows();
  if (a.cols() != n || b.size() != n) throw Error(Errc::kDimMismatch, "solve_dense shape mismatch");
  for (std::size_t k = 0; k < n; ++k) {
    std::size_t piv = k;
    for (std::size_t r = k + 1; r < n; ++r) {
      if (std::abs(a(r, k)) > std::abs(a(piv, k))) piv = r;
    }
    if (a(piv, k) == 0.0) throw Error(Errc::kNonFinite, "singular system in solve_dense");
    if (piv != k) {
      for (std::size_t c = 0; c < n; ++c) std::swap(a(k, c), a(piv, c));
      std::swap(b[k], b[piv]);
    }
    for (std::size_t r = k + 1; r < n; ++r) {
      const double f = a(r, k) / a(k, k);
      if (f == 0.0) continue;
      for (std::size_t c = k; c < n; ++c) a(r, c) -= f * a(k, c);
      b[r] -= f * b[k];
    }
  }
  std::vector<double> x(n);
  for (std::size_t k = n; k-- > 0;) {
    double s = b[k];
    for (std::size_t c = k + 1; c < n; ++c) s -= a(k, c) * x[c];
    x[k] = s / a(k, k);
  }
  return x;
}

Matrix constrained_update(const Matrix& w0, const Matrix& target, std::span<const std::size_t> fixed,
                          const SymMatrix& h) {
  const std::size_t d = h.dim();
  const std::size_t m = fixed.size();
  if (w0.cols() != d || target.cols() != d || target.rows() != w0.rows()) {
    throw Error(Errc::kDimMismatch, "constrained_update shape mismatch");
  }
  Matrix kkt(d + m, d + m);
  for (std::size_t r = 0; r < d; ++r) {
    for (std::size_t c = 0; c < d; ++c) kkt(r, c) = 2.0 * h(r, c);
  }
  for (std::size_t i = 0; i < m; ++i) {
    kkt(d + i, fixed[i]) = 1.0;
    kkt(fixed[i], d + i) = 1.0;
  }
  Matrix out(w0.rows(), d);
  for (std::size_t j = 0; j < w0.rows(); ++j) {
    std::vector<double> rhs(d + m, 0.0);
    for (std::size_t i = 0; i < m; ++i) rhs[d + i] = target(j, fixed[i]) - w0(j, fixed[i]);
    const std::vector<double> sol = solve_dense(kkt, rhs);
    for (std::size_t k = 0; k < d; ++k) out(j, k) = sol[k];
  }
  return out;
}

double central_difference(const std::function<double(double)>& f, double x, double step) {
  return (f(x + step) - f(x - step)) / (2.0 * step);
}

RowHessianSet::RowHessianSet(std::size_t rows, std::size_t cols) : rows_(rows, SymMatrix(cols)) {}

void RowHessianSet::add(const Matrix& g) {
  if (g.rows() != rows_.size() || g.cols() != rows_.front().dim()) {
    throw Error(Errc::kDimMismatch, "gradient shape does not match the row Hessian set");
  }
  for (std::size_t j = 0; j < rows_.size(); ++j) rows_[j].add_outer(g.row(j));
}

SymMatrix RowHessianSet::aggregate() const {
  SymMatrix total(rows_.front().dim());
  for (const SymMatrix& h : rows_) total.add(h);
  return total;
}

nlohmann::json to_json(const PropertyResult& r) {
  return {{"name", r.name},     {"passed", r.passed}, {"measured", r.measured},
          {"tolerance", r.tolerance}, {"trials", r.trials}, {"detail", r.detail}};
}

namespace {

using Rng = std::mt19937_64;

double normal(Rng& rng) { return std::normal_distribution<double>(0.0, 1.0)(rng); }

std::size_t uniform_size(Rng& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

Matrix random_matrix(Rng& rng, std::size_t rows, std::size_t cols, double scale = 1.0) {
  Matrix m(rows, cols);
  for (double& v : m.data()) v = scale * normal(rng);
  return m;
}

std::vector<std::vector<double>> random_inputs(Rng& rng, std::size_t n, std::size_t d) {
  std::vector<std::vector<double>> xs(n, std::vector<double>(d));
  for (auto& x : xs) {
    for (double& v : x) v = normal(rng);
  }
  return xs;
}

// Well-conditioned random SPD matrix A^T A + 0.1 I.
SymMatrix random_spd(Rng& rng, std::size_t d) {
  const Matrix a = random_matrix(rng, d + 2, d);
  SymMatrix h(d);
  for (std::size_t r = 0; r < a.rows(); ++r) h.add_outer(a.row(r));
  h.add_diagonal(0.1);
  return h;
}

std::string format_double(double v) {
  std::ostringstream os;
  os.precision(3);
  os << std::scientific << v;
  return os.str();
}

}  // namespace

PropertyResult check_fisher_identity(std::uint64_t seed, std::size_t draws, std::size_t max_dim) {
  PropertyResult res{"fisher_identity", false, 0.0, 1e-12, draws, {}};
  Rng rng(seed);
  for (std::size_t t = 0; t < draws; ++t) {
    const std::size_t d = uniform_size(rng, 1, max_dim);
    const std::size_t n = uniform_size(rng, 1, 64);
    LogisticModel m;
    for (std::size_t k = 0; k < d; ++k) m.w.push_back(2.0 * normal(rng));
    const auto xs = random_inputs(rng, n, d);
    // Expectation over y ~ Bernoulli(pi) written out label by label.
    SymMatrix expected(d);
    for (const auto& x : xs) {
      double z = 0.0;
      for (std::size_t k = 0; k < d; ++k) z += m.w[k] * x[k];
      const double pi = stable_sigmoid(z);
      expected.add_outer(logistic_gradient(m, x, 1), pi);
      expected.add_outer(logistic_gradient(m, x, 0), 1.0 - pi);
    }
    expected.divide(static_cast<double>(n));
    const SymMatrix exact = logistic_exact_hessian(m, xs);
    res.measured = std::max({res.measured, max_abs_difference(expected, exact),
                             max_abs_difference(fisher_expected_outer(m, xs), exact)});
  }
  res.passed = res.measured < res.tolerance;
  res.detail = "max |E_y[g g^T] - H| over " + std::to_string(draws) + " draws = " + format_double(res.measured);
  return res;
}

PropertyResult check_sampled_fisher_convergence(std::uint64_t seed, std::size_t trials) {
  PropertyResult res{"sampled_fisher_convergence", false, 0.0, 0.95, trials, {}};
  constexpr std::size_t kSmall = 100;
  constexpr std::size_t kLarge = 10000;
  constexpr std::size_t kDim = 8;
  std::size_t wins = 0;
  for (std::size_t t = 0; t < trials; ++t) {
    Rng rng(seed * 1000003 + t);
    LogisticModel m;
    for (std::size_t k = 0; k < kDim; ++k) m.w.push_back(normal(rng));
    const auto xs = random_inputs(rng, kLarge, kDim);
    std::vector<int> ys(kLarge);
    for (std::size_t i = 0; i < kLarge; ++i) {
      double z = 0.0;
      for (std::size_t k = 0; k < kDim; ++k) z += m.w[k] * xs[i][k];
      ys[i] = std::bernoulli_distribution(stable_sigmoid(z))(rng);
    }
    auto error_at = [&](std::size_t n) {
      const std::vector<std::vector<double>> sub(xs.begin(), xs.begin() + static_cast<std::ptrdiff_t>(n));
      return max_abs_difference(empirical_fisher(m, sub, std::span<const int>(ys).first(n)),
                                logistic_exact_hessian(m, sub));
    };
    if (error_at(kLarge) < error_at(kSmall)) ++wins;
  }
  res.measured = static_cast<double>(wins) / static_cast<double>(trials);
  res.passed = res.measured >= res.tolerance;
  res.detail = std::to_string(wins) + "/" + std::to_string(trials) + " trials with err(N=1e4) < err(N=1e2)";
  return res;
}

PropertyResult check_update_optimality(std::uint64_t seed, std::size_t layers, double update_scale) {
  PropertyResult res{"update_optimality", false, 0.0, 1e-8, layers, {}};
  Rng rng(seed);
  for (std::size_t t = 0; t < layers; ++t) {
    const std::size_t rows = uniform_size(rng, 1, 8);
    const std::size_t cols = uniform_size(rng, 1, 6);
    const Matrix w0 = random_matrix(rng, rows, cols);
    const SymMatrix h = random_spd(rng, cols);
    CalibSpec spec;
    spec.bits = 2;
    spec.group_size = uniform_size(rng, 1, cols);
    spec.alpha = 0.0;
    spec.block_size = 1;
    CalibHooks hooks;
    hooks.update_scale = update_scale;
    hooks.on_column = [&](std::size_t q, const Matrix& working) {
      std::vector<std::size_t> fixed(q + 1);
      for (std::size_t k = 0; k <= q; ++k) fixed[k] = k;
      const Matrix expected = constrained_update(w0, working, fixed, h);
      res.measured = std::max(res.measured, max_abs_difference(expected, difference(working, w0)));
    };
    calibrate_layer(w0, h, spec, hooks);
  }
  res.passed = res.measured <= res.tolerance;
  res.detail = "max |dW_sweep - dW_kkt| over every column of " + std::to_string(layers) +
               " layers = " + format_double(res.measured);
  return res;
}

PropertyResult check_aggregation_bound(std::uint64_t seed, std::size_t instances) {
  PropertyResult res{"aggregation_bound", false, 0.0, 1e-9, instances, {}};
  Rng rng(seed);
  double worst = std::numeric_limits<double>::infinity();
  for (std::size_t t = 0; t < instances; ++t) {
    const std::size_t rows = uniform_size(rng, 1, 8);
    const std::size_t cols = uniform_size(rng, 1, 8);
    const std::size_t n = uniform_size(rng, 1, 16);
    RowHessianSet set(rows, cols);
    for (std::size_t i = 0; i < n; ++i) set.add(random_matrix(rng, rows, cols));
    const Matrix dw = random_matrix(rng, rows, cols);
    const double aggregated = quadratic_trace(dw, set.aggregate());
    double row_wise = 0.0;
    for (std::size_t j = 0; j < rows; ++j) row_wise += quadratic_form(dw.row(j), set.row(j));
    worst = std::min(worst, aggregated - row_wise);
  }
  // measured = most negative slack; must stay above -tolerance.
  res.measured = worst;
  res.passed = worst >= -res.tolerance;
  res.detail = "min tr(dW H dW^T) - sum_j dW_j H_j dW_j^T = " + format_double(worst);
  return res;
}

PropertyResult check_gram_equivalence(std::uint64_t seed, std::size_t instances) {
  PropertyResult res{"gram_equivalence", false, 0.0, 1e-10, instances, {}};
  Rng rng(seed);
  for (std::size_t t = 0; t < instances; ++t) {
    const std::size_t rows = uniform_size(rng, 1, 8);
    const std::size_t cols = uniform_size(rng, 1, 8);
    const std::size_t n = uniform_size(rng, 1, 16);
    RowHessianSet set(rows, cols);
    HessianAccumulator acc(cols, HessianMode::kAdaptive);
    for (std::size_t i = 0; i < n; ++i) {
      const Matrix g = random_matrix(rng, rows, cols);
      set.add(g);
      acc.accumulate_adaptive(g);
    }
    res.measured = std::max(res.measured, max_abs_difference(acc.finalize(), set.aggregate()));
  }
  res.passed = res.measured <= res.tolerance;
  res.detail = "max |sum_i G^T G - sum_j H_j| = " + format_double(res.measured);
  return res;
}

nlohmann::json run_oracle_suite(std::uint64_t seed, const SuiteOptions& options) {
  const std::vector<PropertyResult> results = {
      check_fisher_identity(seed),
      check_sampled_fisher_convergence(seed),
      check_update_optimality(seed, 100, options.update_scale),
      check_aggregation_bound(seed),
      check_gram_equivalence(seed),
  };
  nlohmann::json props = nlohmann::json::array();
  bool all = true;
  for (const auto& r : results) {
    props.push_back(to_json(r));
    all = all && r.passed;
  }
  return {{"seed", seed}, {"all_passed", all}, {"properties", props}};
}

std::vector<std::string> validate_oracle_report(const nlohmann::json& report) {
  std::vector<std::string> errors;
  if (!report.is_object()) return {"report is not an object"};
  if (!report.contains("seed") || !report["seed"].is_number_unsigned()) errors.push_back("seed: unsigned integer required");
  if (!report.contains("all_passed") || !report["all_passed"].is_boolean()) errors.push_back("all_passed: boolean required");
  if (!report.contains("properties") || !report["properties"].is_array()) {
    errors.push_back("properties: array required");
    return errors;
  }
  bool all = true;
  for (std::size_t i = 0; i < report["properties"].size(); ++i) {
    const auto& p = report["properties"][i];
    const std::string at = "properties[" + std::to_string(i) + "]";
    if (!p.is_object()) {
      errors.push_back(at + ": object required");
      continue;
    }
    auto need = [&](const char* key, bool ok) {
      if (!p.contains(key) || !ok) errors.push_back(at + "." + key + ": wrong or missing");
    };
    need("name", p.contains("name") && p["name"].is_string());
    need("passed", p.contains("passed") && p["passed"].is_boolean());
    need("measured", p.contains("measured") && p["measured"].is_number());
    need("tolerance", p.contains("tolerance") && p["tolerance"].is_number());
    need("trials", p.contains("trials") && p["trials"].is_number_unsigned());
    need("detail", p.contains("detail") && p["detail"].is_string());
    if (p.contains("passed") && p["passed"].is_boolean()) all = all && p["passed"].get<bool>();
  }
  if (report.contains("all_passed") && report["all_passed"].is_boolean() && report["all_passed"].get<bool>() != all) {
    errors.push_back("all_passed disagrees with the property results");
  }
  return errors;
}

}  // namespace oac::oracle
