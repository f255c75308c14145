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

#include "oac/error.hpp"
#include "oac/linalg.hpp"
#include "oac/model.hpp"

#include <cmath>
#include <random>

namespace oac {

namespace {

std::vector<std::vector<double>> draw_inputs(std::mt19937_64& rng, std::size_t n, std::size_t d) {
  std::normal_distribution<double> nd;
  std::vector<std::vector<double>> xs(n, std::vector<double>(d));
  for (auto& x : xs) {
    for (double& v : x) v = nd(rng);
    x.back() = 1.0;  // bias feature
  }
  return xs;
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// Newton iterations on the mean log-loss with a tiny ridge for safety.
LogisticModel fit(const std::vector<std::vector<double>>& xs, std::span<const int> ys, std::size_t d) {
  LogisticModel m{std::vector<double>(d, 0.0)};
  for (int it = 0; it < 25; ++it) {
    std::vector<double> grad(d, 0.0);
    for (std::size_t i = 0; i < xs.size(); ++i) {
      const auto g = logistic_gradient(m, xs[i], ys[i]);
      for (std::size_t k = 0; k < d; ++k) grad[k] += g[k] / static_cast<double>(xs.size());
    }
    SymMatrix h = logistic_exact_hessian(m, xs);
    h.add_diagonal(1e-6);
    const SymMatrix h_inv = cholesky_inverse(cholesky(h));
    for (std::size_t k = 0; k < d; ++k) m.w[k] -= dot(h_inv.row(k), grad);
  }
  return m;
}

}  // namespace

nlohmann::json logistic_suite(std::uint64_t seed, const LogisticSuiteOptions& options) {
  const std::size_t d = options.dim;
  if (d < 2) throw Error(Errc::kConfig, "logistic suite needs dim >= 2");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;

  std::vector<double> truth(d);
  for (double& v : truth) v = 2.0 * nd(rng);
  auto label = [&](std::span<const double> x) { return dot(truth, x) + 0.5 * nd(rng) > 0.0 ? 1 : 0; };

  const auto train_x = draw_inputs(rng, options.train_points, d);
  std::vector<int> train_y;
  for (const auto& x : train_x) train_y.push_back(label(x));
  const LogisticModel model = fit(train_x, train_y, d);

  const SymMatrix exact = logistic_exact_hessian(model, train_x);
  const SymMatrix analytic = fisher_expected_outer(model, train_x);

  nlohmann::json sampled = nlohmann::json::array();
  for (std::size_t n : options.sample_sizes) {
    // Labels drawn from the model itself, inputs fresh from the data law.
    const auto xs = draw_inputs(rng, n, d);
    std::vector<int> ys;
    for (const auto& x : xs) ys.push_back(std::bernoulli_distribution(stable_sigmoid(dot(model.w, x)))(rng));
    sampled.push_back({{"n", n},
                       {"max_abs_diff_vs_exact", max_abs_difference(empirical_fisher(model, xs, ys),
                                                                    logistic_exact_hessian(model, xs))}});
  }

  // At w = 0 every pi is 1/2, so H_kk = 0.25 mean(x_k^2).
  const LogisticModel zero{std::vector<double>(d, 0.0)};
  const SymMatrix h0 = logistic_exact_hessian(zero, train_x);
  double zero_diag_err = 0.0;
  for (std::size_t k = 0; k < d; ++k) {
    double ms = 0.0;
    for (const auto& x : train_x) ms += x[k] * x[k];
    ms /= static_cast<double>(train_x.size());
    zero_diag_err = std::max(zero_diag_err, std::abs(h0(k, k) - 0.25 * ms));
  }

  nlohmann::json w = nlohmann::json::array();
  for (double v : model.w) w.push_back(v);
  return {{"seed", seed},
          {"dim", d},
          {"train_points", options.train_points},
          {"weights", w},
          {"train_loss", logistic_mean_loss(model, train_x, train_y)},
          {"fisher_vs_exact_max_abs", max_abs_difference(analytic, exact)},
          {"sampled", sampled},
          {"zero_model_diagonal_max_abs", zero_diag_err}};
}

}  // namespace oac
