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
#include "oac/hessian.hpp"
#include "oac/linalg.hpp"
#include "oac/oracles.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <random>

namespace oac {
namespace {

SymMatrix sym(std::size_t n, std::vector<double> v) { return SymMatrix(Matrix(n, n, std::move(v))); }

Errc code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error raised";
  return Errc::kIo;
}

TEST(HessianAccumulator, AgnosticExamples) {
  HessianAccumulator acc(2, HessianMode::kAgnostic);
  acc.accumulate_agnostic(std::vector<double>{1, 0});
  EXPECT_EQ(acc.finalize(), sym(2, {1, 0, 0, 0}));

  HessianAccumulator twice(2, HessianMode::kAgnostic);
  twice.accumulate_agnostic(std::vector<double>{1, 2});
  twice.accumulate_agnostic(std::vector<double>{1, 2});
  EXPECT_EQ(twice.finalize(), sym(2, {2, 4, 4, 8}));
  EXPECT_EQ(twice.n_samples(), 2u);
}

TEST(HessianAccumulator, AgnosticMatchesBruteForceSum) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> nd;
  const std::size_t d = 6;
  HessianAccumulator acc(d, HessianMode::kAgnostic);
  Matrix brute(d, d);
  for (int i = 0; i < 100; ++i) {
    std::vector<double> x(d);
    for (double& v : x) v = nd(rng);
    acc.accumulate_agnostic(x);
    for (std::size_t r = 0; r < d; ++r) {
      for (std::size_t c = 0; c < d; ++c) brute(r, c) += x[r] * x[c];
    }
  }
  EXPECT_LT(max_abs_difference(acc.finalize().to_matrix(), brute), 1e-10);
  EXPECT_EQ(acc.n_samples(), 100u);
}

TEST(HessianAccumulator, AdaptiveExamples) {
  HessianAccumulator acc(2, HessianMode::kAdaptive);
  acc.accumulate_adaptive(Matrix(1, 2, std::vector<double>{1, 2}));
  EXPECT_EQ(acc.finalize(), sym(2, {1, 2, 2, 4}));

  HessianAccumulator ident(2, HessianMode::kAdaptive);
  ident.accumulate_adaptive(Matrix::identity(2));
  EXPECT_EQ(ident.finalize(), SymMatrix::identity(2));
}

TEST(HessianAccumulator, AdaptiveEqualsRowWiseSum) {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> nd;
  Matrix g(4, 3);
  for (double& v : g.data()) v = nd(rng);
  HessianAccumulator acc(3, HessianMode::kAdaptive);
  acc.accumulate_adaptive(g);
  oracle::RowHessianSet rows(4, 3);
  rows.add(g);
  EXPECT_LT(max_abs_difference(acc.finalize(), rows.aggregate()), 1e-12);
}

TEST(HessianAccumulator, RowHessianBlocksArePsd) {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> nd;
  oracle::RowHessianSet rows(5, 4);
  for (int i = 0; i < 3; ++i) {
    Matrix g(5, 4);
    for (double& v : g.data()) v = nd(rng);
    rows.add(g);
  }
  EXPECT_EQ(rows.size(), 5u);
  for (std::size_t j = 0; j < rows.size(); ++j) {
    const auto eig = symmetric_eigenvalues(rows.row(j));
    EXPECT_GE(*std::min_element(eig.begin(), eig.end()), -1e-9);
  }
}

TEST(HessianAccumulator, SumAndMeanReductions) {
  const std::vector<double> x{0.3, -1.7, 2.1};
  HessianAccumulator sum1(3, HessianMode::kAgnostic, Reduction::kSum);
  HessianAccumulator mean1(3, HessianMode::kAgnostic, Reduction::kMean);
  sum1.accumulate_agnostic(x);
  mean1.accumulate_agnostic(x);
  EXPECT_EQ(sum1.finalize(), mean1.finalize());

  HessianAccumulator mean2(3, HessianMode::kAgnostic, Reduction::kMean);
  mean2.accumulate_agnostic(x);
  mean2.accumulate_agnostic(x);
  EXPECT_EQ(mean2.finalize(), sum1.finalize());

  std::mt19937_64 rng(4);
  std::normal_distribution<double> nd;
  HessianAccumulator s(4, HessianMode::kAdaptive, Reduction::kSum);
  HessianAccumulator m(4, HessianMode::kAdaptive, Reduction::kMean);
  for (int i = 0; i < 16; ++i) {
    Matrix g(3, 4);
    for (double& v : g.data()) v = nd(rng);
    s.accumulate_adaptive(g);
    m.accumulate_adaptive(g);
  }
  SymMatrix scaled = m.finalize();
  scaled.scale(16.0);
  EXPECT_LT(max_abs_difference(scaled, s.finalize()), 1e-12);
  SymMatrix divided = s.finalize();
  divided.divide(16.0);
  EXPECT_EQ(divided, m.finalize());
}

TEST(HessianAccumulator, StaysPsdAfterRandomSequences) {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> nd;
  for (int t = 0; t < 20; ++t) {
    const std::size_t d = 1 + rng() % 10;
    HessianAccumulator acc(d, HessianMode::kAdaptive);
    const int n = 1 + static_cast<int>(rng() % 5);
    for (int i = 0; i < n; ++i) {
      Matrix g(1 + rng() % 3, d);
      for (double& v : g.data()) v = nd(rng);
      acc.accumulate_adaptive(g);
    }
    const auto eig = symmetric_eigenvalues(acc.finalize());
    EXPECT_GE(*std::min_element(eig.begin(), eig.end()), -1e-9);
    EXPECT_EQ(acc.n_samples(), static_cast<std::uint64_t>(n));
  }
}

TEST(HessianAccumulator, MergeEqualsSequentialAccumulation) {
  HessianAccumulator a(2, HessianMode::kAgnostic);
  HessianAccumulator b(2, HessianMode::kAgnostic);
  HessianAccumulator both(2, HessianMode::kAgnostic);
  a.accumulate_agnostic(std::vector<double>{1, 2});
  b.accumulate_agnostic(std::vector<double>{3, -1});
  both.accumulate_agnostic(std::vector<double>{1, 2});
  both.accumulate_agnostic(std::vector<double>{3, -1});
  a.merge(b);
  EXPECT_EQ(a.finalize(), both.finalize());
  EXPECT_EQ(a.n_samples(), 2u);
}

TEST(HessianAccumulator, Errors) {
  HessianAccumulator agn(2, HessianMode::kAgnostic);
  HessianAccumulator ada(2, HessianMode::kAdaptive);
  EXPECT_EQ(code_of([&] { agn.finalize(); }), Errc::kEmptyAccumulator);
  EXPECT_EQ(code_of([&] { agn.accumulate_agnostic(std::vector<double>{1, 2, 3}); }), Errc::kDimMismatch);
  EXPECT_EQ(code_of([&] { agn.accumulate_agnostic(std::vector<double>{1, std::nan("")}); }), Errc::kNonFinite);
  EXPECT_EQ(code_of([&] { ada.accumulate_adaptive(Matrix(2, 3)); }), Errc::kDimMismatch);
  EXPECT_EQ(code_of([&] { ada.accumulate_agnostic(std::vector<double>{1, 2}); }), Errc::kConfig);
  EXPECT_EQ(agn.n_samples(), 0u);
}

TEST(Regularize, Examples) {
  const SymMatrix h = sym(2, {2, 0, 0, 4});
  const SymMatrix r = regularize(h, 0.1);
  EXPECT_DOUBLE_EQ(r(0, 0), 2.3);
  EXPECT_DOUBLE_EQ(r(1, 1), 4.3);
  EXPECT_EQ(r(0, 1), 0.0);
  EXPECT_EQ(regularize(h, 0.0), h);
  EXPECT_EQ(code_of([&] { regularize(h, -1e-3); }), Errc::kNegativeAlpha);
}

TEST(Regularize, AlphaOneMakesAnyPsdFactorizable) {
  std::mt19937_64 rng(12);
  std::normal_distribution<double> nd;
  for (int t = 0; t < 100; ++t) {
    const std::size_t d = 2 + rng() % 12;
    const std::size_t rank = t % 2 == 0 ? d : 1 + rng() % (d - 1);  // odd t: rank deficient
    SymMatrix h(d);
    std::vector<double> x(d);
    for (std::size_t i = 0; i < rank; ++i) {
      for (double& v : x) v = nd(rng);
      h.add_outer(x);
    }
    EXPECT_NO_THROW(cholesky(regularize(h, 1.0)));
  }
}

TEST(Logistic, GradientExamples) {
  const LogisticModel m{{0.0, 0.0}};
  EXPECT_EQ(logistic_gradient(m, std::vector<double>{1, 0}, 1), (std::vector<double>{-0.5, 0.0}));
  EXPECT_EQ(logistic_gradient(m, std::vector<double>{1, 0}, 0), (std::vector<double>{0.5, 0.0}));
  EXPECT_EQ(code_of([&] { logistic_gradient(m, std::vector<double>{1}, 0); }), Errc::kDimMismatch);
}

TEST(Logistic, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(21);
  std::normal_distribution<double> nd;
  for (int t = 0; t < 20; ++t) {
    LogisticModel m{std::vector<double>(5)};
    std::vector<double> x(5);
    for (double& v : m.w) v = nd(rng);
    for (double& v : x) v = nd(rng);
    const int y = static_cast<int>(rng() % 2);
    const auto g = logistic_gradient(m, x, y);
    for (std::size_t k = 0; k < 5; ++k) {
      const double fd = oracle::central_difference(
          [&](double wk) {
            LogisticModel p = m;
            p.w[k] = wk;
            return logistic_loss(p, x, y);
          },
          m.w[k], 1e-5);
      EXPECT_NEAR(g[k], fd, 1e-6);
    }
  }
}

TEST(Logistic, ExactHessianExamplesAndFiniteDifferences) {
  const LogisticModel zero{{0.0, 0.0}};
  EXPECT_EQ(logistic_exact_hessian(zero, {{1.0, 0.0}}), sym(2, {0.25, 0, 0, 0}));
  EXPECT_EQ(logistic_exact_hessian(zero, {{0.0, 0.0}}), SymMatrix(2));
  EXPECT_EQ(fisher_expected_outer(zero, {{1.0, 0.0}}), sym(2, {0.25, 0, 0, 0}));
  EXPECT_EQ(code_of([&] { logistic_exact_hessian(zero, {}); }), Errc::kEmptyInput);
  EXPECT_EQ(code_of([&] { fisher_expected_outer(zero, {}); }), Errc::kEmptyInput);
  EXPECT_EQ(code_of([&] { logistic_exact_hessian(zero, {{1.0}}); }), Errc::kDimMismatch);

  std::mt19937_64 rng(22);
  std::normal_distribution<double> nd;
  LogisticModel m{std::vector<double>(4)};
  for (double& v : m.w) v = nd(rng);
  std::vector<std::vector<double>> xs(30, std::vector<double>(4));
  std::vector<int> ys(30);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    for (double& v : xs[i]) v = nd(rng);
    ys[i] = static_cast<int>(rng() % 2);
  }
  const SymMatrix h = logistic_exact_hessian(m, xs);
  // Second-order central differences of the mean loss.
  const double e = 1e-4;
  auto loss_at = [&](std::size_t a, double da, std::size_t b, double db) {
    LogisticModel p = m;
    p.w[a] += da;
    p.w[b] += db;
    return logistic_mean_loss(p, xs, ys);
  };
  for (std::size_t a = 0; a < 4; ++a) {
    for (std::size_t b = 0; b < 4; ++b) {
      const double fd = (loss_at(a, e, b, e) - loss_at(a, e, b, -e) - loss_at(a, -e, b, e) + loss_at(a, -e, b, -e)) /
                        (4 * e * e);
      EXPECT_NEAR(h(a, b), fd, 1e-5);
    }
  }
}

TEST(Logistic, FisherIdentityHoldsToRoundoff) {
  std::mt19937_64 rng(23);
  std::normal_distribution<double> nd;
  for (int t = 0; t < 50; ++t) {
    const std::size_t d = 1 + rng() % 16;
    LogisticModel m{std::vector<double>(d)};
    for (double& v : m.w) v = 3.0 * nd(rng);
    std::vector<std::vector<double>> xs(1 + rng() % 40, std::vector<double>(d));
    for (auto& x : xs) {
      for (double& v : x) v = nd(rng);
    }
    EXPECT_LT(max_abs_difference(fisher_expected_outer(m, xs), logistic_exact_hessian(m, xs)), 1e-12);
  }
}

TEST(Logistic, VanishingVarianceAndOverflowSafety) {
  const LogisticModel m{{50.0}};
  const SymMatrix f = fisher_expected_outer(m, {{-20.0}});
  EXPECT_LT(f(0, 0), 1e-300);
  EXPECT_TRUE(std::isfinite(logistic_loss(m, std::vector<double>{-40.0}, 1)));
  EXPECT_NEAR(logistic_loss(m, std::vector<double>{-40.0}, 1), 2000.0, 1e-9);
  EXPECT_EQ(stable_sigmoid(-1000.0), 0.0);
  EXPECT_EQ(stable_sigmoid(1000.0), 1.0);
}

}  // namespace
}  // namespace oac
