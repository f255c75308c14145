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
#include "oac/quantizer.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>

namespace oac {
namespace {

Errc code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error raised";
  return Errc::kIo;
}

double sq_error(std::span<const double> v, const BinaryRegion& b) {
  double e = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) e += std::pow(v[i] - b.alpha * b.signs[i], 2);
  return e;
}

TEST(FitAffine, Examples) {
  EXPECT_EQ(fit_affine(std::vector<double>{0, 1, 2, 3}, 2), (AffineParams{1.0, 0}));
  EXPECT_EQ(fit_affine(std::vector<double>{-3, 0, 3}, 2), (AffineParams{2.0, 2}));
}

TEST(FitAffine, ConstantGroupsDequantizeExactly) {
  for (double c : {5.0, -5.0, 0.375, -1e-3f * 1.0}) {
    const std::vector<double> v{c, c, c};
    const AffineParams p = fit_affine(v, 2);
    EXPECT_GT(p.scale, 0.0);
    for (double x : v) EXPECT_EQ(quantize_dequantize(x, p, 2).value, c);
  }
  const AffineParams z = fit_affine(std::vector<double>{0, 0}, 3);
  EXPECT_EQ(z.scale, kScaleFloor);
  EXPECT_GE(kScaleFloor, 1e-12);
  EXPECT_EQ(z.zero, 0);
  EXPECT_EQ(quantize_dequantize(0.0, z, 3).value, 0.0);
}

TEST(FitAffine, Errors) {
  EXPECT_EQ(code_of([] { fit_affine({}, 2); }), Errc::kEmptyGroup);
  EXPECT_EQ(code_of([] { fit_affine(std::vector<double>{1.0}, 0); }), Errc::kConfig);
  EXPECT_EQ(code_of([] { fit_affine(std::vector<double>{1.0}, 9); }), Errc::kConfig);
}

TEST(QuantizeDequantize, ZeroPointAndClamp) {
  const AffineParams p{2.0, 2};
  EXPECT_EQ(quantize_dequantize(0.0, p, 2).code, 2);
  EXPECT_EQ(quantize_dequantize(0.0, p, 2).value, 0.0);
  // round(1.5) = 2 (half away from zero), 2 + 2 = 4 clamps to 3.
  const QuantizedValue q = quantize_dequantize(3.0, fit_affine(std::vector<double>{-3, 0, 3}, 2), 2);
  EXPECT_EQ(q.code, 3);
  EXPECT_EQ(q.value, 2.0);
  EXPECT_EQ(quantize_dequantize(-1.0, p, 2).code, 1);  // round(-0.5) = -1
}

TEST(QuantizeDequantize, FuzzedGroupsStayWithinHalfAScale) {
  std::mt19937_64 rng(31);
  std::normal_distribution<double> nd;
  std::size_t checked = 0;
  while (checked < 100000) {
    const int bits = 1 + static_cast<int>(rng() % 8);
    const std::size_t n = 1 + rng() % 64;
    const double shift = (rng() % 3 == 0) ? 10.0 * nd(rng) : 0.0;  // one-sided groups too
    const double spread = std::exp(3.0 * nd(rng));
    std::vector<double> v(n);
    for (double& x : v) x = shift + spread * nd(rng);
    const AffineParams p = fit_affine(v, bits);
    ASSERT_GT(p.scale, 0.0);
    ASSERT_GE(p.zero, 0);
    ASSERT_LE(p.zero, max_code(bits));
    for (double x : v) {
      const QuantizedValue q = quantize_dequantize(x, p, bits);
      ASSERT_GE(q.code, 0);
      ASSERT_LE(q.code, max_code(bits));
      ASSERT_LE(std::abs(x - q.value), p.scale / 2 + 1e-9) << "bits=" << bits << " x=" << x;
    }
    checked += n;
  }
}

TEST(RtnQuantize, Identity2x2) {
  const QuantizedLayer q = rtn_quantize(Matrix::identity(2), 2, 2);
  const Matrix d = q.dequantize();
  for (std::size_t r = 0; r < 2; ++r) {
    for (std::size_t c = 0; c < 2; ++c) EXPECT_LE(std::abs(d(r, c) - (r == c)), q.params(r, c).scale / 2);
  }
  EXPECT_TRUE(q.outliers.empty());
}

TEST(RtnQuantize, GridValuesRoundTripExactly) {
  // Each row-group spans its own 4-level grid including zero.
  const Matrix w(2, 4, std::vector<double>{0, 0.5, 1.0, 1.5, -2, -1, 0, 1});
  EXPECT_EQ(rtn_quantize(w, 2, 4).dequantize(), w);
}

TEST(RtnQuantize, RandomErrorsBoundedAndRaggedGroups) {
  std::mt19937_64 rng(32);
  std::normal_distribution<double> nd;
  for (std::size_t cols : {8u, 11u}) {
    Matrix w(8, cols);
    for (double& v : w.data()) v = nd(rng);
    const QuantizedLayer q = rtn_quantize(w, 2, 4);
    EXPECT_EQ(q.n_groups(), (cols + 3) / 4);
    const Matrix d = q.dequantize();
    for (std::size_t r = 0; r < 8; ++r) {
      for (std::size_t c = 0; c < cols; ++c) EXPECT_LE(std::abs(w(r, c) - d(r, c)), q.params(r, c).scale / 2 + 1e-9);
    }
  }
  EXPECT_EQ(code_of([] { rtn_quantize(Matrix(2, 2), 2, 0); }), Errc::kEmptyGroup);
}

TEST(Accounting, PlainStatsAndOutliers) {
  QuantizedLayer q = rtn_quantize(Matrix(4, 32, 0.5), 3, 16);
  EXPECT_EQ(q.accounting.avg_bits_per_weight, 3.0 + 32.0 / 16.0);
  q.outliers.push_back({0, 0, 0.5});
  fill_accounting(q);
  EXPECT_EQ(q.accounting.outlier_bits, 48.0);
  EXPECT_EQ(q.accounting.avg_bits_per_weight, q.accounting.total_bits() / 128.0);
}

// Applies double quantization column group by column group, the layout the
// calibrator produces.
void double_quantize_layer(QuantizedLayer& q, int stat_bits, std::size_t stat_group) {
  StatsQuantRecord rec;
  rec.stat_bits = stat_bits;
  rec.stat_group = stat_group;
  const std::size_t ng = q.n_groups();
  for (std::size_t g = 0; g < ng; ++g) {
    std::vector<AffineParams> col(q.rows);
    for (std::size_t r = 0; r < q.rows; ++r) col[r] = q.groups[r * ng + g];
    double_quantize_stats_into(col, rec);
    for (std::size_t r = 0; r < q.rows; ++r) q.groups[r * ng + g] = col[r];
  }
  q.stats_q = rec;
  fill_accounting(q);
}

TEST(DoubleQuantize, SharedScaleIsExact) {
  std::vector<AffineParams> p(20, AffineParams{0.125, 1});
  const StatsQuantRecord rec = double_quantize_stats(p, 3, 16);
  EXPECT_EQ(rec.runs.size(), 2u);
  for (const AffineParams& a : p) EXPECT_EQ(a.scale, 0.125);
}

TEST(DoubleQuantize, EightBitStatsWithinOnePercentOfRange) {
  std::mt19937_64 rng(33);
  std::uniform_real_distribution<double> ud(0.01, 0.5);
  std::vector<AffineParams> p(16);
  for (auto& a : p) a.scale = ud(rng);
  const auto original = p;
  double lo = 1e9;
  double hi = 0.0;
  for (const auto& a : original) {
    lo = std::min(lo, a.scale);
    hi = std::max(hi, a.scale);
  }
  double_quantize_stats(p, 8, 16);
  for (std::size_t i = 0; i < p.size(); ++i) {
    EXPECT_LT(std::abs(p[i].scale - original[i].scale), 0.01 * (hi - lo));
    EXPECT_GT(p[i].scale, 0.0);
  }
}

TEST(DoubleQuantize, AccountingTermForThreeBitStats) {
  std::mt19937_64 rng(34);
  std::normal_distribution<double> nd;
  Matrix w(16, 128);
  for (double& v : w.data()) v = nd(rng);
  QuantizedLayer q = rtn_quantize(w, 2, 64);
  double_quantize_layer(q, 3, 16);
  EXPECT_EQ(q.accounting.avg_bits_per_weight, 2.0 + (3.0 + 3.0) / 64.0 + 2.0 * 32.0 / (64.0 * 16.0));
}

TEST(DoubleQuantize, Errors) {
  std::vector<AffineParams> p{{1.0, 7}};
  EXPECT_EQ(code_of([&] { double_quantize_stats(p, 1, 16); }), Errc::kConfig);
  EXPECT_EQ(code_of([&] { double_quantize_stats(p, 2, 16); }), Errc::kConfig);  // zero 7 needs 3 bits
  std::vector<AffineParams> empty;
  EXPECT_EQ(code_of([&] { double_quantize_stats(empty, 3, 16); }), Errc::kEmptyGroup);
}

TEST(Persistence, ReloadDequantizesBitIdentically) {
  std::mt19937_64 rng(35);
  std::normal_distribution<double> nd;
  Matrix w(20, 40);
  for (double& v : w.data()) v = static_cast<float>(nd(rng));
  for (bool dq : {false, true}) {
    QuantizedLayer q = rtn_quantize(w, 2, 16);
    if (dq) double_quantize_layer(q, 3, 16);
    q.outliers = {{0, 3, w(0, 3)}, {7, 39, w(7, 39)}, {19, 0, w(19, 0)}};
    fill_accounting(q);
    std::vector<Tensor> tensors;
    append_tensors("blk0.q", q, tensors);
    const TensorArchive archive = archive_decode(archive_encode(tensors));
    const QuantizedLayer back = load_quantized_layer("blk0.q", archive, layer_metadata(q));
    EXPECT_EQ(back.dequantize(), q.dequantize());
    EXPECT_EQ(back.codes, q.codes);
    EXPECT_EQ(back.groups, q.groups);
    EXPECT_EQ(back.outliers, q.outliers);
    EXPECT_EQ(back.accounting.avg_bits_per_weight, q.accounting.avg_bits_per_weight);
    for (std::int32_t c : back.codes) {
      EXPECT_GE(c, 0);
      EXPECT_LE(c, max_code(2));
    }
  }
}

TEST(Persistence, MalformedTensorsRejected) {
  QuantizedLayer q = rtn_quantize(Matrix::identity(4), 2, 2);
  std::vector<Tensor> tensors;
  append_tensors("l", q, tensors);
  tensors[0].payload[0] = 9.0f;  // code out of range
  EXPECT_EQ(code_of([&] { load_quantized_layer("l", archive_decode(archive_encode(tensors)), layer_metadata(q)); }),
            Errc::kMalformedArchive);
  EXPECT_EQ(code_of([&] { load_quantized_layer("missing", archive_decode(archive_encode(tensors)), layer_metadata(q)); }),
            Errc::kMalformedArchive);
}

TEST(Binarize, RegionExamples) {
  const BinaryRegion a = binarize_region(std::vector<double>{2, -2});
  EXPECT_EQ(a.alpha, 2.0);
  EXPECT_EQ(a.signs, (std::vector<std::int8_t>{1, -1}));
  EXPECT_EQ(binarize_region(std::vector<double>{0, 0}).alpha, 0.0);
  EXPECT_EQ(binarize_region(std::vector<double>{0, 0}).signs, (std::vector<std::int8_t>{1, 1}));
  const std::vector<double> v{1, 3};
  const BinaryRegion b = binarize_region(v);
  EXPECT_EQ(b.alpha, 2.0);
  EXPECT_EQ(sq_error(v, b), 2.0);
  // 1-D scan over alpha with the signs held fixed.
  for (int i = 0; i <= 400; ++i) {
    BinaryRegion scan = b;
    scan.alpha = i * 0.01;
    EXPECT_GE(sq_error(v, scan), sq_error(v, b) - 1e-12);
  }
  EXPECT_EQ(code_of([] { binarize_region({}); }), Errc::kEmptyGroup);
}

TEST(Binarize, ResidualExamplesAndInequality) {
  const ResidualBinary exact = residual_binarize(std::vector<double>{2, -2});
  EXPECT_EQ(exact.second.alpha, 0.0);
  const ResidualBinary r = residual_binarize(std::vector<double>{1, 3});
  EXPECT_EQ(r.first.alpha, 2.0);
  EXPECT_EQ(r.second.alpha, 1.0);
  EXPECT_EQ(r.second.signs, (std::vector<std::int8_t>{-1, 1}));

  std::mt19937_64 rng(36);
  std::normal_distribution<double> nd;
  for (int t = 0; t < 200; ++t) {
    std::vector<double> v(1 + rng() % 50);
    for (double& x : v) x = nd(rng);
    const ResidualBinary rb = residual_binarize(v);
    double one = 0.0;
    double two = 0.0;
    double mean_abs_residual = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double first = rb.first.alpha * rb.first.signs[i];
      one += std::pow(v[i] - first, 2);
      two += std::pow(v[i] - first - rb.second.alpha * rb.second.signs[i], 2);
      mean_abs_residual += std::abs(v[i] - first);
    }
    EXPECT_LE(two, one + 1e-12);
    EXPECT_NEAR(rb.second.alpha, mean_abs_residual / v.size(), 1e-12);
  }
}

TEST(SplittingSearch, SeparableAndDegenerateSets) {
  std::vector<double> v;
  for (int i = 0; i < 8; ++i) {
    v.push_back(i % 2 ? 0.1 : -0.1);
    v.push_back(i % 2 ? -1.0 : 1.0);
  }
  const double t = splitting_search(v);
  EXPECT_GE(t, 0.1);
  EXPECT_LT(t, 1.0);
  EXPECT_LT(split_error(v, t), 1e-24);

  const std::vector<double> flat{0.5, -0.5, 0.5, -0.5};
  EXPECT_EQ(splitting_search(flat), 0.5);
  EXPECT_EQ(code_of([] { splitting_search({}); }), Errc::kEmptyGroup);
}

TEST(SplittingSearch, BellShapedSampleNearFineScanOptimum) {
  std::mt19937_64 rng(37);
  std::normal_distribution<double> nd;
  for (int t = 0; t < 5; ++t) {
    std::vector<double> v(2000);
    for (double& x : v) x = nd(rng);
    double max_abs = 0.0;
    for (double x : v) max_abs = std::max(max_abs, std::abs(x));
    double fine_best = std::numeric_limits<double>::infinity();
    for (int i = 0; i < 1024; ++i) fine_best = std::min(fine_best, split_error(v, max_abs * i / 1023.0));
    const double got = split_error(v, splitting_search(v));
    EXPECT_LE(got, fine_best * 1.01);
  }
}

TEST(BinaryLayer, DequantizeAndAccounting) {
  BinaryLayer b;
  b.rows = 2;
  b.cols = 3;
  b.group_size = 2;
  b.salient_columns = {0, 1, 0};
  b.groups = {BinaryGroup{0.5, 0.25, 1.0, 2.0, 0.5}, BinaryGroup{0.0, 0.0, 3.0, 0.0, 0.0}};
  b.plane1 = {1, -1, 1, -1, 1, -1};
  b.plane2 = {0, 1, 0, 0, -1, 0};
  b.high_region = {1, 0, 1, 0, 0, 1};
  fill_accounting(b);
  const Matrix d = b.dequantize();
  EXPECT_EQ(d, Matrix(2, 3, std::vector<double>{1.0, -1.5, 3.0, -0.25, 1.5, -3.0}));
  EXPECT_EQ(b.accounting.weight_bits, 2.0 * (3 + 1));
  EXPECT_EQ(b.accounting.stats_bits, 2 * 5 * 16.0 + 3);
  EXPECT_EQ(b.accounting.avg_bits_per_weight, b.accounting.total_bits() / 6.0);
}

}  // namespace
}  // namespace oac
