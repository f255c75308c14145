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

#include "oac/hessian.hpp"
#include "oac/matrix.hpp"
#include "oac/quantizer.hpp"

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace oac {

enum class Backend { kOptq, kSpqr, kBinary };

std::string_view to_string(Backend backend);
/// "optq", "spqr" or "binary"; throws Config otherwise.
Backend parse_backend(std::string_view s);

struct CalibSpec {
  int bits = 2;
  std::size_t group_size = 64;
  /// Outliers are weights whose saliency exceeds tau * (mean layer saliency).
  double tau = 3.5;
  /// Damping: H + alpha * mean(diag H) * I.
  double alpha = 0.01;
  std::size_t block_size = 32;
  Backend backend = Backend::kOptq;
  HessianMode hessian_mode = HessianMode::kAgnostic;
  // SpQR: second-level quantization of the group scales.
  int stat_bits = 3;
  std::size_t stat_group = 16;
  // Binary: fraction of columns given two residual planes.
  double salient_fraction = 0.1;
  /// When false no error compensation is applied (plain quantization with the
  /// same group fitting); used as a reference point.
  bool compensate = true;

  /// Throws Config for tau <= 0 on SpQR, block_size == 0, zero group size or
  /// bits outside [1, 8]; NegativeAlpha for alpha < 0.
  void validate() const;
};

nlohmann::json to_json(const CalibSpec& spec);

struct CalibReport {
  std::string layer;
  double proxy_error = 0.0;
  std::size_t outlier_count = 0;
  double outlier_rate = 0.0;
  /// Layer mean saliency used to normalize tau (0 when no outlier pass ran).
  double mean_saliency = 0.0;
  std::vector<double> column_update_norms;
  BitAccount accounting;
  CalibSpec spec;
};

nlohmann::json to_json(const CalibReport& report);

/// Test hooks. on_column sees the working weights after column `col` has been
/// quantized and its compensation applied; with block_size > 1 the columns
/// right of the current block still miss that block's pending updates.
/// update_scale multiplies every compensation step (1 is the correct update;
/// anything else is a deliberately corrupted formula for negative controls).
struct CalibHooks {
  std::function<void(std::size_t col, const Matrix& working)> on_column;
  double update_scale = 1.0;
};

/// (w - w_hat)^2 / h_inv_kk. Throws NonPositiveDiagonal when h_inv_kk <= 0.
double saliency(double w, double w_hat, double h_inv_kk);

/// d_row x d_col update -(residual_j / Hinv_qq) * Hinv[q, :]; adding it to W
/// zeroes the column-q residual. Throws NonPositiveDiagonal.
Matrix optimal_update(std::span<const double> residual, const SymMatrix& h_inv, std::size_t q);

/// Row-major d_row x d_col mask (1 = outlier) from naive group RTN saliency
/// against regularize(h, spec.alpha). mean_saliency (if given) receives the
/// normalizer.
std::vector<std::uint8_t> detect_outliers(const Matrix& w, const SymMatrix& h, const CalibSpec& spec,
                                          double* mean_saliency = nullptr);

struct CalibResult {
  QuantizedLayer layer;
  CalibReport report;
};

/// Column-wise calibration (OPTQ or SpQR backend) against h, damped with
/// spec.alpha. The report's proxy error is tr(dW h dW^T) with the undamped h.
/// Throws ShapeMismatch, Config, or NotPositiveDefinite from the factorization.
CalibResult calibrate_layer(const Matrix& w, const SymMatrix& h, const CalibSpec& spec,
                            const CalibHooks& hooks = {}, std::string layer_name = {});

struct BinaryCalibResult {
  BinaryLayer layer;
  CalibReport report;
};

/// Binary backend: salient columns by summed saliency, residual planes on
/// them, split-magnitude binarization elsewhere, compensated left to right.
BinaryCalibResult calibrate_layer_binary(const Matrix& w, const SymMatrix& h, const CalibSpec& spec,
                                         std::string layer_name = {});

/// Column indices flagged salient: the round(fraction * d_col) columns with the
/// largest summed saliency against a one-plane binarization, ties to the lower
/// index.
std::vector<std::uint8_t> select_salient_columns(const Matrix& w, const SymMatrix& h_inv,
                                                 double fraction);

struct AlphaCandidate {
  double alpha = 0.0;
  bool ok = false;
  std::string error;
  std::optional<CalibReport> report;
};

struct AlphaSweep {
  double best_alpha = 0.0;
  std::vector<AlphaCandidate> candidates;
};

/// Calibrates once per alpha. Failing alphas are recorded and skipped; the
/// best surviving alpha minimizes the proxy error (ties to the smaller alpha).
/// Throws NotPositiveDefinite when every candidate fails, Config on an empty
/// grid.
AlphaSweep sweep_alpha(const Matrix& w, const SymMatrix& h, const CalibSpec& spec,
                       std::span<const double> grid);

}  // namespace oac
