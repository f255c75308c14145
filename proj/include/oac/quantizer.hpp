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

#include "oac/archive.hpp"
#include "oac/matrix.hpp"

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace oac {

/// Smallest float32 >= x (as a double). Stored statistics are kept
/// float32-representable so an archive round trip is bit-exact.
double round_up_f32(double x);
/// Largest float32 <= x.
double round_down_f32(double x);

/// Smallest scale ever produced (1e-12 rounded up to float32); an all-zero
/// group gets exactly this.
inline const double kScaleFloor = round_up_f32(1e-12);

/// Nominal storage charged for one unquantized scale or zero.
inline constexpr double kPlainStatBits = 16.0;
/// Charged per second-level parameter (offset or step of a stats run).
inline constexpr double kSecondLevelParamBits = 32.0;
/// Value (32) plus column index (16) for every isolated outlier.
inline constexpr double kOutlierBits = 48.0;
/// Charged per binary alpha or split threshold.
inline constexpr double kBinaryStatBits = 16.0;

struct AffineParams {
  double scale = 1.0;
  std::int32_t zero = 0;

  friend bool operator==(const AffineParams&, const AffineParams&) = default;
};

struct QuantizedValue {
  std::int32_t code = 0;
  double value = 0.0;
};

inline std::int32_t max_code(int bits) { return (std::int32_t{1} << bits) - 1; }

/// Asymmetric min-max fit over a range widened to contain zero:
///   lo = min(min(values), 0), hi = max(max(values), 0)
///   scale = max((hi - lo) / (2^bits - 1), kScaleFloor), rounded up to float32
///   zero  = clamp(round(-lo / scale), 0, 2^bits - 1)
/// A constant nonzero group c gets scale |c| and the zero code that maps one
/// code exactly onto c; an all-zero group gets kScaleFloor.
/// Throws EmptyGroup, or Config when bits is outside [1, 8].
AffineParams fit_affine(std::span<const double> values, int bits);

/// code = clamp(round(v / scale) + zero, 0, 2^bits - 1); value = (code - zero) * scale.
/// Rounding is half away from zero.
QuantizedValue quantize_dequantize(double v, const AffineParams& p, int bits);

/// Second-level (stats) quantization of one run of first-level scales:
/// offset + code * step, with offset/step stored as float32.
struct StatRunParams {
  double offset = 0.0;
  double step = 0.0;

  friend bool operator==(const StatRunParams&, const StatRunParams&) = default;
};

/// Record left behind by double_quantize_stats. Scales become stat_bits codes
/// against per-run StatRunParams; zeros are stored directly as stat_bits
/// codes (which requires stat_bits >= bits).
struct StatsQuantRecord {
  int stat_bits = 3;
  std::size_t stat_group = 16;
  std::vector<std::int32_t> scale_codes;  // parallel to the first-level params
  std::vector<StatRunParams> runs;        // one per run of stat_group params
};

struct BitAccount {
  double weight_bits = 0.0;
  double stats_bits = 0.0;
  double outlier_bits = 0.0;
  double avg_bits_per_weight = 0.0;

  double total_bits() const { return weight_bits + stats_bits + outlier_bits; }
};

struct Outlier {
  std::uint32_t row = 0;
  std::uint32_t col = 0;
  double value = 0.0;

  friend bool operator==(const Outlier&, const Outlier&) = default;
};

/// A group-quantized weight matrix. Groups are contiguous runs of group_size
/// columns within a row (the last one may be ragged); params are indexed
/// [row * n_groups() + group]. Outliers, sorted by (row, col), override the
/// code at their position on dequantization.
struct QuantizedLayer {
  std::size_t rows = 0;
  std::size_t cols = 0;
  int bits = 2;
  std::size_t group_size = 0;
  std::vector<std::int32_t> codes;
  std::vector<AffineParams> groups;
  std::optional<StatsQuantRecord> stats_q;
  std::vector<Outlier> outliers;
  BitAccount accounting;

  std::size_t n_groups() const { return (cols + group_size - 1) / group_size; }
  const AffineParams& params(std::size_t row, std::size_t col) const {
    return groups[row * n_groups() + col / group_size];
  }
  Matrix dequantize() const;
};

/// Fills layer.accounting from its metadata using
///   weight bits = bits * rows * cols
///   stats bits  = per group (16 + 16), or with double quantization
///                 per group 2 * stat_bits plus 2 * 32 per stats run
///   outlier bits = 48 per outlier
/// and avg = total / (rows * cols).
void fill_accounting(QuantizedLayer& layer);

/// Round-to-nearest group quantization of every row. Throws EmptyGroup for a
/// zero group size, Config for unsupported bits.
QuantizedLayer rtn_quantize(const Matrix& w, int bits, std::size_t group_size);

/// Quantizes the given first-level params in runs of stat_group: each run's
/// scales are min-max quantized with stat_bits; the params are replaced in
/// place by their dequantized values. Throws EmptyGroup for empty input and
/// Config when stat_bits < 2 or a zero does not fit in stat_bits.
StatsQuantRecord double_quantize_stats(std::span<AffineParams> params, int stat_bits,
                                       std::size_t stat_group);
/// Appends into an existing record; used when stats are quantized one column
/// group at a time.
void double_quantize_stats_into(std::span<AffineParams> params, StatsQuantRecord& record);

// ---------------------------------------------------------------------------
// Binary quantization primitives.

struct BinaryRegion {
  double alpha = 0.0;
  std::vector<std::int8_t> signs;  // +1 / -1, sign(0) = +1
};

struct ResidualBinary {
  BinaryRegion first;
  BinaryRegion second;  // fitted to v - first.alpha * first.signs
};

inline std::int8_t sign_of(double v) { return v >= 0.0 ? 1 : -1; }

/// alpha = mean |v|, the l2-optimal scale for fixed signs. Throws EmptyGroup.
BinaryRegion binarize_region(std::span<const double> values);
/// Two sign planes: the second binarizes the residual of the first.
ResidualBinary residual_binarize(std::span<const double> values);
/// Squared error when {|v| <= t} and {|v| > t} are binarized separately.
double split_error(std::span<const double> values, double threshold);
/// Threshold minimizing split_error over at most 64 candidates taken from the
/// distinct magnitudes (all of them when there are <= 64, evenly spaced order
/// statistics otherwise). Ties go to the smaller threshold. Throws EmptyGroup.
double splitting_search(std::span<const double> values);

// ---------------------------------------------------------------------------
// Persistence: tensors "codes/<name>", "scales/<name>", "zeros/<name>",
// "outliers/<name>" (n x 3: row, col, value) and, with double quantization,
// "stats/<name>" (runs x 2: offset, step). When stats are double quantized the
// "scales" tensor holds the second-level codes.

void append_tensors(const std::string& name, const QuantizedLayer& layer, std::vector<Tensor>& out);
nlohmann::json layer_metadata(const QuantizedLayer& layer);
/// Inverse of append_tensors + layer_metadata. Throws MalformedArchive.
QuantizedLayer load_quantized_layer(const std::string& name, const TensorArchive& archive,
                                    const nlohmann::json& metadata);
nlohmann::json to_json(const BitAccount& account);

// ---------------------------------------------------------------------------
// Binary layers.

/// Alphas shared by one column group (all rows). Non-salient weights are split
/// by magnitude at split_threshold and binarized with alpha_low / alpha_high;
/// salient columns use two residual planes.
struct BinaryGroup {
  double split_threshold = 0.0;
  double alpha_low = 0.0;
  double alpha_high = 0.0;
  double alpha_salient1 = 0.0;
  double alpha_salient2 = 0.0;

  friend bool operator==(const BinaryGroup&, const BinaryGroup&) = default;
};

struct BinaryLayer {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t group_size = 0;
  std::vector<std::uint8_t> salient_columns;  // per column, 0/1
  std::vector<BinaryGroup> groups;            // per column group
  std::vector<std::int8_t> plane1;            // rows x cols, +-1
  std::vector<std::int8_t> plane2;            // rows x cols, +-1 on salient columns, 0 elsewhere
  std::vector<std::uint8_t> high_region;      // rows x cols, 1 where |w| > split_threshold
  BitAccount accounting;

  std::size_t n_groups() const { return (cols + group_size - 1) / group_size; }
  Matrix dequantize() const;
};

/// weight bits = 1 per non-salient weight + 2 per salient weight;
/// stats bits = 5 x 16 per column group + 1 per column (salient mask).
/// The magnitude-region membership is not charged.
void fill_accounting(BinaryLayer& layer);

void append_tensors(const std::string& name, const BinaryLayer& layer, std::vector<Tensor>& out);
nlohmann::json layer_metadata(const BinaryLayer& layer);

}  // namespace oac
