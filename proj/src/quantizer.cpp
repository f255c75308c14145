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

#include "oac/quantizer.hpp"
#include "oac/error.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace oac {

double round_up_f32(double x) {
  float f = static_cast<float>(x);
  if (static_cast<double>(f) < x) f = std::nextafter(f, std::numeric_limits<float>::infinity());
  return f;
}

double round_down_f32(double x) {
  float f = static_cast<float>(x);
  if (static_cast<double>(f) > x) f = std::nextafter(f, -std::numeric_limits<float>::infinity());
  return f;
}

namespace {

void check_bits(int bits, const char* what) {
  if (bits < 1 || bits > 8) {
    throw Error(Errc::kConfig, std::string(what) + " must be in [1, 8], got " + std::to_string(bits));
  }
}

std::int32_t clamp_code(double c, std::int32_t maxq) {
  return static_cast<std::int32_t>(std::clamp(c, 0.0, static_cast<double>(maxq)));
}

}  // namespace

AffineParams fit_affine(std::span<const double> values, int bits) {
  check_bits(bits, "bits");
  if (values.empty()) throw Error(Errc::kEmptyGroup, "fit_affine over an empty group");
  double mn = values[0];
  double mx = values[0];
  for (double v : values) {
    if (!std::isfinite(v)) throw Error(Errc::kNonFinite, "non-finite value in quantization group");
    mn = std::min(mn, v);
    mx = std::max(mx, v);
  }
  const std::int32_t maxq = max_code(bits);
  if (mn == mx) {
    if (mn == 0.0) return {kScaleFloor, 0};
    // One code lands on c exactly (when c is float32-representable).
    return {std::max(round_up_f32(std::abs(mn)), kScaleFloor), mn < 0.0 ? 1 : 0};
  }
  const double lo = std::min(mn, 0.0);
  const double hi = std::max(mx, 0.0);
  const double scale = round_up_f32(std::max((hi - lo) / maxq, kScaleFloor));
  return {scale, clamp_code(std::round(-lo / scale), maxq)};
}

QuantizedValue quantize_dequantize(double v, const AffineParams& p, int bits) {
  const std::int32_t code = clamp_code(std::round(v / p.scale) + p.zero, max_code(bits));
  return {code, static_cast<double>(code - p.zero) * p.scale};
}

Matrix QuantizedLayer::dequantize() const {
  Matrix out(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      const AffineParams& p = params(r, c);
      out(r, c) = static_cast<double>(codes[r * cols + c] - p.zero) * p.scale;
    }
  }
  for (const Outlier& o : outliers) out(o.row, o.col) = o.value;
  return out;
}

void fill_accounting(QuantizedLayer& layer) {
  const double n_weights = static_cast<double>(layer.rows * layer.cols);
  const double n_groups = static_cast<double>(layer.rows * layer.n_groups());
  BitAccount& a = layer.accounting;
  a.weight_bits = static_cast<double>(layer.bits) * n_weights;
  if (layer.stats_q) {
    a.stats_bits = n_groups * 2.0 * layer.stats_q->stat_bits +
                   static_cast<double>(layer.stats_q->runs.size()) * 2.0 * kSecondLevelParamBits;
  } else {
    a.stats_bits = n_groups * 2.0 * kPlainStatBits;
  }
  a.outlier_bits = static_cast<double>(layer.outliers.size()) * kOutlierBits;
  a.avg_bits_per_weight = a.total_bits() / n_weights;
}

QuantizedLayer rtn_quantize(const Matrix& w, int bits, std::size_t group_size) {
  check_bits(bits, "bits");
  if (group_size == 0) throw Error(Errc::kEmptyGroup, "group size must be >= 1");
  if (w.empty()) throw Error(Errc::kEmptyGroup, "rtn_quantize of an empty matrix");
  QuantizedLayer q;
  q.rows = w.rows();
  q.cols = w.cols();
  q.bits = bits;
  q.group_size = group_size;
  q.codes.resize(q.rows * q.cols);
  q.groups.resize(q.rows * q.n_groups());
  for (std::size_t r = 0; r < q.rows; ++r) {
    const auto row = w.row(r);
    for (std::size_t g = 0; g < q.n_groups(); ++g) {
      const std::size_t begin = g * group_size;
      const std::size_t end = std::min(begin + group_size, q.cols);
      const AffineParams p = fit_affine(row.subspan(begin, end - begin), bits);
      q.groups[r * q.n_groups() + g] = p;
      for (std::size_t c = begin; c < end; ++c) {
        q.codes[r * q.cols + c] = quantize_dequantize(row[c], p, bits).code;
      }
    }
  }
  fill_accounting(q);
  return q;
}

void double_quantize_stats_into(std::span<AffineParams> params, StatsQuantRecord& record) {
  if (params.empty()) throw Error(Errc::kEmptyGroup, "double quantization of an empty stats list");
  if (record.stat_bits < 2 || record.stat_bits > 8) {
    throw Error(Errc::kConfig, "stat_bits must be in [2, 8], got " + std::to_string(record.stat_bits));
  }
  if (record.stat_group == 0) throw Error(Errc::kEmptyGroup, "stat_group must be >= 1");
  const std::int32_t maxq = max_code(record.stat_bits);
  for (std::size_t begin = 0; begin < params.size(); begin += record.stat_group) {
    const auto run = params.subspan(begin, std::min(record.stat_group, params.size() - begin));
    double lo = run[0].scale;
    double hi = run[0].scale;
    for (const AffineParams& p : run) {
      if (p.zero > maxq) {
        throw Error(Errc::kConfig, "zero code " + std::to_string(p.zero) + " does not fit in " +
                                       std::to_string(record.stat_bits) + " stat bits");
      }
      lo = std::min(lo, p.scale);
      hi = std::max(hi, p.scale);
    }
    StatRunParams rp;
    rp.offset = round_down_f32(lo);
    rp.step = hi > rp.offset ? round_up_f32((hi - rp.offset) / maxq) : 0.0;
    for (AffineParams& p : run) {
      const std::int32_t code = rp.step > 0.0 ? clamp_code(std::round((p.scale - rp.offset) / rp.step), maxq) : 0;
      record.scale_codes.push_back(code);
      p.scale = rp.offset + code * rp.step;
    }
    record.runs.push_back(rp);
  }
}

StatsQuantRecord double_quantize_stats(std::span<AffineParams> params, int stat_bits,
                                       std::size_t stat_group) {
  StatsQuantRecord record;
  record.stat_bits = stat_bits;
  record.stat_group = stat_group;
  double_quantize_stats_into(params, record);
  return record;
}

// ---------------------------------------------------------------------------

BinaryRegion binarize_region(std::span<const double> values) {
  if (values.empty()) throw Error(Errc::kEmptyGroup, "binarize_region over an empty region");
  BinaryRegion out;
  out.signs.reserve(values.size());
  double sum = 0.0;
  for (double v : values) {
    sum += std::abs(v);
    out.signs.push_back(sign_of(v));
  }
  out.alpha = sum / static_cast<double>(values.size());
  return out;
}

ResidualBinary residual_binarize(std::span<const double> values) {
  ResidualBinary out;
  out.first = binarize_region(values);
  std::vector<double> residual(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    residual[i] = values[i] - out.first.alpha * out.first.signs[i];
  }
  out.second = binarize_region(residual);
  return out;
}

namespace {

// Squared error of binarizing magnitudes with their mean.
double region_error(const std::vector<double>& mags) {
  if (mags.empty()) return 0.0;
  double sum = 0.0;
  for (double m : mags) sum += m;
  const double alpha = sum / static_cast<double>(mags.size());
  double err = 0.0;
  for (double m : mags) err += (m - alpha) * (m - alpha);
  return err;
}

}  // namespace

double split_error(std::span<const double> values, double threshold) {
  std::vector<double> low;
  std::vector<double> high;
  for (double v : values) (std::abs(v) <= threshold ? low : high).push_back(std::abs(v));
  return region_error(low) + region_error(high);
}

double splitting_search(std::span<const double> values) {
  if (values.empty()) throw Error(Errc::kEmptyGroup, "splitting_search over an empty region");
  std::vector<double> mags(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) mags[i] = std::abs(values[i]);
  std::sort(mags.begin(), mags.end());
  mags.erase(std::unique(mags.begin(), mags.end()), mags.end());

  constexpr std::size_t kMaxCandidates = 64;
  std::vector<double> candidates;
  if (mags.size() <= kMaxCandidates) {
    candidates = mags;
  } else {
    for (std::size_t i = 0; i < kMaxCandidates; ++i) {
      const double pos = static_cast<double>(i) * static_cast<double>(mags.size() - 1) / (kMaxCandidates - 1);
      candidates.push_back(mags[static_cast<std::size_t>(std::llround(pos))]);
    }
  }
  double best_t = candidates.front();
  double best_err = split_error(values, best_t);
  for (std::size_t i = 1; i < candidates.size(); ++i) {
    const double err = split_error(values, candidates[i]);
    if (err < best_err) {
      best_err = err;
      best_t = candidates[i];
    }
  }
  return best_t;
}

Matrix BinaryLayer::dequantize() const {
  Matrix out(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      const BinaryGroup& g = groups[c / group_size];
      const std::size_t i = r * cols + c;
      if (salient_columns[c]) {
        out(r, c) = g.alpha_salient1 * plane1[i] + g.alpha_salient2 * plane2[i];
      } else {
        out(r, c) = (high_region[i] ? g.alpha_high : g.alpha_low) * plane1[i];
      }
    }
  }
  return out;
}

void fill_accounting(BinaryLayer& layer) {
  std::size_t n_salient = 0;
  for (std::uint8_t s : layer.salient_columns) n_salient += s;
  const double n_weights = static_cast<double>(layer.rows * layer.cols);
  BitAccount& a = layer.accounting;
  a.weight_bits = static_cast<double>(layer.rows * (layer.cols + n_salient));
  a.stats_bits = static_cast<double>(layer.n_groups()) * 5.0 * kBinaryStatBits + static_cast<double>(layer.cols);
  a.outlier_bits = 0.0;
  a.avg_bits_per_weight = a.total_bits() / n_weights;
}

// ---------------------------------------------------------------------------

namespace {

Tensor make_tensor(std::string name, std::size_t rows, std::size_t cols, std::vector<float> payload) {
  return Tensor{std::move(name), {rows, cols}, std::move(payload)};
}

const Tensor& expect_tensor(const TensorArchive& archive, const std::string& name, std::size_t rows,
                            std::size_t cols) {
  const Tensor& t = archive.at(name);
  if (t.dims.size() != 2 || t.dims[0] != rows || t.dims[1] != cols) {
    throw Error(Errc::kMalformedArchive, "tensor '" + name + "' has unexpected shape");
  }
  return t;
}

std::int32_t integer_entry(float v, std::int32_t max_value, const std::string& name) {
  if (v != std::floor(v) || v < 0.0f || v > static_cast<float>(max_value)) {
    throw Error(Errc::kMalformedArchive, "tensor '" + name + "' holds an invalid code");
  }
  return static_cast<std::int32_t>(v);
}

}  // namespace

void append_tensors(const std::string& name, const QuantizedLayer& layer, std::vector<Tensor>& out) {
  const std::size_t ng = layer.n_groups();
  std::vector<float> codes(layer.codes.begin(), layer.codes.end());
  std::vector<float> scales(layer.rows * ng);
  std::vector<float> zeros(layer.rows * ng);
  for (std::size_t r = 0; r < layer.rows; ++r) {
    for (std::size_t g = 0; g < ng; ++g) {
      const std::size_t i = r * ng + g;
      zeros[i] = static_cast<float>(layer.groups[i].zero);
      // Double-quantized scales are persisted as their second-level codes,
      // which the record keeps column-group-major.
      scales[i] = layer.stats_q ? static_cast<float>(layer.stats_q->scale_codes[g * layer.rows + r])
                                : static_cast<float>(layer.groups[i].scale);
    }
  }
  std::vector<float> outliers;
  outliers.reserve(layer.outliers.size() * 3);
  for (const Outlier& o : layer.outliers) {
    outliers.push_back(static_cast<float>(o.row));
    outliers.push_back(static_cast<float>(o.col));
    outliers.push_back(static_cast<float>(o.value));
  }
  out.push_back(make_tensor("codes/" + name, layer.rows, layer.cols, std::move(codes)));
  out.push_back(make_tensor("scales/" + name, layer.rows, ng, std::move(scales)));
  out.push_back(make_tensor("zeros/" + name, layer.rows, ng, std::move(zeros)));
  out.push_back(make_tensor("outliers/" + name, layer.outliers.size(), 3, std::move(outliers)));
  if (layer.stats_q) {
    std::vector<float> runs;
    for (const StatRunParams& rp : layer.stats_q->runs) {
      runs.push_back(static_cast<float>(rp.offset));
      runs.push_back(static_cast<float>(rp.step));
    }
    out.push_back(make_tensor("stats/" + name, layer.stats_q->runs.size(), 2, std::move(runs)));
  }
}

nlohmann::json to_json(const BitAccount& account) {
  return {{"weight_bits", account.weight_bits},
          {"stats_bits", account.stats_bits},
          {"outlier_bits", account.outlier_bits},
          {"avg_bits_per_weight", account.avg_bits_per_weight}};
}

nlohmann::json layer_metadata(const QuantizedLayer& layer) {
  nlohmann::json meta = {{"rows", layer.rows},
                         {"cols", layer.cols},
                         {"bits", layer.bits},
                         {"group_size", layer.group_size},
                         {"n_outliers", layer.outliers.size()},
                         {"accounting", to_json(layer.accounting)}};
  if (layer.stats_q) {
    meta["stats"] = {{"double_quantized", true},
                     {"stat_bits", layer.stats_q->stat_bits},
                     {"stat_group", layer.stats_q->stat_group}};
  } else {
    meta["stats"] = {{"double_quantized", false}};
  }
  return meta;
}

nlohmann::json layer_metadata(const BinaryLayer& layer) {
  std::size_t n_salient = 0;
  for (std::uint8_t s : layer.salient_columns) n_salient += s;
  return {{"format", "binary"},
          {"rows", layer.rows},
          {"cols", layer.cols},
          {"group_size", layer.group_size},
          {"n_salient_columns", n_salient},
          {"accounting", to_json(layer.accounting)}};
}

QuantizedLayer load_quantized_layer(const std::string& name, const TensorArchive& archive,
                                    const nlohmann::json& metadata) {
  QuantizedLayer q;
  try {
    q.rows = metadata.at("rows").get<std::size_t>();
    q.cols = metadata.at("cols").get<std::size_t>();
    q.bits = metadata.at("bits").get<int>();
    q.group_size = metadata.at("group_size").get<std::size_t>();
    if (metadata.at("stats").at("double_quantized").get<bool>()) {
      StatsQuantRecord rec;
      rec.stat_bits = metadata.at("stats").at("stat_bits").get<int>();
      rec.stat_group = metadata.at("stats").at("stat_group").get<std::size_t>();
      q.stats_q = rec;
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::kMalformedArchive, "layer metadata for '" + name + "': " + e.what());
  }
  if (q.bits < 1 || q.bits > 8 || q.group_size == 0 || q.rows == 0 || q.cols == 0) {
    throw Error(Errc::kMalformedArchive, "layer metadata for '" + name + "' out of range");
  }
  const std::size_t ng = q.n_groups();
  const std::int32_t maxq = max_code(q.bits);

  const Tensor& codes = expect_tensor(archive, "codes/" + name, q.rows, q.cols);
  q.codes.reserve(codes.payload.size());
  for (float v : codes.payload) q.codes.push_back(integer_entry(v, maxq, "codes/" + name));

  const Tensor& scales = expect_tensor(archive, "scales/" + name, q.rows, ng);
  const Tensor& zeros = expect_tensor(archive, "zeros/" + name, q.rows, ng);
  q.groups.resize(q.rows * ng);
  for (std::size_t i = 0; i < q.groups.size(); ++i) {
    q.groups[i].zero = integer_entry(zeros.payload[i], maxq, "zeros/" + name);
    q.groups[i].scale = scales.payload[i];
  }
  if (q.stats_q) {
    StatsQuantRecord& rec = *q.stats_q;
    if (rec.stat_bits < 2 || rec.stat_bits > 8 || rec.stat_group == 0) {
      throw Error(Errc::kMalformedArchive, "stats config for '" + name + "' out of range");
    }
    const std::size_t runs_per_group = (q.rows + rec.stat_group - 1) / rec.stat_group;
    const Tensor& runs = expect_tensor(archive, "stats/" + name, ng * runs_per_group, 2);
    for (std::size_t i = 0; i < ng * runs_per_group; ++i) {
      rec.runs.push_back({runs.payload[2 * i], runs.payload[2 * i + 1]});
    }
    rec.scale_codes.resize(q.rows * ng);
    for (std::size_t g = 0; g < ng; ++g) {
      for (std::size_t r = 0; r < q.rows; ++r) {
        const std::int32_t code = integer_entry(scales.payload[r * ng + g], max_code(rec.stat_bits), "scales/" + name);
        const StatRunParams& rp = rec.runs[g * runs_per_group + r / rec.stat_group];
        rec.scale_codes[g * q.rows + r] = code;
        q.groups[r * ng + g].scale = rp.offset + code * rp.step;
      }
    }
  }
  for (const AffineParams& p : q.groups) {
    if (!(p.scale > 0.0) || !std::isfinite(p.scale)) {
      throw Error(Errc::kMalformedArchive, "non-positive scale in '" + name + "'");
    }
  }

  const Tensor& outliers = archive.at("outliers/" + name);
  if (outliers.dims.size() != 2 || outliers.dims[1] != 3) {
    throw Error(Errc::kMalformedArchive, "tensor 'outliers/" + name + "' has unexpected shape");
  }
  for (std::size_t i = 0; i < outliers.dims[0]; ++i) {
    Outlier o;
    o.row = static_cast<std::uint32_t>(integer_entry(outliers.payload[3 * i], static_cast<std::int32_t>(q.rows - 1), "outliers/" + name));
    o.col = static_cast<std::uint32_t>(integer_entry(outliers.payload[3 * i + 1], static_cast<std::int32_t>(q.cols - 1), "outliers/" + name));
    o.value = outliers.payload[3 * i + 2];
    if (!q.outliers.empty() && std::pair(q.outliers.back().row, q.outliers.back().col) >= std::pair(o.row, o.col)) {
      throw Error(Errc::kMalformedArchive, "outliers of '" + name + "' not sorted by (row, col)");
    }
    q.outliers.push_back(o);
  }
  fill_accounting(q);
  return q;
}

void append_tensors(const std::string& name, const BinaryLayer& layer, std::vector<Tensor>& out) {
  std::vector<float> p1(layer.plane1.begin(), layer.plane1.end());
  std::vector<float> p2(layer.plane2.begin(), layer.plane2.end());
  std::vector<float> region(layer.high_region.begin(), layer.high_region.end());
  std::vector<float> mask(layer.salient_columns.begin(), layer.salient_columns.end());
  std::vector<float> alphas;
  for (const BinaryGroup& g : layer.groups) {
    for (double v : {g.split_threshold, g.alpha_low, g.alpha_high, g.alpha_salient1, g.alpha_salient2}) {
      alphas.push_back(static_cast<float>(v));
    }
  }
  out.push_back(make_tensor("plane1/" + name, layer.rows, layer.cols, std::move(p1)));
  out.push_back(make_tensor("plane2/" + name, layer.rows, layer.cols, std::move(p2)));
  out.push_back(make_tensor("region/" + name, layer.rows, layer.cols, std::move(region)));
  out.push_back(make_tensor("salient/" + name, 1, layer.cols, std::move(mask)));
  out.push_back(make_tensor("alphas/" + name, layer.groups.size(), 5, std::move(alphas)));
}

}  // namespace oac
