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

#include "oac/calibrator.hpp"
#include "oac/error.hpp"
#include "oac/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace oac {

std::string_view to_string(Backend backend) {
  switch (backend) {
    case Backend::kOptq: return "optq";
    case Backend::kSpqr: return "spqr";
    case Backend::kBinary: return "binary";
  }
  return "optq";
}

Backend parse_backend(std::string_view s) {
  if (s == "optq") return Backend::kOptq;
  if (s == "spqr") return Backend::kSpqr;
  if (s == "binary") return Backend::kBinary;
  throw Error(Errc::kConfig, "unknown backend '" + std::string(s) + "'");
}

void CalibSpec::validate() const {
  if (bits < 1 || bits > 8) throw Error(Errc::kConfig, "bits must be in [1, 8]");
  if (group_size == 0) throw Error(Errc::kConfig, "group_size must be >= 1");
  if (block_size == 0) throw Error(Errc::kConfig, "block_size must be >= 1");
  if (alpha < 0.0 || std::isnan(alpha)) throw Error(Errc::kNegativeAlpha, "alpha = " + std::to_string(alpha));
  if (backend == Backend::kSpqr) {
    if (!(tau > 0.0)) throw Error(Errc::kConfig, "tau must be > 0 for the spqr backend");
    if (stat_bits < 2 || stat_bits > 8) throw Error(Errc::kConfig, "stat_bits must be in [2, 8]");
    if (stat_bits < bits) throw Error(Errc::kConfig, "stat_bits must be >= bits to hold the zero codes");
    if (stat_group == 0) throw Error(Errc::kConfig, "stat_group must be >= 1");
  }
  if (backend == Backend::kBinary && !(salient_fraction >= 0.0 && salient_fraction <= 1.0)) {
    throw Error(Errc::kConfig, "salient_fraction must be in [0, 1]");
  }
}

nlohmann::json to_json(const CalibSpec& spec) {
  return {{"bits", spec.bits},
          {"group_size", spec.group_size},
          {"tau", spec.tau},
          {"tau_normalization", "mean_saliency"},
          {"alpha", spec.alpha},
          {"block_size", spec.block_size},
          {"backend", to_string(spec.backend)},
          {"hessian_mode", to_string(spec.hessian_mode)},
          {"stat_bits", spec.stat_bits},
          {"stat_group", spec.stat_group},
          {"salient_fraction", spec.salient_fraction},
          {"compensate", spec.compensate}};
}

nlohmann::json to_json(const CalibReport& report) {
  return {{"layer", report.layer},
          {"proxy_error", report.proxy_error},
          {"outlier_count", report.outlier_count},
          {"outlier_rate", report.outlier_rate},
          {"mean_saliency", report.mean_saliency},
          {"column_update_norms", report.column_update_norms},
          {"accounting", to_json(report.accounting)},
          {"spec", to_json(report.spec)}};
}

double saliency(double w, double w_hat, double h_inv_kk) {
  if (!(h_inv_kk > 0.0)) {
    throw Error(Errc::kNonPositiveDiagonal, "inverse Hessian diagonal " + std::to_string(h_inv_kk) +
                                                " <= 0; increase damping");
  }
  const double d = w - w_hat;
  return d * d / h_inv_kk;
}

Matrix optimal_update(std::span<const double> residual, const SymMatrix& h_inv, std::size_t q) {
  if (q >= h_inv.dim()) throw Error(Errc::kDimMismatch, "column index out of range");
  const double d = h_inv(q, q);
  if (!(d > 0.0)) {
    throw Error(Errc::kNonPositiveDiagonal, "inverse Hessian diagonal " + std::to_string(d) + " <= 0");
  }
  Matrix out(residual.size(), h_inv.dim());
  const auto hq = h_inv.row(q);
  for (std::size_t j = 0; j < residual.size(); ++j) {
    const double f = -residual[j] / d;
    for (std::size_t k = 0; k < h_inv.dim(); ++k) out(j, k) = f * hq[k];
  }
  return out;
}

namespace {

void check_shapes(const Matrix& w, const SymMatrix& h) {
  if (w.empty()) throw Error(Errc::kShapeMismatch, "empty weight matrix");
  if (h.dim() != w.cols()) {
    throw Error(Errc::kShapeMismatch, "Hessian dim " + std::to_string(h.dim()) + " != d_col " +
                                          std::to_string(w.cols()));
  }
  require_finite(w, "layer weights");
  require_finite(h, "layer Hessian");
}

struct Factorization {
  Matrix upper;                 // U with U^T U = H^{-1}
  std::vector<double> inv_diag; // diag(H^{-1})
};

Factorization factorize(const SymMatrix& h, double alpha) {
  const CholeskyFactor f = cholesky(regularize(h, alpha));
  Factorization out;
  out.inv_diag = cholesky_inverse(f).diagonal_values();
  out.upper = inverse_upper_factor(f);
  return out;
}

std::vector<std::uint8_t> outlier_mask(const Matrix& w, std::span<const double> inv_diag,
                                       const CalibSpec& spec, double* mean_out) {
  const Matrix naive = rtn_quantize(w, spec.bits, spec.group_size).dequantize();
  std::vector<double> s(w.size());
  double total = 0.0;
  for (std::size_t r = 0; r < w.rows(); ++r) {
    for (std::size_t c = 0; c < w.cols(); ++c) {
      const double v = saliency(w(r, c), naive(r, c), inv_diag[c]);
      s[r * w.cols() + c] = v;
      total += v;
    }
  }
  const double mean = total / static_cast<double>(s.size());
  if (mean_out != nullptr) *mean_out = mean;
  std::vector<std::uint8_t> mask(s.size(), 0);
  if (mean <= 0.0) return mask;
  const double threshold = spec.tau * mean;
  for (std::size_t i = 0; i < s.size(); ++i) mask[i] = s[i] > threshold ? 1 : 0;
  return mask;
}

// Shared left-to-right column sweep. Callers supply the per-group fit (which
// sees the fully updated weights of the group's columns) and the per-column
// quantizer. Compensation follows the rows of U: for column i,
// err = (w_i - q_i) / U_ii and every later column c receives -err * U_ic,
// immediately inside the current block and in one batch once the block closes.
class ColumnSweep {
 public:
  using GroupFn = std::function<void(std::size_t begin, std::size_t end, const Matrix& cols)>;
  using QuantFn = std::function<void(std::size_t col, std::span<const double> current, std::span<double> q)>;

  ColumnSweep(Matrix& work, const Matrix& upper, const CalibSpec& spec, const CalibHooks& hooks)
      : work_(work), u_(upper), spec_(spec), hooks_(hooks) {}

  std::vector<double> run(const GroupFn& on_group, const QuantFn& quantize) {
    const std::size_t rows = work_.rows();
    const std::size_t cols = work_.cols();
    const double scale = hooks_.update_scale;
    std::vector<double> norms(cols, 0.0);
    std::vector<double> current(rows);
    std::vector<double> q(rows);
    for (std::size_t b0 = 0; b0 < cols; b0 += spec_.block_size) {
      const std::size_t b1 = std::min(b0 + spec_.block_size, cols);
      Matrix err(rows, b1 - b0);
      for (std::size_t i = b0; i < b1; ++i) {
        if (i % spec_.group_size == 0) {
          const std::size_t g1 = std::min(i + spec_.group_size, cols);
          on_group(i, g1, group_columns(i, g1, b0, b1, err));
        }
        for (std::size_t r = 0; r < rows; ++r) current[r] = work_(r, i);
        quantize(i, current, q);
        for (std::size_t r = 0; r < rows; ++r) work_(r, i) = q[r];
        if (!spec_.compensate) {
          if (hooks_.on_column && i + 1 < b1) hooks_.on_column(i, work_);
          continue;
        }
        const double d = u_(i, i);
        double err_sq = 0.0;
        for (std::size_t r = 0; r < rows; ++r) {
          const double e = scale * (current[r] - q[r]) / d;
          err(r, i - b0) = e;
          err_sq += e * e;
          for (std::size_t c = i + 1; c < b1; ++c) work_(r, c) -= e * u_(i, c);
        }
        double u_sq = 0.0;
        for (std::size_t c = i + 1; c < cols; ++c) u_sq += u_(i, c) * u_(i, c);
        norms[i] = std::sqrt(err_sq * u_sq);
        if (hooks_.on_column && i + 1 < b1) hooks_.on_column(i, work_);
      }
      if (spec_.compensate && b1 < cols) {
        for (std::size_t r = 0; r < rows; ++r) {
          double* wr = work_.row(r).data();
          for (std::size_t i = b0; i < b1; ++i) {
            const double e = err(r, i - b0);
            if (e == 0.0) continue;
            const double* ui = u_.row(i).data();
            for (std::size_t c = b1; c < cols; ++c) wr[c] -= e * ui[c];
          }
        }
      }
      if (hooks_.on_column) hooks_.on_column(b1 - 1, work_);
    }
    return norms;
  }

 private:
  // Columns [g0, g1) as they stand after every update from columns < g0,
  // including the ones of the open block that have not been flushed yet.
  Matrix group_columns(std::size_t g0, std::size_t g1, std::size_t b0, std::size_t b1,
                       const Matrix& err) const {
    Matrix out(work_.rows(), g1 - g0);
    for (std::size_t r = 0; r < work_.rows(); ++r) {
      for (std::size_t c = g0; c < g1; ++c) {
        double v = work_(r, c);
        if (c >= b1 && spec_.compensate) {
          for (std::size_t i = b0; i < g0; ++i) v -= err(r, i - b0) * u_(i, c);
        }
        out(r, c - g0) = v;
      }
    }
    return out;
  }

  Matrix& work_;
  const Matrix& u_;
  const CalibSpec& spec_;
  const CalibHooks& hooks_;
};

}  // namespace

std::vector<std::uint8_t> detect_outliers(const Matrix& w, const SymMatrix& h, const CalibSpec& spec,
                                          double* mean_saliency) {
  check_shapes(w, h);
  const CholeskyFactor f = cholesky(regularize(h, spec.alpha));
  const std::vector<double> inv_diag = cholesky_inverse(f).diagonal_values();
  return outlier_mask(w, inv_diag, spec, mean_saliency);
}

CalibResult calibrate_layer(const Matrix& w, const SymMatrix& h, const CalibSpec& spec,
                            const CalibHooks& hooks, std::string layer_name) {
  spec.validate();
  if (spec.backend == Backend::kBinary) {
    throw Error(Errc::kConfig, "calibrate_layer called with the binary backend");
  }
  check_shapes(w, h);
  const Factorization fac = factorize(h, spec.alpha);
  const bool spqr = spec.backend == Backend::kSpqr;

  CalibResult result;
  CalibReport& report = result.report;
  report.layer = std::move(layer_name);
  report.spec = spec;

  std::vector<std::uint8_t> mask(w.size(), 0);
  if (spqr) mask = outlier_mask(w, fac.inv_diag, spec, &report.mean_saliency);

  QuantizedLayer& layer = result.layer;
  layer.rows = w.rows();
  layer.cols = w.cols();
  layer.bits = spec.bits;
  layer.group_size = spec.group_size;
  layer.codes.assign(w.size(), 0);
  layer.groups.resize(w.rows() * layer.n_groups());
  if (spqr) {
    StatsQuantRecord rec;
    rec.stat_bits = spec.stat_bits;
    rec.stat_group = spec.stat_group;
    layer.stats_q = rec;
  }
  const std::size_t ng = layer.n_groups();
  const std::size_t cols = w.cols();
  std::vector<AffineParams> params(w.rows());
  std::vector<double> values;

  auto on_group = [&](std::size_t g0, std::size_t g1, const Matrix& group) {
    for (std::size_t r = 0; r < w.rows(); ++r) {
      values.clear();
      for (std::size_t c = g0; c < g1; ++c) {
        if (!mask[r * cols + c]) values.push_back(group(r, c - g0));
      }
      if (values.empty()) {
        const auto row = group.row(r);
        values.assign(row.begin(), row.end());
      }
      params[r] = fit_affine(values, spec.bits);
    }
    if (spqr) double_quantize_stats_into(params, *layer.stats_q);
    for (std::size_t r = 0; r < w.rows(); ++r) layer.groups[r * ng + g0 / spec.group_size] = params[r];
  };
  auto quantize = [&](std::size_t c, std::span<const double> current, std::span<double> q) {
    for (std::size_t r = 0; r < w.rows(); ++r) {
      const QuantizedValue qv = quantize_dequantize(current[r], params[r], spec.bits);
      layer.codes[r * cols + c] = qv.code;
      if (mask[r * cols + c]) {
        // Outliers keep the full-precision value they carry at this point of
        // the sweep, stored as float32.
        q[r] = static_cast<float>(current[r]);
        layer.outliers.push_back({static_cast<std::uint32_t>(r), static_cast<std::uint32_t>(c), q[r]});
      } else {
        q[r] = qv.value;
      }
    }
  };

  Matrix work = w;
  ColumnSweep sweep(work, fac.upper, spec, hooks);
  report.column_update_norms = sweep.run(on_group, quantize);

  std::sort(layer.outliers.begin(), layer.outliers.end(), [](const Outlier& a, const Outlier& b) {
    return std::pair(a.row, a.col) < std::pair(b.row, b.col);
  });
  fill_accounting(layer);

  const Matrix w_hat = layer.dequantize();
  report.proxy_error = quadratic_trace(difference(w_hat, w), h);
  report.outlier_count = layer.outliers.size();
  report.outlier_rate = static_cast<double>(layer.outliers.size()) / static_cast<double>(w.size());
  report.accounting = layer.accounting;
  return result;
}

std::vector<std::uint8_t> select_salient_columns(const Matrix& w, const SymMatrix& h_inv,
                                                 double fraction) {
  if (h_inv.dim() != w.cols()) throw Error(Errc::kShapeMismatch, "inverse Hessian / weight mismatch");
  double alpha = 0.0;
  for (double v : w.data()) alpha += std::abs(v);
  alpha /= static_cast<double>(w.size());
  std::vector<double> score(w.cols(), 0.0);
  for (std::size_t r = 0; r < w.rows(); ++r) {
    for (std::size_t c = 0; c < w.cols(); ++c) {
      score[c] += saliency(w(r, c), alpha * sign_of(w(r, c)), h_inv(c, c));
    }
  }
  std::vector<std::size_t> order(w.cols());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return score[a] > score[b]; });
  const auto n = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(w.cols())));
  std::vector<std::uint8_t> mask(w.cols(), 0);
  for (std::size_t i = 0; i < std::min(n, w.cols()); ++i) mask[order[i]] = 1;
  return mask;
}

BinaryCalibResult calibrate_layer_binary(const Matrix& w, const SymMatrix& h, const CalibSpec& spec,
                                         std::string layer_name) {
  spec.validate();
  if (spec.backend != Backend::kBinary) {
    throw Error(Errc::kConfig, "calibrate_layer_binary requires the binary backend");
  }
  check_shapes(w, h);
  const CholeskyFactor f = cholesky(regularize(h, spec.alpha));
  const SymMatrix h_inv = cholesky_inverse(f);
  const Matrix upper = inverse_upper_factor(f);

  BinaryCalibResult result;
  BinaryLayer& layer = result.layer;
  layer.rows = w.rows();
  layer.cols = w.cols();
  layer.group_size = spec.group_size;
  layer.salient_columns = select_salient_columns(w, h_inv, spec.salient_fraction);
  layer.groups.resize(layer.n_groups());
  layer.plane1.assign(w.size(), 1);
  layer.plane2.assign(w.size(), 0);
  layer.high_region.assign(w.size(), 0);
  const std::size_t cols = w.cols();
  BinaryGroup* group = nullptr;

  auto on_group = [&](std::size_t g0, std::size_t g1, const Matrix& block) {
    std::vector<double> salient;
    std::vector<double> plain;
    for (std::size_t r = 0; r < block.rows(); ++r) {
      for (std::size_t c = g0; c < g1; ++c) {
        (layer.salient_columns[c] ? salient : plain).push_back(block(r, c - g0));
      }
    }
    group = &layer.groups[g0 / spec.group_size];
    if (!salient.empty()) {
      const ResidualBinary rb = residual_binarize(salient);
      group->alpha_salient1 = rb.first.alpha;
      group->alpha_salient2 = rb.second.alpha;
    }
    if (!plain.empty()) {
      group->split_threshold = splitting_search(plain);
      std::vector<double> low;
      std::vector<double> high;
      for (double v : plain) (std::abs(v) > group->split_threshold ? high : low).push_back(v);
      if (!low.empty()) group->alpha_low = binarize_region(low).alpha;
      if (!high.empty()) group->alpha_high = binarize_region(high).alpha;
    }
  };
  auto quantize = [&](std::size_t c, std::span<const double> current, std::span<double> q) {
    for (std::size_t r = 0; r < w.rows(); ++r) {
      const std::size_t i = r * cols + c;
      const double v = current[r];
      const std::int8_t s1 = sign_of(v);
      layer.plane1[i] = s1;
      if (layer.salient_columns[c]) {
        const std::int8_t s2 = sign_of(v - group->alpha_salient1 * s1);
        layer.plane2[i] = s2;
        q[r] = group->alpha_salient1 * s1 + group->alpha_salient2 * s2;
      } else {
        const bool high = std::abs(v) > group->split_threshold;
        layer.high_region[i] = high ? 1 : 0;
        q[r] = (high ? group->alpha_high : group->alpha_low) * s1;
      }
    }
  };

  Matrix work = w;
  const CalibHooks hooks;
  ColumnSweep sweep(work, upper, spec, hooks);
  CalibReport& report = result.report;
  report.column_update_norms = sweep.run(on_group, quantize);
  fill_accounting(layer);

  report.layer = std::move(layer_name);
  report.spec = spec;
  report.proxy_error = quadratic_trace(difference(layer.dequantize(), w), h);
  report.accounting = layer.accounting;
  return result;
}

AlphaSweep sweep_alpha(const Matrix& w, const SymMatrix& h, const CalibSpec& spec,
                       std::span<const double> grid) {
  if (grid.empty()) throw Error(Errc::kConfig, "alpha grid is empty");
  AlphaSweep out;
  bool found = false;
  double best_error = 0.0;
  for (double alpha : grid) {
    AlphaCandidate cand;
    cand.alpha = alpha;
    CalibSpec s = spec;
    s.alpha = alpha;
    try {
      cand.report = s.backend == Backend::kBinary ? calibrate_layer_binary(w, h, s).report
                                                  : calibrate_layer(w, h, s).report;
      cand.ok = true;
    } catch (const Error& e) {
      if (e.code() != Errc::kNotPositiveDefinite && e.code() != Errc::kNonFinite &&
          e.code() != Errc::kNonPositiveDiagonal && e.code() != Errc::kNegativeAlpha) {
        throw;
      }
      cand.error = e.what();
    }
    if (cand.ok) {
      const double err = cand.report->proxy_error;
      if (!found || err < best_error || (err == best_error && alpha < out.best_alpha)) {
        found = true;
        best_error = err;
        out.best_alpha = alpha;
      }
    }
    out.candidates.push_back(std::move(cand));
  }
  if (!found) {
    std::string msg = "every alpha candidate failed:";
    for (const auto& c : out.candidates) msg += " [" + std::to_string(c.alpha) + "] " + c.error;
    throw Error(Errc::kNotPositiveDefinite, msg);
  }
  return out;
}

}  // namespace oac
