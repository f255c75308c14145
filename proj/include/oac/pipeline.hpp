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

#include "oac/calibrator.hpp"
#include "oac/model.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace oac {

enum class Method { kRtn, kOptq, kSpqr, kOacOptq, kOacSpqr, kBinary, kOacBinary };

/// "RTN", "OPTQ", "SpQR", "OAC_OPTQ", "OAC_SpQR", "Binary_BiLLM_style", "OAC_Binary".
std::string_view to_string(Method m);
/// Throws Config.
Method parse_method(std::string_view s);
bool is_adaptive(Method m);
Backend backend_of(Method m);

struct RunConfig {
  std::filesystem::path checkpoint;
  /// Split 80/10/10 into train / validation / test.
  std::filesystem::path corpus;
  // Optional overrides; each replaces its split by the whole file.
  std::filesystem::path calibration_corpus;
  std::filesystem::path validation_corpus;
  std::filesystem::path test_corpus;

  Method method = Method::kOacSpqr;
  /// backend and hessian_mode are derived from method.
  CalibSpec calib;
  std::vector<double> alpha_grid = {0.001, 0.01, 0.1, 1.0};
  Reduction reduction = Reduction::kSum;
  std::size_t n_calibration_samples = 128;
  std::uint64_t seed = 0;
  /// Phase 1 runs on the partially quantized model unless this is false, in
  /// which case Hessians come from the original weights.
  bool phase1_on_quantized = true;
  std::filesystem::path out_dir = "out";

  // train-toy only.
  LmConfig model;
  TrainConfig train;
  std::uint64_t train_seed = 0;

  /// Applies the method to calib (backend, hessian mode) and validates.
  void normalize();
};

/// Relative paths resolve against base_dir. Unknown keys are rejected.
/// Throws Config.
RunConfig run_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
/// Throws Io / Config naming the path.
RunConfig load_run_config(const std::filesystem::path& path);
nlohmann::json to_json(const RunConfig& config);

struct EvalSplits {
  std::vector<std::uint8_t> calibration;
  std::vector<std::uint8_t> validation;
  std::vector<std::uint8_t> test;
};

/// Throws Io.
EvalSplits load_splits(const RunConfig& config);

struct RunResult {
  TinyLM model;  // dequantized weights
  nlohmann::json report;
  nlohmann::json timings;
  /// Packed layers: codes, stats, outliers (or binary planes) per layer.
  std::vector<Tensor> quantized_tensors;
  nlohmann::json quantized_metadata;
};

/// The two-phase loop over the blocks of the checkpoint: per block build the
/// Hessians (by default on the partially quantized model), then calibrate each linear.
/// Layer failures abort with the layer named. Does not write files.
RunResult run_quantize(const RunConfig& config);

/// Writes report.json, report.csv, timings.json, quantized.oack (+ .json) and
/// dequantized.oack (+ sidecar) into config.out_dir.
void write_run(const RunConfig& config, const RunResult& result);

struct EvalRecord {
  double validation = 0.0;
  double test = 0.0;
};

nlohmann::json to_json(const EvalRecord& record);

EvalRecord run_eval(const RunConfig& config, const TinyLM& model);
/// Loads the checkpoint (architecture checked against its sidecar).
EvalRecord run_eval(const RunConfig& config, const std::filesystem::path& checkpoint);

struct AlphaSweepCandidate {
  double alpha = 0.0;
  bool ok = false;
  std::string error;
  std::optional<RunResult> result;
};

struct AlphaSweepResult {
  std::size_t best = 0;
  std::vector<AlphaSweepCandidate> candidates;
  nlohmann::json summary;
};

/// One run per alpha in config.alpha_grid; the best minimizes validation
/// perplexity, ties to the smaller alpha. Throws Config on an empty grid and
/// NotPositiveDefinite listing every failure when no candidate succeeds.
AlphaSweepResult run_alpha_sweep(const RunConfig& config);

/// Oracle suite plus the logistic end-to-end summary; "all_passed" covers both.
nlohmann::json run_verify_oracles(std::uint64_t seed);

/// Global avg bits recomputed from the per-layer accounting in a report.
double recompute_avg_bits(const nlohmann::json& report);

// Cross-run tables.
std::string csv_header();
std::string csv_row(const nlohmann::json& report);
std::string render_markdown(const std::vector<nlohmann::json>& reports);
std::string render_csv(const std::vector<nlohmann::json>& reports);

}  // namespace oac
