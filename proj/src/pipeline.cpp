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

#include "oac/pipeline.hpp"

#include "oac/error.hpp"
#include "oac/linalg.hpp"
#include "oac/oracles.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

namespace oac {

namespace {

struct MethodName {
  Method method;
  std::string_view name;
};

constexpr MethodName kMethods[] = {
    {Method::kRtn, "RTN"},           {Method::kOptq, "OPTQ"},
    {Method::kSpqr, "SpQR"},         {Method::kOacOptq, "OAC_OPTQ"},
    {Method::kOacSpqr, "OAC_SpQR"},  {Method::kBinary, "Binary_BiLLM_style"},
    {Method::kOacBinary, "OAC_Binary"},
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  if (p.empty()) return {};
  const std::filesystem::path path(p);
  return path.is_absolute() || base.empty() ? path : base / path;
}

void round_to_float(Matrix& m) {
  for (double& v : m.data()) v = static_cast<double>(static_cast<float>(v));
}

// Layer-scoped failure: keep the kind, name the layer.
[[noreturn]] void rethrow_for_layer(const Error& e, const std::string& layer) {
  throw Error(e.code(), "layer " + layer + ": " + e.message());
}

std::string format_fixed(double v, int digits) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

std::string format_exact(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(Errc::kIo, "cannot write " + path.string());
  out << text;
  if (!out) throw Error(Errc::kIo, "cannot write " + path.string());
}

}  // namespace

std::string_view to_string(Method m) {
  for (const auto& e : kMethods) {
    if (e.method == m) return e.name;
  }
  return "unknown";
}

Method parse_method(std::string_view s) {
  for (const auto& e : kMethods) {
    if (e.name == s) return e.method;
  }
  std::string known;
  for (const auto& e : kMethods) known += std::string(known.empty() ? "" : ", ") + std::string(e.name);
  throw Error(Errc::kConfig, "unknown method '" + std::string(s) + "' (expected one of " + known + ")");
}

bool is_adaptive(Method m) {
  return m == Method::kOacOptq || m == Method::kOacSpqr || m == Method::kOacBinary;
}

Backend backend_of(Method m) {
  switch (m) {
    case Method::kSpqr:
    case Method::kOacSpqr: return Backend::kSpqr;
    case Method::kBinary:
    case Method::kOacBinary: return Backend::kBinary;
    default: return Backend::kOptq;
  }
}

void RunConfig::normalize() {
  calib.backend = backend_of(method);
  calib.hessian_mode = is_adaptive(method) ? HessianMode::kAdaptive : HessianMode::kAgnostic;
  calib.compensate = method != Method::kRtn;
  calib.validate();
  if (n_calibration_samples == 0) throw Error(Errc::kConfig, "n_calibration_samples must be positive");
  for (double a : alpha_grid) {
    if (!(a >= 0.0)) throw Error(Errc::kConfig, "alpha grid values must be >= 0");
  }
  model.validate();
}

RunConfig run_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir) {
  if (!j.is_object()) throw Error(Errc::kConfig, "run config must be a JSON object");
  static const std::set<std::string> known = {
      "checkpoint", "corpus",     "calibration_corpus", "validation_corpus", "test_corpus",
      "method",     "bits",       "group_size",         "tau",               "alpha",
      "block_size", "stat_bits",  "stat_group",         "salient_fraction",  "alpha_grid",
      "reduction",  "n_calibration_samples", "seed",    "out",               "model",
      "train",      "train_seed", "phase1_model"};
  for (const auto& [key, value] : j.items()) {
    if (known.count(key) == 0) throw Error(Errc::kConfig, "unknown config key '" + key + "'");
  }
  RunConfig c;
  try {
    c.checkpoint = resolve(base_dir, j.value("checkpoint", std::string()));
    c.corpus = resolve(base_dir, j.value("corpus", std::string()));
    c.calibration_corpus = resolve(base_dir, j.value("calibration_corpus", std::string()));
    c.validation_corpus = resolve(base_dir, j.value("validation_corpus", std::string()));
    c.test_corpus = resolve(base_dir, j.value("test_corpus", std::string()));
    c.method = parse_method(j.value("method", std::string(to_string(c.method))));
    c.calib.bits = j.value("bits", c.calib.bits);
    c.calib.group_size = j.value("group_size", c.calib.group_size);
    c.calib.tau = j.value("tau", c.calib.tau);
    c.calib.alpha = j.value("alpha", c.calib.alpha);
    c.calib.block_size = j.value("block_size", c.calib.block_size);
    c.calib.stat_bits = j.value("stat_bits", c.calib.stat_bits);
    c.calib.stat_group = j.value("stat_group", c.calib.stat_group);
    c.calib.salient_fraction = j.value("salient_fraction", c.calib.salient_fraction);
    c.alpha_grid = j.value("alpha_grid", c.alpha_grid);
    c.reduction = parse_reduction(j.value("reduction", std::string(to_string(c.reduction))));
    c.n_calibration_samples = j.value("n_calibration_samples", c.n_calibration_samples);
    c.seed = j.value("seed", c.seed);
    const std::string phase1 = j.value("phase1_model", std::string("partially_quantized"));
    if (phase1 != "partially_quantized" && phase1 != "original") {
      throw Error(Errc::kConfig, "phase1_model must be 'partially_quantized' or 'original', got '" + phase1 + "'");
    }
    c.phase1_on_quantized = phase1 == "partially_quantized";
    c.out_dir = resolve(base_dir, j.value("out", c.out_dir.string()));
    if (j.contains("model")) c.model = lm_config_from_json(j.at("model"));
    if (j.contains("train")) c.train = train_config_from_json(j.at("train"));
    c.train_seed = j.value("train_seed", c.train_seed);
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::kConfig, std::string("run config: ") + e.what());
  }
  c.normalize();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::kIo, "cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::kConfig, path.string() + ": " + e.what());
  }
  try {
    return run_config_from_json(j, path.parent_path());
  } catch (const Error& e) {
    throw Error(e.code(), path.string() + ": " + e.message());
  }
}

nlohmann::json to_json(const RunConfig& c) {
  // out_dir is left out: it does not affect any result.
  nlohmann::json j = {{"checkpoint", c.checkpoint.string()},
                      {"corpus", c.corpus.string()},
                      {"calibration_corpus", c.calibration_corpus.string()},
                      {"validation_corpus", c.validation_corpus.string()},
                      {"test_corpus", c.test_corpus.string()},
                      {"corpus_split", {0.8, 0.1, 0.1}},
                      {"method", std::string(to_string(c.method))},
                      {"calib", to_json(c.calib)},
                      {"alpha_grid", c.alpha_grid},
                      {"reduction", std::string(to_string(c.reduction))},
                      {"n_calibration_samples", c.n_calibration_samples},
                      {"seed", c.seed},
                      {"phase1_model", c.phase1_on_quantized ? "partially_quantized" : "original"},
                      {"dequantized_storage", "float32"}};
  return j;
}

EvalSplits load_splits(const RunConfig& config) {
  EvalSplits s;
  if (!config.corpus.empty()) {
    CorpusSplits split = split_corpus(read_corpus(config.corpus));
    s.calibration = std::move(split.train);
    s.validation = std::move(split.validation);
    s.test = std::move(split.test);
  }
  if (!config.calibration_corpus.empty()) s.calibration = read_corpus(config.calibration_corpus);
  if (!config.validation_corpus.empty()) s.validation = read_corpus(config.validation_corpus);
  if (!config.test_corpus.empty()) s.test = read_corpus(config.test_corpus);
  if (s.calibration.empty() || s.validation.empty() || s.test.empty()) {
    throw Error(Errc::kConfig, "config needs a corpus (or calibration, validation and test corpora)");
  }
  return s;
}

nlohmann::json to_json(const EvalRecord& r) { return {{"validation", r.validation}, {"test", r.test}}; }

EvalRecord run_eval(const RunConfig& config, const TinyLM& model) {
  const EvalSplits s = load_splits(config);
  return EvalRecord{perplexity(model, s.validation), perplexity(model, s.test)};
}

EvalRecord run_eval(const RunConfig& config, const std::filesystem::path& checkpoint) {
  return run_eval(config, load_checkpoint(checkpoint));
}

RunResult run_quantize(const RunConfig& input) {
  RunConfig config = input;
  config.normalize();
  const auto t_start = Clock::now();
  if (config.checkpoint.empty()) throw Error(Errc::kConfig, "config has no checkpoint");
  TinyLM model = load_checkpoint(config.checkpoint);
  const TinyLM original = model;
  const EvalSplits splits = load_splits(config);
  const std::vector<CalibSample> samples = sample_windows(splits.calibration, config.n_calibration_samples,
                                                          model.config().context_length, config.seed);
  const double t_load = seconds_since(t_start);

  RunResult result;
  nlohmann::json layer_reports = nlohmann::json::array();
  nlohmann::json layer_meta = nlohmann::json::object();
  double total_bits = 0.0;
  double n_weights = 0.0;
  double t_hessian = 0.0;
  double t_calibrate = 0.0;
  const bool adaptive = config.calib.hessian_mode == HessianMode::kAdaptive;

  for (std::size_t block = 0; block < model.config().n_blocks; ++block) {
    // Phase 1, by default on the current, partially quantized model.
    auto t0 = Clock::now();
    const TinyLM& source = config.phase1_on_quantized ? model : original;
    std::vector<HessianAccumulator> accs = adaptive ? harvest_block_gradients(source, block, samples)
                                                    : harvest_block_inputs(source, block, samples);
    std::vector<SymMatrix> hessians;
    for (const HessianAccumulator& acc : accs) {
      SymMatrix h = acc.finalize();
      if (config.reduction == Reduction::kMean) h.divide(static_cast<double>(acc.n_samples()));
      hessians.push_back(std::move(h));
    }
    t_hessian += seconds_since(t0);

    // Phase 2.
    t0 = Clock::now();
    for (std::size_t l = 0; l < kBlockLayers.size(); ++l) {
      const std::string name = layer_name(block, kBlockLayers[l]);
      const Matrix w = model.linear(block, l);
      CalibReport report;
      Matrix w_hat;
      try {
        if (config.method == Method::kRtn) {
          QuantizedLayer q = rtn_quantize(w, config.calib.bits, config.calib.group_size);
          w_hat = q.dequantize();
          report.layer = name;
          report.proxy_error = quadratic_trace(difference(w_hat, w), hessians[l]);
          report.column_update_norms.assign(w.cols(), 0.0);
          report.accounting = q.accounting;
          report.spec = config.calib;
          append_tensors(name, q, result.quantized_tensors);
          layer_meta[name] = layer_metadata(q);
        } else if (config.calib.backend == Backend::kBinary) {
          BinaryCalibResult r = calibrate_layer_binary(w, hessians[l], config.calib, name);
          w_hat = r.layer.dequantize();
          report = std::move(r.report);
          append_tensors(name, r.layer, result.quantized_tensors);
          layer_meta[name] = layer_metadata(r.layer);
        } else {
          CalibResult r = calibrate_layer(w, hessians[l], config.calib, {}, name);
          w_hat = r.layer.dequantize();
          report = std::move(r.report);
          append_tensors(name, r.layer, result.quantized_tensors);
          layer_meta[name] = layer_metadata(r.layer);
        }
      } catch (const Error& e) {
        rethrow_for_layer(e, name);
      }
      round_to_float(w_hat);
      model.linear(block, l) = std::move(w_hat);
      nlohmann::json rj = to_json(report);
      rj["rows"] = w.rows();
      rj["cols"] = w.cols();
      layer_reports.push_back(std::move(rj));
      total_bits += report.accounting.total_bits();
      n_weights += static_cast<double>(w.size());
    }
    t_calibrate += seconds_since(t0);
  }

  auto t0 = Clock::now();
  const EvalRecord ppl{perplexity(model, splits.validation), perplexity(model, splits.test)};
  const double t_eval = seconds_since(t0);

  result.quantized_tensors.push_back(tensor_from_matrix("embedding", model.embedding()));
  result.quantized_tensors.push_back(tensor_from_matrix("positions", model.positions()));
  result.quantized_tensors.push_back(tensor_from_matrix("output", model.output()));
  result.quantized_metadata = {{"architecture", to_json(model.config())},
                               {"method", std::string(to_string(config.method))},
                               {"full_precision", {"embedding", "positions", "output"}},
                               {"layers", layer_meta}};
  result.report = {{"method", std::string(to_string(config.method))},
                   {"seed", config.seed},
                   {"config", to_json(config)},
                   {"architecture", to_json(model.config())},
                   {"layers", layer_reports},
                   {"total_bits", total_bits},
                   {"n_weights", n_weights},
                   {"avg_bits", total_bits / n_weights},
                   {"perplexity", to_json(ppl)},
                   {"timings_file", "timings.json"}};
  result.timings = {{"load_s", t_load},
                    {"phase1_hessian_s", t_hessian},
                    {"phase2_calibrate_s", t_calibrate},
                    {"eval_s", t_eval},
                    {"total_s", seconds_since(t_start)}};
  result.model = std::move(model);
  return result;
}

void write_run(const RunConfig& config, const RunResult& result) {
  std::error_code ec;
  std::filesystem::create_directories(config.out_dir, ec);
  if (ec) throw Error(Errc::kIo, "cannot create " + config.out_dir.string() + ": " + ec.message());
  const auto& dir = config.out_dir;
  write_text(dir / "report.json", result.report.dump(2) + "\n");
  write_text(dir / "report.csv", csv_header() + "\n" + csv_row(result.report) + "\n");
  write_text(dir / "timings.json", result.timings.dump(2) + "\n");
  archive_write(dir / "quantized.oack", result.quantized_tensors);
  write_text(dir / "quantized.oack.json", result.quantized_metadata.dump(2) + "\n");
  save_checkpoint(dir / "dequantized.oack", result.model);
}

AlphaSweepResult run_alpha_sweep(const RunConfig& config) {
  if (config.alpha_grid.empty()) throw Error(Errc::kConfig, "alpha grid is empty");
  AlphaSweepResult out;
  bool found = false;
  double best_ppl = 0.0;
  for (double alpha : config.alpha_grid) {
    AlphaSweepCandidate cand;
    cand.alpha = alpha;
    RunConfig c = config;
    c.calib.alpha = alpha;
    try {
      cand.result = run_quantize(c);
      cand.ok = true;
    } catch (const Error& e) {
      // Numeric failures drop the candidate; anything else is fatal.
      switch (e.code()) {
        case Errc::kNotPositiveDefinite:
        case Errc::kNonFinite:
        case Errc::kNonPositiveDiagonal:
          cand.error = e.what();
          break;
        default:
          throw;
      }
    }
    if (cand.ok) {
      const double ppl = cand.result->report["perplexity"]["validation"].get<double>();
      if (!found || ppl < best_ppl || (ppl == best_ppl && alpha < out.candidates[out.best].alpha)) {
        found = true;
        best_ppl = ppl;
        out.best = out.candidates.size();
      }
    }
    out.candidates.push_back(std::move(cand));
  }
  if (!found) {
    std::string msg = "every alpha failed:";
    for (const auto& c : out.candidates) msg += " [" + format_exact(c.alpha) + "] " + c.error;
    throw Error(Errc::kNotPositiveDefinite, msg);
  }
  nlohmann::json cands = nlohmann::json::array();
  for (const auto& c : out.candidates) {
    nlohmann::json j = {{"alpha", c.alpha}, {"ok", c.ok}, {"error", c.error}};
    if (c.ok) {
      j["perplexity"] = c.result->report["perplexity"];
      j["avg_bits"] = c.result->report["avg_bits"];
    }
    cands.push_back(std::move(j));
  }
  out.summary = {{"method", std::string(to_string(config.method))},
                 {"seed", config.seed},
                 {"selection", "min_validation_perplexity_ties_to_smaller_alpha"},
                 {"best_alpha", out.candidates[out.best].alpha},
                 {"candidates", cands}};
  return out;
}

nlohmann::json run_verify_oracles(std::uint64_t seed) {
  nlohmann::json report = oracle::run_oracle_suite(seed);
  const nlohmann::json logistic = logistic_suite(seed);
  const double fisher = logistic["fisher_vs_exact_max_abs"].get<double>();
  const double zero_diag = logistic["zero_model_diagonal_max_abs"].get<double>();
  report["properties"].push_back(to_json(oracle::PropertyResult{
      "logistic_trained_fisher_identity", fisher < 1e-12, fisher, 1e-12, 1,
      "analytic Fisher vs exact Hessian on a trained logistic model"}));
  report["properties"].push_back(to_json(oracle::PropertyResult{
      "logistic_zero_model_diagonal", zero_diag < 1e-12, zero_diag, 1e-12, 1,
      "w = 0 gives H_kk = 0.25 mean(x_k^2)"}));
  bool all = true;
  for (const auto& p : report["properties"]) all = all && p["passed"].get<bool>();
  report["all_passed"] = all;
  report["logistic"] = logistic;
  return report;
}

double recompute_avg_bits(const nlohmann::json& report) {
  double bits = 0.0;
  double weights = 0.0;
  for (const auto& layer : report.at("layers")) {
    const auto& a = layer.at("accounting");
    bits += a.at("weight_bits").get<double>() + a.at("stats_bits").get<double>() + a.at("outlier_bits").get<double>();
    weights += layer.at("rows").get<double>() * layer.at("cols").get<double>();
  }
  return bits / weights;
}

std::string csv_header() { return "method,seed,bits,group_size,alpha,avg_bits,validation_ppl,test_ppl"; }

std::string csv_row(const nlohmann::json& r) {
  const auto& calib = r.at("config").at("calib");
  return r.at("method").get<std::string>() + "," + std::to_string(r.at("seed").get<std::uint64_t>()) + "," +
         std::to_string(calib.at("bits").get<int>()) + "," + std::to_string(calib.at("group_size").get<std::size_t>()) +
         "," + format_exact(calib.at("alpha").get<double>()) + "," + format_exact(r.at("avg_bits").get<double>()) + "," +
         format_exact(r.at("perplexity").at("validation").get<double>()) + "," +
         format_exact(r.at("perplexity").at("test").get<double>());
}

std::string render_csv(const std::vector<nlohmann::json>& reports) {
  std::string out = csv_header() + "\n";
  for (const auto& r : reports) out += csv_row(r) + "\n";
  return out;
}

std::string render_markdown(const std::vector<nlohmann::json>& reports) {
  std::string out = "| Method | Seed | Bits | Group | Alpha | Avg bits | Validation PPL | Test PPL |\n";
  out += "|---|---:|---:|---:|---:|---:|---:|---:|\n";
  for (const auto& r : reports) {
    const auto& calib = r.at("config").at("calib");
    out += "| " + r.at("method").get<std::string>() + " | " + std::to_string(r.at("seed").get<std::uint64_t>()) +
           " | " + std::to_string(calib.at("bits").get<int>()) + " | " +
           std::to_string(calib.at("group_size").get<std::size_t>()) + " | " +
           format_exact(calib.at("alpha").get<double>()) + " | " + format_fixed(r.at("avg_bits").get<double>(), 4) +
           " | " + format_fixed(r.at("perplexity").at("validation").get<double>(), 4) + " | " +
           format_fixed(r.at("perplexity").at("test").get<double>(), 4) + " |\n";
  }
  return out;
}

}  // namespace oac
