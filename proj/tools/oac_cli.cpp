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

// oac: train the toy model, quantize it, evaluate, sweep alpha, run the
// oracle suite and render report tables.
//
// Exit codes: 0 success, 1 usage or config error, 2 numeric or oracle
// failure, 3 I/O error.

#include "oac/error.hpp"
#include "oac/pipeline.hpp"

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"

namespace {

using oac::Errc;
using oac::Error;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitNumeric = 2;
constexpr int kExitIo = 3;

int exit_code_for(Errc code) {
  switch (code) {
    case Errc::kConfig:
    case Errc::kCorpusTooSmall:
      return kExitUsage;
    case Errc::kIo:
    case Errc::kMalformedArchive:
    case Errc::kArchitectureMismatch:
    case Errc::kDuplicateName:
      return kExitIo;
    default:
      return kExitNumeric;
  }
}

struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> method;
  std::optional<int> bits;
  std::optional<std::size_t> group_size;
  std::optional<double> tau;
  std::optional<double> alpha;
  std::optional<std::string> out;
  std::optional<std::string> checkpoint;
  std::optional<std::string> corpus;
};

void add_common(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--config", o.config, "Run config (JSON)");
  cmd->add_option("--seed", o.seed, "Seed");
  cmd->add_option("--method", o.method, "RTN, OPTQ, SpQR, OAC_OPTQ, OAC_SpQR, Binary_BiLLM_style or OAC_Binary");
  cmd->add_option("--bits", o.bits, "Weight bits");
  cmd->add_option("--group-size", o.group_size, "Columns per quantization group");
  cmd->add_option("--tau", o.tau, "Outlier threshold, in units of mean saliency");
  cmd->add_option("--alpha", o.alpha, "Damping relative to mean(diag H)");
  cmd->add_option("--out", o.out, "Output directory");
  cmd->add_option("--checkpoint", o.checkpoint, "Model checkpoint");
  cmd->add_option("--corpus", o.corpus, "Corpus, split 80/10/10");
}

// The config file first, then flags field by field.
oac::RunConfig build_config(const Overrides& o, bool seed_is_train_seed = false) {
  nlohmann::json j = nlohmann::json::object();
  std::filesystem::path base;
  if (!o.config.empty()) {
    std::ifstream in(o.config);
    if (!in) throw Error(Errc::kIo, "cannot open config " + o.config);
    try {
      j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw Error(Errc::kConfig, o.config + ": " + e.what());
    }
    base = std::filesystem::path(o.config).parent_path();
  }
  oac::RunConfig c;
  try {
    c = oac::run_config_from_json(j, base);
  } catch (const Error& e) {
    throw Error(e.code(), (o.config.empty() ? std::string("defaults") : o.config) + ": " + e.message());
  }
  if (o.seed) (seed_is_train_seed ? c.train_seed : c.seed) = *o.seed;
  if (o.method) c.method = oac::parse_method(*o.method);
  if (o.bits) c.calib.bits = *o.bits;
  if (o.group_size) c.calib.group_size = *o.group_size;
  if (o.tau) c.calib.tau = *o.tau;
  if (o.alpha) c.calib.alpha = *o.alpha;
  if (o.out) c.out_dir = *o.out;
  if (o.checkpoint) c.checkpoint = *o.checkpoint;
  if (o.corpus) c.corpus = *o.corpus;
  c.normalize();
  return c;
}

void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw Error(Errc::kIo, "cannot write " + path.string());
  out << j.dump(2) << "\n";
  if (!out) throw Error(Errc::kIo, "cannot write " + path.string());
}

void ensure_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error(Errc::kIo, "cannot create " + dir.string() + ": " + ec.message());
}

nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::kIo, "cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::kIo, path.string() + ": " + e.what());
  }
}

int cmd_train(const Overrides& o) {
  const oac::RunConfig c = build_config(o, true);
  if (c.corpus.empty()) throw Error(Errc::kConfig, "train-toy needs a corpus");
  const oac::CorpusSplits splits = oac::split_corpus(oac::read_corpus(c.corpus));
  const oac::TrainResult r = oac::train_tiny_lm(splits.train, c.model, c.train, c.train_seed);
  ensure_dir(c.out_dir);
  const auto ckpt = c.out_dir / "model.oack";
  oac::save_checkpoint(ckpt, r.model);
  const double val = oac::perplexity(r.model, splits.validation);
  write_json(c.out_dir / "train_log.json", {{"architecture", oac::to_json(c.model)},
                                            {"train", oac::to_json(c.train)},
                                            {"train_seed", c.train_seed},
                                            {"losses", r.losses},
                                            {"validation_perplexity", val}});
  std::printf("trained %zu steps: final batch loss %.4f, validation perplexity %.4f -> %s\n", r.losses.size(),
              r.losses.back(), val, ckpt.string().c_str());
  return kExitOk;
}

int cmd_quantize(const Overrides& o) {
  const oac::RunConfig c = build_config(o);
  const oac::RunResult r = oac::run_quantize(c);
  oac::write_run(c, r);
  std::printf("%s seed %llu: avg bits %.4f, validation ppl %.4f, test ppl %.4f -> %s\n",
              r.report["method"].get<std::string>().c_str(), static_cast<unsigned long long>(c.seed),
              r.report["avg_bits"].get<double>(), r.report["perplexity"]["validation"].get<double>(),
              r.report["perplexity"]["test"].get<double>(), c.out_dir.string().c_str());
  return kExitOk;
}

int cmd_eval(const Overrides& o) {
  const oac::RunConfig c = build_config(o);
  if (c.checkpoint.empty()) throw Error(Errc::kConfig, "eval needs --checkpoint or a config checkpoint");
  const oac::EvalRecord r = oac::run_eval(c, c.checkpoint);
  const nlohmann::json j = {{"checkpoint", c.checkpoint.string()}, {"perplexity", oac::to_json(r)}};
  if (o.out) {
    ensure_dir(c.out_dir);
    write_json(c.out_dir / "eval.json", j);
  }
  std::cout << j.dump(2) << "\n";
  return kExitOk;
}

int cmd_sweep(const Overrides& o) {
  const oac::RunConfig c = build_config(o);
  const oac::AlphaSweepResult r = oac::run_alpha_sweep(c);
  ensure_dir(c.out_dir);
  for (std::size_t i = 0; i < r.candidates.size(); ++i) {
    const auto& cand = r.candidates[i];
    if (!cand.ok) continue;
    oac::RunConfig sub = c;
    sub.calib.alpha = cand.alpha;
    sub.out_dir = c.out_dir / ("alpha_" + std::to_string(i));
    oac::write_run(sub, *cand.result);
  }
  oac::RunConfig best = c;
  best.calib.alpha = r.candidates[r.best].alpha;
  oac::write_run(best, *r.candidates[r.best].result);
  write_json(c.out_dir / "sweep.json", r.summary);
  std::cout << r.summary.dump(2) << "\n";
  return kExitOk;
}

int cmd_verify(const Overrides& o) {
  const std::uint64_t seed = o.seed.value_or(0);
  const nlohmann::json report = oac::run_verify_oracles(seed);
  if (o.out) {
    ensure_dir(*o.out);
    write_json(std::filesystem::path(*o.out) / "oracles.json", report);
  }
  for (const auto& p : report["properties"]) {
    std::printf("%-34s %s  measured %.3e  tolerance %.3e\n", p["name"].get<std::string>().c_str(),
                p["passed"].get<bool>() ? "PASS" : "FAIL", p["measured"].get<double>(), p["tolerance"].get<double>());
  }
  return report["all_passed"].get<bool>() ? kExitOk : kExitNumeric;
}

int cmd_report(const std::vector<std::string>& inputs, const std::optional<std::string>& out) {
  std::vector<nlohmann::json> reports;
  for (const auto& path : inputs) reports.push_back(read_json(path));
  const std::string md = oac::render_markdown(reports);
  if (out) {
    ensure_dir(*out);
    std::ofstream(std::filesystem::path(*out) / "table.md") << md;
    std::ofstream(std::filesystem::path(*out) / "table.csv") << oac::render_csv(reports);
  }
  std::cout << md;
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Output-adaptive post-training weight quantization on a tiny language model"};
  app.require_subcommand(1);

  Overrides train_o, quant_o, eval_o, sweep_o, verify_o;
  auto* train = app.add_subcommand("train-toy", "Train the tiny byte-level LM and write a checkpoint");
  add_common(train, train_o);
  auto* quant = app.add_subcommand("quantize", "Quantize a checkpoint and evaluate it");
  add_common(quant, quant_o);
  auto* eval = app.add_subcommand("eval", "Perplexity of a checkpoint on the validation and test splits");
  add_common(eval, eval_o);
  auto* sweep = app.add_subcommand("sweep-alpha", "Quantize once per alpha and keep the best on validation");
  add_common(sweep, sweep_o);
  auto* verify = app.add_subcommand("verify-oracles", "Run the numerical oracle suite");
  verify->add_option("--seed", verify_o.seed, "Seed");
  verify->add_option("--out", verify_o.out, "Directory for oracles.json");
  std::vector<std::string> report_inputs;
  std::optional<std::string> report_out;
  auto* report = app.add_subcommand("report", "Render Markdown / CSV tables from report.json files");
  report->add_option("reports", report_inputs, "report.json files")->required();
  report->add_option("--out", report_out, "Directory for table.md and table.csv");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*train) return cmd_train(train_o);
    if (*quant) return cmd_quantize(quant_o);
    if (*eval) return cmd_eval(eval_o);
    if (*sweep) return cmd_sweep(sweep_o);
    if (*verify) return cmd_verify(verify_o);
    if (*report) return cmd_report(report_inputs, report_out);
  } catch (const Error& e) {
    std::fprintf(stderr, "oac: %s\n", e.what());
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "oac: %s\n", e.what());
    return kExitNumeric;
  }
  return kExitUsage;
}
