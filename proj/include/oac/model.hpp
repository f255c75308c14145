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
#include "oac/hessian.hpp"
#include "oac/matrix.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace oac {

/// Byte-level causal LM: learned token + position embeddings, n_blocks
/// pre-norm blocks of single-head attention and a SiLU MLP, a final RMS norm
/// and an output projection. Norms carry no gain and linears no bias.
struct LmConfig {
  std::size_t vocab_size = 128;
  std::size_t d_model = 64;
  std::size_t n_blocks = 2;
  std::size_t context_length = 64;
  std::size_t d_ff = 256;

  /// Throws Config on zero sizes or vocab_size > 128.
  void validate() const;
  friend bool operator==(const LmConfig&, const LmConfig&) = default;
};

nlohmann::json to_json(const LmConfig& config);
LmConfig lm_config_from_json(const nlohmann::json& j);

/// Per-block linear layers, in sweep order. Weights are out x in, y = W x.
inline constexpr std::array<std::string_view, 6> kBlockLayers = {"attn_q", "attn_k", "attn_v",
                                                                 "attn_o", "mlp_up", "mlp_down"};

/// "blocks.<b>.<layer>"
std::string layer_name(std::size_t block, std::string_view layer);

class TinyLM {
 public:
  TinyLM() = default;
  explicit TinyLM(const LmConfig& config);

  /// Scaled normal init; every parameter is representable as a float.
  static TinyLM initialize(const LmConfig& config, std::uint64_t seed);

  const LmConfig& config() const noexcept { return config_; }

  Matrix& embedding() noexcept { return embed_; }
  const Matrix& embedding() const noexcept { return embed_; }
  Matrix& positions() noexcept { return pos_; }
  const Matrix& positions() const noexcept { return pos_; }
  Matrix& output() noexcept { return out_; }
  const Matrix& output() const noexcept { return out_; }

  Matrix& linear(std::size_t block, std::size_t layer) { return blocks_.at(block).at(layer); }
  const Matrix& linear(std::size_t block, std::size_t layer) const { return blocks_.at(block).at(layer); }
  /// Throws Config for an unknown name.
  Matrix& linear(const std::string& name);
  const Matrix& linear(const std::string& name) const;

  /// All linear layer names, block by block.
  std::vector<std::string> linear_names() const;

  bool all_finite() const;
  /// Rounds every parameter to the nearest float.
  void round_to_float();

  friend bool operator==(const TinyLM&, const TinyLM&) = default;

 private:
  LmConfig config_;
  Matrix embed_;  // vocab x d
  Matrix pos_;    // context x d
  Matrix out_;    // vocab x d
  std::vector<std::array<Matrix, kBlockLayers.size()>> blocks_;
};

struct CalibSample {
  std::vector<std::uint8_t> ids;
  std::size_t offset = 0;
};

struct GradientSample {
  std::string layer;
  Matrix g;
};

struct ForwardOptions {
  /// Linear layers whose output is replaced by zero.
  std::set<std::string> ablated;
};

/// Mean next-token cross-entropy over the ids.size() - 1 predicted positions.
/// Throws TokenOutOfRange, EmptyInput (fewer than two ids) or DimMismatch
/// (more ids than the context).
double lm_forward_loss(const TinyLM& model, std::span<const std::uint8_t> ids, const ForwardOptions& opt = {});

/// Softmax rows, one per predicted position ((n-1) x vocab).
Matrix lm_probabilities(const TinyLM& model, std::span<const std::uint8_t> ids);

/// Full gradient of the mean cross-entropy, shaped like the model.
struct LmGradients {
  double loss = 0.0;
  Matrix embedding;
  Matrix positions;
  Matrix output;
  std::vector<std::array<Matrix, kBlockLayers.size()>> blocks;
};

LmGradients lm_gradients(const TinyLM& model, std::span<const std::uint8_t> ids, const ForwardOptions& opt = {});

/// Gradients of every linear layer. Throws NonFinite.
std::vector<GradientSample> lm_backward(const TinyLM& model, const CalibSample& sample,
                                        const ForwardOptions& opt = {});

/// Adaptive accumulators (Sum) for the linear layers of one block, in
/// kBlockLayers order. Backprop stops at the block input and weight gradients
/// of every other block are skipped. Throws Config / EmptyInput.
std::vector<HessianAccumulator> harvest_block_gradients(const TinyLM& model, std::size_t block,
                                                        std::span<const CalibSample> samples);

/// Agnostic accumulators (Sum of x x^T over positions) for the inputs of the
/// linear layers of one block, from forward passes only.
std::vector<HessianAccumulator> harvest_block_inputs(const TinyLM& model, std::size_t block,
                                                     std::span<const CalibSample> samples);

/// exp(mean cross-entropy) over non-overlapping context windows; a tail of at
/// least two tokens forms a final shorter window. Throws EmptyInput when
/// tokens.size() <= context_length, TokenOutOfRange.
double perplexity(const TinyLM& model, std::span<const std::uint8_t> tokens);

// ---------------------------------------------------------------------------
// Corpus and training.

/// Bytes >= 128 map to '?'.
std::vector<std::uint8_t> tokenize(std::string_view text);
/// Throws Io naming the path.
std::vector<std::uint8_t> read_corpus(const std::filesystem::path& path);

struct CorpusSplits {
  std::vector<std::uint8_t> train;
  std::vector<std::uint8_t> validation;
  std::vector<std::uint8_t> test;
};

/// Contiguous 80/10/10 split.
CorpusSplits split_corpus(std::span<const std::uint8_t> tokens);

/// n windows of context_length tokens at uniform random offsets.
std::vector<CalibSample> sample_windows(std::span<const std::uint8_t> tokens, std::size_t n,
                                        std::size_t context_length, std::uint64_t seed);

struct TrainConfig {
  std::size_t steps = 600;
  std::size_t batch_size = 16;
  double learning_rate = 3e-3;
  std::size_t warmup_steps = 30;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double adam_eps = 1e-8;
  double grad_clip = 1.0;
};

nlohmann::json to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const nlohmann::json& j);

inline constexpr std::size_t kMinCorpusBytes = 64 * 1024;

struct TrainResult {
  TinyLM model;
  /// Mean batch loss per step.
  std::vector<double> losses;
};

/// Adam with linear warmup and cosine decay on random training windows. The
/// final weights are rounded to floats. Throws CorpusTooSmall below 64 KiB of
/// training tokens.
TrainResult train_tiny_lm(std::span<const std::uint8_t> train_tokens, const LmConfig& config,
                          const TrainConfig& train, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Checkpoints: a TensorArchive plus "<path>.json" holding the architecture.

std::vector<Tensor> model_tensors(const TinyLM& model);
void save_checkpoint(const std::filesystem::path& path, const TinyLM& model);
/// Throws MalformedArchive / Io naming the path, ArchitectureMismatch when the
/// tensors disagree with the sidecar.
TinyLM load_checkpoint(const std::filesystem::path& path);
/// As above, and ArchitectureMismatch unless the sidecar equals `expected`.
TinyLM load_checkpoint(const std::filesystem::path& path, const LmConfig& expected);

std::filesystem::path sidecar_path(const std::filesystem::path& checkpoint);

// ---------------------------------------------------------------------------
// Logistic regression end to end.

struct LogisticSuiteOptions {
  std::size_t dim = 8;
  std::size_t train_points = 512;
  std::vector<std::size_t> sample_sizes = {100, 1000, 10000};
};

/// Trains a logistic model on noisy separable data and compares the exact
/// Hessian, the analytic Fisher expectation and sampled Fisher estimates.
nlohmann::json logistic_suite(std::uint64_t seed, const LogisticSuiteOptions& options = {});

}  // namespace oac
