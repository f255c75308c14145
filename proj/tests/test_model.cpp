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
#include "oac/linalg.hpp"
#include "oac/model.hpp"
#include "oac/quantizer.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>

#ifndef OAC_DATA_DIR
#error "OAC_DATA_DIR must point at the shipped corpus"
#endif

namespace oac {
namespace {

LmConfig small_config() {
  LmConfig c;
  c.d_model = 16;
  c.n_blocks = 2;
  c.context_length = 16;
  c.d_ff = 32;
  return c;
}

const std::vector<std::uint8_t>& corpus() {
  static const std::vector<std::uint8_t> tokens = read_corpus(std::filesystem::path(OAC_DATA_DIR) / "corpus.txt");
  return tokens;
}

std::vector<std::uint8_t> window(std::size_t offset, std::size_t n) {
  return {corpus().begin() + static_cast<std::ptrdiff_t>(offset),
          corpus().begin() + static_cast<std::ptrdiff_t>(offset + n)};
}

TrainConfig short_training(std::size_t steps) {
  TrainConfig t;
  t.steps = steps;
  t.batch_size = 8;
  t.warmup_steps = 5;
  t.learning_rate = 1e-2;
  return t;
}

// One trained small model shared by the tests that need realistic weights.
const TinyLM& trained_small() {
  static const TinyLM model = train_tiny_lm(split_corpus(corpus()).train, small_config(), short_training(80), 5).model;
  return model;
}

template <typename Fn>
Errc code_of(Fn&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  return Errc::kIo;
}

TEST(TinyLM, LayerNamesAreUniqueAndShaped) {
  const TinyLM m(LmConfig{});
  const auto names = m.linear_names();
  ASSERT_EQ(names.size(), 12u);
  EXPECT_EQ(names.front(), "blocks.0.attn_q");
  EXPECT_EQ(names.back(), "blocks.1.mlp_down");
  EXPECT_EQ(std::set<std::string>(names.begin(), names.end()).size(), names.size());
  EXPECT_EQ(m.linear("blocks.1.mlp_up").rows(), 256u);
  EXPECT_EQ(m.linear("blocks.1.mlp_up").cols(), 64u);
  EXPECT_EQ(code_of([&] { m.linear("blocks.2.attn_q"); }), Errc::kConfig);
  EXPECT_EQ(code_of([] { LmConfig c; c.vocab_size = 256; c.validate(); }), Errc::kConfig);
}

TEST(TinyLM, SoftmaxRowsSumToOne) {
  const TinyLM m = TinyLM::initialize(small_config(), 1);
  const Matrix p = lm_probabilities(m, window(100, 16));
  ASSERT_EQ(p.rows(), 15u);
  for (std::size_t t = 0; t < p.rows(); ++t) {
    double s = 0.0;
    for (double v : p.row(t)) {
      EXPECT_GE(v, 0.0);
      s += v;
    }
    EXPECT_NEAR(s, 1.0, 1e-9);
  }
}

TEST(TinyLM, UniformOutputGivesLogVocabLoss) {
  TinyLM m = TinyLM::initialize(small_config(), 2);
  m.output() = Matrix(128, 16);
  EXPECT_NEAR(lm_forward_loss(m, window(0, 16)), std::log(128.0), 1e-6);
  const double ppl = perplexity(m, window(0, 200));
  EXPECT_NEAR(ppl, 128.0, 0.128);
}

TEST(TinyLM, InputValidation) {
  const TinyLM m = TinyLM::initialize(small_config(), 3);
  std::vector<std::uint8_t> bad = window(0, 8);
  bad[3] = 200;
  EXPECT_EQ(code_of([&] { lm_forward_loss(m, bad); }), Errc::kTokenOutOfRange);
  EXPECT_EQ(code_of([&] { lm_forward_loss(m, window(0, 1)); }), Errc::kEmptyInput);
  EXPECT_EQ(code_of([&] { lm_forward_loss(m, window(0, 17)); }), Errc::kDimMismatch);
  EXPECT_EQ(code_of([&] { perplexity(m, window(0, 16)); }), Errc::kEmptyInput);
}

// Fourth-order central difference of the loss in one coordinate.
double central_fd(Matrix& w, std::size_t i, const std::function<double()>& loss) {
  const double w0 = w.data()[i];
  const double h = 1e-4;
  auto at = [&](double x) {
    w.data()[i] = x;
    return loss();
  };
  const double d = (8.0 * (at(w0 + h) - at(w0 - h)) - (at(w0 + 2 * h) - at(w0 - 2 * h))) / (12.0 * h);
  w.data()[i] = w0;
  return d;
}

TEST(LmBackward, MatchesFiniteDifferencesForEveryParameter) {
  TinyLM m = TinyLM::initialize(small_config(), 4);
  const std::vector<std::uint8_t> ids = window(321, 16);
  const LmGradients g = lm_gradients(m, ids);
  const auto loss = [&] { return lm_forward_loss(m, ids); };
  std::mt19937_64 rng(9);

  struct Param {
    std::string name;
    Matrix* w;
    const Matrix* g;
  };
  std::vector<Param> params{{"embedding", &m.embedding(), &g.embedding},
                            {"positions", &m.positions(), &g.positions},
                            {"output", &m.output(), &g.output}};
  for (std::size_t b = 0; b < 2; ++b) {
    for (std::size_t l = 0; l < kBlockLayers.size(); ++l) {
      params.push_back({layer_name(b, kBlockLayers[l]), &m.linear(b, l), &g.blocks[b][l]});
    }
  }
  for (const Param& p : params) {
    for (int k = 0; k < 20; ++k) {
      std::size_t i = rng() % p.w->size();
      // Embedding rows of tokens absent from the window have exactly zero
      // gradient; sample the rows that are used.
      if (p.name == "embedding") i = ids[rng() % ids.size()] * p.w->cols() + rng() % p.w->cols();
      const double fd = central_fd(*p.w, i, loss);
      const double an = p.g->data()[i];
      const double rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-8});
      EXPECT_LT(rel, 1e-5) << p.name << "[" << i << "] analytic " << an << " fd " << fd;
    }
  }
}

TEST(LmBackward, AblatedLayerHasZeroGradient) {
  const TinyLM m = TinyLM::initialize(small_config(), 5);
  ForwardOptions opt;
  opt.ablated = {"blocks.0.mlp_up", "blocks.1.attn_v"};
  const CalibSample s{window(50, 16), 50};
  EXPECT_NE(lm_forward_loss(m, s.ids, opt), lm_forward_loss(m, s.ids));
  // Zeroing mlp_up also zeroes mlp_down's input (silu(0) = 0); zeroing
  // attn_v leaves q, k and o without any path to the loss.
  const std::set<std::string> disconnected{"blocks.0.mlp_up", "blocks.0.mlp_down", "blocks.1.attn_q",
                                           "blocks.1.attn_k", "blocks.1.attn_v", "blocks.1.attn_o"};
  for (const GradientSample& g : lm_backward(m, s, opt)) {
    EXPECT_EQ(frobenius_norm(g.g) == 0.0, disconnected.count(g.layer) > 0) << g.layer;
  }
}

TEST(LmBackward, IdenticalSamplesGiveBitIdenticalGradients) {
  const TinyLM m = TinyLM::initialize(small_config(), 6);
  const CalibSample s{window(7, 16), 7};
  const auto a = lm_backward(m, s);
  const auto b = lm_backward(m, s);
  ASSERT_EQ(a.size(), 12u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].layer, b[i].layer);
    EXPECT_EQ(a[i].g, b[i].g);
    EXPECT_EQ(a[i].g.rows(), m.linear(a[i].layer).rows());
    EXPECT_EQ(a[i].g.cols(), m.linear(a[i].layer).cols());
  }
}

std::vector<CalibSample> some_samples(std::size_t n, std::uint64_t seed) {
  return sample_windows(split_corpus(corpus()).train, n, 16, seed);
}

TEST(Harvest, SingleSampleEqualsGramOfItsGradient) {
  const TinyLM& m = trained_small();
  const auto samples = some_samples(1, 1);
  const auto grads = lm_backward(m, samples[0]);
  for (std::size_t block = 0; block < 2; ++block) {
    auto accs = harvest_block_gradients(m, block, samples);
    ASSERT_EQ(accs.size(), kBlockLayers.size());
    for (std::size_t l = 0; l < accs.size(); ++l) {
      SymMatrix expected(grads[block * 6 + l].g.cols());
      expected.add_gram(grads[block * 6 + l].g);
      EXPECT_EQ(accs[l].n_samples(), 1u);
      EXPECT_LT(max_abs_difference(accs[l].finalize(), expected), 1e-12);
    }
  }
}

TEST(Harvest, MatchesWholeModelBackwardAndIgnoresOrder) {
  const TinyLM& m = trained_small();
  auto samples = some_samples(12, 2);
  for (std::size_t block = 0; block < 2; ++block) {
    std::vector<HessianAccumulator> whole;
    for (std::size_t l = 0; l < kBlockLayers.size(); ++l) {
      whole.emplace_back(m.linear(block, l).cols(), HessianMode::kAdaptive);
    }
    for (const CalibSample& s : samples) {
      const auto grads = lm_backward(m, s);
      for (std::size_t l = 0; l < whole.size(); ++l) whole[l].accumulate_adaptive(grads[block * 6 + l].g);
    }
    auto harvested = harvest_block_gradients(m, block, samples);
    auto reversed_samples = samples;
    std::reverse(reversed_samples.begin(), reversed_samples.end());
    std::shuffle(reversed_samples.begin(), reversed_samples.end(), std::mt19937_64(3));
    auto permuted = harvest_block_gradients(m, block, reversed_samples);
    for (std::size_t l = 0; l < whole.size(); ++l) {
      const SymMatrix h = harvested[l].finalize();
      EXPECT_LT(max_abs_difference(h, whole[l].finalize()), 1e-10);
      EXPECT_LT(max_abs_difference(h, permuted[l].finalize()), 1e-10);
    }
  }
  EXPECT_EQ(code_of([&] { harvest_block_gradients(m, 2, samples); }), Errc::kConfig);
  EXPECT_EQ(code_of([&] { harvest_block_gradients(m, 0, {}); }), Errc::kEmptyInput);
}

TEST(Harvest, InputStreamsHaveNormalizedTrace) {
  const TinyLM& m = trained_small();
  const auto samples = some_samples(4, 4);
  const auto accs = harvest_block_inputs(m, 1, samples);
  // attn_q/k/v share the normalized input, whose rows have squared norm just
  // under d_model.
  const SymMatrix hq = accs[0].finalize();
  EXPECT_EQ(hq, accs[1].finalize());
  EXPECT_EQ(hq, accs[2].finalize());
  double trace = 0.0;
  for (double v : hq.diagonal_values()) trace += v;
  const double bound = 4.0 * 16.0 * 16.0;
  EXPECT_LE(trace, bound);
  EXPECT_GT(trace, 0.99 * bound);
  EXPECT_EQ(accs[4].dim(), 16u);
  EXPECT_EQ(accs[5].dim(), 32u);
}

TEST(Corpus, TokenizeSplitAndSample) {
  EXPECT_EQ(tokenize("a\xc3\xa9z"), (std::vector<std::uint8_t>{'a', '?', '?', 'z'}));
  EXPECT_GE(corpus().size(), kMinCorpusBytes);
  const CorpusSplits s = split_corpus(corpus());
  EXPECT_EQ(s.train.size() + s.validation.size() + s.test.size(), corpus().size());
  EXPECT_EQ(s.train.size(), corpus().size() * 8 / 10);
  const auto a = sample_windows(s.train, 16, 64, 11);
  const auto b = sample_windows(s.train, 16, 64, 11);
  ASSERT_EQ(a.size(), 16u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].ids, b[i].ids);
    EXPECT_EQ(a[i].ids.size(), 64u);
    EXPECT_LE(a[i].offset + 64, s.train.size());
  }
  EXPECT_EQ(code_of([] { read_corpus("/nonexistent/corpus.txt"); }), Errc::kIo);
}

TEST(Training, RejectsSmallCorpus) {
  const std::vector<std::uint8_t> tiny(kMinCorpusBytes - 1, 'a');
  EXPECT_EQ(code_of([&] { train_tiny_lm(tiny, small_config(), short_training(1), 0); }), Errc::kCorpusTooSmall);
}

TEST(Training, DeterministicAndLearns) {
  const auto train = split_corpus(corpus()).train;
  const TrainResult a = train_tiny_lm(train, small_config(), short_training(40), 8);
  const TrainResult b = train_tiny_lm(train, small_config(), short_training(40), 8);
  EXPECT_EQ(a.model, b.model);
  EXPECT_EQ(archive_encode(model_tensors(a.model)), archive_encode(model_tensors(b.model)));
  EXPECT_EQ(a.losses, b.losses);
  double tail = 0.0;
  for (std::size_t i = a.losses.size() - 5; i < a.losses.size(); ++i) tail += a.losses[i] / 5.0;
  EXPECT_LT(tail, a.losses.front());
  EXPECT_LT(tail, 0.9 * std::log(128.0));
  const TrainResult c = train_tiny_lm(train, small_config(), short_training(40), 9);
  EXPECT_NE(a.model, c.model);
}

TEST(Training, OverfitsARepeatedToken) {
  const std::vector<std::uint8_t> same(kMinCorpusBytes, 'e');
  TrainConfig t = short_training(60);
  const TinyLM m = train_tiny_lm(same, small_config(), t, 1).model;
  EXPECT_LT(lm_forward_loss(m, std::vector<std::uint8_t>(16, 'e')), 0.05);
}

TEST(Training, LongerTrainingDoesNotDivergeOnHeldOut) {
  const CorpusSplits s = split_corpus(corpus());
  const TinyLM shorter = train_tiny_lm(s.train, small_config(), short_training(60), 12).model;
  const TinyLM longer = train_tiny_lm(s.train, small_config(), short_training(120), 12).model;
  EXPECT_LE(std::log(perplexity(longer, s.validation)), 1.05 * std::log(perplexity(shorter, s.validation)));
}

TEST(Perplexity, QuantizationDirection) {
  const TinyLM& m = trained_small();
  const std::vector<std::uint8_t> val = split_corpus(corpus()).validation;
  const double fp = perplexity(m, val);
  EXPECT_GE(fp, 1.0);
  auto quantized = [&](int bits) {
    TinyLM q = m;
    for (const std::string& name : m.linear_names()) q.linear(name) = rtn_quantize(m.linear(name), bits, 16).dequantize();
    return perplexity(q, val);
  };
  EXPECT_LT(std::abs(quantized(8) - fp) / fp, 0.02);
  EXPECT_GE(quantized(2), fp);
}

TEST(Checkpoint, RoundTripAndArchitectureChecks) {
  const auto dir = std::filesystem::temp_directory_path() / "oac_model_ckpt";
  std::filesystem::create_directories(dir);
  const auto path = dir / "model.oack";
  const TinyLM& m = trained_small();
  save_checkpoint(path, m);
  EXPECT_EQ(load_checkpoint(path), m);
  EXPECT_EQ(load_checkpoint(path, small_config()), m);
  EXPECT_EQ(code_of([&] { load_checkpoint(path, LmConfig{}); }), Errc::kArchitectureMismatch);

  // Sidecar claiming a different width than the tensors.
  {
    std::ofstream side(sidecar_path(path));
    LmConfig wrong = small_config();
    wrong.d_model = 32;
    side << nlohmann::json{{"architecture", to_json(wrong)}}.dump();
  }
  EXPECT_EQ(code_of([&] { load_checkpoint(path); }), Errc::kArchitectureMismatch);

  save_checkpoint(path, m);
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << "OACK";
  }
  try {
    load_checkpoint(path);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::kMalformedArchive);
    EXPECT_NE(std::string(e.what()).find(path.string()), std::string::npos);
  }
  std::filesystem::remove_all(dir);
}

TEST(LogisticSuite, IdentitiesAndConvergence) {
  std::size_t wins = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const nlohmann::json r = logistic_suite(seed);
    EXPECT_LT(r["fisher_vs_exact_max_abs"].get<double>(), 1e-12);
    EXPECT_LT(r["zero_model_diagonal_max_abs"].get<double>(), 1e-12);
    EXPECT_LT(r["train_loss"].get<double>(), std::log(2.0));
    const auto& sampled = r["sampled"];
    ASSERT_EQ(sampled.size(), 3u);
    EXPECT_EQ(sampled[2]["n"], 10000);
    if (sampled[2]["max_abs_diff_vs_exact"].get<double>() < sampled[0]["max_abs_diff_vs_exact"].get<double>()) ++wins;
  }
  EXPECT_GT(wins, 10u);
}

}  // namespace
}  // namespace oac
