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

#include "oac/model.hpp"

#include "oac/error.hpp"
#include "oac/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <random>
#include <sstream>

namespace oac {

namespace {

constexpr double kNormEps = 1e-5;

enum LayerIndex : std::size_t { kQ = 0, kK, kV, kO, kUp, kDown };

// Y (T x out) = X (T x in) W^T, written as row axpys over W^T so the inner
// loop is contiguous and vectorizes without reassociation.
Matrix linear_forward(const Matrix& x, const Matrix& w) {
  const Matrix wt = w.transposed();
  Matrix y(x.rows(), w.rows());
  const std::size_t out = w.rows();
  for (std::size_t t = 0; t < x.rows(); ++t) {
    double* yr = y.row(t).data();
    const double* xr = x.row(t).data();
    for (std::size_t i = 0; i < w.cols(); ++i) {
      const double a = xr[i];
      if (a == 0.0) continue;
      const double* wr = wt.row(i).data();
      for (std::size_t o = 0; o < out; ++o) yr[o] += a * wr[o];
    }
  }
  return y;
}

// dX += dY W
void linear_backward_input(const Matrix& dy, const Matrix& w, Matrix& dx) {
  const std::size_t in = w.cols();
  for (std::size_t t = 0; t < dy.rows(); ++t) {
    double* dxr = dx.row(t).data();
    const double* dyr = dy.row(t).data();
    for (std::size_t o = 0; o < w.rows(); ++o) {
      const double a = dyr[o];
      if (a == 0.0) continue;
      const double* wr = w.row(o).data();
      for (std::size_t i = 0; i < in; ++i) dxr[i] += a * wr[i];
    }
  }
}

// dW += dY^T X
void linear_backward_weight(const Matrix& dy, const Matrix& x, Matrix& dw) {
  const std::size_t in = x.cols();
  for (std::size_t t = 0; t < dy.rows(); ++t) {
    const double* xr = x.row(t).data();
    const double* dyr = dy.row(t).data();
    for (std::size_t o = 0; o < dy.cols(); ++o) {
      const double a = dyr[o];
      if (a == 0.0) continue;
      double* dwr = dw.row(o).data();
      for (std::size_t i = 0; i < in; ++i) dwr[i] += a * xr[i];
    }
  }
}

// Row-wise RMS normalization without gain; r receives 1/rms per row.
Matrix rms_norm(const Matrix& h, std::vector<double>& r) {
  Matrix a(h.rows(), h.cols());
  r.assign(h.rows(), 0.0);
  const double d = static_cast<double>(h.cols());
  for (std::size_t t = 0; t < h.rows(); ++t) {
    double ss = 0.0;
    for (double v : h.row(t)) ss += v * v;
    r[t] = 1.0 / std::sqrt(ss / d + kNormEps);
    for (std::size_t i = 0; i < h.cols(); ++i) a(t, i) = h(t, i) * r[t];
  }
  return a;
}

// dh += r (da - a <da, a> / d)
void rms_norm_backward(const Matrix& da, const Matrix& a, const std::vector<double>& r, Matrix& dh) {
  const double d = static_cast<double>(a.cols());
  for (std::size_t t = 0; t < a.rows(); ++t) {
    double dot = 0.0;
    for (std::size_t i = 0; i < a.cols(); ++i) dot += da(t, i) * a(t, i);
    for (std::size_t i = 0; i < a.cols(); ++i) dh(t, i) += r[t] * (da(t, i) - a(t, i) * dot / d);
  }
}

double sigmoid(double z) { return stable_sigmoid(z); }

void add_into(Matrix& dst, const Matrix& src) {
  auto d = dst.data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

struct BlockCache {
  Matrix h_in;
  std::vector<double> r1;
  Matrix a;
  Matrix q, k, v;
  Matrix p;  // T x T, causal softmax
  Matrix ctx;
  Matrix h_mid;
  std::vector<double> r2;
  Matrix b;
  Matrix u;
  Matrix z;
};

struct ForwardCache {
  std::size_t n = 0;
  std::vector<BlockCache> blocks;
  Matrix h_final;
  std::vector<double> rf;
  Matrix f;
  Matrix probs;  // (n-1) x vocab
  double loss = 0.0;
};

void check_ids(const TinyLM& model, std::span<const std::uint8_t> ids) {
  const LmConfig& c = model.config();
  if (ids.size() < 2) throw Error(Errc::kEmptyInput, "a sample needs at least two tokens");
  if (ids.size() > c.context_length) {
    throw Error(Errc::kDimMismatch, "sample of " + std::to_string(ids.size()) + " tokens exceeds context length " +
                                        std::to_string(c.context_length));
  }
  for (std::size_t t = 0; t < ids.size(); ++t) {
    if (ids[t] >= c.vocab_size) {
      throw Error(Errc::kTokenOutOfRange,
                  "token " + std::to_string(ids[t]) + " at position " + std::to_string(t) + " >= vocab size");
    }
  }
}

bool is_ablated(const ForwardOptions& opt, std::size_t block, std::size_t layer) {
  return !opt.ablated.empty() && opt.ablated.count(layer_name(block, kBlockLayers[layer])) > 0;
}

Matrix maybe_linear(const Matrix& x, const TinyLM& m, std::size_t block, std::size_t layer,
                    const ForwardOptions& opt) {
  const Matrix& w = m.linear(block, layer);
  if (is_ablated(opt, block, layer)) return Matrix(x.rows(), w.rows());
  return linear_forward(x, w);
}

// Runs the block on cache.h_in and returns its output.
Matrix block_forward(const TinyLM& m, std::size_t blk, BlockCache& c, const ForwardOptions& opt) {
  const std::size_t n = c.h_in.rows();
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(m.config().d_model));
  c.a = rms_norm(c.h_in, c.r1);
  c.q = maybe_linear(c.a, m, blk, kQ, opt);
  c.k = maybe_linear(c.a, m, blk, kK, opt);
  c.v = maybe_linear(c.a, m, blk, kV, opt);
  c.p = Matrix(n, n);
  for (std::size_t t = 0; t < n; ++t) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t u = 0; u <= t; ++u) {
      double s = 0.0;
      const auto qt = c.q.row(t);
      const auto ku = c.k.row(u);
      for (std::size_t i = 0; i < qt.size(); ++i) s += qt[i] * ku[i];
      c.p(t, u) = s * inv_sqrt_d;
      mx = std::max(mx, c.p(t, u));
    }
    double total = 0.0;
    for (std::size_t u = 0; u <= t; ++u) {
      c.p(t, u) = std::exp(c.p(t, u) - mx);
      total += c.p(t, u);
    }
    for (std::size_t u = 0; u <= t; ++u) c.p(t, u) /= total;
  }
  c.ctx = Matrix(n, c.v.cols());
  for (std::size_t t = 0; t < n; ++t) {
    double* cr = c.ctx.row(t).data();
    for (std::size_t u = 0; u <= t; ++u) {
      const double pw = c.p(t, u);
      const double* vr = c.v.row(u).data();
      for (std::size_t i = 0; i < c.v.cols(); ++i) cr[i] += pw * vr[i];
    }
  }
  c.h_mid = c.h_in;
  add_into(c.h_mid, maybe_linear(c.ctx, m, blk, kO, opt));
  c.b = rms_norm(c.h_mid, c.r2);
  c.u = maybe_linear(c.b, m, blk, kUp, opt);
  c.z = Matrix(c.u.rows(), c.u.cols());
  for (std::size_t i = 0; i < c.u.size(); ++i) c.z.data()[i] = c.u.data()[i] * sigmoid(c.u.data()[i]);
  Matrix h_out = c.h_mid;
  add_into(h_out, maybe_linear(c.z, m, blk, kDown, opt));
  return h_out;
}

Matrix embed(const TinyLM& m, std::span<const std::uint8_t> ids) {
  const std::size_t d = m.config().d_model;
  Matrix h(ids.size(), d);
  for (std::size_t t = 0; t < ids.size(); ++t) {
    for (std::size_t i = 0; i < d; ++i) h(t, i) = m.embedding()(ids[t], i) + m.positions()(t, i);
  }
  return h;
}

ForwardCache forward(const TinyLM& m, std::span<const std::uint8_t> ids, const ForwardOptions& opt) {
  check_ids(m, ids);
  ForwardCache cache;
  cache.n = ids.size();
  Matrix h = embed(m, ids);
  cache.blocks.resize(m.config().n_blocks);
  for (std::size_t blk = 0; blk < cache.blocks.size(); ++blk) {
    cache.blocks[blk].h_in = std::move(h);
    h = block_forward(m, blk, cache.blocks[blk], opt);
  }
  cache.h_final = std::move(h);
  cache.f = rms_norm(cache.h_final, cache.rf);
  // Only positions with a next token produce logits.
  Matrix f_pred(cache.n - 1, cache.f.cols());
  for (std::size_t t = 0; t + 1 < cache.n; ++t) {
    std::copy(cache.f.row(t).begin(), cache.f.row(t).end(), f_pred.row(t).begin());
  }
  cache.probs = linear_forward(f_pred, m.output());
  double loss = 0.0;
  for (std::size_t t = 0; t + 1 < cache.n; ++t) {
    auto row = cache.probs.row(t);
    const double mx = *std::max_element(row.begin(), row.end());
    double total = 0.0;
    for (double& v : row) {
      v = std::exp(v - mx);
      total += v;
    }
    for (double& v : row) v /= total;
    loss -= std::log(row[ids[t + 1]]);
  }
  cache.loss = loss / static_cast<double>(cache.n - 1);
  return cache;
}

// Which weight gradients to produce: every parameter, or a single block's
// linears with backprop stopping at that block's input.
struct BackwardPlan {
  bool full = true;
  std::size_t block = 0;
};

// Gradient w.r.t. the block input; fills the block's weight gradients when
// `grads` is non-null.
Matrix block_backward(const TinyLM& m, std::size_t blk, const BlockCache& c, const Matrix& dh_out,
                      std::array<Matrix, kBlockLayers.size()>* grads, const ForwardOptions& opt,
                      bool need_input_grad) {
  const std::size_t n = c.h_in.rows();
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(m.config().d_model));
  auto weight_grad = [&](std::size_t layer, const Matrix& dy, const Matrix& x) {
    if (grads == nullptr || is_ablated(opt, blk, layer)) return;
    linear_backward_weight(dy, x, (*grads)[layer]);
  };
  auto input_grad = [&](std::size_t layer, const Matrix& dy, Matrix& dx) {
    if (is_ablated(opt, blk, layer)) return;
    linear_backward_input(dy, m.linear(blk, layer), dx);
  };

  // MLP: h_out = h_mid + Down silu(Up norm(h_mid))
  Matrix dh_mid = dh_out;
  weight_grad(kDown, dh_out, c.z);
  Matrix du(n, c.u.cols());
  input_grad(kDown, dh_out, du);
  for (std::size_t i = 0; i < du.size(); ++i) {
    const double u = c.u.data()[i];
    const double s = sigmoid(u);
    du.data()[i] *= s * (1.0 + u * (1.0 - s));
  }
  weight_grad(kUp, du, c.b);
  Matrix db(n, c.b.cols());
  input_grad(kUp, du, db);
  rms_norm_backward(db, c.b, c.r2, dh_mid);

  // Attention: h_mid = h_in + O ctx
  Matrix dh_in = dh_mid;
  weight_grad(kO, dh_mid, c.ctx);
  Matrix dctx(n, c.ctx.cols());
  input_grad(kO, dh_mid, dctx);
  Matrix dq(n, c.q.cols());
  Matrix dk(n, c.k.cols());
  Matrix dv(n, c.v.cols());
  std::vector<double> dp(n);
  for (std::size_t t = 0; t < n; ++t) {
    const double* dcr = dctx.row(t).data();
    double weighted = 0.0;
    for (std::size_t u = 0; u <= t; ++u) {
      const double* vr = c.v.row(u).data();
      double s = 0.0;
      for (std::size_t i = 0; i < c.v.cols(); ++i) s += dcr[i] * vr[i];
      dp[u] = s;
      weighted += c.p(t, u) * s;
      double* dvr = dv.row(u).data();
      const double pw = c.p(t, u);
      for (std::size_t i = 0; i < c.v.cols(); ++i) dvr[i] += pw * dcr[i];
    }
    double* dqr = dq.row(t).data();
    const double* qr = c.q.row(t).data();
    for (std::size_t u = 0; u <= t; ++u) {
      const double ds = c.p(t, u) * (dp[u] - weighted) * inv_sqrt_d;
      if (ds == 0.0) continue;
      const double* kr = c.k.row(u).data();
      double* dkr = dk.row(u).data();
      for (std::size_t i = 0; i < c.q.cols(); ++i) {
        dqr[i] += ds * kr[i];
        dkr[i] += ds * qr[i];
      }
    }
  }
  weight_grad(kQ, dq, c.a);
  weight_grad(kK, dk, c.a);
  weight_grad(kV, dv, c.a);
  if (!need_input_grad) return {};
  Matrix da(n, c.a.cols());
  input_grad(kQ, dq, da);
  input_grad(kK, dk, da);
  input_grad(kV, dv, da);
  rms_norm_backward(da, c.a, c.r1, dh_in);
  return dh_in;
}

void zero_like_model(const TinyLM& m, LmGradients& g, const BackwardPlan& plan) {
  const LmConfig& c = m.config();
  g.blocks.resize(c.n_blocks);
  for (std::size_t blk = 0; blk < c.n_blocks; ++blk) {
    if (!plan.full && blk != plan.block) continue;
    for (std::size_t l = 0; l < kBlockLayers.size(); ++l) {
      const Matrix& w = m.linear(blk, l);
      g.blocks[blk][l] = Matrix(w.rows(), w.cols());
    }
  }
  if (plan.full) {
    g.embedding = Matrix(c.vocab_size, c.d_model);
    g.positions = Matrix(c.context_length, c.d_model);
    g.output = Matrix(c.vocab_size, c.d_model);
  }
}

LmGradients backward(const TinyLM& m, std::span<const std::uint8_t> ids, const ForwardCache& cache,
                     const ForwardOptions& opt, const BackwardPlan& plan) {
  LmGradients g;
  g.loss = cache.loss;
  zero_like_model(m, g, plan);
  const std::size_t n = cache.n;
  const double inv = 1.0 / static_cast<double>(n - 1);

  Matrix dlogits(n - 1, m.config().vocab_size);
  for (std::size_t t = 0; t + 1 < n; ++t) {
    for (std::size_t o = 0; o < dlogits.cols(); ++o) dlogits(t, o) = cache.probs(t, o) * inv;
    dlogits(t, ids[t + 1]) -= inv;
  }
  Matrix df(n, m.config().d_model);
  {
    Matrix df_pred(n - 1, m.config().d_model);
    linear_backward_input(dlogits, m.output(), df_pred);
    for (std::size_t t = 0; t + 1 < n; ++t) std::copy(df_pred.row(t).begin(), df_pred.row(t).end(), df.row(t).begin());
    if (plan.full) {
      Matrix f_pred(n - 1, cache.f.cols());
      for (std::size_t t = 0; t + 1 < n; ++t) {
        std::copy(cache.f.row(t).begin(), cache.f.row(t).end(), f_pred.row(t).begin());
      }
      linear_backward_weight(dlogits, f_pred, g.output);
    }
  }
  Matrix dh(n, m.config().d_model);
  rms_norm_backward(df, cache.f, cache.rf, dh);

  const std::size_t lowest = plan.full ? 0 : plan.block;
  for (std::size_t blk = cache.blocks.size(); blk-- > lowest;) {
    const bool want_weights = plan.full || blk == plan.block;
    const bool need_input = plan.full || blk > lowest;
    dh = block_backward(m, blk, cache.blocks[blk], dh, want_weights ? &g.blocks[blk] : nullptr, opt, need_input);
  }
  if (plan.full) {
    for (std::size_t t = 0; t < n; ++t) {
      for (std::size_t i = 0; i < dh.cols(); ++i) {
        g.embedding(ids[t], i) += dh(t, i);
        g.positions(t, i) += dh(t, i);
      }
    }
  }
  return g;
}

void fill_normal(Matrix& m, std::mt19937_64& rng, double stddev) {
  std::normal_distribution<double> nd(0.0, stddev);
  for (double& v : m.data()) v = static_cast<double>(static_cast<float>(nd(rng)));
}

void round_matrix(Matrix& m) {
  for (double& v : m.data()) v = static_cast<double>(static_cast<float>(v));
}

}  // namespace

// ---------------------------------------------------------------------------

void LmConfig::validate() const {
  if (vocab_size == 0 || vocab_size > 128) throw Error(Errc::kConfig, "vocab_size must be in [1, 128]");
  if (d_model == 0 || n_blocks == 0 || context_length < 2 || d_ff == 0) {
    throw Error(Errc::kConfig, "model sizes must be positive and context_length >= 2");
  }
}

nlohmann::json to_json(const LmConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"d_model", c.d_model},   {"n_blocks", c.n_blocks},
          {"context_length", c.context_length}, {"d_ff", c.d_ff}};
}

LmConfig lm_config_from_json(const nlohmann::json& j) {
  LmConfig c;
  try {
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.d_model = j.value("d_model", c.d_model);
    c.n_blocks = j.value("n_blocks", c.n_blocks);
    c.context_length = j.value("context_length", c.context_length);
    c.d_ff = j.value("d_ff", c.d_ff);
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::kConfig, std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

std::string layer_name(std::size_t block, std::string_view layer) {
  return "blocks." + std::to_string(block) + "." + std::string(layer);
}

TinyLM::TinyLM(const LmConfig& config) : config_(config) {
  config_.validate();
  embed_ = Matrix(config_.vocab_size, config_.d_model);
  pos_ = Matrix(config_.context_length, config_.d_model);
  out_ = Matrix(config_.vocab_size, config_.d_model);
  blocks_.resize(config_.n_blocks);
  const std::size_t d = config_.d_model;
  const std::size_t f = config_.d_ff;
  for (auto& b : blocks_) {
    b[kQ] = Matrix(d, d);
    b[kK] = Matrix(d, d);
    b[kV] = Matrix(d, d);
    b[kO] = Matrix(d, d);
    b[kUp] = Matrix(f, d);
    b[kDown] = Matrix(d, f);
  }
}

TinyLM TinyLM::initialize(const LmConfig& config, std::uint64_t seed) {
  TinyLM m(config);
  std::mt19937_64 rng(seed);
  const double d = static_cast<double>(config.d_model);
  const double residual_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(config.n_blocks));
  fill_normal(m.embed_, rng, 1.0);
  fill_normal(m.pos_, rng, 0.1);
  fill_normal(m.out_, rng, 1.0 / std::sqrt(d));
  for (auto& b : m.blocks_) {
    fill_normal(b[kQ], rng, 1.0 / std::sqrt(d));
    fill_normal(b[kK], rng, 1.0 / std::sqrt(d));
    fill_normal(b[kV], rng, 1.0 / std::sqrt(d));
    fill_normal(b[kO], rng, residual_scale / std::sqrt(d));
    fill_normal(b[kUp], rng, 1.0 / std::sqrt(d));
    fill_normal(b[kDown], rng, residual_scale / std::sqrt(static_cast<double>(config.d_ff)));
  }
  return m;
}

Matrix& TinyLM::linear(const std::string& name) {
  return const_cast<Matrix&>(static_cast<const TinyLM&>(*this).linear(name));
}

const Matrix& TinyLM::linear(const std::string& name) const {
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    for (std::size_t l = 0; l < kBlockLayers.size(); ++l) {
      if (name == layer_name(b, kBlockLayers[l])) return blocks_[b][l];
    }
  }
  throw Error(Errc::kConfig, "unknown layer '" + name + "'");
}

std::vector<std::string> TinyLM::linear_names() const {
  std::vector<std::string> names;
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    for (std::string_view l : kBlockLayers) names.push_back(layer_name(b, l));
  }
  return names;
}

bool TinyLM::all_finite() const {
  if (!embed_.all_finite() || !pos_.all_finite() || !out_.all_finite()) return false;
  for (const auto& b : blocks_) {
    for (const Matrix& w : b) {
      if (!w.all_finite()) return false;
    }
  }
  return true;
}

void TinyLM::round_to_float() {
  round_matrix(embed_);
  round_matrix(pos_);
  round_matrix(out_);
  for (auto& b : blocks_) {
    for (Matrix& w : b) round_matrix(w);
  }
}

// ---------------------------------------------------------------------------

double lm_forward_loss(const TinyLM& model, std::span<const std::uint8_t> ids, const ForwardOptions& opt) {
  return forward(model, ids, opt).loss;
}

Matrix lm_probabilities(const TinyLM& model, std::span<const std::uint8_t> ids) {
  return forward(model, ids, {}).probs;
}

LmGradients lm_gradients(const TinyLM& model, std::span<const std::uint8_t> ids, const ForwardOptions& opt) {
  const ForwardCache cache = forward(model, ids, opt);
  return backward(model, ids, cache, opt, BackwardPlan{});
}

std::vector<GradientSample> lm_backward(const TinyLM& model, const CalibSample& sample, const ForwardOptions& opt) {
  LmGradients g = lm_gradients(model, sample.ids, opt);
  std::vector<GradientSample> out;
  for (std::size_t b = 0; b < g.blocks.size(); ++b) {
    for (std::size_t l = 0; l < kBlockLayers.size(); ++l) {
      require_finite(g.blocks[b][l], ("gradient of " + layer_name(b, kBlockLayers[l])).c_str());
      out.push_back(GradientSample{layer_name(b, kBlockLayers[l]), std::move(g.blocks[b][l])});
    }
  }
  return out;
}

std::vector<HessianAccumulator> harvest_block_gradients(const TinyLM& model, std::size_t block,
                                                        std::span<const CalibSample> samples) {
  if (block >= model.config().n_blocks) {
    throw Error(Errc::kConfig, "block index " + std::to_string(block) + " out of range");
  }
  if (samples.empty()) throw Error(Errc::kEmptyInput, "no calibration samples");
  std::vector<HessianAccumulator> accs;
  for (std::size_t l = 0; l < kBlockLayers.size(); ++l) {
    accs.emplace_back(model.linear(block, l).cols(), HessianMode::kAdaptive);
  }
  const ForwardOptions opt;
  for (const CalibSample& s : samples) {
    const ForwardCache cache = forward(model, s.ids, opt);
    const LmGradients g = backward(model, s.ids, cache, opt, BackwardPlan{false, block});
    for (std::size_t l = 0; l < kBlockLayers.size(); ++l) {
      require_finite(g.blocks[block][l], ("gradient of " + layer_name(block, kBlockLayers[l])).c_str());
      accs[l].accumulate_adaptive(g.blocks[block][l]);
    }
  }
  return accs;
}

std::vector<HessianAccumulator> harvest_block_inputs(const TinyLM& model, std::size_t block,
                                                     std::span<const CalibSample> samples) {
  if (block >= model.config().n_blocks) {
    throw Error(Errc::kConfig, "block index " + std::to_string(block) + " out of range");
  }
  if (samples.empty()) throw Error(Errc::kEmptyInput, "no calibration samples");
  std::vector<HessianAccumulator> accs;
  for (std::size_t l = 0; l < kBlockLayers.size(); ++l) {
    accs.emplace_back(model.linear(block, l).cols(), HessianMode::kAgnostic);
  }
  const ForwardOptions opt;
  for (const CalibSample& s : samples) {
    check_ids(model, s.ids);
    Matrix h = embed(model, s.ids);
    BlockCache c;
    for (std::size_t b = 0; b <= block; ++b) {
      c.h_in = std::move(h);
      h = block_forward(model, b, c, opt);
    }
    // attn_q/k/v read a, attn_o reads ctx, mlp_up reads b, mlp_down reads z.
    const Matrix* inputs[kBlockLayers.size()] = {&c.a, &c.a, &c.a, &c.ctx, &c.b, &c.z};
    for (std::size_t l = 0; l < kBlockLayers.size(); ++l) {
      for (std::size_t t = 0; t < inputs[l]->rows(); ++t) accs[l].accumulate_agnostic(inputs[l]->row(t));
    }
  }
  return accs;
}

double perplexity(const TinyLM& model, std::span<const std::uint8_t> tokens) {
  const std::size_t ctx = model.config().context_length;
  if (tokens.size() <= ctx) {
    throw Error(Errc::kEmptyInput, "evaluation stream of " + std::to_string(tokens.size()) +
                                       " tokens must exceed the context length " + std::to_string(ctx));
  }
  double total = 0.0;
  std::size_t predicted = 0;
  for (std::size_t start = 0; start + 2 <= tokens.size(); start += ctx) {
    const std::size_t len = std::min(ctx, tokens.size() - start);
    const double loss = lm_forward_loss(model, tokens.subspan(start, len));
    total += loss * static_cast<double>(len - 1);
    predicted += len - 1;
  }
  return std::exp(total / static_cast<double>(predicted));
}

// ---------------------------------------------------------------------------

std::vector<std::uint8_t> tokenize(std::string_view text) {
  std::vector<std::uint8_t> out(text.size());
  std::transform(text.begin(), text.end(), out.begin(), [](char ch) {
    const auto b = static_cast<unsigned char>(ch);
    return static_cast<std::uint8_t>(b < 128 ? b : '?');
  });
  return out;
}

std::vector<std::uint8_t> read_corpus(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::kIo, "cannot open corpus " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return tokenize(ss.str());
}

CorpusSplits split_corpus(std::span<const std::uint8_t> tokens) {
  const std::size_t n = tokens.size();
  const std::size_t a = n * 8 / 10;
  const std::size_t b = n * 9 / 10;
  return CorpusSplits{{tokens.begin(), tokens.begin() + static_cast<std::ptrdiff_t>(a)},
                      {tokens.begin() + static_cast<std::ptrdiff_t>(a), tokens.begin() + static_cast<std::ptrdiff_t>(b)},
                      {tokens.begin() + static_cast<std::ptrdiff_t>(b), tokens.end()}};
}

std::vector<CalibSample> sample_windows(std::span<const std::uint8_t> tokens, std::size_t n,
                                        std::size_t context_length, std::uint64_t seed) {
  if (tokens.size() < context_length) {
    throw Error(Errc::kEmptyInput, "token stream shorter than one context window");
  }
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, tokens.size() - context_length);
  std::vector<CalibSample> out(n);
  for (CalibSample& s : out) {
    s.offset = pick(rng);
    s.ids.assign(tokens.begin() + static_cast<std::ptrdiff_t>(s.offset),
                 tokens.begin() + static_cast<std::ptrdiff_t>(s.offset + context_length));
  }
  return out;
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"steps", c.steps},   {"batch_size", c.batch_size}, {"learning_rate", c.learning_rate},
          {"warmup_steps", c.warmup_steps}, {"beta1", c.beta1}, {"beta2", c.beta2},
          {"adam_eps", c.adam_eps}, {"grad_clip", c.grad_clip}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  try {
    c.steps = j.value("steps", c.steps);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    c.grad_clip = j.value("grad_clip", c.grad_clip);
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::kConfig, std::string("train config: ") + e.what());
  }
  if (c.steps == 0 || c.batch_size == 0 || !(c.learning_rate > 0.0)) {
    throw Error(Errc::kConfig, "train config needs steps, batch_size and learning_rate > 0");
  }
  return c;
}

namespace {

// Flat views over every parameter of a model / gradient in a fixed order.
std::vector<Matrix*> parameters(TinyLM& m) {
  std::vector<Matrix*> ps{&m.embedding(), &m.positions(), &m.output()};
  for (std::size_t b = 0; b < m.config().n_blocks; ++b) {
    for (std::size_t l = 0; l < kBlockLayers.size(); ++l) ps.push_back(&m.linear(b, l));
  }
  return ps;
}

std::vector<Matrix*> parameters(LmGradients& g) {
  std::vector<Matrix*> ps{&g.embedding, &g.positions, &g.output};
  for (auto& b : g.blocks) {
    for (Matrix& w : b) ps.push_back(&w);
  }
  return ps;
}

}  // namespace

TrainResult train_tiny_lm(std::span<const std::uint8_t> train_tokens, const LmConfig& config,
                          const TrainConfig& train, std::uint64_t seed) {
  if (train_tokens.size() < kMinCorpusBytes) {
    throw Error(Errc::kCorpusTooSmall, "training split has " + std::to_string(train_tokens.size()) +
                                           " bytes; at least " + std::to_string(kMinCorpusBytes) + " are required");
  }
  TrainResult result;
  result.model = TinyLM::initialize(config, seed);
  std::vector<Matrix*> params = parameters(result.model);
  std::vector<Matrix> m1;
  std::vector<Matrix> m2;
  for (Matrix* p : params) {
    m1.emplace_back(p->rows(), p->cols());
    m2.emplace_back(p->rows(), p->cols());
  }
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::uniform_int_distribution<std::size_t> pick(0, train_tokens.size() - config.context_length);
  const double inv_batch = 1.0 / static_cast<double>(train.batch_size);

  for (std::size_t step = 0; step < train.steps; ++step) {
    LmGradients total;
    double loss = 0.0;
    for (std::size_t i = 0; i < train.batch_size; ++i) {
      const std::size_t off = pick(rng);
      LmGradients g = lm_gradients(result.model, train_tokens.subspan(off, config.context_length));
      loss += g.loss;
      if (i == 0) {
        total = std::move(g);
      } else {
        std::vector<Matrix*> dst = parameters(total);
        std::vector<Matrix*> src = parameters(g);
        for (std::size_t k = 0; k < dst.size(); ++k) add_into(*dst[k], *src[k]);
      }
    }
    result.losses.push_back(loss * inv_batch);
    std::vector<Matrix*> grads = parameters(total);
    double norm_sq = 0.0;
    for (Matrix* g : grads) {
      for (double& v : g->data()) {
        v *= inv_batch;
        norm_sq += v * v;
      }
    }
    const double norm = std::sqrt(norm_sq);
    if (!std::isfinite(norm)) throw Error(Errc::kNonFinite, "training gradient at step " + std::to_string(step));
    const double clip = norm > train.grad_clip ? train.grad_clip / norm : 1.0;

    double lr = train.learning_rate;
    if (step < train.warmup_steps) {
      lr *= static_cast<double>(step + 1) / static_cast<double>(train.warmup_steps);
    } else {
      const double progress = static_cast<double>(step - train.warmup_steps) /
                              static_cast<double>(std::max<std::size_t>(1, train.steps - train.warmup_steps));
      lr *= 0.1 + 0.9 * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
    }
    const double t = static_cast<double>(step + 1);
    const double bc1 = 1.0 - std::pow(train.beta1, t);
    const double bc2 = 1.0 - std::pow(train.beta2, t);
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto p = params[k]->data();
      auto g = grads[k]->data();
      auto a = m1[k].data();
      auto b = m2[k].data();
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double gi = g[i] * clip;
        a[i] = train.beta1 * a[i] + (1.0 - train.beta1) * gi;
        b[i] = train.beta2 * b[i] + (1.0 - train.beta2) * gi * gi;
        p[i] -= lr * (a[i] / bc1) / (std::sqrt(b[i] / bc2) + train.adam_eps);
      }
    }
  }
  result.model.round_to_float();
  return result;
}

// ---------------------------------------------------------------------------

std::filesystem::path sidecar_path(const std::filesystem::path& checkpoint) {
  std::filesystem::path p = checkpoint;
  p += ".json";
  return p;
}

std::vector<Tensor> model_tensors(const TinyLM& model) {
  std::vector<Tensor> t;
  t.push_back(tensor_from_matrix("embedding", model.embedding()));
  t.push_back(tensor_from_matrix("positions", model.positions()));
  t.push_back(tensor_from_matrix("output", model.output()));
  for (std::size_t b = 0; b < model.config().n_blocks; ++b) {
    for (std::size_t l = 0; l < kBlockLayers.size(); ++l) {
      t.push_back(tensor_from_matrix(layer_name(b, kBlockLayers[l]), model.linear(b, l)));
    }
  }
  return t;
}

void save_checkpoint(const std::filesystem::path& path, const TinyLM& model) {
  archive_write(path, model_tensors(model));
  const auto side = sidecar_path(path);
  std::ofstream out(side);
  if (!out) throw Error(Errc::kIo, "cannot write " + side.string());
  out << nlohmann::json{{"architecture", to_json(model.config())}}.dump(2) << "\n";
  if (!out) throw Error(Errc::kIo, "cannot write " + side.string());
}

TinyLM load_checkpoint(const std::filesystem::path& path) {
  const auto side = sidecar_path(path);
  std::ifstream in(side);
  if (!in) throw Error(Errc::kIo, "cannot open checkpoint sidecar " + side.string());
  LmConfig config;
  try {
    const nlohmann::json j = nlohmann::json::parse(in);
    config = lm_config_from_json(j.at("architecture"));
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::kArchitectureMismatch, side.string() + ": " + e.what());
  } catch (const Error& e) {
    throw Error(Errc::kArchitectureMismatch, side.string() + ": " + e.message());
  }
  const TensorArchive archive = archive_read(path);
  TinyLM model(config);
  auto load = [&](const std::string& name, Matrix& dst) {
    const Tensor* t = archive.find(name);
    if (t == nullptr || t->dims.size() != 2 || t->dims[0] != dst.rows() || t->dims[1] != dst.cols()) {
      throw Error(Errc::kArchitectureMismatch,
                  path.string() + ": tensor '" + name + "' missing or not shaped as the sidecar architecture");
    }
    dst = matrix_from_tensor(*t);
  };
  load("embedding", model.embedding());
  load("positions", model.positions());
  load("output", model.output());
  for (std::size_t b = 0; b < config.n_blocks; ++b) {
    for (std::size_t l = 0; l < kBlockLayers.size(); ++l) load(layer_name(b, kBlockLayers[l]), model.linear(b, l));
  }
  if (archive.entries.size() != 3 + config.n_blocks * kBlockLayers.size()) {
    throw Error(Errc::kArchitectureMismatch, path.string() + ": unexpected extra tensors");
  }
  return model;
}

TinyLM load_checkpoint(const std::filesystem::path& path, const LmConfig& expected) {
  TinyLM model = load_checkpoint(path);
  if (!(model.config() == expected)) {
    throw Error(Errc::kArchitectureMismatch, path.string() + ": architecture " + to_json(model.config()).dump() +
                                                 " differs from the expected " + to_json(expected).dump());
  }
  return model;
}

}  // namespace oac
