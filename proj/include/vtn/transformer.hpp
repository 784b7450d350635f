#pragma once

// Self-attention building blocks: scaled dot-product attention, multi-head
// attention, the point-wise feed-forward network and the post-norm residual
// block shared by encoder and decoder. No positional encodings are used.

#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "vtn/errors.hpp"
#include "vtn/module.hpp"
#include "vtn/tensor.hpp"

namespace vtn {

struct BlockConfig {
  std::size_t d_model = 512;
  std::size_t n_heads = 8;
  std::size_t d_ff = 2048;
  std::size_t n_blocks = 4;
  double dropout_rate = 0.1;

  std::size_t d_head() const { return d_model / n_heads; }

  void validate() const {
    if (n_heads == 0 || d_model == 0 || d_model % n_heads != 0) {
      throw ValidationError("d_model (" + std::to_string(d_model) +
                            ") must be a positive multiple of n_heads (" +
                            std::to_string(n_heads) + ")");
    }
    if (d_ff == 0 || n_blocks == 0) throw ValidationError("d_ff and n_blocks must be positive");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) {
      throw ValidationError("dropout_rate must lie in [0, 1)");
    }
  }

  friend bool operator==(const BlockConfig&, const BlockConfig&) = default;
};

// One attention weight matrix, [queries x keys], row-major.
struct AttentionMap {
  std::size_t queries = 0;
  std::size_t keys = 0;
  std::vector<double> weights;

  double at(std::size_t q, std::size_t k) const { return weights[q * keys + k]; }
};

// Attention maps indexed [layer][head].
struct AttentionRecord {
  std::vector<std::vector<AttentionMap>> layers;

  std::size_t map_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.size();
    return n;
  }

  // [layer][head][query][key]
  nlohmann::json to_json() const {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& layer : layers) {
      nlohmann::json heads = nlohmann::json::array();
      for (const auto& m : layer) {
        nlohmann::json rows = nlohmann::json::array();
        for (std::size_t q = 0; q < m.queries; ++q) {
          rows.push_back(std::vector<double>(m.weights.begin() + q * m.keys,
                                             m.weights.begin() + (q + 1) * m.keys));
        }
        heads.push_back(std::move(rows));
      }
      out.push_back(std::move(heads));
    }
    return out;
  }
};

// Boolean visibility of keys per query.
struct AttentionMask {
  std::size_t queries = 0;
  std::size_t keys = 0;
  std::vector<char> allowed;

  static AttentionMask causal(std::size_t n) {
    AttentionMask m{n, n, std::vector<char>(n * n, 0)};
    for (std::size_t q = 0; q < n; ++q)
      for (std::size_t k = 0; k <= q; ++k) m.allowed[q * n + k] = 1;
    return m;
  }

  template <class T>
  nn::Tensor<T> bias() const {
    std::vector<T> v(queries * keys);
    for (std::size_t i = 0; i < v.size(); ++i)
      v[i] = allowed[i] ? T(0) : -std::numeric_limits<T>::infinity();
    return nn::Tensor<T>(queries, keys, std::move(v));
  }
};

// Per-forward switches: dropout mode, its RNG and optional attention capture.
struct ForwardContext {
  bool training = false;
  std::mt19937_64* rng = nullptr;
  AttentionRecord* record = nullptr;
};

template <class T>
struct AttentionResult {
  nn::Tensor<T> output;
  nn::Tensor<T> weights;
};

// softmax(Q K^T / sqrt(d_k) + mask_bias) V
template <class T>
AttentionResult<T> scaled_dot_attention(const nn::Tensor<T>& q, const nn::Tensor<T>& k,
                                        const nn::Tensor<T>& v,
                                        const AttentionMask* mask = nullptr) {
  if (q.cols() != k.cols() || k.rows() != v.rows()) {
    throw ShapeError("attention shape mismatch: Q" + q.shape_string() + " K" + k.shape_string() +
                     " V" + v.shape_string());
  }
  auto scores = nn::scale(nn::matmul_nt(q, k), T(1) / std::sqrt(static_cast<T>(q.cols())));
  if (mask) {
    if (mask->queries != q.rows() || mask->keys != k.rows()) {
      throw ShapeError("attention mask shape does not match scores");
    }
    scores = nn::add(scores, mask->bias<T>());
  }
  auto weights = nn::softmax(scores, -1);
  return {nn::matmul(weights, v), weights};
}

template <class T>
struct MultiHeadAttention {
  nn::Linear<T> wq, wk, wv, wo;
  std::size_t n_heads = 1;

  MultiHeadAttention() = default;
  template <class Rng>
  MultiHeadAttention(const BlockConfig& cfg, Rng& rng)
      : wq(cfg.d_model, cfg.d_model, rng),
        wk(cfg.d_model, cfg.d_model, rng),
        wv(cfg.d_model, cfg.d_model, rng),
        wo(cfg.d_model, cfg.d_model, rng),
        n_heads(cfg.n_heads) {
    cfg.validate();
  }

  // Appends one AttentionMap per head to `maps` when non-null.
  nn::Tensor<T> operator()(const nn::Tensor<T>& xq, const nn::Tensor<T>& xkv,
                           const AttentionMask* mask = nullptr,
                           std::vector<AttentionMap>* maps = nullptr) const {
    const std::size_t d_model = wq.in_features();
    if (xq.cols() != d_model || xkv.cols() != d_model) {
      throw ShapeError("multi-head attention expects feature width " + std::to_string(d_model));
    }
    if (d_model % n_heads != 0) throw ValidationError("d_model not divisible by n_heads");
    const std::size_t dh = d_model / n_heads;
    const auto q = wq(xq), k = wk(xkv), v = wv(xkv);
    std::vector<nn::Tensor<T>> heads;
    heads.reserve(n_heads);
    for (std::size_t h = 0; h < n_heads; ++h) {
      auto r = scaled_dot_attention(nn::slice_cols(q, h * dh, dh), nn::slice_cols(k, h * dh, dh),
                                    nn::slice_cols(v, h * dh, dh), mask);
      if (maps) {
        const auto w = r.weights.values();
        maps->push_back({r.weights.rows(), r.weights.cols(), std::vector<double>(w.begin(), w.end())});
      }
      heads.push_back(std::move(r.output));
    }
    return wo(n_heads == 1 ? heads[0] : nn::concat_cols(heads));
  }

  void collect(nn::ParamList<T>& out, const std::string& prefix) const {
    wq.collect(out, prefix + ".wq");
    wk.collect(out, prefix + ".wk");
    wv.collect(out, prefix + ".wv");
    wo.collect(out, prefix + ".wo");
  }
};

// dense(d_model -> d_ff) -> ReLU -> dense(d_ff -> d_model), per position.
template <class T>
struct PointwiseFFN {
  nn::Linear<T> in, out;

  PointwiseFFN() = default;
  template <class Rng>
  PointwiseFFN(const BlockConfig& cfg, Rng& rng) : in(cfg.d_model, cfg.d_ff, rng), out(cfg.d_ff, cfg.d_model, rng) {}

  nn::Tensor<T> operator()(const nn::Tensor<T>& x) const {
    if (x.cols() != in.in_features()) {
      throw ShapeError("feed-forward expects feature width " + std::to_string(in.in_features()));
    }
    return out(nn::relu(in(x)));
  }

  void collect(nn::ParamList<T>& list, const std::string& prefix) const {
    in.collect(list, prefix + ".in");
    out.collect(list, prefix + ".out");
  }
};

// Post-norm residual block:
//   x1 = LN(x + dropout(MHA(x)));  out = LN(x1 + dropout(FFN(x1)))
template <class T>
struct EncoderBlock {
  MultiHeadAttention<T> attention;
  nn::LayerNorm<T> norm1;
  PointwiseFFN<T> ffn;
  nn::LayerNorm<T> norm2;
  double dropout_rate = 0.0;

  EncoderBlock() = default;
  template <class Rng>
  EncoderBlock(const BlockConfig& cfg, Rng& rng)
      : attention(cfg, rng), norm1(cfg.d_model), ffn(cfg, rng), norm2(cfg.d_model),
        dropout_rate(cfg.dropout_rate) {}

  nn::Tensor<T> operator()(const nn::Tensor<T>& x, const AttentionMask* mask,
                           const ForwardContext& ctx,
                           std::vector<AttentionMap>* maps = nullptr) const {
    auto a = attention(x, x, mask, maps);
    auto x1 = norm1(nn::add(x, drop(a, ctx)));
    auto f = ffn(x1);
    return norm2(nn::add(x1, drop(f, ctx)));
  }

  void collect(nn::ParamList<T>& out, const std::string& prefix) const {
    attention.collect(out, prefix + ".attention");
    norm1.collect(out, prefix + ".norm1");
    ffn.collect(out, prefix + ".ffn");
    norm2.collect(out, prefix + ".norm2");
  }

 private:
  nn::Tensor<T> drop(const nn::Tensor<T>& x, const ForwardContext& ctx) const {
    if (!ctx.training || dropout_rate == 0.0) return x;
    if (!ctx.rng) throw ValidationError("training forward pass requires an RNG for dropout");
    return nn::dropout(x, dropout_rate, true, *ctx.rng);
  }
};

template <class T>
struct BlockStack {
  std::vector<EncoderBlock<T>> blocks;

  BlockStack() = default;
  template <class Rng>
  BlockStack(const BlockConfig& cfg, Rng& rng) {
    cfg.validate();
    for (std::size_t i = 0; i < cfg.n_blocks; ++i) blocks.emplace_back(cfg, rng);
  }

  // Pushes one layer of attention maps per block into ctx.record if set.
  nn::Tensor<T> operator()(nn::Tensor<T> x, const AttentionMask* mask,
                           const ForwardContext& ctx) const {
    for (const auto& b : blocks) {
      std::vector<AttentionMap>* maps = nullptr;
      if (ctx.record) {
        ctx.record->layers.emplace_back();
        maps = &ctx.record->layers.back();
      }
      x = b(x, mask, ctx, maps);
    }
    return x;
  }

  void collect(nn::ParamList<T>& out, const std::string& prefix) const {
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      blocks[i].collect(out, prefix + "." + std::to_string(i));
    }
  }
};

}  // namespace vtn
