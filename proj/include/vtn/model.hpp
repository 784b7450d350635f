#pragma once

// The variational transformer network: an attention encoder producing a
// diagonal-Gaussian posterior, the reparameterized bottleneck, and either an
// autoregressive decoder (one aggregated latent prepended as a pseudo-token,
// causal self-attention) or a non-autoregressive decoder (one latent per
// element, decoded in parallel). The prior is N(0, I) or a learned LSTM that
// emits one diagonal Gaussian per position.

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "vtn/dataset.hpp"
#include "vtn/errors.hpp"
#include "vtn/layout.hpp"
#include "vtn/module.hpp"
#include "vtn/tensor.hpp"
#include "vtn/transformer.hpp"

namespace vtn {

enum class Variant { autoregressive, non_autoregressive };
enum class PriorMode { fixed, learned };

inline std::string to_string(Variant v) { return v == Variant::autoregressive ? "ar" : "nonar"; }
inline std::string to_string(PriorMode p) { return p == PriorMode::fixed ? "fixed" : "learned"; }

inline Variant parse_variant(const std::string& s) {
  if (s == "ar") return Variant::autoregressive;
  if (s == "nonar") return Variant::non_autoregressive;
  throw ValidationError("variant must be 'ar' or 'nonar', got '" + s + "'");
}

inline PriorMode parse_prior(const std::string& s) {
  if (s == "fixed") return PriorMode::fixed;
  if (s == "learned") return PriorMode::learned;
  throw ValidationError("prior must be 'fixed' or 'learned', got '" + s + "'");
}

struct ModelConfig {
  Variant variant = Variant::autoregressive;
  PriorMode prior = PriorMode::fixed;
  GridConfig grid;
  BlockConfig block;
  std::size_t d_z = 512;
  std::size_t max_elements = 100;
  std::size_t prior_hidden = 128;

  // Every violated field, empty when valid.
  std::vector<std::string> violations() const {
    std::vector<std::string> out;
    if (grid.H < 2) out.push_back("grid.H must be >= 2");
    if (grid.W < 2) out.push_back("grid.W must be >= 2");
    if (grid.C < 1) out.push_back("grid.C must be >= 1");
    if (block.n_heads == 0 || block.d_model % block.n_heads != 0)
      out.push_back("block.d_model must be a multiple of block.n_heads");
    if (block.d_ff == 0) out.push_back("block.d_ff must be positive");
    if (block.n_blocks == 0) out.push_back("block.n_blocks must be positive");
    if (!(block.dropout_rate >= 0.0 && block.dropout_rate < 1.0))
      out.push_back("block.dropout_rate must lie in [0, 1)");
    if (d_z == 0) out.push_back("d_z must be positive");
    if (max_elements == 0) out.push_back("max_elements must be positive");
    if (prior == PriorMode::learned && prior_hidden == 0)
      out.push_back("prior_hidden must be positive");
    return out;
  }

  void validate() const {
    const auto v = violations();
    if (v.empty()) return;
    std::string msg = "invalid model config:";
    for (const auto& s : v) msg += " " + s + ";";
    throw ValidationError(msg);
  }

  nlohmann::json to_json() const {
    return {{"variant", to_string(variant)},
            {"prior", to_string(prior)},
            {"grid", {{"H", grid.H}, {"W", grid.W}, {"C", grid.C}}},
            {"block",
             {{"d_model", block.d_model},
              {"n_heads", block.n_heads},
              {"d_ff", block.d_ff},
              {"n_blocks", block.n_blocks},
              {"dropout_rate", block.dropout_rate}}},
            {"d_z", d_z},
            {"max_elements", max_elements},
            {"prior_hidden", prior_hidden}};
  }

  // Missing keys keep their current values.
  void merge_json(const nlohmann::json& j) {
    if (j.contains("variant")) variant = parse_variant(j.at("variant").get<std::string>());
    if (j.contains("prior")) prior = parse_prior(j.at("prior").get<std::string>());
    if (j.contains("grid")) {
      const auto& g = j.at("grid");
      grid.H = g.value("H", grid.H);
      grid.W = g.value("W", grid.W);
      grid.C = g.value("C", grid.C);
    }
    if (j.contains("block")) {
      const auto& b = j.at("block");
      block.d_model = b.value("d_model", block.d_model);
      block.n_heads = b.value("n_heads", block.n_heads);
      block.d_ff = b.value("d_ff", block.d_ff);
      block.n_blocks = b.value("n_blocks", block.n_blocks);
      block.dropout_rate = b.value("dropout_rate", block.dropout_rate);
    }
    d_z = j.value("d_z", d_z);
    max_elements = j.value("max_elements", max_elements);
    prior_hidden = j.value("prior_hidden", prior_hidden);
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.merge_json(j);
    return c;
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

template <class T>
struct PosteriorParams {
  nn::Tensor<T> mu;      // [1, d_z] aggregated or [l, d_z] per element
  nn::Tensor<T> logvar;  // same shape; variance = exp(logvar)
  bool aggregated = true;
};

// Per-position prior Gaussians, [s, d_z] each.
template <class T>
struct PriorParams {
  nn::Tensor<T> mu;
  nn::Tensor<T> logvar;
};

// Logits for the five token blocks (class, x, y, w, h), one row per position.
template <class T>
using BlockLogits = std::array<nn::Tensor<T>, 5>;

// LSTM emitting one diagonal Gaussian per step. Step t of a length-s rollout
// receives (t / max_len, s / max_len) as input, so the rollout is a
// deterministic function of s.
template <class T>
struct LstmPrior {
  nn::Tensor<T> w_x;   // [2, 4H]
  nn::Tensor<T> w_h;   // [H, 4H]
  nn::Tensor<T> bias;  // [1, 4H]
  nn::Linear<T> mu_head;
  nn::Linear<T> logvar_head;
  std::size_t hidden = 0;
  std::size_t max_len = 1;

  LstmPrior() = default;
  template <class Rng>
  LstmPrior(std::size_t hidden_size, std::size_t d_z, std::size_t max_length, Rng& rng)
      : w_x(nn::glorot_uniform<T>(2, 4 * hidden_size, rng)),
        w_h(nn::glorot_uniform<T>(hidden_size, 4 * hidden_size, rng)),
        bias(1, 4 * hidden_size, T(0), true),
        mu_head(hidden_size, d_z, rng),
        logvar_head(hidden_size, d_z, rng),
        hidden(hidden_size),
        max_len(max_length) {
    // Forget-gate bias starts at 1.
    for (std::size_t j = hidden; j < 2 * hidden; ++j) bias.values()[j] = T(1);
  }

  PriorParams<T> rollout(std::size_t s) const {
    if (s < 1 || s > max_len) {
      throw ValidationError("prior length " + std::to_string(s) + " outside [1, " +
                            std::to_string(max_len) + "]");
    }
    nn::Tensor<T> h(1, hidden, T(0)), c(1, hidden, T(0));
    std::vector<nn::Tensor<T>> hs;
    hs.reserve(s);
    const T len = static_cast<T>(s) / static_cast<T>(max_len);
    for (std::size_t t = 0; t < s; ++t) {
      nn::Tensor<T> x = nn::Tensor<T>::row({static_cast<T>(t) / static_cast<T>(max_len), len});
      auto gates = nn::add(nn::dense(x, w_x, bias), nn::matmul(h, w_h));
      auto i = nn::sigmoid(nn::slice_cols(gates, 0, hidden));
      auto f = nn::sigmoid(nn::slice_cols(gates, hidden, hidden));
      auto g = nn::tanh(nn::slice_cols(gates, 2 * hidden, hidden));
      auto o = nn::sigmoid(nn::slice_cols(gates, 3 * hidden, hidden));
      c = nn::add(nn::mul(f, c), nn::mul(i, g));
      h = nn::mul(o, nn::tanh(c));
      hs.push_back(h);
    }
    auto hseq = s == 1 ? hs[0] : nn::concat_rows(hs);
    return {mu_head(hseq), logvar_head(hseq)};
  }

  void collect(nn::ParamList<T>& out, const std::string& prefix) const {
    out.push_back({prefix + ".w_x", w_x});
    out.push_back({prefix + ".w_h", w_h});
    out.push_back({prefix + ".bias", bias});
    mu_head.collect(out, prefix + ".mu");
    logvar_head.collect(out, prefix + ".logvar");
  }
};

template <class T>
class VtnModel {
 public:
  using Tensor = nn::Tensor<T>;

  template <class Rng>
  VtnModel(const ModelConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    const auto& b = cfg_.block;
    const auto& g = cfg_.grid;
    enc_in_ = nn::Linear<T>(g.continuous_length(), b.d_model, rng);
    encoder_ = BlockStack<T>(b, rng);
    mu_head_ = nn::Linear<T>(b.d_model, cfg_.d_z, rng);
    logvar_head_ = nn::Linear<T>(b.d_model, cfg_.d_z, rng);
    if (cfg_.d_z != b.d_model) z_proj_ = nn::Linear<T>(cfg_.d_z, b.d_model, rng);
    if (is_autoregressive()) tok_embed_ = nn::Linear<T>(g.discrete_length(), b.d_model, rng);
    decoder_ = BlockStack<T>(b, rng);
    const auto sizes = g.block_sizes();
    for (std::size_t k = 0; k < 5; ++k) {
      heads_[k] = nn::Linear<T>(b.d_model, static_cast<std::size_t>(sizes[k]), rng);
    }
    if (cfg_.prior == PriorMode::learned) {
      prior_ = LstmPrior<T>(cfg_.prior_hidden, cfg_.d_z, cfg_.max_elements, rng);
    }
  }

  const ModelConfig& config() const { return cfg_; }
  const GridConfig& grid() const { return cfg_.grid; }
  bool is_autoregressive() const { return cfg_.variant == Variant::autoregressive; }

  const LengthDistribution& length_distribution() const { return lengths_; }
  void set_length_distribution(LengthDistribution d) { lengths_ = std::move(d); }

  // ---- encoder ----------------------------------------------------------

  // Continuous input tokens for the encoder: [BOS, e1..el] for the
  // autoregressive variant, [e1..el] otherwise.
  Tensor input_tokens(const Layout& layout) const {
    const auto& g = cfg_.grid;
    std::vector<T> v;
    const std::size_t width = g.continuous_length();
    if (is_autoregressive()) {
      auto bos = encode_input_sentinel(g.bos(), g);
      v.insert(v.end(), bos.begin(), bos.end());
    }
    for (const auto& e : layout.elements) {
      auto t = encode_input_token(e, g);
      v.insert(v.end(), t.begin(), t.end());
    }
    const std::size_t rows = v.size() / width;
    return Tensor(rows, width, std::move(v));
  }

  PosteriorParams<T> encode_tokens(const Tensor& tokens, const ForwardContext& ctx) const {
    if (tokens.rows() == 0) throw ValidationError("cannot encode an empty token sequence");
    if (tokens.cols() != cfg_.grid.continuous_length()) {
      throw ShapeError("encoder expects continuous tokens of width " +
                       std::to_string(cfg_.grid.continuous_length()));
    }
    auto h = encoder_(enc_in_(tokens), nullptr, ctx);
    if (is_autoregressive()) {
      auto first = nn::slice_rows(h, 0, 1);
      return {mu_head_(first), logvar_head_(first), true};
    }
    return {mu_head_(h), logvar_head_(h), false};
  }

  PosteriorParams<T> encode(const Layout& layout, const ForwardContext& ctx = {}) const {
    if (layout.size() > cfg_.max_elements) {
      throw ValidationError("layout exceeds max_elements");
    }
    if (!is_autoregressive() && layout.empty()) {
      throw ValidationError("cannot encode an empty layout with the non-autoregressive encoder");
    }
    return encode_tokens(input_tokens(layout), ctx);
  }

  // ---- decoders ---------------------------------------------------------

  // Teacher-forced autoregressive pass. `inputs` starts with BOS; row i of
  // every returned block predicts the token following inputs[i].
  BlockLogits<T> decode_ar(const Tensor& z, std::span<const TokenIndex> inputs,
                           const ForwardContext& ctx = {}) const {
    require_variant(Variant::autoregressive, "decode_ar");
    if (inputs.empty() || inputs[0].cls != cfg_.grid.bos()) {
      throw ValidationError("autoregressive decoder input must start with BOS");
    }
    if (inputs.size() > cfg_.max_elements + 1) {
      throw ValidationError("decoder input exceeds maximum length " +
                            std::to_string(cfg_.max_elements + 1));
    }
    check_latent(z, 1);
    const std::size_t n = inputs.size();
    auto seq = nn::concat_rows<T>({z_token(z), tok_embed_(one_hot_rows(inputs))});
    const auto mask = AttentionMask::causal(n + 1);
    auto h = decoder_(seq, &mask, ctx);
    return apply_heads(nn::slice_rows(h, 1, n));
  }

  // Logits for the token following `partial` (which starts with BOS).
  BlockLogits<T> decode_ar_step(const Tensor& z, std::span<const TokenIndex> partial,
                                const ForwardContext& ctx = {}) const {
    auto all = decode_ar(z, partial, ctx);
    BlockLogits<T> out;
    for (std::size_t k = 0; k < 5; ++k) out[k] = nn::slice_rows(all[k], all[k].rows() - 1, 1);
    return out;
  }

  // Non-autoregressive decoding of l latent vectors into l element logits.
  BlockLogits<T> decode_nonar(const Tensor& z_set, const ForwardContext& ctx = {}) const {
    require_variant(Variant::non_autoregressive, "decode_nonar");
    if (z_set.rows() == 0) throw ValidationError("non-autoregressive decoder needs l >= 1");
    if (z_set.rows() > cfg_.max_elements) throw ValidationError("latent set exceeds max_elements");
    check_latent(z_set, z_set.rows());
    return apply_heads(decoder_(z_token(z_set), nullptr, ctx));
  }

  // ---- prior ------------------------------------------------------------

  PriorParams<T> learned_prior_params(std::size_t s) const {
    if (cfg_.prior != PriorMode::learned) {
      throw ValidationError("learned_prior_params called on a model with a fixed prior");
    }
    return prior_.rollout(s);
  }

  // Prior matching the posterior's shape: one row for the aggregated
  // latent, one row per element otherwise.
  PriorParams<T> prior_for(std::size_t rows) const {
    if (cfg_.prior == PriorMode::fixed) {
      return {Tensor(rows, cfg_.d_z, T(0)), Tensor(rows, cfg_.d_z, T(0))};
    }
    return prior_.rollout(rows);
  }

  Tensor kl_to_prior(const PosteriorParams<T>& q) const {
    auto p = prior_for(q.mu.rows());
    return nn::kl_diag_gaussian(q.mu, q.logvar, p.mu, p.logvar);
  }

  // ---- parameters -------------------------------------------------------

  nn::ParamList<T> named_parameters() const {
    nn::ParamList<T> out;
    enc_in_.collect(out, "encoder.input");
    encoder_.collect(out, "encoder.blocks");
    mu_head_.collect(out, "encoder.mu");
    logvar_head_.collect(out, "encoder.logvar");
    if (z_proj_) z_proj_->collect(out, "decoder.z_proj");
    if (is_autoregressive()) tok_embed_.collect(out, "decoder.embed");
    decoder_.collect(out, "decoder.blocks");
    static constexpr const char* kHeads[5] = {"class", "x", "y", "w", "h"};
    for (std::size_t k = 0; k < 5; ++k) heads_[k].collect(out, std::string("decoder.head.") + kHeads[k]);
    if (cfg_.prior == PriorMode::learned) prior_.collect(out, "prior");
    return out;
  }

  std::vector<Tensor> parameters() const { return nn::tensors_of(named_parameters()); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : named_parameters()) n += p.tensor.size();
    return n;
  }

  // One-hot rows for discrete tokens; sentinels carry only the class bit.
  Tensor one_hot_rows(std::span<const TokenIndex> tokens) const {
    const auto& g = cfg_.grid;
    const std::size_t width = g.discrete_length();
    std::vector<T> v(tokens.size() * width, T(0));
    const auto sizes = g.block_sizes();
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      const auto idx = tokens[i].blocks();
      std::size_t off = 0;
      for (std::size_t b = 0; b < 5; ++b) {
        if (idx[b] >= 0) v[i * width + off + static_cast<std::size_t>(idx[b])] = T(1);
        off += static_cast<std::size_t>(sizes[b]);
      }
    }
    return Tensor(tokens.size(), width, std::move(v));
  }

 private:
  void require_variant(Variant v, const char* what) const {
    if (cfg_.variant != v) {
      throw ValidationError(std::string(what) + " is not available for the '" +
                            to_string(cfg_.variant) + "' variant");
    }
  }

  void check_latent(const Tensor& z, std::size_t rows) const {
    if (z.rows() != rows || z.cols() != cfg_.d_z) {
      throw ShapeError("latent has shape " + z.shape_string() + ", expected [" +
                       std::to_string(rows) + ", " + std::to_string(cfg_.d_z) + "]");
    }
  }

  Tensor z_token(const Tensor& z) const { return z_proj_ ? (*z_proj_)(z) : z; }

  BlockLogits<T> apply_heads(const Tensor& h) const {
    BlockLogits<T> out;
    for (std::size_t k = 0; k < 5; ++k) out[k] = heads_[k](h);
    return out;
  }

  ModelConfig cfg_;
  nn::Linear<T> enc_in_;
  BlockStack<T> encoder_;
  nn::Linear<T> mu_head_;
  nn::Linear<T> logvar_head_;
  std::optional<nn::Linear<T>> z_proj_;
  nn::Linear<T> tok_embed_;
  BlockStack<T> decoder_;
  std::array<nn::Linear<T>, 5> heads_;
  LstmPrior<T> prior_;
  LengthDistribution lengths_;
};

// ---------------------------------------------------------------------------
// Sampling helpers shared by training and generation.

template <class T, class Rng>
std::vector<T> standard_normal(std::size_t n, Rng& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<T> out(n);
  for (auto& x : out) x = static_cast<T>(dist(rng));
  return out;
}

template <class T, class Rng>
nn::Tensor<T> sample_gaussian(const nn::Tensor<T>& mu, const nn::Tensor<T>& logvar, Rng& rng) {
  const auto eps = standard_normal<T>(mu.size(), rng);
  return nn::reparameterize(mu, logvar, std::span<const T>(eps));
}

// ---------------------------------------------------------------------------
// Checkpoints: tensor records plus {"model": ModelConfig, "length_distribution": [...]}.

template <class T>
nlohmann::json model_to_json(const VtnModel<T>& model) {
  nlohmann::json header{{"model", model.config().to_json()}};
  if (!model.length_distribution().empty()) {
    header["length_distribution"] = model.length_distribution().probabilities();
  }
  return nn::tensors_to_json(model.named_parameters(), header);
}

template <class T>
void save_model(const std::filesystem::path& path, const VtnModel<T>& model) {
  nn::write_json_file(path, model_to_json(model));
}

template <class T>
VtnModel<T> model_from_json(const nlohmann::json& doc) {
  if (!doc.contains("header") || !doc.at("header").contains("model")) {
    throw StructuralError("checkpoint lacks a model header");
  }
  const auto& header = doc.at("header");
  const auto cfg = ModelConfig::from_json(header.at("model"));
  std::mt19937_64 rng(0);
  VtnModel<T> model(cfg, rng);
  auto params = model.named_parameters();
  nn::tensors_from_json(doc, params);
  if (header.contains("length_distribution")) {
    model.set_length_distribution(LengthDistribution::from_probabilities(
        header.at("length_distribution").get<std::vector<double>>()));
  }
  return model;
}

template <class T>
VtnModel<T> load_model(const std::filesystem::path& path) {
  return model_from_json<T>(nn::read_json_file(path));
}

}  // namespace vtn
