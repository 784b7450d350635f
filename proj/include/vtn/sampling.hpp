#pragma once

// Layout generation from the prior, latent-space interpolation, latent set
// editing for the non-autoregressive decoder, and attention-map export.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "vtn/errors.hpp"
#include "vtn/layout.hpp"
#include "vtn/model.hpp"
#include "vtn/tensor.hpp"
#include "vtn/transformer.hpp"

namespace vtn {

enum class Strategy { greedy, categorical, top_k, nucleus };

inline std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::greedy: return "greedy";
    case Strategy::categorical: return "categorical";
    case Strategy::top_k: return "top-k";
    case Strategy::nucleus: return "nucleus";
  }
  return "categorical";
}

inline Strategy parse_strategy(const std::string& s) {
  if (s == "greedy") return Strategy::greedy;
  if (s == "categorical") return Strategy::categorical;
  if (s == "top-k" || s == "topk") return Strategy::top_k;
  if (s == "nucleus") return Strategy::nucleus;
  throw ValidationError("strategy must be greedy, categorical, top-k or nucleus; got '" + s + "'");
}

struct SamplingConfig {
  Strategy strategy = Strategy::categorical;
  std::size_t max_len = 100;
  double temperature = 1.0;
  std::size_t top_k = 30;
  double top_p = 0.9;
  std::uint64_t seed = 0;
  PageSize page{1000, 1000};

  std::vector<std::string> violations(std::size_t model_max = std::numeric_limits<std::size_t>::max()) const {
    std::vector<std::string> out;
    if (max_len == 0 || max_len > model_max) out.push_back("sampling.max_len must lie in [1, model max_elements]");
    if (!(temperature > 0.0)) out.push_back("sampling.temperature must be positive");
    if (top_k < 1) out.push_back("sampling.top_k must be >= 1");
    if (!(top_p > 0.0 && top_p <= 1.0)) out.push_back("sampling.top_p must lie in (0, 1]");
    if (page.width <= 0 || page.height <= 0) out.push_back("sampling.page must be positive");
    return out;
  }

  nlohmann::json to_json() const {
    return {{"strategy", to_string(strategy)}, {"max_len", max_len}, {"temperature", temperature},
            {"top_k", top_k}, {"top_p", top_p}, {"seed", seed},
            {"page", {page.width, page.height}}};
  }

  void merge_json(const nlohmann::json& j) {
    if (j.contains("strategy")) strategy = parse_strategy(j.at("strategy").get<std::string>());
    max_len = j.value("max_len", max_len);
    temperature = j.value("temperature", temperature);
    top_k = j.value("top_k", top_k);
    top_p = j.value("top_p", top_p);
    seed = j.value("seed", seed);
    if (j.contains("page")) page = {j.at("page").at(0).get<int>(), j.at("page").at(1).get<int>()};
  }

  friend bool operator==(const SamplingConfig&, const SamplingConfig&) = default;
};

// Draws an index from one row of logits. Indices listed in `banned` are never
// returned.
template <class T, class Rng>
int sample_from_logits(std::span<const T> logits, const SamplingConfig& cfg, Rng& rng,
                       std::span<const int> banned = {}) {
  const std::size_t n = logits.size();
  std::vector<double> l(n);
  for (std::size_t i = 0; i < n; ++i) l[i] = static_cast<double>(logits[i]);
  for (int b : banned) {
    if (b >= 0 && static_cast<std::size_t>(b) < n) l[static_cast<std::size_t>(b)] = -std::numeric_limits<double>::infinity();
  }
  if (cfg.strategy == Strategy::greedy) {
    return static_cast<int>(std::max_element(l.begin(), l.end()) - l.begin());
  }
  const double mx = *std::max_element(l.begin(), l.end());
  std::vector<double> p(n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    p[i] = std::exp((l[i] - mx) / cfg.temperature);
    total += p[i];
  }
  for (auto& x : p) x /= total;
  if (cfg.strategy == Strategy::top_k || cfg.strategy == Strategy::nucleus) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return p[a] > p[b]; });
    std::size_t keep = n;
    if (cfg.strategy == Strategy::top_k) {
      keep = std::min(n, cfg.top_k);
    } else {
      double cum = 0.0;
      for (std::size_t r = 0; r < n; ++r) {
        cum += p[idx[r]];
        if (cum >= cfg.top_p) {
          keep = r + 1;
          break;
        }
      }
    }
    for (std::size_t r = keep; r < n; ++r) p[idx[r]] = 0.0;
  }
  std::discrete_distribution<int> dist(p.begin(), p.end());
  return dist(rng);
}

template <class T>
struct Generation {
  Layout layout;
  nn::Tensor<T> z;  // latent that produced the layout
  bool truncated = false;
};

namespace detail {

template <class T>
std::span<const T> row_of(const nn::Tensor<T>& t, std::size_t r) {
  return t.values().subspan(r * t.cols(), t.cols());
}

inline Element element_from_bins(const TokenIndex& t, const GridConfig& g) {
  Element e{t.cls, bbox_from_bins({t.x, t.y, t.w, t.h}, g)};
  e.bbox = clamp_to_page(e.bbox);
  return e;
}

}  // namespace detail

// Autoregressive decoding of a given latent: starts from BOS and samples the
// five blocks of each next token until EOS or max_len elements.
template <class T, class Rng>
Generation<T> decode_latent_ar(const VtnModel<T>& model, const nn::Tensor<T>& z,
                               const SamplingConfig& cfg, Rng& rng) {
  nn::NoGradGuard guard;
  const auto& g = model.grid();
  const std::size_t max_len = std::min(cfg.max_len, model.config().max_elements);
  std::vector<TokenIndex> tokens{bos_index(g)};
  Generation<T> out;
  out.z = z;
  out.layout.page = cfg.page;
  const int banned_class[1] = {g.bos()};
  bool finished = false;
  while (out.layout.size() < max_len) {
    auto logits = model.decode_ar_step(z, tokens);
    const int cls = sample_from_logits(detail::row_of(logits[0], 0), cfg, rng,
                                       std::span<const int>(banned_class, 1));
    if (cls == g.eos()) {
      finished = true;
      break;
    }
    TokenIndex t{cls};
    t.x = sample_from_logits(detail::row_of(logits[1], 0), cfg, rng);
    t.y = sample_from_logits(detail::row_of(logits[2], 0), cfg, rng);
    t.w = sample_from_logits(detail::row_of(logits[3], 0), cfg, rng);
    t.h = sample_from_logits(detail::row_of(logits[4], 0), cfg, rng);
    tokens.push_back(t);
    out.layout.elements.push_back(detail::element_from_bins(t, g));
  }
  out.truncated = !finished;
  out.layout = sort_layout(std::move(out.layout), g);
  return out;
}

template <class T, class Rng>
nn::Tensor<T> sample_standard_latent(std::size_t rows, std::size_t d_z, Rng& rng) {
  return nn::Tensor<T>(rows, d_z, standard_normal<T>(rows * d_z, rng));
}

// z ~ N(0, I) (or the learned single-step prior), then autoregressive decoding.
template <class T, class Rng>
Generation<T> sample_ar(const VtnModel<T>& model, const SamplingConfig& cfg, Rng& rng) {
  nn::NoGradGuard guard;
  nn::Tensor<T> z;
  if (model.config().prior == PriorMode::learned) {
    auto p = model.learned_prior_params(1);
    z = sample_gaussian(p.mu, p.logvar, rng);
  } else {
    z = sample_standard_latent<T>(1, model.config().d_z, rng);
  }
  return decode_latent_ar(model, z, cfg, rng);
}

// Decodes a latent set in parallel; every row yields exactly one element.
template <class T, class Rng>
Generation<T> decode_latents_nonar(const VtnModel<T>& model, const nn::Tensor<T>& z_set,
                                   const SamplingConfig& cfg, Rng& rng) {
  nn::NoGradGuard guard;
  const auto& g = model.grid();
  auto logits = model.decode_nonar(z_set);
  const int banned_class[2] = {g.bos(), g.eos()};
  Generation<T> out;
  out.z = z_set;
  out.layout.page = cfg.page;
  for (std::size_t i = 0; i < z_set.rows(); ++i) {
    TokenIndex t;
    t.cls = sample_from_logits(detail::row_of(logits[0], i), cfg, rng,
                               std::span<const int>(banned_class, 2));
    t.x = sample_from_logits(detail::row_of(logits[1], i), cfg, rng);
    t.y = sample_from_logits(detail::row_of(logits[2], i), cfg, rng);
    t.w = sample_from_logits(detail::row_of(logits[3], i), cfg, rng);
    t.h = sample_from_logits(detail::row_of(logits[4], i), cfg, rng);
    out.layout.elements.push_back(detail::element_from_bins(t, g));
  }
  out.layout = sort_layout(std::move(out.layout), g);
  return out;
}

// s ~ p(s), z_1..z_s from the prior, then parallel decoding.
template <class T, class Rng>
Generation<T> sample_nonar(const VtnModel<T>& model, const SamplingConfig& cfg, Rng& rng) {
  nn::NoGradGuard guard;
  const auto& lengths = model.length_distribution();
  if (lengths.empty()) throw ValidationError("model has no length distribution");
  std::size_t s = lengths.sample(rng);
  s = std::min(s, std::min(cfg.max_len, model.config().max_elements));
  nn::Tensor<T> z;
  if (model.config().prior == PriorMode::learned) {
    auto p = model.learned_prior_params(s);
    z = sample_gaussian(p.mu, p.logvar, rng);
  } else {
    z = sample_standard_latent<T>(s, model.config().d_z, rng);
  }
  return decode_latents_nonar(model, z, cfg, rng);
}

template <class T, class Rng>
Generation<T> sample_layout(const VtnModel<T>& model, const SamplingConfig& cfg, Rng& rng) {
  return model.is_autoregressive() ? sample_ar(model, cfg, rng) : sample_nonar(model, cfg, rng);
}

template <class T, class Rng>
Generation<T> decode_latent(const VtnModel<T>& model, const nn::Tensor<T>& z,
                            const SamplingConfig& cfg, Rng& rng) {
  return model.is_autoregressive() ? decode_latent_ar(model, z, cfg, rng)
                                   : decode_latents_nonar(model, z, cfg, rng);
}

// z1 + lambda (z2 - z1), elementwise.
template <class T>
nn::Tensor<T> interpolate(const nn::Tensor<T>& z1, const nn::Tensor<T>& z2, double lambda) {
  if (z1.rows() != z2.rows() || z1.cols() != z2.cols()) {
    throw ShapeError("interpolate: latent shapes differ " + z1.shape_string() + " vs " +
                     z2.shape_string());
  }
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ValidationError("interpolate: lambda must lie in [0, 1]");
  std::vector<T> v(z1.size());
  const auto a = z1.values(), b = z2.values();
  const T lam = static_cast<T>(lambda);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] + lam * (b[i] - a[i]);
  return nn::Tensor<T>(z1.rows(), z1.cols(), std::move(v));
}

// Removes row `index` from a non-autoregressive latent set.
template <class T>
nn::Tensor<T> remove_latent(const nn::Tensor<T>& z_set, std::size_t index) {
  if (z_set.rows() <= 1) throw ValidationError("cannot remove the only latent vector of a set");
  if (index >= z_set.rows()) throw ValidationError("latent index " + std::to_string(index) + " out of bounds");
  const std::size_t d = z_set.cols();
  std::vector<T> v(z_set.values().begin(), z_set.values().end());
  v.erase(v.begin() + static_cast<std::ptrdiff_t>(index * d),
          v.begin() + static_cast<std::ptrdiff_t>((index + 1) * d));
  return nn::Tensor<T>(z_set.rows() - 1, d, std::move(v));
}

// Inserts `z_new` ([1, d_z]) before row `index` (index == rows appends).
template <class T>
nn::Tensor<T> insert_latent(const nn::Tensor<T>& z_set, std::size_t index, const nn::Tensor<T>& z_new) {
  if (index > z_set.rows()) throw ValidationError("latent index " + std::to_string(index) + " out of bounds");
  if (z_new.rows() != 1 || z_new.cols() != z_set.cols()) {
    throw ShapeError("inserted latent must be [1, " + std::to_string(z_set.cols()) + "]");
  }
  const std::size_t d = z_set.cols();
  std::vector<T> v(z_set.values().begin(), z_set.values().end());
  v.insert(v.begin() + static_cast<std::ptrdiff_t>(index * d), z_new.values().begin(), z_new.values().end());
  return nn::Tensor<T>(z_set.rows() + 1, d, std::move(v));
}

struct AttentionExport {
  AttentionRecord encoder;
  AttentionRecord decoder;

  nlohmann::json to_json() const {
    return {{"encoder", encoder.to_json()}, {"decoder", decoder.to_json()}};
  }
};

// Attention maps of every layer and head for one layout. The decoder pass is
// teacher-forced on the layout with the posterior mean as latent; under the
// causal mask row t equals the attention of autoregressive step t.
template <class T>
AttentionExport export_attention(const VtnModel<T>& model, const Layout& layout) {
  nn::NoGradGuard guard;
  AttentionExport out;
  ForwardContext enc_ctx{false, nullptr, &out.encoder};
  auto post = model.encode(layout, enc_ctx);
  ForwardContext dec_ctx{false, nullptr, &out.decoder};
  if (model.is_autoregressive()) {
    std::vector<TokenIndex> inputs{bos_index(model.grid())};
    const auto elems = layout_token_indices(layout, model.grid());
    inputs.insert(inputs.end(), elems.begin(), elems.end());
    model.decode_ar(post.mu, inputs, dec_ctx);
  } else {
    model.decode_nonar(post.mu, dec_ctx);
  }
  return out;
}

}  // namespace vtn
