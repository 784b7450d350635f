#pragma once

// beta-VAE objective, the beta warm-up and learning-rate schedules, and the
// teacher-forced training loop.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <ostream>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "vtn/dataset.hpp"
#include "vtn/layout.hpp"
#include "vtn/model.hpp"
#include "vtn/optim.hpp"
#include "vtn/tensor.hpp"

namespace vtn {

struct TrainConfig {
  double beta_target = 1.0;
  double beta_k = 0.0025;
  double beta_b = 6.25;
  std::size_t batch_size = 64;
  std::size_t epochs = 30;
  std::size_t max_steps = 0;  // 0: run all epochs
  std::size_t warmup_steps = 4000;
  double lr_scale = 1.0;
  double grad_clip = 1.0;
  std::uint64_t seed = 0;

  std::vector<std::string> violations() const {
    std::vector<std::string> out;
    if (!(beta_target > 0.0)) out.push_back("train.beta_target must be positive");
    if (batch_size == 0) out.push_back("train.batch_size must be >= 1");
    if (epochs == 0 && max_steps == 0) out.push_back("train.epochs or train.max_steps must be set");
    if (warmup_steps == 0) out.push_back("train.warmup_steps must be >= 1");
    if (!(lr_scale > 0.0)) out.push_back("train.lr_scale must be positive");
    if (!(grad_clip > 0.0)) out.push_back("train.grad_clip must be positive");
    return out;
  }

  nlohmann::json to_json() const {
    return {{"beta_target", beta_target}, {"beta_k", beta_k},
            {"beta_b", beta_b},           {"batch_size", batch_size},
            {"epochs", epochs},           {"max_steps", max_steps},
            {"warmup_steps", warmup_steps}, {"lr_scale", lr_scale},
            {"grad_clip", grad_clip},     {"seed", seed}};
  }

  void merge_json(const nlohmann::json& j) {
    beta_target = j.value("beta_target", beta_target);
    beta_k = j.value("beta_k", beta_k);
    beta_b = j.value("beta_b", beta_b);
    batch_size = j.value("batch_size", batch_size);
    epochs = j.value("epochs", epochs);
    max_steps = j.value("max_steps", max_steps);
    warmup_steps = j.value("warmup_steps", warmup_steps);
    lr_scale = j.value("lr_scale", lr_scale);
    grad_clip = j.value("grad_clip", grad_clip);
    seed = j.value("seed", seed);
  }

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

// Full-size defaults for each decoder variant.
inline TrainConfig default_train_config(Variant v) {
  TrainConfig c;
  c.beta_target = v == Variant::autoregressive ? 1.0 : 0.5;
  c.epochs = v == Variant::autoregressive ? 30 : 50;
  return c;
}

// beta_target / (1 + exp(-k i + b)), with i counted in optimizer steps.
inline double beta_at(std::size_t iteration, const TrainConfig& cfg) {
  const double arg = -cfg.beta_k * static_cast<double>(iteration) + cfg.beta_b;
  return cfg.beta_target / (1.0 + std::exp(arg));
}

// d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)
inline double lr_at(std::size_t step, std::size_t d_model, std::size_t warmup) {
  if (step == 0) throw ValidationError("learning-rate schedule is defined for step >= 1");
  if (warmup == 0) throw ValidationError("warmup must be >= 1");
  const double s = static_cast<double>(step);
  const double decay = 1.0 / std::sqrt(s);
  const double ramp = s * std::pow(static_cast<double>(warmup), -1.5);
  return std::min(decay, ramp) / std::sqrt(static_cast<double>(d_model));
}

// Sum over positions and the five token segments of the categorical
// cross-entropy. Sentinel targets contribute only their class segment.
template <class T>
nn::Tensor<T> reconstruction_loss(const BlockLogits<T>& logits, std::span<const TokenIndex> targets) {
  for (const auto& l : logits) {
    if (l.rows() != targets.size()) {
      throw ShapeError("reconstruction_loss: " + std::to_string(l.rows()) + " logit rows for " +
                       std::to_string(targets.size()) + " targets");
    }
  }
  std::vector<nn::Tensor<T>> parts;
  for (std::size_t b = 0; b < 5; ++b) {
    std::vector<int> tg(targets.size());
    for (std::size_t i = 0; i < targets.size(); ++i) tg[i] = targets[i].blocks()[b];
    parts.push_back(nn::cross_entropy(logits[b], std::span<const int>(tg)));
  }
  return nn::add_all(parts);
}

template <class T>
nn::Tensor<T> elbo_loss(const nn::Tensor<T>& recon, const nn::Tensor<T>& kl, double beta) {
  return nn::add(recon, nn::scale(kl, static_cast<T>(beta)));
}

inline double elbo_loss(double recon, double kl, double beta) { return recon + beta * kl; }

template <class T>
struct LossTerms {
  nn::Tensor<T> recon;
  nn::Tensor<T> kl;
  BlockLogits<T> logits;
  std::vector<TokenIndex> targets;
};

// Teacher-forced pass for one layout. With `sample_latent` false the
// posterior mean is decoded instead of a reparameterized sample.
template <class T, class Rng>
LossTerms<T> layout_loss(const VtnModel<T>& model, const Layout& layout, const ForwardContext& ctx,
                         Rng& rng, bool sample_latent = true) {
  const auto& g = model.grid();
  auto post = model.encode(layout, ctx);
  nn::Tensor<T> z = sample_latent ? sample_gaussian(post.mu, post.logvar, rng) : post.mu;
  LossTerms<T> out;
  auto elems = layout_token_indices(layout, g);
  if (model.is_autoregressive()) {
    std::vector<TokenIndex> inputs{bos_index(g)};
    inputs.insert(inputs.end(), elems.begin(), elems.end());
    out.targets = elems;
    out.targets.push_back(eos_index(g));
    out.logits = model.decode_ar(z, inputs, ctx);
  } else {
    out.targets = std::move(elems);
    out.logits = model.decode_nonar(z, ctx);
  }
  out.recon = reconstruction_loss(out.logits, std::span<const TokenIndex>(out.targets));
  out.kl = model.kl_to_prior(post);
  return out;
}

struct StepLog {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double recon = 0.0;
  double kl = 0.0;
  double beta = 0.0;
  double lr = 0.0;
};

inline void write_train_log_csv(std::ostream& os, const std::vector<StepLog>& log) {
  os << "step,epoch,recon,kl,beta,lr\n";
  for (const auto& s : log) {
    os << s.step << ',' << s.epoch << ',' << s.recon << ',' << s.kl << ',' << s.beta << ','
       << s.lr << '\n';
  }
}

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <class T>
struct TrainHooks {
  std::function<void(const StepLog&)> on_step;
  std::function<void(std::size_t epoch, const VtnModel<T>&)> on_epoch;
};

// Trains in place. Non-autoregressive models also get the empirical length
// distribution of the dataset attached.
template <class T>
std::vector<StepLog> train(VtnModel<T>& model, const std::vector<Layout>& dataset,
                           const TrainConfig& cfg, const TrainHooks<T>& hooks = {}) {
  if (dataset.empty()) throw ValidationError("cannot train on an empty dataset");
  if (const auto v = cfg.violations(); !v.empty()) throw ValidationError("invalid train config: " + v[0]);
  const auto& mcfg = model.config();
  for (const auto& l : dataset) {
    if (!layout_violations(l, mcfg.grid, mcfg.max_elements).empty()) {
      throw ValidationError("dataset layout violates the model grid or length limits");
    }
    if (!model.is_autoregressive() && l.empty()) {
      throw ValidationError("non-autoregressive training requires non-empty layouts");
    }
  }
  model.set_length_distribution(empirical_length_distribution(dataset, mcfg.max_elements));

  std::mt19937_64 rng(cfg.seed);
  auto params = model.parameters();
  nn::AdamState<T> adam;
  std::vector<StepLog> log;
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const ForwardContext ctx{true, &rng, nullptr};

  std::size_t step = 0;
  const std::size_t epochs = cfg.epochs == 0 ? std::numeric_limits<std::size_t>::max() : cfg.epochs;
  for (std::size_t epoch = 1; epoch <= epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      if (cfg.max_steps != 0 && step >= cfg.max_steps) break;
      ++step;
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const double beta = beta_at(step - 1, cfg);
      const double lr = cfg.lr_scale * lr_at(step, mcfg.block.d_model, cfg.warmup_steps);
      const T inv_b = T(1) / static_cast<T>(end - start);

      std::vector<nn::Tensor<T>> losses;
      double recon_sum = 0.0, kl_sum = 0.0;
      for (std::size_t i = start; i < end; ++i) {
        auto terms = layout_loss(model, dataset[order[i]], ctx, rng);
        recon_sum += terms.recon.item();
        kl_sum += terms.kl.item();
        losses.push_back(elbo_loss(terms.recon, terms.kl, beta));
      }
      auto loss = nn::scale(nn::add_all(losses), inv_b);
      StepLog entry{step, epoch, recon_sum / static_cast<double>(end - start),
                    kl_sum / static_cast<double>(end - start), beta, lr};
      if (!std::isfinite(loss.item())) {
        std::ostringstream os;
        os << "non-finite loss at step " << step << " (lr=" << lr << ", beta=" << beta << ")";
        throw TrainingDiverged(os.str());
      }
      nn::zero_grads<T>(params);
      nn::backward(loss);
      nn::clip_grad_norm<T>(params, cfg.grad_clip);
      nn::adam_step<T>(params, adam, lr);
      log.push_back(entry);
      if (hooks.on_step) hooks.on_step(entry);
    }
    if (hooks.on_epoch) hooks.on_epoch(epoch, model);
    if (cfg.max_steps != 0 && step >= cfg.max_steps) break;
  }
  nn::zero_grads<T>(params);
  return log;
}

// ---------------------------------------------------------------------------
// Evaluation helpers

struct ReconstructionStats {
  std::size_t correct = 0;
  std::size_t total = 0;
  double mean_kl = 0.0;
  double mean_recon = 0.0;

  double accuracy() const { return total == 0 ? 0.0 : static_cast<double>(correct) / total; }
};

inline int argmax_row(std::span<const float> row) {
  return static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
}
inline int argmax_row(std::span<const double> row) {
  return static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
}

// Teacher-forced per-block argmax accuracy in inference mode. Blocks without
// a target (sentinel coordinates) are not counted.
template <class T, class Rng>
ReconstructionStats reconstruction_stats(const VtnModel<T>& model, const std::vector<Layout>& data,
                                         Rng& rng, bool sample_latent) {
  nn::NoGradGuard guard;
  ReconstructionStats stats;
  for (const auto& layout : data) {
    auto terms = layout_loss(model, layout, ForwardContext{}, rng, sample_latent);
    stats.mean_kl += terms.kl.item();
    stats.mean_recon += terms.recon.item();
    for (std::size_t b = 0; b < 5; ++b) {
      const auto& lg = terms.logits[b];
      for (std::size_t i = 0; i < terms.targets.size(); ++i) {
        const int target = terms.targets[i].blocks()[b];
        if (target < 0) continue;
        const auto row = lg.values().subspan(i * lg.cols(), lg.cols());
        ++stats.total;
        if (argmax_row(row) == target) ++stats.correct;
      }
    }
  }
  if (!data.empty()) {
    stats.mean_kl /= static_cast<double>(data.size());
    stats.mean_recon /= static_cast<double>(data.size());
  }
  return stats;
}

// Small configuration used for desk-scale experiments and tests.
inline ModelConfig toy_model_config(Variant variant, PriorMode prior = PriorMode::fixed) {
  ModelConfig c;
  c.variant = variant;
  c.prior = prior;
  c.grid = {16, 16, static_cast<int>(toy_class_names().size())};
  c.block = {64, 4, 256, 2, 0.1};
  c.d_z = 64;
  c.max_elements = 100;
  c.prior_hidden = 64;
  return c;
}

}  // namespace vtn
