#pragma once

// Diversity versus training-set size: train on growing subsets, sample, and
// count unique DocSim matches against a held-out set.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <ostream>
#include <random>
#include <vector>

#include "vtn/errors.hpp"
#include "vtn/metrics.hpp"
#include "vtn/model.hpp"
#include "vtn/sampling.hpp"
#include "vtn/training.hpp"

namespace vtn {

struct ConvergenceRow {
  std::size_t size = 0;
  double mean_matches = 0.0;
  double std_matches = 0.0;
  std::vector<std::size_t> runs;
};

struct ConvergenceConfig {
  std::vector<std::size_t> sizes;
  std::size_t repeats = 5;
  std::size_t samples = 1000;
  std::uint64_t seed = 0;
};

// `pool` supplies training subsets (the first `size` layouts); `held_out` is
// the reference set for matching. Repeat r of every size uses seed + r.
inline std::vector<ConvergenceRow> run_convergence(const std::vector<Layout>& pool,
                                                   const std::vector<Layout>& held_out,
                                                   const ModelConfig& model_cfg,
                                                   const TrainConfig& train_cfg,
                                                   const SamplingConfig& sampling_cfg,
                                                   const ConvergenceConfig& cfg,
                                                   const TrainHooks<float>& hooks = {}) {
  if (cfg.sizes.empty()) throw ValidationError("convergence needs at least one subset size");
  if (cfg.repeats == 0) throw ValidationError("convergence repeats must be >= 1");
  if (held_out.empty()) throw ValidationError("convergence needs a non-empty held-out set");
  for (std::size_t s : cfg.sizes) {
    if (s == 0 || s > pool.size()) {
      throw ValidationError("subset size " + std::to_string(s) + " exceeds the " +
                            std::to_string(pool.size()) + " available training layouts");
    }
  }
  std::vector<ConvergenceRow> rows;
  for (std::size_t size : cfg.sizes) {
    const std::vector<Layout> subset(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(size));
    ConvergenceRow row;
    row.size = size;
    for (std::size_t r = 0; r < cfg.repeats; ++r) {
      const std::uint64_t seed = cfg.seed + r;
      std::mt19937_64 init(seed);
      VtnModel<float> model(model_cfg, init);
      TrainConfig tc = train_cfg;
      tc.seed = seed;
      train(model, subset, tc, hooks);
      SamplingConfig sc = sampling_cfg;
      sc.seed = seed;
      std::mt19937_64 rng(seed);
      std::vector<Layout> gen;
      gen.reserve(cfg.samples);
      for (std::size_t i = 0; i < cfg.samples; ++i) gen.push_back(sample_layout(model, sc, rng).layout);
      row.runs.push_back(unique_matches(gen, held_out));
    }
    double mean = 0.0;
    for (auto m : row.runs) mean += static_cast<double>(m);
    mean /= static_cast<double>(row.runs.size());
    double var = 0.0;
    for (auto m : row.runs) var += (static_cast<double>(m) - mean) * (static_cast<double>(m) - mean);
    row.mean_matches = mean;
    row.std_matches = std::sqrt(var / static_cast<double>(row.runs.size()));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline void write_convergence_csv(std::ostream& os, const std::vector<ConvergenceRow>& rows) {
  os << "size,mean_matches,std_matches\n";
  for (const auto& r : rows) os << r.size << ',' << r.mean_matches << ',' << r.std_matches << '\n';
}

}  // namespace vtn
