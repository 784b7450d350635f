#pragma once

// Run configuration for the command-line tool: one JSON document holding the
// model, training, sampling and dataset settings.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "vtn/dataset.hpp"
#include "vtn/errors.hpp"
#include "vtn/model.hpp"
#include "vtn/module.hpp"
#include "vtn/sampling.hpp"
#include "vtn/training.hpp"

namespace vtn {

struct DatasetConfig {
  // Empty path: the synthetic two-column toy set. ".jsonl": layouts, one per
  // line. Anything else is read as COCO annotations.
  std::string path;
  std::string class_names_path;  // optional JSON array of names for JSONL data
  std::size_t toy_count = 10;
  std::uint64_t toy_seed = 1;
  double min_area_fraction = 0.0;
  bool drop_crowd = true;

  nlohmann::json to_json() const {
    return {{"path", path},
            {"class_names_path", class_names_path},
            {"toy_count", toy_count},
            {"toy_seed", toy_seed},
            {"min_area_fraction", min_area_fraction},
            {"drop_crowd", drop_crowd}};
  }

  void merge_json(const nlohmann::json& j) {
    path = j.value("path", path);
    class_names_path = j.value("class_names_path", class_names_path);
    toy_count = j.value("toy_count", toy_count);
    toy_seed = j.value("toy_seed", toy_seed);
    min_area_fraction = j.value("min_area_fraction", min_area_fraction);
    drop_crowd = j.value("drop_crowd", drop_crowd);
  }

  friend bool operator==(const DatasetConfig&, const DatasetConfig&) = default;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  SamplingConfig sampling;
  DatasetConfig dataset;
  std::string out_dir = "vtn_out";
  std::uint64_t seed = 0;

  // Seeds every random stream from the run seed.
  void set_seed(std::uint64_t s) {
    seed = s;
    train.seed = s;
    sampling.seed = s;
  }

  std::vector<std::string> violations() const {
    std::vector<std::string> out;
    for (const auto& v : model.violations()) out.push_back("model." + v);
    for (const auto& v : train.violations()) out.push_back(v);
    for (const auto& v : sampling.violations(model.max_elements)) out.push_back(v);
    if (!dataset.path.empty() && !std::filesystem::exists(dataset.path)) {
      out.push_back("dataset.path '" + dataset.path + "' does not exist");
    }
    if (!dataset.class_names_path.empty() && !std::filesystem::exists(dataset.class_names_path)) {
      out.push_back("dataset.class_names_path '" + dataset.class_names_path + "' does not exist");
    }
    if (dataset.path.empty() && dataset.toy_count == 0) out.push_back("dataset.toy_count must be >= 1");
    if (!(dataset.min_area_fraction >= 0.0 && dataset.min_area_fraction < 1.0)) {
      out.push_back("dataset.min_area_fraction must lie in [0, 1)");
    }
    if (out_dir.empty()) out.push_back("out_dir must not be empty");
    return out;
  }

  void validate() const {
    const auto v = violations();
    if (v.empty()) return;
    std::string msg = "invalid config:";
    for (const auto& s : v) msg += " " + s + ";";
    throw ValidationError(msg);
  }

  nlohmann::json to_json() const {
    return {{"model", model.to_json()},   {"train", train.to_json()},
            {"sampling", sampling.to_json()}, {"dataset", dataset.to_json()},
            {"out_dir", out_dir},         {"seed", seed}};
  }

  void merge_json(const nlohmann::json& j) {
    if (!j.is_object()) throw StructuralError("config must be a JSON object");
    try {
      if (j.contains("model")) model.merge_json(j.at("model"));
      if (j.contains("train")) train.merge_json(j.at("train"));
      if (j.contains("sampling")) sampling.merge_json(j.at("sampling"));
      if (j.contains("dataset")) dataset.merge_json(j.at("dataset"));
      out_dir = j.value("out_dir", out_dir);
      seed = j.value("seed", seed);
    } catch (const nlohmann::json::exception& e) {
      throw StructuralError(std::string("config has a field of the wrong type: ") + e.what());
    }
  }

  static RunConfig from_json(const nlohmann::json& j) {
    RunConfig c;
    c.merge_json(j);
    return c;
  }

  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

// Full-size defaults with the decoder-specific training schedule.
inline RunConfig default_run_config(Variant v = Variant::autoregressive) {
  RunConfig c;
  c.model.variant = v;
  c.train = default_train_config(v);
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  return RunConfig::from_json(nn::read_json_file(path));
}

// Loads the configured dataset. The grid's class count is not touched; the
// caller reconciles it with the returned class names.
inline Dataset load_dataset(const DatasetConfig& cfg, const GridConfig& grid, std::size_t max_elements,
                            const DropLogger& log = {}) {
  Dataset d;
  if (cfg.path.empty()) {
    d.layouts = make_two_column_toy(cfg.toy_count, cfg.toy_seed, grid);
    d.class_names = toy_class_names();
    d.summary.kept_layouts = d.layouts.size();
    return d;
  }
  const std::filesystem::path p(cfg.path);
  if (p.extension() == ".jsonl") {
    d.layouts = read_layouts_jsonl(p);
    int max_class = -1;
    for (auto& l : d.layouts) {
      l = sort_layout(std::move(l), grid);
      for (const auto& e : l.elements) max_class = std::max(max_class, e.class_id);
    }
    if (!cfg.class_names_path.empty()) {
      d.class_names = nn::read_json_file(cfg.class_names_path).get<std::vector<std::string>>();
    } else {
      for (int c = 0; c <= max_class; ++c) d.class_names.push_back("class " + std::to_string(c));
    }
    if (max_class >= d.num_classes()) throw ValidationError("layout class id exceeds the class name list");
    d.summary.kept_layouts = d.layouts.size();
    return d;
  }
  IngestFilters f;
  f.min_area_fraction = cfg.min_area_fraction;
  f.drop_crowd = cfg.drop_crowd;
  f.max_elements = max_elements;
  f.sort_grid_h = grid.H;
  f.sort_grid_w = grid.W;
  return ingest_coco(p, f, log);
}

}  // namespace vtn
