// vtn: train, sample, evaluate and inspect layout generators from the shell.
//
// Every command reads an optional JSON run config (--config); flags override
// file values. Failures print one JSON line {"error": kind, "message": ...}
// on stderr and exit with a nonzero status.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "vtn/vtn.hpp"

namespace fs = std::filesystem;
using namespace vtn;

namespace {

struct CommonOpts {
  std::string config;
  std::string preset = "full";
  std::optional<std::uint64_t> seed;
  std::string variant;
  std::string prior;
  std::string grid;
  std::string dataset;
  std::string out;
};

struct SampleOpts {
  std::string strategy;
  std::optional<std::size_t> max_len;
  std::optional<double> temperature;
  std::optional<std::size_t> top_k;
  std::optional<double> top_p;
};

std::pair<int, int> parse_grid(const std::string& s) {
  const auto x = s.find('x');
  if (x == std::string::npos) throw ValidationError("--grid must look like HxW, got '" + s + "'");
  try {
    return {std::stoi(s.substr(0, x)), std::stoi(s.substr(x + 1))};
  } catch (const std::exception&) {
    throw ValidationError("--grid must look like HxW, got '" + s + "'");
  }
}

std::vector<std::size_t> parse_sizes(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      out.push_back(std::stoul(tok));
    } catch (const std::exception&) {
      throw ValidationError("--sizes must be a comma-separated list of integers");
    }
  }
  return out;
}

// Defaults for the chosen variant and preset, then the config file, then flags.
RunConfig resolve_config(const CommonOpts& o) {
  nlohmann::json file = nlohmann::json::object();
  if (!o.config.empty()) file = nn::read_json_file(o.config);
  Variant v = Variant::autoregressive;
  if (!o.variant.empty()) {
    v = parse_variant(o.variant);
  } else if (file.contains("model") && file["model"].contains("variant")) {
    v = parse_variant(file["model"]["variant"].get<std::string>());
  }
  RunConfig cfg = default_run_config(v);
  if (o.preset == "toy") {
    cfg.model = toy_model_config(v);
    cfg.train.max_steps = 2000;
    cfg.train.epochs = 0;
    cfg.sampling.max_len = 20;
  } else if (o.preset != "full") {
    throw ValidationError("--preset must be 'full' or 'toy'");
  }
  cfg.merge_json(file);
  cfg.model.variant = v;
  if (!o.prior.empty()) cfg.model.prior = parse_prior(o.prior);
  if (!o.grid.empty()) {
    const auto [h, w] = parse_grid(o.grid);
    cfg.model.grid.H = h;
    cfg.model.grid.W = w;
  }
  if (!o.dataset.empty()) cfg.dataset.path = o.dataset;
  if (!o.out.empty()) cfg.out_dir = o.out;
  if (o.seed) cfg.set_seed(*o.seed);
  return cfg;
}

void apply_sampling(SamplingConfig& s, const SampleOpts& o) {
  if (!o.strategy.empty()) s.strategy = parse_strategy(o.strategy);
  if (o.max_len) s.max_len = *o.max_len;
  if (o.temperature) s.temperature = *o.temperature;
  if (o.top_k) s.top_k = *o.top_k;
  if (o.top_p) s.top_p = *o.top_p;
}

Dataset load_for(RunConfig& cfg) {
  cfg.validate();
  auto log = [](const std::string& msg) { std::cerr << "dropped: " << msg << '\n'; };
  Dataset d = load_dataset(cfg.dataset, cfg.model.grid, cfg.model.max_elements, log);
  if (d.num_classes() != cfg.model.grid.C) {
    std::cerr << "note: grid.C set to " << d.num_classes() << " from the dataset classes\n";
    cfg.model.grid.C = d.num_classes();
  }
  return d;
}

struct LoadedModel {
  VtnModel<float> model;
  std::vector<std::string> class_names;
};

LoadedModel load_checkpoint(const std::string& path) {
  const auto doc = nn::read_json_file(path);
  auto model = model_from_json<float>(doc);
  std::vector<std::string> names;
  const auto& h = doc.at("header");
  if (h.contains("class_names")) names = h.at("class_names").get<std::vector<std::string>>();
  return {std::move(model), std::move(names)};
}

void save_checkpoint(const fs::path& path, const VtnModel<float>& model,
                     const std::vector<std::string>& class_names) {
  auto doc = model_to_json(model);
  doc["header"]["class_names"] = class_names;
  nn::write_json_file(path, doc);
}

std::vector<Layout> read_layouts_or_toy(const std::string& path, const GridConfig& grid) {
  if (path.empty()) return make_two_column_toy(10, 1, grid);
  return read_layouts_jsonl(fs::path(path));
}

std::string pad4(std::size_t i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04zu", i);
  return buf;
}

void render_all(const std::vector<Layout>& layouts, const fs::path& dir, const Palette& palette) {
  fs::create_directories(dir);
  for (std::size_t i = 0; i < layouts.size(); ++i) {
    std::ofstream os(dir / ("layout_" + pad4(i) + ".svg"));
    if (!os) throw ValidationError("cannot write into '" + dir.string() + "'");
    os << render_svg(layouts[i], palette);
  }
}

void print_error(const std::string& kind, const std::string& message) {
  std::cerr << nlohmann::json{{"error", kind}, {"message", message}}.dump() << std::endl;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Variational transformer layout generator"};
  app.require_subcommand(1);

  CommonOpts common;
  SampleOpts sopts;
  auto add_common = [&](CLI::App* c) {
    c->add_option("--config", common.config, "JSON run config");
    c->add_option("--preset", common.preset, "Base settings: full or toy");
    c->add_option("--seed", common.seed, "Seed for every random stream");
    c->add_option("--variant", common.variant, "ar or nonar");
    c->add_option("--prior", common.prior, "fixed or learned");
    c->add_option("--grid", common.grid, "Coordinate grid as HxW");
    c->add_option("--dataset", common.dataset, "COCO .json or layout .jsonl (default: toy set)");
    c->add_option("--out", common.out, "Output path");
  };
  auto add_sampling = [&](CLI::App* c) {
    c->add_option("--strategy", sopts.strategy, "greedy, categorical, top_k or nucleus");
    c->add_option("--max-len", sopts.max_len, "Maximum generated elements");
    c->add_option("--temperature", sopts.temperature, "Softmax temperature");
    c->add_option("--top-k", sopts.top_k, "Candidates kept by top-k sampling");
    c->add_option("--top-p", sopts.top_p, "Probability mass kept by nucleus sampling");
  };

  // train
  auto* train_cmd = app.add_subcommand("train", "Train a model; writes model.json, train_log.csv, config.json");
  add_common(train_cmd);
  std::optional<std::size_t> max_steps, epochs;
  train_cmd->add_option("--max-steps", max_steps, "Stop after this many optimizer steps");
  train_cmd->add_option("--epochs", epochs, "Number of epochs");
  std::size_t log_every = 100;
  train_cmd->add_option("--log-every", log_every, "Progress line interval in steps");

  // sample
  auto* sample_cmd = app.add_subcommand("sample", "Sample layouts from a checkpoint as JSONL");
  add_common(sample_cmd);
  add_sampling(sample_cmd);
  std::string model_path, svg_dir;
  std::size_t n = 10;
  sample_cmd->add_option("--model", model_path, "Checkpoint written by train")->required();
  sample_cmd->add_option("--n", n, "Number of layouts");
  sample_cmd->add_option("--svg-dir", svg_dir, "Also render each sample as SVG");

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "Compare generated and real layouts");
  std::string gen_path, real_path, eval_out;
  std::size_t n_proj = 128;
  std::uint64_t eval_seed = 0;
  eval_cmd->add_option("--generated", gen_path, "Generated layouts (.jsonl)")->required();
  eval_cmd->add_option("--real", real_path, "Real layouts (.jsonl)")->required();
  eval_cmd->add_option("--n-proj", n_proj, "Projections for the sliced bbox distance");
  eval_cmd->add_option("--seed", eval_seed, "Seed for the projection directions");
  eval_cmd->add_option("--out", eval_out, "Write the report as JSON");

  // render
  auto* render_cmd = app.add_subcommand("render", "Render JSONL layouts to SVG files");
  std::string render_in, render_out = "svg", names_from;
  render_cmd->add_option("--input", render_in, "Layouts (.jsonl)")->required();
  render_cmd->add_option("--out", render_out, "Output directory");
  render_cmd->add_option("--model", names_from, "Take class labels from this checkpoint");

  // interpolate
  auto* interp_cmd = app.add_subcommand("interpolate", "Decode a straight line between two latents");
  add_common(interp_cmd);
  std::size_t ia = 0, ib = 1, isteps = 11;
  std::string interp_model;
  interp_cmd->add_option("--model", interp_model, "Checkpoint")->required();
  interp_cmd->add_option("--a", ia, "Index of the first layout in --dataset");
  interp_cmd->add_option("--b", ib, "Index of the second layout in --dataset");
  interp_cmd->add_option("--steps", isteps, "Number of points including both ends");
  std::string interp_strategy = "greedy";
  interp_cmd->add_option("--strategy", interp_strategy, "Decoding strategy");

  // attn
  auto* attn_cmd = app.add_subcommand("attn", "Export attention maps for one layout as JSON");
  add_common(attn_cmd);
  std::string attn_model;
  std::size_t attn_index = 0;
  attn_cmd->add_option("--model", attn_model, "Checkpoint")->required();
  attn_cmd->add_option("--index", attn_index, "Layout index in --dataset");

  // convergence
  auto* conv_cmd = app.add_subcommand("convergence", "Unique matches versus training-set size as CSV");
  add_common(conv_cmd);
  add_sampling(conv_cmd);
  std::string sizes_arg = "10";
  ConvergenceConfig conv;
  std::size_t holdout = 50;
  conv_cmd->add_option("--sizes", sizes_arg, "Comma-separated subset sizes");
  conv_cmd->add_option("--repeats", conv.repeats, "Trainings per size");
  conv_cmd->add_option("--samples", conv.samples, "Samples per trained model");
  conv_cmd->add_option("--holdout", holdout, "Layouts reserved as the matching reference");
  conv_cmd->add_option("--max-steps", max_steps, "Optimizer steps per training");
  conv_cmd->add_option("--epochs", epochs, "Epochs per training");

  // toy
  auto* toy_cmd = app.add_subcommand("toy", "Write the synthetic two-column dataset as JSONL");
  add_common(toy_cmd);
  std::size_t toy_n = 10;
  toy_cmd->add_option("--n", toy_n, "Number of layouts");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train_cmd) {
      RunConfig cfg = resolve_config(common);
      if (max_steps) cfg.train.max_steps = *max_steps;
      if (epochs) cfg.train.epochs = *epochs;
      Dataset data = load_for(cfg);
      cfg.validate();
      const fs::path out(cfg.out_dir);
      fs::create_directories(out);
      std::mt19937_64 init(cfg.seed);
      VtnModel<float> model(cfg.model, init);
      TrainHooks<float> hooks;
      hooks.on_step = [&](const StepLog& s) {
        if (log_every > 0 && s.step % log_every == 0) {
          std::cerr << "step " << s.step << " epoch " << s.epoch << " recon " << s.recon << " kl " << s.kl
                    << " beta " << s.beta << " lr " << s.lr << '\n';
        }
      };
      const auto log = train(model, data.layouts, cfg.train, hooks);
      save_checkpoint(out / "model.json", model, data.class_names);
      std::ofstream csv(out / "train_log.csv");
      write_train_log_csv(csv, log);
      nn::write_json_file(out / "config.json", cfg.to_json());
      std::cout << (out / "model.json").string() << '\n';
    } else if (*sample_cmd) {
      RunConfig cfg = resolve_config(common);
      apply_sampling(cfg.sampling, sopts);
      auto loaded = load_checkpoint(model_path);
      if (const auto v = cfg.sampling.violations(loaded.model.config().max_elements); !v.empty()) {
        throw ValidationError("invalid sampling config: " + v.front());
      }
      std::mt19937_64 rng(cfg.sampling.seed);
      std::vector<Layout> layouts;
      for (std::size_t i = 0; i < n; ++i) layouts.push_back(sample_layout(loaded.model, cfg.sampling, rng).layout);
      if (common.out.empty()) {
        write_layouts_jsonl(std::cout, layouts);
      } else {
        write_layouts_jsonl(fs::path(common.out), layouts);
      }
      if (!svg_dir.empty()) render_all(layouts, svg_dir, {loaded.class_names});
    } else if (*eval_cmd) {
      const auto gen = read_layouts_jsonl(fs::path(gen_path));
      const auto real = read_layouts_jsonl(fs::path(real_path));
      const auto report = evaluate_layouts(gen, real, {n_proj, eval_seed});
      std::cout << report.table();
      if (!eval_out.empty()) nn::write_json_file(eval_out, report.to_json());
    } else if (*render_cmd) {
      Palette palette;
      if (!names_from.empty()) palette.class_names = load_checkpoint(names_from).class_names;
      render_all(read_layouts_jsonl(fs::path(render_in)), render_out, palette);
    } else if (*interp_cmd) {
      RunConfig cfg = resolve_config(common);
      auto loaded = load_checkpoint(interp_model);
      const auto& model = loaded.model;
      const auto layouts = read_layouts_or_toy(common.dataset, model.grid());
      if (ia >= layouts.size() || ib >= layouts.size()) throw ValidationError("--a/--b outside the dataset");
      if (isteps < 2) throw ValidationError("--steps must be >= 2");
      nn::NoGradGuard guard;
      const ForwardContext ctx;
      const auto z1 = model.encode(sort_layout(layouts[ia], model.grid()), ctx).mu;
      const auto z2 = model.encode(sort_layout(layouts[ib], model.grid()), ctx).mu;
      cfg.sampling.strategy = parse_strategy(interp_strategy);
      std::mt19937_64 rng(cfg.sampling.seed);
      std::vector<Layout> out;
      for (std::size_t i = 0; i < isteps; ++i) {
        const double lam = static_cast<double>(i) / static_cast<double>(isteps - 1);
        out.push_back(decode_latent(model, interpolate(z1, z2, lam), cfg.sampling, rng).layout);
      }
      if (common.out.empty()) {
        write_layouts_jsonl(std::cout, out);
      } else {
        write_layouts_jsonl(fs::path(common.out), out);
      }
    } else if (*attn_cmd) {
      auto loaded = load_checkpoint(attn_model);
      const auto layouts = read_layouts_or_toy(common.dataset, loaded.model.grid());
      if (attn_index >= layouts.size()) throw ValidationError("--index outside the dataset");
      const auto doc = export_attention(loaded.model, sort_layout(layouts[attn_index], loaded.model.grid()));
      if (common.out.empty()) {
        std::cout << doc.to_json().dump() << '\n';
      } else {
        nn::write_json_file(common.out, doc.to_json());
      }
    } else if (*conv_cmd) {
      RunConfig cfg = resolve_config(common);
      apply_sampling(cfg.sampling, sopts);
      if (max_steps) cfg.train.max_steps = *max_steps;
      if (epochs) cfg.train.epochs = *epochs;
      conv.sizes = parse_sizes(sizes_arg);
      conv.seed = cfg.seed;
      std::size_t biggest = 0;
      for (auto s : conv.sizes) biggest = std::max(biggest, s);
      if (cfg.dataset.path.empty()) cfg.dataset.toy_count = biggest + holdout;
      Dataset data = load_for(cfg);
      if (holdout == 0 || holdout >= data.layouts.size()) {
        throw ValidationError("--holdout must leave at least one training layout");
      }
      const auto split = data.layouts.end() - static_cast<std::ptrdiff_t>(holdout);
      const std::vector<Layout> pool(data.layouts.begin(), split);
      const std::vector<Layout> held(split, data.layouts.end());
      const auto rows = run_convergence(pool, held, cfg.model, cfg.train, cfg.sampling, conv);
      if (common.out.empty()) {
        write_convergence_csv(std::cout, rows);
      } else {
        std::ofstream os(common.out);
        if (!os) throw ValidationError("cannot write '" + common.out + "'");
        write_convergence_csv(os, rows);
      }
    } else if (*toy_cmd) {
      RunConfig cfg = resolve_config(common);
      const auto layouts = make_two_column_toy(toy_n, cfg.seed, cfg.model.grid);
      if (common.out.empty()) {
        write_layouts_jsonl(std::cout, layouts);
      } else {
        write_layouts_jsonl(fs::path(common.out), layouts);
      }
    }
  } catch (const ValidationError& e) {
    print_error("validation", e.what());
    return 2;
  } catch (const StructuralError& e) {
    print_error("structural", e.what());
    return 3;
  } catch (const ShapeError& e) {
    print_error("shape", e.what());
    return 4;
  } catch (const TrainingDiverged& e) {
    print_error("diverged", e.what());
    return 5;
  } catch (const std::exception& e) {
    print_error("internal", e.what());
    return 1;
  }
  return 0;
}
