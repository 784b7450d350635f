// Acceptance checks: one PASS/FAIL/SKIPPED line per criterion. Exits nonzero
// when any criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <limits>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "gradcheck.hpp"
#include "metric_oracles.hpp"
#include "model_fixtures.hpp"
#include "vtn/vtn.hpp"

using namespace vtn;
using namespace vtn::testing;

namespace {

// Tolerances.
constexpr double kGradTol = 1e-4;
constexpr double kGradSeconds = 60.0;
constexpr int kGradInstances = 20;
constexpr int kCausalCases = 100;
constexpr int kRoundTripElements = 10000;
constexpr double kOverfitAccuracy = 0.95;
constexpr double kMinKl = 0.01;
constexpr std::size_t kOverfitSteps = 2000;
constexpr double kLrBranchTol = 1e-9;
constexpr double kRasterTol = 1e-3;
constexpr int kRasterLayouts = 100;
constexpr int kDocSimPairs = 500;
constexpr int kArSamples = 1000;
constexpr int kLengthDraws = 10000;
constexpr double kLengthTv = 0.02;
constexpr int kInterpPairs = 20;
constexpr double kRealAlignment = 0.353, kRealOverlap = 0.007, kRealBand = 0.5;
constexpr int kAblationSeeds = 3;
constexpr int kAblationSamples = 200;

enum class Outcome { pass, fail, skipped };

struct Result {
  Outcome outcome;
  std::string detail;
};

Result verdict(bool ok, const std::string& detail) { return {ok ? Outcome::pass : Outcome::fail, detail}; }

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(4);
  os << v;
  return os.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// Trained toy models shared between criteria.
struct ToyModels {
  std::vector<Layout> data;
  std::map<Variant, VtnModel<float>> models;
  std::map<Variant, double> accuracy, kl;
};

TrainConfig toy_train_config(Variant v, std::uint64_t seed) {
  auto tc = default_train_config(v);
  tc.epochs = 0;
  tc.max_steps = kOverfitSteps;
  tc.seed = seed;
  return tc;
}

// Smallest |pre-activation| of the block's feed-forward ReLU on input x.
double min_relu_margin(const EncoderBlock<double>& block, const Tensord& x, const AttentionMask& mask) {
  nn::NoGradGuard guard;
  const auto x1 = block.norm1(nn::add(x, block.attention(x, x, &mask)));
  double m = std::numeric_limits<double>::infinity();
  const auto pre = block.ffn.in(x1);
  for (double v : pre.values()) m = std::min(m, std::abs(v));
  return m;
}

// ---------------------------------------------------------------------------

Result gradient_suite() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(101);
  std::uniform_int_distribution<std::size_t> dim(2, 6);
  std::map<std::string, double> worst;
  int redrawn = 0;
  auto record = [&](const std::string& op, double e) { worst[op] = std::max(worst[op], e); };

  for (int i = 0; i < kGradInstances; ++i) {
    const std::size_t r = dim(rng), c = dim(rng), o = dim(rng);
    {
      auto x = random_tensor(r, c, rng), w = random_tensor(c, o, rng), b = random_tensor(1, o, rng);
      record("dense", gradcheck({x, w, b}, [](const auto& v) { return nn::dense(v[0], v[1], v[2]); }, rng));
    }
    {
      auto x = random_tensor(r, c, rng, -3, 3);
      const int axis = i % 2;
      record("softmax", gradcheck({x}, [axis](const auto& v) { return nn::softmax(v[0], axis); }, rng));
    }
    {
      auto x = random_tensor(r, c + 1, rng, -2, 2), g = random_tensor(1, c + 1, rng, 0.5, 1.5),
           b = random_tensor(1, c + 1, rng);
      record("layer_norm",
             gradcheck({x, g, b}, [](const auto& v) { return nn::layer_norm(v[0], v[1], v[2], 1e-5); }, rng));
    }
    {
      auto x = random_tensor(r, c, rng, -3, 3);
      std::vector<int> targets(r);
      for (auto& t : targets) t = std::uniform_int_distribution<int>(0, int(c) - 1)(rng);
      record("cross_entropy",
             gradcheck({x}, [&](const auto& v) { return nn::cross_entropy(v[0], std::span<const int>(targets)); }, rng));
    }
    {
      auto q = random_tensor(r, c, rng), k = random_tensor(r, c, rng), v = random_tensor(r, o, rng);
      const auto mask = AttentionMask::causal(r);
      const bool masked = i % 2 == 0;
      record("attention", gradcheck({q, k, v},
                                    [&](const auto& t) {
                                      return scaled_dot_attention(t[0], t[1], t[2], masked ? &mask : nullptr).output;
                                    },
                                    rng));
    }
    {
      // Finite differences are meaningless across the ReLU kink, so instances
      // with a feed-forward pre-activation within 1e-3 of zero are redrawn.
      const auto mask = AttentionMask::causal(r);
      EncoderBlock<double> block;
      Tensord x;
      for (;;) {
        block = EncoderBlock<double>(BlockConfig{8, 2, 16, 1, 0.1}, rng);
        x = random_tensor(r, 8, rng);
        if (min_relu_margin(block, x, mask) >= 1e-3) break;
        ++redrawn;
      }
      record("encoder_block",
             gradcheck({x, block.norm1.gain, block.norm2.bias, block.ffn.in.weight, block.attention.wq.weight,
                        block.attention.wo.bias},
                       [&](const auto& t) { return block(t[0], &mask, {}); }, rng));
    }
    {
      auto m = random_tensor(r, c, rng), l = random_tensor(r, c, rng);
      std::vector<double> eps(r * c);
      for (auto& e : eps) e = std::normal_distribution<double>(0, 1)(rng);
      record("reparameterize",
             gradcheck({m, l}, [&](const auto& v) { return nn::reparameterize(v[0], v[1], std::span<const double>(eps)); },
                       rng));
    }
  }
  const double secs = seconds_since(t0);
  bool ok = secs < kGradSeconds;
  std::string detail;
  for (const auto& [op, e] : worst) {
    ok = ok && e <= kGradTol;
    detail += op + "=" + fmt(e) + " ";
  }
  return verdict(ok, std::to_string(kGradInstances) + " instances/op, max rel err " + detail + "in " + fmt(secs) + " s (" +
                         std::to_string(redrawn) + " encoder instances redrawn near a ReLU kink)");
}

Result causality_suite() {
  std::mt19937_64 rng(202);
  const auto cfg = toy_model_config(Variant::autoregressive);
  VtnModel<float> model(cfg, rng);
  const auto& g = model.grid();
  std::uniform_int_distribution<int> len(1, 20), cls(0, g.C + 1), bin(0, g.W - 1);
  int identical = 0;
  for (int trial = 0; trial < kCausalCases; ++trial) {
    std::vector<TokenIndex> inputs{bos_index(g)};
    const int l = len(rng);
    for (int i = 0; i < l; ++i) inputs.push_back({cls(rng) % g.C, bin(rng), bin(rng), bin(rng), bin(rng)});
    const std::size_t t = std::uniform_int_distribution<std::size_t>(0, inputs.size() - 1)(rng);
    const auto z = sample_standard_latent<float>(1, cfg.d_z, rng);
    const auto base = model.decode_ar(z, inputs);
    auto perturbed = inputs;
    for (std::size_t j = t + 1; j < perturbed.size(); ++j) {
      const int c = cls(rng);
      perturbed[j] = c >= g.C ? TokenIndex{c} : TokenIndex{c, bin(rng), bin(rng), bin(rng), bin(rng)};
    }
    const auto after = model.decode_ar(z, perturbed);
    bool same = true;
    for (std::size_t k = 0; k < 5; ++k)
      for (std::size_t r = 0; r <= t; ++r)
        for (std::size_t c = 0; c < base[k].cols(); ++c) same = same && base[k].at(r, c) == after[k].at(r, c);
    identical += same;
  }
  return verdict(identical == kCausalCases,
                 std::to_string(identical) + "/" + std::to_string(kCausalCases) + " cases bit-identical");
}

Result encoding_laws() {
  std::mt19937_64 rng(303);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<int> size(2, 64), classes(1, 30);
  double worst_ratio = 0.0;
  bool decoded_ok = true;
  for (int i = 0; i < kRoundTripElements; ++i) {
    const GridConfig grid{size(rng), size(rng), classes(rng)};
    const double w = std::max(1e-6, u(rng)), h = std::max(1e-6, u(rng));
    const Element e{std::uniform_int_distribution<int>(0, grid.C - 1)(rng),
                    {w / 2 + u(rng) * (1 - w), h / 2 + u(rng) * (1 - h), w, h}};
    const auto v = encode_output_token(e, grid);
    const auto d = decode_token(v, grid);
    const auto* back = std::get_if<Element>(&d);
    if (!back || back->class_id != e.class_id) {
      decoded_ok = false;
      continue;
    }
    const double ex = std::abs(back->bbox.x - e.bbox.x) * grid.W, ew = std::abs(back->bbox.w - e.bbox.w) * grid.W;
    const double ey = std::abs(back->bbox.y - e.bbox.y) * grid.H, eh = std::abs(back->bbox.h - e.bbox.h) * grid.H;
    worst_ratio = std::max({worst_ratio, ex, ey, ew, eh});
  }
  int lengths_ok = 0;
  for (int i = 0; i < 10; ++i) {
    const GridConfig grid{size(rng), size(rng), classes(rng)};
    const std::size_t disc = std::size_t(grid.C + 2 + 2 * (grid.H + grid.W)), cont = std::size_t(grid.C + 2 + 4);
    const Element e{0, {0.5, 0.5, 0.2, 0.2}};
    lengths_ok += grid.discrete_length() == disc && grid.continuous_length() == cont &&
                  encode_output_token(e, grid).size() == disc && encode_input_token(e, grid).size() == cont &&
                  encode_output_eos(grid).size() == disc && encode_input_sentinel(grid.bos(), grid).size() == cont;
  }
  // worst_ratio is the error in bin units; the bound is half a bin.
  const bool ok = decoded_ok && worst_ratio <= 0.5 + 1e-9 && lengths_ok == 10;
  return verdict(ok, "max round-trip error " + fmt(worst_ratio) + " bins over " + std::to_string(kRoundTripElements) +
                         " elements (bound 0.5); lengths " + std::to_string(lengths_ok) + "/10");
}

Result overfit_oracle(ToyModels& toy) {
  const auto t0 = std::chrono::steady_clock::now();
  bool ok = true;
  std::string detail;
  for (Variant v : {Variant::autoregressive, Variant::non_autoregressive}) {
    const auto mc = toy_model_config(v);
    if (toy.data.empty()) toy.data = make_two_column_toy(10, 1, mc.grid);
    std::mt19937_64 init(1);
    VtnModel<float> model(mc, init);
    const auto tc = toy_train_config(v, 1);
    const auto log = train(model, toy.data, tc);
    std::mt19937_64 r(5);
    const auto stats = reconstruction_stats(model, toy.data, r, false);
    // KL after the beta warm-up midpoint, averaged over the last 100 steps.
    double kl = 0.0;
    for (std::size_t i = log.size() - 100; i < log.size(); ++i) kl += log[i].kl;
    kl /= 100.0;
    toy.accuracy[v] = stats.accuracy();
    toy.kl[v] = kl;
    ok = ok && stats.accuracy() >= kOverfitAccuracy && kl >= kMinKl;
    detail += to_string(v) + ": acc " + fmt(stats.accuracy()) + " kl " + fmt(kl) + "; ";
    toy.models.emplace(v, std::move(model));
  }
  return verdict(ok, detail + std::to_string(kOverfitSteps) + " steps each, " + fmt(seconds_since(t0)) + " s");
}

Result schedule_values() {
  bool ok = true;
  for (double target : {1.0, 0.5, 0.25}) {
    TrainConfig c;
    c.beta_target = target;
    ok = ok && beta_at(2500, c) == 0.5 * target;
  }
  double worst = 0.0;
  for (std::size_t d : {64u, 256u, 512u})
    for (std::size_t w : {100u, 4000u}) {
      const double ramp = double(w) * std::pow(double(w), -1.5) / std::sqrt(double(d));
      const double decay = 1.0 / std::sqrt(double(w)) / std::sqrt(double(d));
      const double at = lr_at(w, d, w);
      worst = std::max({worst, std::abs(ramp - decay) / decay, std::abs(at - decay) / decay});
      ok = ok && lr_at(w - 1, d, w) < at && lr_at(w + 1, d, w) < at;
    }
  ok = ok && worst <= kLrBranchTol;
  return verdict(ok, "beta midpoint exact; lr branch mismatch at warmup " + fmt(worst));
}

Result metric_oracles() {
  std::mt19937_64 rng(606);
  std::uniform_int_distribution<int> count(2, 6), pos(0, 460), size(8, 200), cls(0, 2);
  double iou_err = 0.0, overlap_err = 0.0, cont_err = 0.0;
  for (int t = 0; t < kRasterLayouts; ++t) {
    Layout l;
    const int n = count(rng);
    for (int i = 0; i < n; ++i) {
      const int w = size(rng), h = size(rng);
      l.elements.push_back({cls(rng), pixel_box(std::min(pos(rng), 512 - w), std::min(pos(rng), 512 - h), w, h)});
    }
    double r_iou = 0.0, r_overlap = 0.0;
    int pairs = 0;
    for (std::size_t i = 0; i < l.size(); ++i)
      for (std::size_t j = i + 1; j < l.size(); ++j) {
        const auto& a = l.elements[i].bbox;
        const auto& b = l.elements[j].bbox;
        r_iou += raster_iou(a, b);
        r_overlap += raster_intersection(a, b);
        ++pairs;
      }
    iou_err = std::max(iou_err, std::abs(mean_pairwise_iou(l) - r_iou / pairs));
    overlap_err = std::max(overlap_err, std::abs(overlap_index(l) - r_overlap));
  }
  // Continuous boxes for information: pixel-center sampling has edge error.
  {
    std::uniform_real_distribution<double> u(0.05, 0.5);
    for (int t = 0; t < 20; ++t) {
      const double w1 = u(rng), h1 = u(rng), w2 = u(rng), h2 = u(rng);
      const BBox a{0.5, 0.5, w1, h1}, b{0.5 + u(rng) * 0.3, 0.5 - u(rng) * 0.3, w2, h2};
      cont_err = std::max(cont_err, std::abs(iou(a, b) - raster_iou(a, b)));
    }
  }
  int docsim_ok = 0;
  std::uniform_int_distribution<std::size_t> len(1, 6);
  for (int t = 0; t < kDocSimPairs; ++t) {
    const GridConfig g{32, 32, 2};
    const auto a = random_layout(len(rng), g, rng), b = random_layout(len(rng), g, rng);
    docsim_ok += std::abs(docsim(a, b) - brute_force_docsim(a, b)) <= 1e-12;
  }
  const BBox box = corner_box(0.1, 0.1, 0.2, 0.2);
  auto mk = [&](std::vector<int> classes) {
    Layout l;
    for (int c : classes) l.elements.push_back({c, box});
    return l;
  };
  // 0.8 - 0.6 is not exactly 0.2 in binary, so the first case allows 1e-15.
  const double wclass_err = std::max({std::abs(wasserstein_class({mk({0, 0, 0, 0, 1})}, {mk({0, 0, 0}), mk({1, 1})}) - 0.2),
                                      std::abs(wasserstein_class({mk({0})}, {mk({1})}) - 1.0),
                                      std::abs(wasserstein_class({mk({0, 1})}, {mk({1, 0})}))});
  const bool wclass_ok = wclass_err <= 1e-15;
  bool wbbox_ok = true;
  for (int t = 0; t < 10; ++t) {
    std::vector<Layout> x, y;
    for (int i = 0; i < 8; ++i) x.push_back(random_layout(len(rng), GridConfig{32, 32, 3}, rng));
    for (int i = 0; i < 5; ++i) y.push_back(random_layout(len(rng), GridConfig{32, 32, 3}, rng));
    const auto dirs = random_directions(128, rng);
    wbbox_ok = wbbox_ok && wasserstein_bbox(x, x, dirs) == 0.0 && wasserstein_bbox(x, y, dirs) == wasserstein_bbox(y, x, dirs);
  }
  const bool ok = iou_err <= kRasterTol && overlap_err <= kRasterTol && docsim_ok == kDocSimPairs && wclass_ok && wbbox_ok;
  return verdict(ok, "raster (pixel-aligned) iou err " + fmt(iou_err) + " overlap err " + fmt(overlap_err) +
                         " [continuous boxes " + fmt(cont_err) + "]; docsim " + std::to_string(docsim_ok) + "/" +
                         std::to_string(kDocSimPairs) + "; w_class err " + fmt(wclass_err) + "; w_bbox " +
                         (wbbox_ok ? "zero+symmetric" : "broken"));
}

Result sampling_totality(ToyModels& toy) {
  if (!toy.models.count(Variant::autoregressive)) return {Outcome::fail, "toy checkpoint unavailable"};
  // Round-trip through the checkpoint format to sample from a loaded model.
  const auto ar = model_from_json<float>(nlohmann::json::parse(model_to_json(toy.models.at(Variant::autoregressive)).dump()));
  const auto& g = ar.grid();
  SamplingConfig sc;
  std::mt19937_64 rng(707);
  int valid = 0, truncated = 0;
  for (int i = 0; i < kArSamples; ++i) {
    const auto gen = sample_layout(ar, sc, rng);
    valid += is_valid_layout(gen.layout, g, ar.config().max_elements);
    truncated += gen.truncated;
  }
  bool deterministic = true;
  SamplingConfig greedy;
  greedy.strategy = Strategy::greedy;
  for (const auto& [v, model] : toy.models) {
    for (int i = 0; i < 10; ++i) {
      const std::size_t rows = v == Variant::autoregressive ? 1 : 5;
      const auto z = sample_standard_latent<float>(rows, model.config().d_z, rng);
      std::mt19937_64 r1(i), r2(1000 + i);
      deterministic = deterministic && decode_latent(model, z, greedy, r1).layout == decode_latent(model, z, greedy, r2).layout;
    }
  }
  double tv = 1.0;
  if (toy.models.count(Variant::non_autoregressive)) {
    const auto& nonar = toy.models.at(Variant::non_autoregressive);
    const auto& p = nonar.length_distribution().probabilities();
    std::vector<double> hist(p.size(), 0.0);
    for (int i = 0; i < kLengthDraws; ++i) {
      const auto s = sample_layout(nonar, sc, rng).layout.size();
      if (s < hist.size()) hist[s] += 1.0 / kLengthDraws;
    }
    tv = 0.0;
    for (std::size_t s = 0; s < p.size(); ++s) tv += std::abs(hist[s] - p[s]) / 2;
  }
  const bool ok = valid == kArSamples && deterministic && tv <= kLengthTv;
  return verdict(ok, std::to_string(valid) + "/" + std::to_string(kArSamples) + " AR samples valid (" +
                         std::to_string(truncated) + " hit max_len); greedy " +
                         (deterministic ? "deterministic" : "NOT deterministic") + "; non-AR length TV " + fmt(tv));
}

Result interpolation_validity(ToyModels& toy) {
  std::mt19937_64 rng(808);
  int total = 0, valid = 0;
  for (const auto& [v, model] : toy.models) {
    SamplingConfig sc;
    sc.strategy = Strategy::greedy;
    for (int p = 0; p < kInterpPairs; ++p) {
      const std::size_t rows = v == Variant::autoregressive ? 1 : model.length_distribution().sample(rng);
      const auto z1 = sample_standard_latent<float>(rows, model.config().d_z, rng);
      const auto z2 = sample_standard_latent<float>(rows, model.config().d_z, rng);
      for (int k = 0; k <= 10; ++k) {
        const auto gen = decode_latent(model, interpolate(z1, z2, k / 10.0), sc, rng);
        valid += is_valid_layout(gen.layout, model.grid(), model.config().max_elements);
        ++total;
      }
    }
  }
  return verdict(total > 0 && valid == total,
                 std::to_string(valid) + "/" + std::to_string(total) + " decoded layouts valid (both variants, 11 lambdas)");
}

Result real_data_check() {
  const char* path = std::getenv("VTN_PUBLAYNET");
  if (!path || !*path) return {Outcome::skipped, "set VTN_PUBLAYNET to a PubLayNet val.json to run"};
  IngestFilters f;
  Dataset d = ingest_coco(path, f);
  if (d.layouts.size() > 1000) d.layouts.resize(1000);
  const double align = dataset_alignment(d.layouts), ov = dataset_overlap(d.layouts);
  const bool ok = std::abs(align - kRealAlignment) <= kRealBand * kRealAlignment &&
                  std::abs(ov - kRealOverlap) <= kRealBand * kRealOverlap;
  return verdict(ok, std::to_string(d.layouts.size()) + " layouts: alignment " + fmt(align) + " (ref " +
                         fmt(kRealAlignment) + "), overlap " + fmt(ov) + " (ref " + fmt(kRealOverlap) + ")");
}

Result ablation_parity(ToyModels& toy) {
  const auto t0 = std::chrono::steady_clock::now();
  std::map<Variant, double> mean_iou;
  std::string detail;
  for (Variant v : {Variant::autoregressive, Variant::non_autoregressive}) {
    for (std::uint64_t seed = 1; seed <= kAblationSeeds; ++seed) {
      const auto mc = toy_model_config(v);
      std::mt19937_64 init(seed);
      VtnModel<float> fresh(mc, init);
      // Seed 1 with the default schedule is the overfit model; reuse it.
      const bool reuse = seed == 1 && toy.models.count(v);
      if (!reuse) train(fresh, toy.data, toy_train_config(v, seed));
      const auto& model = reuse ? toy.models.at(v) : fresh;
      SamplingConfig sc;
      sc.max_len = 20;
      std::mt19937_64 rng(seed);
      std::vector<Layout> gen;
      for (int i = 0; i < kAblationSamples; ++i) gen.push_back(sample_layout(model, sc, rng).layout);
      mean_iou[v] += dataset_iou(gen) / kAblationSeeds;
    }
    detail += to_string(v) + " IoU " + fmt(mean_iou[v]) + "; ";
  }
  return verdict(mean_iou[Variant::autoregressive] < mean_iou[Variant::non_autoregressive],
                 detail + "real toy IoU " + fmt(dataset_iou(toy.data)) + ", " + fmt(seconds_since(t0)) + " s");
}

}  // namespace

int main() {
  ToyModels toy;
  const std::vector<std::pair<std::string, std::function<Result()>>> criteria{
      {"gradient suite", gradient_suite},
      {"causality suite", causality_suite},
      {"encoding laws", encoding_laws},
      {"overfit oracle", [&] { return overfit_oracle(toy); }},
      {"schedule values", schedule_values},
      {"metric oracles", metric_oracles},
      {"sampling totality and determinism", [&] { return sampling_totality(toy); }},
      {"interpolation validity", [&] { return interpolation_validity(toy); }},
      {"real-data directional check", real_data_check},
      {"ablation parity", [&] { return ablation_parity(toy); }},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Result r;
    try {
      r = criteria[i].second();
    } catch (const std::exception& e) {
      r = {Outcome::fail, std::string("exception: ") + e.what()};
    }
    const char* tag = r.outcome == Outcome::pass ? "PASS" : r.outcome == Outcome::fail ? "FAIL" : "SKIPPED";
    failures += r.outcome == Outcome::fail;
    std::printf("%-7s %2zu %s: %s\n", tag, i + 1, criteria[i].first.c_str(), r.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
