#pragma once

// Layout quality and diversity metrics: pairwise IoU, overlap index,
// alignment, Wasserstein distances over the class and box marginals, DocSim
// and the unique-match count.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <iomanip>
#include <map>
#include <random>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "vtn/errors.hpp"
#include "vtn/hungarian.hpp"
#include "vtn/layout.hpp"

namespace vtn {

inline double intersection_area(const BBox& a, const BBox& b) {
  const double w = std::min(a.right(), b.right()) - std::max(a.left(), b.left());
  const double h = std::min(a.bottom(), b.bottom()) - std::max(a.top(), b.top());
  return (w > 0.0 && h > 0.0) ? w * h : 0.0;
}

inline double iou(const BBox& a, const BBox& b) {
  const double inter = intersection_area(a, b);
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

// Mean IoU over unordered element pairs; 0 for fewer than two elements.
inline double mean_pairwise_iou(const Layout& layout) {
  const auto& e = layout.elements;
  if (e.size() < 2) return 0.0;
  double s = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < e.size(); ++i)
    for (std::size_t j = i + 1; j < e.size(); ++j) {
      s += iou(e[i].bbox, e[j].bbox);
      ++pairs;
    }
  return s / static_cast<double>(pairs);
}

// Summed pairwise intersection area in page-fraction units.
inline double overlap_index(const Layout& layout) {
  const auto& e = layout.elements;
  double s = 0.0;
  for (std::size_t i = 0; i < e.size(); ++i)
    for (std::size_t j = i + 1; j < e.size(); ++j) s += intersection_area(e[i].bbox, e[j].bbox);
  return s;
}

// (1/l) sum_i -log(1 - min_{j != i} min(|dL|, |dC|, |dR|)) over x-coordinates
// of left edges, centers and right edges.
inline double alignment_score(const Layout& layout) {
  const auto& e = layout.elements;
  if (e.size() < 2) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < e.size(); ++i) {
    double best = 1.0;
    for (std::size_t j = 0; j < e.size(); ++j) {
      if (i == j) continue;
      const BBox& a = e[i].bbox;
      const BBox& b = e[j].bbox;
      best = std::min({best, std::abs(a.left() - b.left()), std::abs(a.x - b.x),
                       std::abs(a.right() - b.right())});
    }
    best = std::min(best, 1.0 - 1e-12);
    s += -std::log(1.0 - best);
  }
  return s / static_cast<double>(e.size());
}

template <class F>
double mean_over(const std::vector<Layout>& layouts, F f) {
  if (layouts.empty()) return 0.0;
  double s = 0.0;
  for (const auto& l : layouts) s += f(l);
  return s / static_cast<double>(layouts.size());
}

inline double dataset_iou(const std::vector<Layout>& layouts) { return mean_over(layouts, mean_pairwise_iou); }
inline double dataset_overlap(const std::vector<Layout>& layouts) { return mean_over(layouts, overlap_index); }

// Mean alignment over layouts that have at least one element.
inline double dataset_alignment(const std::vector<Layout>& layouts) {
  double s = 0.0;
  std::size_t n = 0;
  for (const auto& l : layouts) {
    if (l.empty()) continue;
    s += alignment_score(l);
    ++n;
  }
  return n == 0 ? 0.0 : s / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Wasserstein distances over pooled element marginals

inline std::vector<double> class_marginal(const std::vector<Layout>& layouts, std::size_t classes) {
  std::vector<double> p(classes, 0.0);
  double n = 0.0;
  for (const auto& l : layouts)
    for (const auto& e : l.elements) {
      if (e.class_id < 0) throw ValidationError("negative class id");
      if (static_cast<std::size_t>(e.class_id) >= p.size()) p.resize(static_cast<std::size_t>(e.class_id) + 1, 0.0);
      p[static_cast<std::size_t>(e.class_id)] += 1.0;
      n += 1.0;
    }
  if (n > 0.0)
    for (auto& x : p) x /= n;
  return p;
}

// W1 under the 0/1 ground metric between two categorical distributions,
// i.e. the total-variation distance.
inline double wasserstein_categorical(std::span<const double> p, std::span<const double> q) {
  const std::size_t n = std::max(p.size(), q.size());
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double a = i < p.size() ? p[i] : 0.0;
    const double b = i < q.size() ? q[i] : 0.0;
    s += std::abs(a - b);
  }
  return s / 2;
}

inline std::size_t count_elements(const std::vector<Layout>& layouts) {
  std::size_t n = 0;
  for (const auto& l : layouts) n += l.size();
  return n;
}

inline double wasserstein_class(const std::vector<Layout>& gen, const std::vector<Layout>& real) {
  if (count_elements(gen) == 0 || count_elements(real) == 0) {
    throw ValidationError("wasserstein_class requires elements in both sets");
  }
  const auto p = class_marginal(gen, 0);
  const auto q = class_marginal(real, 0);
  return wasserstein_categorical(p, q);
}

// Exact W1 between two 1-d empirical distributions with uniform weights,
// integrating |F^-1(t) - G^-1(t)| over the merged quantile breakpoints.
inline double wasserstein_1d(std::vector<double> a, std::vector<double> b) {
  if (a.empty() || b.empty()) throw ValidationError("wasserstein_1d of an empty sample");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  const double n = static_cast<double>(a.size()), m = static_cast<double>(b.size());
  std::size_t i = 0, j = 0;
  double t = 0.0, total = 0.0;
  while (i < a.size() && j < b.size()) {
    const double ta = static_cast<double>(i + 1) / n;
    const double tb = static_cast<double>(j + 1) / m;
    const double next = std::min(ta, tb);
    total += std::abs(a[i] - b[j]) * (next - t);
    t = next;
    if (ta <= tb) ++i;
    if (tb <= ta) ++j;
  }
  return total;
}

inline std::vector<std::array<double, 4>> pooled_boxes(const std::vector<Layout>& layouts) {
  std::vector<std::array<double, 4>> out;
  for (const auto& l : layouts)
    for (const auto& e : l.elements) out.push_back({e.bbox.x, e.bbox.y, e.bbox.w, e.bbox.h});
  return out;
}

template <class Rng>
std::vector<std::array<double, 4>> random_directions(std::size_t n, Rng& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<std::array<double, 4>> out(n);
  for (auto& d : out) {
    double norm = 0.0;
    do {
      for (auto& x : d) x = dist(rng);
      norm = std::sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2] + d[3] * d[3]);
    } while (norm < 1e-12);
    for (auto& x : d) x /= norm;
  }
  return out;
}

// Sliced W1 over the given unit directions in (x_center, y_center, w, h).
inline double sliced_wasserstein(const std::vector<std::array<double, 4>>& xs,
                                 const std::vector<std::array<double, 4>>& ys,
                                 const std::vector<std::array<double, 4>>& directions) {
  if (xs.empty() || ys.empty()) throw ValidationError("sliced Wasserstein of an empty sample");
  if (directions.empty()) throw ValidationError("sliced Wasserstein needs at least one direction");
  auto project = [](const std::vector<std::array<double, 4>>& pts, const std::array<double, 4>& d) {
    std::vector<double> out(pts.size());
    for (std::size_t i = 0; i < pts.size(); ++i)
      out[i] = pts[i][0] * d[0] + pts[i][1] * d[1] + pts[i][2] * d[2] + pts[i][3] * d[3];
    return out;
  };
  double s = 0.0;
  for (const auto& d : directions) s += wasserstein_1d(project(xs, d), project(ys, d));
  return s / static_cast<double>(directions.size());
}

inline double wasserstein_bbox(const std::vector<Layout>& gen, const std::vector<Layout>& real,
                               const std::vector<std::array<double, 4>>& directions) {
  if (count_elements(gen) == 0 || count_elements(real) == 0) {
    throw ValidationError("wasserstein_bbox requires elements in both sets");
  }
  return sliced_wasserstein(pooled_boxes(gen), pooled_boxes(real), directions);
}

template <class Rng>
double wasserstein_bbox(const std::vector<Layout>& gen, const std::vector<Layout>& real,
                        std::size_t n_proj, Rng& rng) {
  return wasserstein_bbox(gen, real, random_directions(n_proj, rng));
}

// ---------------------------------------------------------------------------
// DocSim

// alpha * 2^(-dc - 2 ds) for boxes of equal class, 0 otherwise, with
// alpha = sqrt(min(w) * min(h)), dc the center distance and ds the L2 size
// difference.
inline double docsim_weight(const Element& a, const Element& b) {
  if (a.class_id != b.class_id) return 0.0;
  const double alpha = std::sqrt(std::min(a.bbox.w, b.bbox.w) * std::min(a.bbox.h, b.bbox.h));
  const double dc = std::hypot(a.bbox.x - b.bbox.x, a.bbox.y - b.bbox.y);
  const double ds = std::hypot(a.bbox.w - b.bbox.w, a.bbox.h - b.bbox.h);
  return alpha * std::exp2(-dc - 2.0 * ds);
}

inline std::vector<double> docsim_weights(const Layout& a, const Layout& b) {
  std::vector<double> w(a.size() * b.size());
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b.size(); ++j)
      w[i * b.size() + j] = docsim_weight(a.elements[i], b.elements[j]);
  return w;
}

// Maximum-weight matching of same-class elements, normalized by the longer
// layout. Empty layouts score 0.
inline double docsim(const Layout& a, const Layout& b) {
  if (a.empty() || b.empty()) return 0.0;
  const auto m = max_weight_matching(docsim_weights(a, b), a.size(), b.size());
  return m.total / static_cast<double>(std::max(a.size(), b.size()));
}

// Index of the most similar real layout; ties go to the lowest index.
inline std::size_t best_docsim_match(const Layout& g, const std::vector<Layout>& real) {
  std::size_t best = 0;
  double best_score = -1.0;
  for (std::size_t r = 0; r < real.size(); ++r) {
    const double s = docsim(g, real[r]);
    if (s > best_score) {
      best_score = s;
      best = r;
    }
  }
  return best;
}

inline std::size_t unique_matches(const std::vector<Layout>& gen, const std::vector<Layout>& real) {
  if (gen.empty() || real.empty()) return 0;
  std::set<std::size_t> chosen;
  for (const auto& g : gen) chosen.insert(best_docsim_match(g, real));
  return chosen.size();
}

// ---------------------------------------------------------------------------

struct MetricConfig {
  std::size_t n_proj = 128;
  std::uint64_t seed = 0;
};

struct MetricReport {
  double iou = 0.0;
  double overlap = 0.0;
  double alignment = 0.0;
  double w_class = 0.0;
  double w_bbox = 0.0;
  std::size_t unique_matches = 0;
  std::size_t n_generated = 0;
  std::size_t n_real = 0;
  MetricConfig config;

  nlohmann::json to_json() const {
    return {{"iou", iou},
            {"overlap", overlap},
            {"alignment", alignment},
            {"w_class", w_class},
            {"w_bbox", w_bbox},
            {"unique_matches", unique_matches},
            {"n_generated", n_generated},
            {"n_real", n_real},
            {"config", {{"n_proj", config.n_proj}, {"seed", config.seed}}}};
  }

  std::string table(const std::string& label = "generated") const {
    std::ostringstream os;
    os << std::left << std::setw(12) << "" << std::right << std::setw(10) << "IoU" << std::setw(10)
       << "Overlap" << std::setw(11) << "Alignment" << std::setw(10) << "W class" << std::setw(10)
       << "W bbox" << std::setw(16) << "# unique match" << '\n';
    os << std::left << std::setw(12) << label << std::right << std::fixed << std::setprecision(3)
       << std::setw(10) << iou << std::setw(10) << overlap << std::setw(11) << alignment
       << std::setw(10) << w_class << std::setw(10) << w_bbox << std::setw(16) << unique_matches
       << '\n';
    return os.str();
  }
};

inline MetricReport evaluate_layouts(const std::vector<Layout>& gen, const std::vector<Layout>& real,
                                     const MetricConfig& cfg = {}) {
  if (gen.empty() || real.empty()) throw ValidationError("evaluation needs non-empty generated and real sets");
  MetricReport r;
  r.config = cfg;
  r.n_generated = gen.size();
  r.n_real = real.size();
  r.iou = dataset_iou(gen);
  r.overlap = dataset_overlap(gen);
  r.alignment = dataset_alignment(gen);
  r.w_class = wasserstein_class(gen, real);
  std::mt19937_64 rng(cfg.seed);
  r.w_bbox = wasserstein_bbox(gen, real, cfg.n_proj, rng);
  r.unique_matches = unique_matches(gen, real);
  return r;
}

}  // namespace vtn
