#pragma once

// Dataset ingestion (COCO-style JSON), the line-delimited layout format,
// the empirical length distribution and a small synthetic toy corpus.

#include <algorithm>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <functional>
#include <istream>
#include <map>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "vtn/errors.hpp"
#include "vtn/layout.hpp"

namespace vtn {

struct IngestFilters {
  // Boxes whose area is <= this fraction of the image area are dropped.
  double min_area_fraction = 0.0;
  bool drop_crowd = true;
  std::size_t max_elements = 100;
  bool keep_empty = false;
  // Grid used for the reading-order key.
  int sort_grid_h = 32;
  int sort_grid_w = 32;
};

struct IngestSummary {
  std::size_t images = 0;
  std::size_t annotations = 0;
  std::size_t kept_layouts = 0;
  std::size_t kept_elements = 0;
  std::size_t dropped_small = 0;
  std::size_t dropped_crowd = 0;
  std::size_t dropped_degenerate = 0;
  std::size_t dropped_too_many = 0;
  std::size_t dropped_empty = 0;
};

struct Dataset {
  std::vector<Layout> layouts;
  std::vector<std::string> class_names;
  IngestSummary summary;

  int num_classes() const { return static_cast<int>(class_names.size()); }
};

using DropLogger = std::function<void(const std::string&)>;

// Builds layouts from an already-parsed COCO document. Category ids are mapped
// to contiguous class indices in ascending id order.
inline Dataset ingest_coco_json(const nlohmann::json& doc, const IngestFilters& filters,
                                const DropLogger& log = {}) {
  if (!doc.is_object()) throw StructuralError("COCO document must be a JSON object");
  for (const char* key : {"images", "annotations", "categories"}) {
    if (!doc.contains(key) || !doc.at(key).is_array()) {
      throw StructuralError(std::string("COCO document lacks array '") + key + "'");
    }
  }
  auto note = [&](const std::string& msg) {
    if (log) log(msg);
  };

  Dataset out;
  std::map<long long, std::string> cats;
  for (const auto& c : doc.at("categories")) {
    cats[c.at("id").get<long long>()] = c.value("name", std::string{});
  }
  std::unordered_map<long long, int> class_of;
  for (const auto& [id, name] : cats) {
    class_of[id] = static_cast<int>(out.class_names.size());
    out.class_names.push_back(name.empty() ? std::to_string(id) : name);
  }
  if (out.class_names.empty()) throw ValidationError("COCO document defines no categories");
  GridConfig sort_grid{filters.sort_grid_h, filters.sort_grid_w, out.num_classes()};
  sort_grid.validate();

  struct Pending {
    PageSize page;
    std::vector<Element> elements;
  };
  std::map<long long, Pending> images;
  for (const auto& im : doc.at("images")) {
    const int w = im.at("width").get<int>();
    const int h = im.at("height").get<int>();
    const long long id = im.at("id").get<long long>();
    if (w <= 0 || h <= 0) {
      throw ValidationError("image " + std::to_string(id) + " has non-positive size");
    }
    images[id] = Pending{{w, h}, {}};
  }
  out.summary.images = images.size();

  for (const auto& ann : doc.at("annotations")) {
    ++out.summary.annotations;
    const long long image_id = ann.at("image_id").get<long long>();
    const long long cat = ann.at("category_id").get<long long>();
    auto it = images.find(image_id);
    if (it == images.end()) {
      throw ValidationError("annotation references unknown image " + std::to_string(image_id));
    }
    auto cls = class_of.find(cat);
    if (cls == class_of.end()) {
      throw ValidationError("annotation references unknown category " + std::to_string(cat));
    }
    if (filters.drop_crowd && ann.value("iscrowd", 0) != 0) {
      ++out.summary.dropped_crowd;
      note("image " + std::to_string(image_id) + ": dropped crowd annotation");
      continue;
    }
    const auto& b = ann.at("bbox");
    if (!b.is_array() || b.size() != 4) {
      throw StructuralError("annotation bbox must be [x, y, w, h]");
    }
    const double px = b[0].get<double>(), py = b[1].get<double>();
    const double pw = b[2].get<double>(), ph = b[3].get<double>();
    const PageSize page = it->second.page;
    const double area_fraction = (pw * ph) / (static_cast<double>(page.width) * page.height);
    if (area_fraction <= filters.min_area_fraction) {
      ++out.summary.dropped_small;
      note("image " + std::to_string(image_id) + ": dropped small box");
      continue;
    }
    BBox box{(px + pw / 2) / page.width, (py + ph / 2) / page.height, pw / page.width,
             ph / page.height};
    if (!(box.w > 0 && box.h > 0)) {
      ++out.summary.dropped_degenerate;
      note("image " + std::to_string(image_id) + ": dropped degenerate box");
      continue;
    }
    it->second.elements.push_back({cls->second, clamp_to_page(box)});
  }

  for (auto& [id, pending] : images) {
    if (pending.elements.size() > filters.max_elements) {
      ++out.summary.dropped_too_many;
      note("image " + std::to_string(id) + ": dropped layout with " +
           std::to_string(pending.elements.size()) + " elements");
      continue;
    }
    if (pending.elements.empty() && !filters.keep_empty) {
      ++out.summary.dropped_empty;
      continue;
    }
    Layout layout{std::move(pending.elements), pending.page};
    out.summary.kept_elements += layout.size();
    out.layouts.push_back(sort_layout(std::move(layout), sort_grid));
  }
  out.summary.kept_layouts = out.layouts.size();
  return out;
}

inline Dataset ingest_coco(const std::filesystem::path& path, const IngestFilters& filters,
                           const DropLogger& log = {}) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open dataset file '" + path.string() + "'");
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::parse_error& e) {
    throw StructuralError("malformed JSON in '" + path.string() + "': " + e.what());
  }
  try {
    return ingest_coco_json(doc, filters, log);
  } catch (const nlohmann::json::exception& e) {
    throw StructuralError("unexpected COCO structure in '" + path.string() + "': " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Line-delimited layout format:
//   {"page":[w,h],"elements":[{"c":int,"b":[x,y,w,h]}, ...]}

inline nlohmann::json layout_to_json(const Layout& layout) {
  nlohmann::json elems = nlohmann::json::array();
  for (const auto& e : layout.elements) {
    elems.push_back({{"c", e.class_id}, {"b", {e.bbox.x, e.bbox.y, e.bbox.w, e.bbox.h}}});
  }
  return {{"page", {layout.page.width, layout.page.height}}, {"elements", std::move(elems)}};
}

inline Layout layout_from_json(const nlohmann::json& j) {
  try {
    Layout out;
    const auto& page = j.at("page");
    out.page = {page.at(0).get<int>(), page.at(1).get<int>()};
    for (const auto& e : j.at("elements")) {
      const auto& b = e.at("b");
      if (b.size() != 4) throw StructuralError("element box must have 4 entries");
      out.elements.push_back({e.at("c").get<int>(),
                              {b[0].get<double>(), b[1].get<double>(), b[2].get<double>(),
                               b[3].get<double>()}});
    }
    return out;
  } catch (const nlohmann::json::exception& e) {
    throw StructuralError(std::string("malformed layout record: ") + e.what());
  }
}

inline void write_layouts_jsonl(std::ostream& os, const std::vector<Layout>& layouts) {
  for (const auto& l : layouts) os << layout_to_json(l).dump() << '\n';
}

inline void write_layouts_jsonl(const std::filesystem::path& path,
                                const std::vector<Layout>& layouts) {
  std::ofstream os(path);
  if (!os) throw ValidationError("cannot write '" + path.string() + "'");
  write_layouts_jsonl(os, layouts);
}

inline std::vector<Layout> read_layouts_jsonl(std::istream& is) {
  std::vector<Layout> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw StructuralError("line " + std::to_string(lineno) + ": " + e.what());
    }
    out.push_back(layout_from_json(j));
  }
  return out;
}

inline std::vector<Layout> read_layouts_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open layout file '" + path.string() + "'");
  return read_layouts_jsonl(in);
}

// ---------------------------------------------------------------------------

// Normalized histogram of layout lengths over s = 1..max_elements.
class LengthDistribution {
 public:
  LengthDistribution() = default;

  static LengthDistribution from_counts(std::vector<std::size_t> counts) {
    // counts[s] for s = 0..max; counts[0] is ignored.
    LengthDistribution d;
    if (counts.empty()) throw ValidationError("length distribution needs at least one length");
    counts[0] = 0;
    std::size_t total = 0;
    for (auto c : counts) total += c;
    if (total == 0) throw ValidationError("length distribution has no mass");
    d.counts_ = std::move(counts);
    d.probs_.resize(d.counts_.size());
    for (std::size_t s = 0; s < d.counts_.size(); ++s) {
      d.probs_[s] = static_cast<double>(d.counts_[s]) / static_cast<double>(total);
    }
    return d;
  }

  static LengthDistribution from_probabilities(std::vector<double> probs) {
    LengthDistribution d;
    if (probs.empty()) throw ValidationError("length distribution needs at least one length");
    probs[0] = 0.0;
    double total = 0.0;
    for (double p : probs) {
      if (!(p >= 0.0)) throw ValidationError("length probabilities must be nonnegative");
      total += p;
    }
    if (total <= 0.0) throw ValidationError("length distribution has no mass");
    for (double& p : probs) p /= total;
    d.probs_ = std::move(probs);
    d.counts_.assign(d.probs_.size(), 0);
    return d;
  }

  bool empty() const { return probs_.empty(); }
  std::size_t max_length() const { return probs_.empty() ? 0 : probs_.size() - 1; }
  double p(std::size_t s) const { return s < probs_.size() ? probs_[s] : 0.0; }
  const std::vector<double>& probabilities() const { return probs_; }
  const std::vector<std::size_t>& counts() const { return counts_; }
  bool in_support(std::size_t s) const { return p(s) > 0.0; }

  template <class Rng>
  std::size_t sample(Rng& rng) const {
    if (probs_.empty()) throw ValidationError("empty length distribution");
    std::discrete_distribution<std::size_t> dist(probs_.begin(), probs_.end());
    return dist(rng);
  }

 private:
  std::vector<double> probs_;  // index = length
  std::vector<std::size_t> counts_;
};

inline LengthDistribution empirical_length_distribution(const std::vector<Layout>& layouts,
                                                        std::size_t max_elements = 0) {
  if (layouts.empty()) throw ValidationError("empirical length distribution of an empty dataset");
  std::size_t longest = max_elements;
  for (const auto& l : layouts) longest = std::max(longest, l.size());
  std::vector<std::size_t> counts(longest + 1, 0);
  for (const auto& l : layouts) ++counts[l.size()];
  return LengthDistribution::from_counts(std::move(counts));
}

inline double total_variation(std::span<const double> p, std::span<const double> q) {
  const std::size_t n = std::max(p.size(), q.size());
  double tv = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double a = i < p.size() ? p[i] : 0.0;
    const double b = i < q.size() ? q[i] : 0.0;
    tv += std::abs(a - b);
  }
  return tv / 2;
}

// ---------------------------------------------------------------------------

inline const std::vector<std::string>& toy_class_names() {
  static const std::vector<std::string> names{"text", "title", "figure", "list", "table"};
  return names;
}

// Synthetic two-column document layouts: each column holds a stack of 2-3
// non-overlapping blocks. Deterministic for a given seed.
inline std::vector<Layout> make_two_column_toy(std::size_t count, std::uint64_t seed,
                                               const GridConfig& grid) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> n_blocks(2, 3);
  std::uniform_int_distribution<int> cls(0, static_cast<int>(toy_class_names().size()) - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double col_w = 0.42;
  const std::array<double, 2> col_x{0.05 + col_w / 2, 0.53 + col_w / 2};

  std::vector<Layout> out;
  while (out.size() < count) {
    Layout layout;
    layout.page = {612, 792};
    for (double cx : col_x) {
      const int n = n_blocks(rng);
      // Split [0.05, 0.95] into n slots separated by fixed gaps.
      std::vector<double> weights(static_cast<std::size_t>(n));
      for (auto& w : weights) w = 0.5 + unit(rng);
      const double gap = 0.04;
      const double usable = 0.9 - gap * (n - 1);
      double total = 0.0;
      for (double w : weights) total += w;
      double top = 0.05;
      for (double w : weights) {
        const double h = usable * w / total;
        layout.elements.push_back({cls(rng) % grid.C, {cx, top + h / 2, col_w, h}});
        top += h + gap;
      }
    }
    layout = sort_layout(std::move(layout), grid);
    const bool duplicate = std::find(out.begin(), out.end(), layout) != out.end();
    if (!duplicate) out.push_back(std::move(layout));
  }
  return out;
}

}  // namespace vtn
