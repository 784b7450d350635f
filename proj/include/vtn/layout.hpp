#pragma once

// Layout representation, the discretization grid and the token encodings
// consumed by the model.
//
// A layout is an ordered list of class-labelled boxes on a normalized page.
// Boxes are stored as (x_center, y_center, width, height) fractions of the
// page size. Two token encodings exist:
//
//   discrete (decoder targets):  [class: C+2][x: W][y: H][w: W][h: H]
//   continuous (encoder input):  [class: C+2][x, y, w, h]
//
// Class indices C and C+1 are the BOS and EOS sentinels. Sentinels carry
// all-zero coordinate blocks in both encodings.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <tuple>
#include <variant>
#include <vector>

#include "vtn/errors.hpp"

namespace vtn {

inline constexpr double kFitTolerance = 1e-6;

struct BBox {
  double x = 0.0;  // center
  double y = 0.0;  // center
  double w = 0.0;
  double h = 0.0;

  double left() const { return x - w / 2; }
  double right() const { return x + w / 2; }
  double top() const { return y - h / 2; }
  double bottom() const { return y + h / 2; }
  double area() const { return w * h; }

  friend bool operator==(const BBox&, const BBox&) = default;
};

struct Element {
  int class_id = 0;
  BBox bbox;

  friend bool operator==(const Element&, const Element&) = default;
};

struct PageSize {
  int width = 1;
  int height = 1;

  friend bool operator==(const PageSize&, const PageSize&) = default;
};

struct Layout {
  std::vector<Element> elements;
  PageSize page;

  std::size_t size() const { return elements.size(); }
  bool empty() const { return elements.empty(); }

  friend bool operator==(const Layout&, const Layout&) = default;
};

struct GridConfig {
  int H = 32;
  int W = 32;
  int C = 1;

  int bos() const { return C; }
  int eos() const { return C + 1; }
  int class_slots() const { return C + 2; }
  std::size_t discrete_length() const {
    return static_cast<std::size_t>((C + 2) + 2 * (H + W));
  }
  std::size_t continuous_length() const {
    return static_cast<std::size_t>((C + 2) + 4);
  }
  // Sizes of the five one-hot blocks, in token order.
  std::array<int, 5> block_sizes() const { return {C + 2, W, H, W, H}; }

  void validate() const {
    if (H < 2 || W < 2 || C < 1) {
      std::ostringstream os;
      os << "grid requires H >= 2, W >= 2, C >= 1 (got H=" << H << ", W=" << W
         << ", C=" << C << ")";
      throw ValidationError(os.str());
    }
  }

  friend bool operator==(const GridConfig&, const GridConfig&) = default;
};

// Bin indices of one element on the grid.
struct GridIndex {
  int x = 0;
  int y = 0;
  int w = 0;
  int h = 0;

  friend bool operator==(const GridIndex&, const GridIndex&) = default;
};

namespace detail {

inline void check_unit(double v, const char* name, bool allow_zero) {
  const bool ok = std::isfinite(v) && v <= 1.0 && (allow_zero ? v >= 0.0 : v > 0.0);
  if (!ok) {
    std::ostringstream os;
    os << name << "=" << v << " outside " << (allow_zero ? "[0, 1]" : "(0, 1]");
    throw ValidationError(os.str());
  }
}

inline int bin_of(double v, int n) {
  const int idx = static_cast<int>(std::floor(v * n));
  return std::clamp(idx, 0, n - 1);
}

inline double bin_center(int idx, int n) { return (idx + 0.5) / n; }

}  // namespace detail

inline void validate_bbox_ranges(const BBox& b) {
  detail::check_unit(b.x, "x_center", true);
  detail::check_unit(b.y, "y_center", true);
  detail::check_unit(b.w, "width", false);
  detail::check_unit(b.h, "height", false);
}

inline GridIndex discretize_bbox(const BBox& b, const GridConfig& grid) {
  validate_bbox_ranges(b);
  return {detail::bin_of(b.x, grid.W), detail::bin_of(b.y, grid.H),
          detail::bin_of(b.w, grid.W), detail::bin_of(b.h, grid.H)};
}

inline BBox bbox_from_bins(const GridIndex& g, const GridConfig& grid) {
  return {detail::bin_center(g.x, grid.W), detail::bin_center(g.y, grid.H),
          detail::bin_center(g.w, grid.W), detail::bin_center(g.h, grid.H)};
}

// Shrinks a box so it lies inside the unit page. Centers are clamped to
// [0, 1] first; width and height stay strictly positive.
inline BBox clamp_to_page(const BBox& b) {
  if (b.w > 0 && b.h > 0 && b.left() >= 0 && b.top() >= 0 && b.right() <= 1 && b.bottom() <= 1) return b;
  const double x = std::clamp(b.x, 0.0, 1.0);
  const double y = std::clamp(b.y, 0.0, 1.0);
  const double w = std::clamp(b.w, 1e-9, 1.0);
  const double h = std::clamp(b.h, 1e-9, 1.0);
  const double l = std::max(0.0, x - w / 2), r = std::min(1.0, x + w / 2);
  const double t = std::max(0.0, y - h / 2), btm = std::min(1.0, y + h / 2);
  return {(l + r) / 2, (t + btm) / 2, r - l, btm - t};
}

// ---------------------------------------------------------------------------
// Token indices. The model works on indices; the vector forms below exist for
// the external encoding contract.

// One discrete token as block indices; coordinates are -1 for BOS/EOS.
struct TokenIndex {
  int cls = 0;
  int x = -1;
  int y = -1;
  int w = -1;
  int h = -1;

  bool is_sentinel(const GridConfig& g) const { return cls >= g.C; }
  std::array<int, 5> blocks() const { return {cls, x, y, w, h}; }

  friend bool operator==(const TokenIndex&, const TokenIndex&) = default;
};

inline TokenIndex token_index(const Element& e, const GridConfig& grid) {
  if (e.class_id < 0 || e.class_id >= grid.C) {
    throw ValidationError("class_id=" + std::to_string(e.class_id) + " outside [0, " +
                          std::to_string(grid.C) + ")");
  }
  const GridIndex g = discretize_bbox(e.bbox, grid);
  return {e.class_id, g.x, g.y, g.w, g.h};
}

inline TokenIndex bos_index(const GridConfig& grid) { return {grid.bos()}; }
inline TokenIndex eos_index(const GridConfig& grid) { return {grid.eos()}; }

inline std::vector<float> one_hot_token(const TokenIndex& t, const GridConfig& grid) {
  std::vector<float> v(grid.discrete_length(), 0.0f);
  const auto sizes = grid.block_sizes();
  const auto idx = t.blocks();
  std::size_t offset = 0;
  for (std::size_t b = 0; b < 5; ++b) {
    if (idx[b] >= 0) v[offset + static_cast<std::size_t>(idx[b])] = 1.0f;
    offset += static_cast<std::size_t>(sizes[b]);
  }
  return v;
}

inline std::vector<float> encode_output_token(const Element& e, const GridConfig& grid) {
  return one_hot_token(token_index(e, grid), grid);
}

inline std::vector<float> encode_output_bos(const GridConfig& grid) {
  return one_hot_token(bos_index(grid), grid);
}

inline std::vector<float> encode_output_eos(const GridConfig& grid) {
  return one_hot_token(eos_index(grid), grid);
}

inline std::vector<float> encode_input_token(const Element& e, const GridConfig& grid) {
  if (e.class_id < 0 || e.class_id >= grid.C) {
    throw ValidationError("class_id=" + std::to_string(e.class_id) + " outside [0, " +
                          std::to_string(grid.C) + ")");
  }
  validate_bbox_ranges(e.bbox);
  std::vector<float> v(grid.continuous_length(), 0.0f);
  const auto c = static_cast<std::size_t>(grid.class_slots());
  v[static_cast<std::size_t>(e.class_id)] = 1.0f;
  v[c + 0] = static_cast<float>(e.bbox.x);
  v[c + 1] = static_cast<float>(e.bbox.y);
  v[c + 2] = static_cast<float>(e.bbox.w);
  v[c + 3] = static_cast<float>(e.bbox.h);
  return v;
}

inline std::vector<float> encode_input_sentinel(int cls, const GridConfig& grid) {
  std::vector<float> v(grid.continuous_length(), 0.0f);
  v[static_cast<std::size_t>(cls)] = 1.0f;
  return v;
}

struct BosToken {
  friend bool operator==(const BosToken&, const BosToken&) = default;
};
struct EosToken {
  friend bool operator==(const EosToken&, const EosToken&) = default;
};
using DecodedToken = std::variant<Element, BosToken, EosToken>;

namespace detail {

// Index of the single 1 in a block, -1 if the block is all zero; throws when
// the block is not a valid one-hot or zero block.
inline int one_hot_position(std::span<const float> block, const char* name) {
  int pos = -1;
  for (std::size_t i = 0; i < block.size(); ++i) {
    const float v = block[i];
    if (v == 0.0f) continue;
    if (v != 1.0f || pos >= 0) {
      throw StructuralError(std::string("block '") + name + "' is not one-hot");
    }
    pos = static_cast<int>(i);
  }
  return pos;
}

}  // namespace detail

inline DecodedToken decode_token_index(const TokenIndex& t, const GridConfig& grid) {
  if (t.cls == grid.bos()) return BosToken{};
  if (t.cls == grid.eos()) return EosToken{};
  if (t.cls < 0 || t.cls > grid.eos()) throw StructuralError("class index out of range");
  return Element{t.cls, bbox_from_bins({t.x, t.y, t.w, t.h}, grid)};
}

// Inverse of encode_output_token: coordinates are reconstructed at bin centers.
inline DecodedToken decode_token(std::span<const float> v, const GridConfig& grid) {
  if (v.size() != grid.discrete_length()) {
    throw StructuralError("token length " + std::to_string(v.size()) + " != expected " +
                          std::to_string(grid.discrete_length()));
  }
  static constexpr const char* kNames[5] = {"class", "x", "y", "w", "h"};
  const auto sizes = grid.block_sizes();
  std::array<int, 5> idx{};
  std::size_t offset = 0;
  for (std::size_t b = 0; b < 5; ++b) {
    idx[b] = detail::one_hot_position(v.subspan(offset, static_cast<std::size_t>(sizes[b])),
                                      kNames[b]);
    offset += static_cast<std::size_t>(sizes[b]);
  }
  if (idx[0] < 0) throw StructuralError("class block has no active entry");
  const bool sentinel = idx[0] >= grid.C;
  for (std::size_t b = 1; b < 5; ++b) {
    if (sentinel && idx[b] >= 0) {
      throw StructuralError(std::string("sentinel token has non-zero '") + kNames[b] + "' block");
    }
    if (!sentinel && idx[b] < 0) {
      throw StructuralError(std::string("block '") + kNames[b] + "' has no active entry");
    }
  }
  return decode_token_index({idx[0], idx[1], idx[2], idx[3], idx[4]}, grid);
}

// ---------------------------------------------------------------------------
// Reading order

inline std::pair<int, int> reading_key(const Element& e, const GridConfig& grid) {
  const double top = std::clamp(e.bbox.top(), 0.0, 1.0);
  const double left = std::clamp(e.bbox.left(), 0.0, 1.0);
  return {detail::bin_of(top, grid.H), detail::bin_of(left, grid.W)};
}

// Stable sort by the discretized top-left corner (row first, then column).
inline Layout sort_layout(Layout layout, const GridConfig& grid) {
  // Ties within a bin fall back to exact geometry so the order does not
  // depend on the input permutation.
  std::sort(layout.elements.begin(), layout.elements.end(), [&](const Element& a, const Element& b) {
    const auto ka = reading_key(a, grid), kb = reading_key(b, grid);
    if (ka != kb) return ka < kb;
    return std::tuple(a.bbox.top(), a.bbox.left(), a.class_id, a.bbox.w, a.bbox.h) <
           std::tuple(b.bbox.top(), b.bbox.left(), b.class_id, b.bbox.w, b.bbox.h);
  });
  return layout;
}

// Every violated Layout invariant, empty when the layout is valid.
inline std::vector<std::string> layout_violations(const Layout& layout, const GridConfig& grid,
                                                  std::size_t max_elements) {
  std::vector<std::string> out;
  if (layout.size() > max_elements) {
    out.push_back("layout has " + std::to_string(layout.size()) + " elements, max " +
                  std::to_string(max_elements));
  }
  if (layout.page.width <= 0 || layout.page.height <= 0) out.push_back("page size not positive");
  for (std::size_t i = 0; i < layout.size(); ++i) {
    const Element& e = layout.elements[i];
    const std::string tag = "element " + std::to_string(i) + ": ";
    if (e.class_id < 0 || e.class_id >= grid.C) out.push_back(tag + "class out of range");
    try {
      validate_bbox_ranges(e.bbox);
    } catch (const ValidationError& err) {
      out.push_back(tag + err.what());
      continue;
    }
    const BBox& b = e.bbox;
    if (b.left() < -kFitTolerance || b.right() > 1 + kFitTolerance ||
        b.top() < -kFitTolerance || b.bottom() > 1 + kFitTolerance) {
      out.push_back(tag + "box extends past the page");
    }
    if (i > 0 && reading_key(e, grid) < reading_key(layout.elements[i - 1], grid)) {
      out.push_back(tag + "not in reading order");
    }
  }
  return out;
}

inline bool is_valid_layout(const Layout& layout, const GridConfig& grid,
                            std::size_t max_elements) {
  return layout_violations(layout, grid, max_elements).empty();
}

// Token index sequences used for training.
inline std::vector<TokenIndex> layout_token_indices(const Layout& layout, const GridConfig& grid) {
  std::vector<TokenIndex> out;
  out.reserve(layout.size());
  for (const auto& e : layout.elements) out.push_back(token_index(e, grid));
  return out;
}

}  // namespace vtn
