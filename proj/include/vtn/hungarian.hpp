#pragma once

// Kuhn-Munkres assignment with potentials, O(n^3).

#include <algorithm>
#include <cstddef>
#include <limits>
#include <vector>

#include "vtn/errors.hpp"

namespace vtn {

struct Assignment {
  std::vector<int> row_to_col;  // -1 when a row is unassigned
  double total = 0.0;
};

// Minimum-cost perfect assignment on a square cost matrix (row-major, n x n).
inline Assignment hungarian_min_cost(const std::vector<double>& cost, std::size_t n) {
  if (cost.size() != n * n) throw ShapeError("hungarian: cost matrix must be n x n");
  Assignment out;
  out.row_to_col.assign(n, -1);
  if (n == 0) return out;
  const double inf = std::numeric_limits<double>::infinity();
  // 1-based potentials; p[j] is the row matched to column j.
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  for (std::size_t j = 1; j <= n; ++j) {
    if (p[j] != 0) out.row_to_col[p[j] - 1] = static_cast<int>(j - 1);
  }
  for (std::size_t i = 0; i < n; ++i) out.total += cost[i * n + static_cast<std::size_t>(out.row_to_col[i])];
  return out;
}

// Maximum-weight matching on a rows x cols nonnegative weight matrix. Pairs
// with weight zero are reported as unmatched.
inline Assignment max_weight_matching(const std::vector<double>& weight, std::size_t rows,
                                      std::size_t cols) {
  if (weight.size() != rows * cols) throw ShapeError("max_weight_matching: weight matrix shape");
  const std::size_t n = std::max(rows, cols);
  double top = 0.0;
  for (double w : weight) {
    if (w < 0.0) throw ValidationError("max_weight_matching: weights must be nonnegative");
    top = std::max(top, w);
  }
  std::vector<double> cost(n * n, top);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) cost[i * n + j] = top - weight[i * cols + j];
  const Assignment a = hungarian_min_cost(cost, n);
  Assignment out;
  out.row_to_col.assign(rows, -1);
  for (std::size_t i = 0; i < rows; ++i) {
    const int j = a.row_to_col[i];
    if (j < 0 || static_cast<std::size_t>(j) >= cols) continue;
    const double w = weight[i * cols + static_cast<std::size_t>(j)];
    if (w > 0.0) {
      out.row_to_col[i] = j;
      out.total += w;
    }
  }
  return out;
}

}  // namespace vtn
