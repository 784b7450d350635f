#pragma once

// Minimal reverse-mode automatic differentiation over rank-2 tensors.
//
// Every tensor is a [rows, cols] matrix; vectors are [1, n] and scalars are
// [1, 1]. Operations record a closure that propagates the output gradient to
// their inputs. backward() runs those closures in reverse topological order.
// The scalar type is a template parameter so that the model can run in float
// while gradient checks run in double.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "vtn/errors.hpp"

namespace vtn::nn {

namespace detail {
inline thread_local bool grad_enabled = true;
}  // namespace detail

// Disables graph recording in the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_enabled; }

template <class T>
struct Node {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<T> value;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::size_t size() const { return rows * cols; }
  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

template <class T>
class Tensor {
 public:
  using Scalar = T;

  Tensor() = default;

  Tensor(std::size_t rows, std::size_t cols, T fill = T(0), bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    node_->rows = rows;
    node_->cols = cols;
    node_->value.assign(rows * cols, fill);
    node_->requires_grad = requires_grad;
  }

  Tensor(std::size_t rows, std::size_t cols, std::vector<T> values, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    if (values.size() != rows * cols) {
      throw ShapeError("tensor value count " + std::to_string(values.size()) +
                       " does not match shape [" + std::to_string(rows) + ", " +
                       std::to_string(cols) + "]");
    }
    node_->rows = rows;
    node_->cols = cols;
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static Tensor scalar(T v, bool requires_grad = false) {
    return Tensor(1, 1, std::vector<T>{v}, requires_grad);
  }
  static Tensor row(std::vector<T> values, bool requires_grad = false) {
    const std::size_t n = values.size();
    return Tensor(1, n, std::move(values), requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  std::size_t rows() const { return node_->rows; }
  std::size_t cols() const { return node_->cols; }
  std::size_t size() const { return node_->size(); }
  std::vector<std::size_t> shape() const { return {node_->rows, node_->cols}; }

  // The span aliases the node owned by this handle; asking a temporary for
  // it would dangle once the temporary dies (e.g. in a range-for).
  std::span<T> values() & { return node_->value; }
  std::span<const T> values() const& { return node_->value; }
  std::span<const T> values() && = delete;
  T& at(std::size_t r, std::size_t c) { return node_->value[r * node_->cols + c]; }
  T at(std::size_t r, std::size_t c) const { return node_->value[r * node_->cols + c]; }
  T item() const {
    if (size() != 1) throw ShapeError("item() on a non-scalar tensor");
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }
  bool has_grad() const { return !node_->grad.empty(); }
  // Gradient view; zeros when no gradient has been accumulated.
  std::span<const T> grad() const { return node_->grad_buffer(); }
  std::span<T> mutable_grad() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad.clear(); }

  const std::shared_ptr<Node<T>>& node() const { return node_; }

  // Fresh leaf sharing nothing with the graph.
  Tensor detach() const { return Tensor(rows(), cols(), node_->value, false); }

  std::string shape_string() const {
    return "[" + std::to_string(rows()) + ", " + std::to_string(cols()) + "]";
  }

 private:
  std::shared_ptr<Node<T>> node_;
};

using Tensorf = Tensor<float>;
using Tensord = Tensor<double>;

namespace detail {

template <class T>
Tensor<T> make_result(std::size_t rows, std::size_t cols, std::vector<T> values,
                      std::vector<std::shared_ptr<Node<T>>> parents,
                      std::function<void(Node<T>&)> backward) {
  Tensor<T> out(rows, cols, std::move(values));
  bool needs = false;
  if (detail::grad_enabled) {
    for (const auto& p : parents) needs = needs || p->requires_grad;
  }
  if (needs) {
    auto& n = *out.node();
    n.requires_grad = true;
    n.parents = std::move(parents);
    n.backward = std::move(backward);
  }
  return out;
}

inline void require(bool cond, const std::string& what) {
  if (!cond) throw ShapeError(what);
}

// C[m,n] += A[m,k] * B[k,n]
template <class T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* ci = c + i * n;
    const T* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = ai[p];
      const T* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// C[m,n] += A[m,k] * B[n,k]^T
template <class T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* ai = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const T* bj = b + j * k;
      T acc = T(0);
      for (std::size_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
      c[i * n + j] += acc;
    }
  }
}

// C[k,n] += A[m,k]^T * B[m,n]
template <class T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* ai = a + i * k;
    const T* bi = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = ai[p];
      T* cp = c + p * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] += av * bi[j];
    }
  }
}

}  // namespace detail

// Runs reverse-mode accumulation from a scalar output.
template <class T>
void backward(const Tensor<T>& root) {
  if (root.size() != 1) throw ShapeError("backward() requires a scalar output");
  if (!root.requires_grad()) return;
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  // Iterative post-order DFS.
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.node().get(), 0}};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root.node()->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>& n = **it;
    if (n.backward && !n.grad.empty()) n.backward(n);
  }
}

// ---------------------------------------------------------------------------
// Linear algebra

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.cols() == b.rows(),
                  "matmul shape mismatch " + a.shape_string() + " x " + b.shape_string());
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<T> out(m * n, T(0));
  detail::gemm_nn(a.values().data(), b.values().data(), out.data(), m, k, n);
  auto an = a.node(), bn = b.node();
  return detail::make_result<T>(m, n, std::move(out), {an, bn}, [an, bn, m, k, n](Node<T>& self) {
    if (an->requires_grad)
      detail::gemm_nt(self.grad.data(), bn->value.data(), an->grad_buffer().data(), m, n, k);
    if (bn->requires_grad)
      detail::gemm_tn(an->value.data(), self.grad.data(), bn->grad_buffer().data(), m, k, n);
  });
}

// a * b^T
template <class T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.cols() == b.cols(),
                  "matmul_nt shape mismatch " + a.shape_string() + " x " + b.shape_string() + "^T");
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  std::vector<T> out(m * n, T(0));
  detail::gemm_nt(a.values().data(), b.values().data(), out.data(), m, k, n);
  auto an = a.node(), bn = b.node();
  return detail::make_result<T>(m, n, std::move(out), {an, bn}, [an, bn, m, k, n](Node<T>& self) {
    // dA = dY * B, dB = dY^T * A
    if (an->requires_grad)
      detail::gemm_nn(self.grad.data(), bn->value.data(), an->grad_buffer().data(), m, n, k);
    if (bn->requires_grad)
      detail::gemm_tn(self.grad.data(), an->value.data(), bn->grad_buffer().data(), m, n, k);
  });
}

template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<T> out(m * n);
  const auto v = a.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = v[i * n + j];
  auto an = a.node();
  return detail::make_result<T>(n, m, std::move(out), {an}, [an, m, n](Node<T>& self) {
    auto& g = an->grad_buffer();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[j * m + i];
  });
}

// y = x W + b, with b a [1, out] row broadcast over rows.
template <class T>
Tensor<T> dense(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  detail::require(x.cols() == weight.rows(),
                  "dense shape mismatch " + x.shape_string() + " x " + weight.shape_string());
  detail::require(bias.rows() == 1 && bias.cols() == weight.cols(),
                  "dense bias shape " + bias.shape_string() + " does not match output width " +
                      std::to_string(weight.cols()));
  const std::size_t m = x.rows(), k = x.cols(), n = weight.cols();
  std::vector<T> out(m * n);
  const auto b = bias.values();
  for (std::size_t i = 0; i < m; ++i) std::copy(b.begin(), b.end(), out.begin() + i * n);
  detail::gemm_nn(x.values().data(), weight.values().data(), out.data(), m, k, n);
  auto xn = x.node(), wn = weight.node(), bn = bias.node();
  return detail::make_result<T>(
      m, n, std::move(out), {xn, wn, bn}, [xn, wn, bn, m, k, n](Node<T>& self) {
        if (xn->requires_grad)
          detail::gemm_nt(self.grad.data(), wn->value.data(), xn->grad_buffer().data(), m, n, k);
        if (wn->requires_grad)
          detail::gemm_tn(xn->value.data(), self.grad.data(), wn->grad_buffer().data(), m, k, n);
        if (bn->requires_grad) {
          auto& g = bn->grad_buffer();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j];
        }
      });
}

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.rows() == b.rows() && a.cols() == b.cols(),
                  "add shape mismatch " + a.shape_string() + " + " + b.shape_string());
  std::vector<T> out(a.size());
  const auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  auto an = a.node(), bn = b.node();
  return detail::make_result<T>(a.rows(), a.cols(), std::move(out), {an, bn},
                                [an, bn](Node<T>& self) {
                                  for (auto* p : {an.get(), bn.get()}) {
                                    if (!p->requires_grad) continue;
                                    auto& g = p->grad_buffer();
                                    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                                  }
                                });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.rows() == b.rows() && a.cols() == b.cols(),
                  "sub shape mismatch " + a.shape_string() + " - " + b.shape_string());
  std::vector<T> out(a.size());
  const auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  auto an = a.node(), bn = b.node();
  return detail::make_result<T>(a.rows(), a.cols(), std::move(out), {an, bn},
                                [an, bn](Node<T>& self) {
                                  if (an->requires_grad) {
                                    auto& g = an->grad_buffer();
                                    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                                  }
                                  if (bn->requires_grad) {
                                    auto& g = bn->grad_buffer();
                                    for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
                                  }
                                });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.rows() == b.rows() && a.cols() == b.cols(),
                  "mul shape mismatch " + a.shape_string() + " * " + b.shape_string());
  std::vector<T> out(a.size());
  const auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  auto an = a.node(), bn = b.node();
  return detail::make_result<T>(a.rows(), a.cols(), std::move(out), {an, bn},
                                [an, bn](Node<T>& self) {
                                  if (an->requires_grad) {
                                    auto& g = an->grad_buffer();
                                    for (std::size_t i = 0; i < g.size(); ++i)
                                      g[i] += self.grad[i] * bn->value[i];
                                  }
                                  if (bn->requires_grad) {
                                    auto& g = bn->grad_buffer();
                                    for (std::size_t i = 0; i < g.size(); ++i)
                                      g[i] += self.grad[i] * an->value[i];
                                  }
                                });
}

// Adds a [1, n] row to every row of a.
template <class T>
Tensor<T> add_row(const Tensor<T>& a, const Tensor<T>& row) {
  detail::require(row.rows() == 1 && row.cols() == a.cols(),
                  "add_row shape mismatch " + a.shape_string() + " + " + row.shape_string());
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<T> out(a.size());
  const auto av = a.values(), rv = row.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = av[i * n + j] + rv[j];
  auto an = a.node(), rn = row.node();
  return detail::make_result<T>(m, n, std::move(out), {an, rn}, [an, rn, m, n](Node<T>& self) {
    if (an->requires_grad) {
      auto& g = an->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (rn->requires_grad) {
      auto& g = rn->grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j];
    }
  });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  std::vector<T> out(a.size());
  const auto av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * s;
  auto an = a.node();
  return detail::make_result<T>(a.rows(), a.cols(), std::move(out), {an}, [an, s](Node<T>& self) {
    auto& g = an->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * s;
  });
}

namespace detail {

// Applies f elementwise; df(x, y) gives dy/dx from input and output.
template <class T, class F, class DF>
Tensor<T> unary(const Tensor<T>& a, F f, DF df) {
  std::vector<T> out(a.size());
  const auto av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i]);
  auto an = a.node();
  return make_result<T>(a.rows(), a.cols(), std::move(out), {an}, [an, df](Node<T>& self) {
    auto& g = an->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * df(an->value[i], self.value[i]);
  });
}

}  // namespace detail

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
  return detail::unary(
      a, [](T x) { return x > T(0) ? x : T(0); }, [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return detail::unary(
      a, [](T x) { return T(1) / (T(1) + std::exp(-x)); }, [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Tensor<T> tanh(const Tensor<T>& a) {
  return detail::unary(
      a, [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; });
}

template <class T>
Tensor<T> exp(const Tensor<T>& a) {
  return detail::unary(
      a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

// ---------------------------------------------------------------------------
// Reductions and structure

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  T s = T(0);
  for (T v : a.values()) s += v;
  auto an = a.node();
  return detail::make_result<T>(1, 1, std::vector<T>{s}, {an}, [an](Node<T>& self) {
    auto& g = an->grad_buffer();
    for (auto& gi : g) gi += self.grad[0];
  });
}

template <class T>
Tensor<T> add_all(const std::vector<Tensor<T>>& parts) {
  detail::require(!parts.empty(), "add_all of nothing");
  const std::size_t m = parts[0].rows(), n = parts[0].cols();
  std::vector<T> out(m * n, T(0));
  std::vector<std::shared_ptr<Node<T>>> parents;
  for (const auto& p : parts) {
    detail::require(p.rows() == m && p.cols() == n, "add_all shape mismatch");
    const auto v = p.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += v[i];
    parents.push_back(p.node());
  }
  auto ps = parents;
  return detail::make_result<T>(m, n, std::move(out), std::move(parents), [ps](Node<T>& self) {
    for (const auto& p : ps) {
      if (!p->requires_grad) continue;
      auto& g = p->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <class T>
Tensor<T> slice_cols(const Tensor<T>& a, std::size_t start, std::size_t len) {
  detail::require(start + len <= a.cols(), "slice_cols out of range");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<T> out(m * len);
  const auto v = a.values();
  for (std::size_t i = 0; i < m; ++i)
    std::copy_n(v.begin() + i * n + start, len, out.begin() + i * len);
  auto an = a.node();
  return detail::make_result<T>(m, len, std::move(out), {an}, [an, m, n, start, len](Node<T>& self) {
    auto& g = an->grad_buffer();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < len; ++j) g[i * n + start + j] += self.grad[i * len + j];
  });
}

template <class T>
Tensor<T> slice_rows(const Tensor<T>& a, std::size_t start, std::size_t len) {
  detail::require(start + len <= a.rows(), "slice_rows out of range");
  const std::size_t n = a.cols();
  const auto v = a.values();
  std::vector<T> out(v.begin() + start * n, v.begin() + (start + len) * n);
  auto an = a.node();
  return detail::make_result<T>(len, n, std::move(out), {an}, [an, n, start](Node<T>& self) {
    auto& g = an->grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[start * n + i] += self.grad[i];
  });
}

template <class T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  detail::require(!parts.empty(), "concat_cols of nothing");
  const std::size_t m = parts[0].rows();
  std::size_t n = 0;
  std::vector<std::shared_ptr<Node<T>>> parents;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    detail::require(p.rows() == m, "concat_cols row mismatch");
    n += p.cols();
    widths.push_back(p.cols());
    parents.push_back(p.node());
  }
  std::vector<T> out(m * n);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const auto v = p.values();
    for (std::size_t i = 0; i < m; ++i)
      std::copy_n(v.begin() + i * p.cols(), p.cols(), out.begin() + i * n + offset);
    offset += p.cols();
  }
  auto ps = parents;
  return detail::make_result<T>(m, n, std::move(out), std::move(parents),
                                [ps, widths, m, n](Node<T>& self) {
                                  std::size_t off = 0;
                                  for (std::size_t k = 0; k < ps.size(); ++k) {
                                    const std::size_t w = widths[k];
                                    if (ps[k]->requires_grad) {
                                      auto& g = ps[k]->grad_buffer();
                                      for (std::size_t i = 0; i < m; ++i)
                                        for (std::size_t j = 0; j < w; ++j)
                                          g[i * w + j] += self.grad[i * n + off + j];
                                    }
                                    off += w;
                                  }
                                });
}

template <class T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  detail::require(!parts.empty(), "concat_rows of nothing");
  const std::size_t n = parts[0].cols();
  std::size_t m = 0;
  std::vector<std::shared_ptr<Node<T>>> parents;
  std::vector<T> out;
  for (const auto& p : parts) {
    detail::require(p.cols() == n, "concat_rows column mismatch");
    m += p.rows();
    parents.push_back(p.node());
    out.insert(out.end(), p.values().begin(), p.values().end());
  }
  auto ps = parents;
  return detail::make_result<T>(m, n, std::move(out), std::move(parents), [ps](Node<T>& self) {
    std::size_t off = 0;
    for (const auto& p : ps) {
      const std::size_t len = p->value.size();
      if (p->requires_grad) {
        auto& g = p->grad_buffer();
        for (std::size_t i = 0; i < len; ++i) g[i] += self.grad[off + i];
      }
      off += len;
    }
  });
}

// ---------------------------------------------------------------------------
// Normalization

namespace detail {

template <class T>
void softmax_row(const T* x, T* y, std::size_t n) {
  T mx = -std::numeric_limits<T>::infinity();
  for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, x[j]);
  T s = T(0);
  for (std::size_t j = 0; j < n; ++j) {
    y[j] = std::exp(x[j] - mx);
    s += y[j];
  }
  for (std::size_t j = 0; j < n; ++j) y[j] /= s;
}

template <class T>
void check_finite_or_neg_inf(std::span<const T> v, const char* op) {
  for (T x : v) {
    if (std::isnan(x) || x == std::numeric_limits<T>::infinity()) {
      throw ValidationError(std::string(op) + ": non-finite input");
    }
  }
}

}  // namespace detail

// Softmax along the last axis (axis = 1 or -1) or down columns (axis = 0).
// Entries equal to -inf are allowed and receive probability zero.
template <class T>
Tensor<T> softmax(const Tensor<T>& a, int axis = -1) {
  if (axis == 0) return transpose(softmax(transpose(a), 1));
  detail::require(axis == 1 || axis == -1, "softmax axis must be 0, 1 or -1");
  detail::check_finite_or_neg_inf<T>(a.values(), "softmax");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<T> out(m * n);
  for (std::size_t i = 0; i < m; ++i) detail::softmax_row(a.values().data() + i * n, out.data() + i * n, n);
  auto an = a.node();
  return detail::make_result<T>(m, n, std::move(out), {an}, [an, m, n](Node<T>& self) {
    auto& g = an->grad_buffer();
    for (std::size_t i = 0; i < m; ++i) {
      const T* y = self.value.data() + i * n;
      const T* dy = self.grad.data() + i * n;
      T dot = T(0);
      for (std::size_t j = 0; j < n; ++j) dot += y[j] * dy[j];
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += y[j] * (dy[j] - dot);
    }
  });
}

// Row-wise layer normalization with per-column gain and bias ([1, n] rows).
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     T eps = T(1e-5)) {
  const std::size_t m = x.rows(), n = x.cols();
  detail::require(n >= 1, "layer_norm over an empty axis");
  detail::require(gain.rows() == 1 && gain.cols() == n && bias.rows() == 1 && bias.cols() == n,
                  "layer_norm gain/bias shape mismatch");
  std::vector<T> out(m * n), xhat(m * n), inv_std(m);
  const auto xv = x.values(), gv = gain.values(), bv = bias.values();
  for (std::size_t i = 0; i < m; ++i) {
    const T* r = xv.data() + i * n;
    T mean = T(0);
    for (std::size_t j = 0; j < n; ++j) mean += r[j];
    mean /= T(n);
    T var = T(0);
    for (std::size_t j = 0; j < n; ++j) var += (r[j] - mean) * (r[j] - mean);
    var /= T(n);
    inv_std[i] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (r[j] - mean) * inv_std[i];
      out[i * n + j] = xhat[i * n + j] * gv[j] + bv[j];
    }
  }
  auto xn = x.node(), gn = gain.node(), bn = bias.node();
  return detail::make_result<T>(
      m, n, std::move(out), {xn, gn, bn},
      [xn, gn, bn, m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
        if (gn->requires_grad || bn->requires_grad) {
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) {
              const T dy = self.grad[i * n + j];
              if (gn->requires_grad) gn->grad_buffer()[j] += dy * xhat[i * n + j];
              if (bn->requires_grad) bn->grad_buffer()[j] += dy;
            }
        }
        if (!xn->requires_grad) return;
        auto& g = xn->grad_buffer();
        for (std::size_t i = 0; i < m; ++i) {
          T mean_dxhat = T(0), mean_dxhat_xhat = T(0);
          for (std::size_t j = 0; j < n; ++j) {
            const T dxhat = self.grad[i * n + j] * gn->value[j];
            mean_dxhat += dxhat;
            mean_dxhat_xhat += dxhat * xhat[i * n + j];
          }
          mean_dxhat /= T(n);
          mean_dxhat_xhat /= T(n);
          for (std::size_t j = 0; j < n; ++j) {
            const T dxhat = self.grad[i * n + j] * gn->value[j];
            g[i * n + j] += inv_std[i] * (dxhat - mean_dxhat - xhat[i * n + j] * mean_dxhat_xhat);
          }
        }
      });
}

// Inverted dropout: identity when not training.
template <class T, class Rng>
Tensor<T> dropout(const Tensor<T>& x, double rate, bool training, Rng& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw ValidationError("dropout rate must lie in [0, 1), got " + std::to_string(rate));
  }
  if (!training || rate == 0.0) return x;
  std::bernoulli_distribution keep(1.0 - rate);
  const T s = T(1.0 / (1.0 - rate));
  std::vector<T> mask(x.size());
  for (auto& mk : mask) mk = keep(rng) ? s : T(0);
  std::vector<T> out(x.size());
  const auto xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * mask[i];
  auto xn = x.node();
  return detail::make_result<T>(x.rows(), x.cols(), std::move(out), {xn},
                                [xn, mask = std::move(mask)](Node<T>& self) {
                                  auto& g = xn->grad_buffer();
                                  for (std::size_t i = 0; i < g.size(); ++i)
                                    g[i] += self.grad[i] * mask[i];
                                });
}

// ---------------------------------------------------------------------------
// Losses

// Sum over rows of -log softmax(logits[i])[target[i]]. Rows whose target is
// negative are skipped.
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> targets) {
  const std::size_t m = logits.rows(), n = logits.cols();
  detail::require(targets.size() == m, "cross_entropy: one target per row required");
  for (int t : targets) {
    if (t >= static_cast<int>(n)) throw ValidationError("cross_entropy: target index out of range");
  }
  std::vector<T> probs(m * n);
  T loss = T(0);
  const auto lv = logits.values();
  for (std::size_t i = 0; i < m; ++i) {
    if (targets[i] < 0) continue;
    const T* r = lv.data() + i * n;
    T mx = r[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, r[j]);
    T s = T(0);
    for (std::size_t j = 0; j < n; ++j) s += std::exp(r[j] - mx);
    const T lse = mx + std::log(s);
    loss += lse - r[targets[i]];
    for (std::size_t j = 0; j < n; ++j) probs[i * n + j] = std::exp(r[j] - lse);
  }
  std::vector<int> tg(targets.begin(), targets.end());
  auto ln = logits.node();
  return detail::make_result<T>(1, 1, std::vector<T>{loss}, {ln},
                                [ln, m, n, probs = std::move(probs), tg = std::move(tg)](Node<T>& self) {
                                  auto& g = ln->grad_buffer();
                                  const T up = self.grad[0];
                                  for (std::size_t i = 0; i < m; ++i) {
                                    if (tg[i] < 0) continue;
                                    for (std::size_t j = 0; j < n; ++j)
                                      g[i * n + j] += up * probs[i * n + j];
                                    g[i * n + static_cast<std::size_t>(tg[i])] -= up;
                                  }
                                });
}

// Cross-entropy of a single logit row against a one-hot target vector.
template <class T>
Tensor<T> cross_entropy_one_hot(const Tensor<T>& logits, std::span<const T> one_hot) {
  detail::require(logits.rows() == 1 && logits.cols() == one_hot.size(),
                  "cross_entropy: logits and target lengths differ");
  int target = -1;
  for (std::size_t j = 0; j < one_hot.size(); ++j) {
    if (one_hot[j] == T(0)) continue;
    if (one_hot[j] != T(1) || target >= 0) throw ValidationError("cross_entropy: target is not one-hot");
    target = static_cast<int>(j);
  }
  if (target < 0) throw ValidationError("cross_entropy: target is not one-hot");
  const int t[1] = {target};
  return cross_entropy(logits, std::span<const int>(t, 1));
}

// Closed-form KL( N(mu_q, exp(logvar_q)) || N(mu_p, exp(logvar_p)) ), summed
// over all entries. The prior tensors may be constants.
template <class T>
Tensor<T> kl_diag_gaussian(const Tensor<T>& mu_q, const Tensor<T>& logvar_q, const Tensor<T>& mu_p,
                           const Tensor<T>& logvar_p) {
  const std::size_t m = mu_q.rows(), n = mu_q.cols();
  for (const auto* t : {&logvar_q, &mu_p, &logvar_p}) {
    detail::require(t->rows() == m && t->cols() == n,
                    "kl shape mismatch " + mu_q.shape_string() + " vs " + t->shape_string());
  }
  const auto mq = mu_q.values(), lq = logvar_q.values(), mp = mu_p.values(), lp = logvar_p.values();
  T kl = T(0);
  for (std::size_t i = 0; i < m * n; ++i) {
    const T d = mq[i] - mp[i];
    kl += T(0.5) * (lp[i] - lq[i] + (std::exp(lq[i]) + d * d) / std::exp(lp[i]) - T(1));
  }
  auto a = mu_q.node(), b = logvar_q.node(), c = mu_p.node(), e = logvar_p.node();
  return detail::make_result<T>(1, 1, std::vector<T>{kl}, {a, b, c, e}, [a, b, c, e](Node<T>& self) {
    const T up = self.grad[0];
    const std::size_t count = a->value.size();
    for (std::size_t i = 0; i < count; ++i) {
      const T d = a->value[i] - c->value[i];
      const T inv_p = std::exp(-e->value[i]);
      const T var_q = std::exp(b->value[i]);
      if (a->requires_grad) a->grad_buffer()[i] += up * d * inv_p;
      if (c->requires_grad) c->grad_buffer()[i] -= up * d * inv_p;
      if (b->requires_grad) b->grad_buffer()[i] += up * T(0.5) * (var_q * inv_p - T(1));
      if (e->requires_grad)
        e->grad_buffer()[i] += up * T(0.5) * (T(1) - (var_q + d * d) * inv_p);
    }
  });
}

// z = mu + exp(logvar / 2) * eps, with eps a constant of the same shape.
template <class T>
Tensor<T> reparameterize(const Tensor<T>& mu, const Tensor<T>& logvar, std::span<const T> eps) {
  detail::require(mu.rows() == logvar.rows() && mu.cols() == logvar.cols(),
                  "reparameterize: mu/logvar shapes differ");
  detail::require(eps.size() == mu.size(), "reparameterize: noise shape differs from mu");
  std::vector<T> out(mu.size()), noise(eps.begin(), eps.end());
  const auto mv = mu.values(), lv = logvar.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = mv[i] + std::exp(lv[i] / T(2)) * noise[i];
  auto mn = mu.node(), ln = logvar.node();
  return detail::make_result<T>(mu.rows(), mu.cols(), std::move(out), {mn, ln},
                                [mn, ln, noise = std::move(noise)](Node<T>& self) {
                                  if (mn->requires_grad) {
                                    auto& g = mn->grad_buffer();
                                    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                                  }
                                  if (ln->requires_grad) {
                                    auto& g = ln->grad_buffer();
                                    for (std::size_t i = 0; i < g.size(); ++i)
                                      g[i] += self.grad[i] * T(0.5) *
                                              std::exp(ln->value[i] / T(2)) * noise[i];
                                  }
                                });
}

// ---------------------------------------------------------------------------
// Initialization

template <class T, class Rng>
Tensor<T> glorot_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  std::vector<T> v(fan_in * fan_out);
  for (auto& x : v) x = static_cast<T>(dist(rng));
  return Tensor<T>(fan_in, fan_out, std::move(v), true);
}

}  // namespace vtn::nn
