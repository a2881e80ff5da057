#pragma once

// Dense float64 tensors with tape-free, graph-based reverse-mode autodiff.
//
// A Tensor is a cheap handle to a shared graph node. Every op returns a new
// node; nothing that took part in a forward pass is mutated afterwards except
// leaf parameters between steps. Gradients are recorded only while gradient
// mode is on (see NoGradGuard) and at least one input requires a gradient.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "trackdiff/errors.hpp"
#include "trackdiff/rng.hpp"

namespace trackdiff {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::vector<double>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

}  // namespace detail

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_mode(); }

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape) { return full(std::move(shape), 0.0); }

  static Tensor full(Shape shape, double v) {
    const auto n = shape_size(shape);
    return from(std::move(shape), std::vector<double>(n, v));
  }

  static Tensor from(Shape shape, std::vector<double> values) {
    if (shape_size(shape) != values.size()) {
      throw DimensionError("tensor shape " + shape_str(shape) + " does not hold " +
                           std::to_string(values.size()) + " values");
    }
    for (auto e : shape) {
      if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
    }
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    return Tensor(std::move(node));
  }

  static Tensor scalar(double v) { return from({1}, {v}); }

  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0) {
    std::vector<double> v(shape_size(shape));
    for (auto& x : v) x = stddev * rng.normal();
    return from(std::move(shape), std::move(v));
  }

  /// Leaf that accumulates gradients.
  static Tensor parameter(Shape shape, std::vector<double> values) {
    auto t = from(std::move(shape), std::move(values));
    t.node_->requires_grad = true;
    return t;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t size() const { return node_->value.size(); }

  std::span<const double> values() const { return node_->value; }
  const double* data() const { return node_->value.data(); }
  double operator[](std::size_t i) const { return node_->value[i]; }
  double item() const {
    if (size() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }

  /// Direct value access for leaves, e.g. optimizer updates between steps.
  std::span<double> mutable_values() { return node_->value; }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  /// Value copy with no history.
  Tensor detach() const { return from(shape(), node_->value); }

  /// Same node identity (not value equality).
  bool same_node(const Tensor& o) const { return node_ == o.node_; }

  /// Reverse-mode sweep from a single-element tensor.
  void backward() const {
    if (size() != 1) {
      throw ContractError("backward() requires a scalar, got shape " + shape_str(shape()));
    }
    if (!node_->requires_grad) return;
    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> seen;
    std::vector<std::pair<detail::Node*, std::size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, next] = stack.back();
      if (next < n->parents.size()) {
        detail::Node* p = n->parents[next++].get();
        if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
    node_->grad_buffer()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      detail::Node* n = *it;
      if (n->backward && !n->grad.empty()) n->backward(*n);
    }
  }

  const std::shared_ptr<detail::Node>& node() const { return node_; }

  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

namespace detail {

/// Builds an op result; records history only when some input needs it.
inline Tensor make_op(Shape shape, std::vector<double> value, std::initializer_list<Tensor> inputs,
                      std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  if (grad_mode()) {
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (any) {
      node->requires_grad = true;
      for (const auto& in : inputs) node->parents.push_back(in.node());
      node->backward = std::move(backward);
    }
  }
  return Tensor(std::move(node));
}

inline Tensor make_op_n(Shape shape, std::vector<double> value, const std::vector<Tensor>& inputs,
                        std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  if (grad_mode()) {
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (any) {
      node->requires_grad = true;
      for (const auto& in : inputs) node->parents.push_back(in.node());
      node->backward = std::move(backward);
    }
  }
  return Tensor(std::move(node));
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " differ");
  }
}

inline std::size_t last_dim(const Tensor& t) { return t.shape().back(); }

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: cannot multiply " + shape_str(a.shape()) + " by " +
                         shape_str(b.shape()));
  }
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n);
  using detail::ConstMatMap;
  using detail::MatMap;
  MatMap(out.data(), m, n).noalias() = ConstMatMap(a.data(), m, k) * ConstMatMap(b.data(), k, n);
  return detail::make_op({m, n}, std::move(out), {a, b}, [m, k, n](detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    ConstMatMap dc(self.grad.data(), m, n);
    if (pa.requires_grad) {
      MatMap(pa.grad_buffer().data(), m, k).noalias() += dc * ConstMatMap(pb.value.data(), k, n).transpose();
    }
    if (pb.requires_grad) {
      MatMap(pb.grad_buffer().data(), k, n).noalias() += ConstMatMap(pa.value.data(), m, k).transpose() * dc;
    }
  });
}

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return detail::make_op(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    for (auto& p : self.parents) {
      if (!p->requires_grad) continue;
      auto& g = p->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return detail::make_op(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    if (self.parents[0]->requires_grad) {
      auto& g = self.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (self.parents[1]->requires_grad) {
      auto& g = self.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return detail::make_op(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      auto& g = pa.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.value[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.value[i];
    }
  });
}

/// x[..., n] + bias[n]
inline Tensor add_bias(const Tensor& x, const Tensor& bias) {
  const auto n = detail::last_dim(x);
  if (bias.size() != n) {
    throw DimensionError("add_bias: bias " + shape_str(bias.shape()) + " does not match " +
                         shape_str(x.shape()));
  }
  std::vector<double> out(x.values().begin(), x.values().end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bias[i % n];
  return detail::make_op(x.shape(), std::move(out), {x, bias}, [n](detail::Node& self) {
    auto& px = *self.parents[0];
    auto& pb = *self.parents[1];
    if (px.requires_grad) {
      auto& g = px.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % n] += self.grad[i];
    }
  });
}

inline Tensor scale(const Tensor& x, double c) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * x[i];
  return detail::make_op(x.shape(), std::move(out), {x}, [c](detail::Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += c * self.grad[i];
  });
}

/// s * x for a single-element tensor s.
inline Tensor mul_scalar(const Tensor& x, const Tensor& s) {
  if (s.size() != 1) throw DimensionError("mul_scalar: factor has shape " + shape_str(s.shape()));
  const double c = s[0];
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * x[i];
  return detail::make_op(x.shape(), std::move(out), {x, s}, [](detail::Node& self) {
    auto& px = *self.parents[0];
    auto& ps = *self.parents[1];
    if (px.requires_grad) {
      auto& g = px.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += ps.value[0] * self.grad[i];
    }
    if (ps.requires_grad) {
      double acc = 0.0;
      for (std::size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * px.value[i];
      ps.grad_buffer()[0] += acc;
    }
  });
}

inline Tensor tanh(const Tensor& x) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(x[i]);
  return detail::make_op(x.shape(), std::move(out), {x}, [](detail::Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * (1.0 - self.value[i] * self.value[i]);
  });
}

/// x * sigmoid(x)
inline Tensor silu(const Tensor& x) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] / (1.0 + std::exp(-x[i]));
  return detail::make_op(x.shape(), std::move(out), {x}, [](detail::Node& self) {
    auto& px = *self.parents[0];
    auto& g = px.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double sig = 1.0 / (1.0 + std::exp(-px.value[i]));
      g[i] += self.grad[i] * sig * (1.0 + px.value[i] * (1.0 - sig));
    }
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_size(shape) != x.size()) {
    throw DimensionError("reshape: " + shape_str(x.shape()) + " cannot become " + shape_str(shape));
  }
  std::vector<double> out(x.values().begin(), x.values().end());
  return detail::make_op(std::move(shape), std::move(out), {x}, [](detail::Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

/// out.flat[i] = x.flat[index[i]]; backward scatter-adds.
inline Tensor gather(const Tensor& x, std::vector<std::size_t> index, Shape shape) {
  if (shape_size(shape) != index.size()) {
    throw DimensionError("gather: " + std::to_string(index.size()) + " indices for shape " +
                         shape_str(shape));
  }
  std::vector<double> out(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= x.size()) throw IndexError("gather: index out of range");
    out[i] = x[index[i]];
  }
  return detail::make_op(std::move(shape), std::move(out), {x},
                         [index = std::move(index)](detail::Node& self) {
                           auto& g = self.parents[0]->grad_buffer();
                           for (std::size_t i = 0; i < index.size(); ++i) g[index[i]] += self.grad[i];
                         });
}

/// Concatenation along axis 0; trailing extents must agree.
inline Tensor concat(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
  std::size_t rows = 0;
  std::vector<double> out;
  for (const auto& p : parts) {
    Shape t(p.shape().begin() + 1, p.shape().end());
    if (t != tail) {
      throw DimensionError("concat: " + shape_str(p.shape()) + " incompatible with " +
                           shape_str(parts[0].shape()));
    }
    rows += p.dim(0);
    out.insert(out.end(), p.values().begin(), p.values().end());
  }
  Shape shape{rows};
  shape.insert(shape.end(), tail.begin(), tail.end());
  return detail::make_op_n(std::move(shape), std::move(out), parts, [](detail::Node& self) {
    std::size_t offset = 0;
    for (auto& p : self.parents) {
      const auto n = p->value.size();
      if (p->requires_grad) {
        auto& g = p->grad_buffer();
        for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[offset + i];
      }
      offset += n;
    }
  });
}

/// Rows [begin, end) along axis 0.
inline Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
  if (begin >= end || end > x.dim(0)) {
    throw IndexError("slice_rows: [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") outside " + shape_str(x.shape()));
  }
  const auto row = x.size() / x.dim(0);
  Shape shape = x.shape();
  shape[0] = end - begin;
  std::vector<double> out(x.values().begin() + begin * row, x.values().begin() + end * row);
  return detail::make_op(std::move(shape), std::move(out), {x}, [row, begin](detail::Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[begin * row + i] += self.grad[i];
  });
}

/// [a, b, rest...] -> [b, a, rest...]
inline Tensor swap_leading(const Tensor& x) {
  if (x.rank() < 2) throw DimensionError("swap_leading: rank < 2 for " + shape_str(x.shape()));
  const auto a = x.dim(0), b = x.dim(1);
  const auto inner = x.size() / (a * b);
  std::vector<std::size_t> idx(x.size());
  for (std::size_t j = 0; j < b; ++j)
    for (std::size_t i = 0; i < a; ++i)
      for (std::size_t k = 0; k < inner; ++k) idx[(j * a + i) * inner + k] = (i * b + j) * inner + k;
  Shape shape = x.shape();
  std::swap(shape[0], shape[1]);
  return gather(x, std::move(idx), std::move(shape));
}

/// Repeats a [rows, d] tensor `times` along a new leading block: [times*rows, d].
inline Tensor tile_rows(const Tensor& x, std::size_t times) {
  const auto n = x.size();
  std::vector<std::size_t> idx(n * times);
  for (std::size_t t = 0; t < times; ++t)
    for (std::size_t i = 0; i < n; ++i) idx[t * n + i] = i;
  Shape shape = x.shape();
  shape[0] *= times;
  return gather(x, std::move(idx), std::move(shape));
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  return detail::make_op({1}, {acc}, {x}, [](detail::Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (auto& v : g) v += self.grad[0];
  });
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

/// Mean of squared differences over all coordinates.
inline Tensor mse(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mse");
  const auto n = static_cast<double>(a.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
  return detail::make_op({1}, {acc / n}, {a, b}, [n](detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    const double g0 = self.grad[0] * 2.0 / n;
    if (pa.requires_grad) {
      auto& g = pa.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += g0 * (pa.value[i] - pb.value[i]);
    }
    if (pb.requires_grad) {
      auto& g = pb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= g0 * (pa.value[i] - pb.value[i]);
    }
  });
}

// ---------------------------------------------------------------------------
// Normalization

inline Tensor softmax_lastdim(const Tensor& x) {
  const auto n = detail::last_dim(x);
  const auto rows = x.size() / n;
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.data() + r * n;
    double* o = out.data() + r * n;
    const double mx = *std::max_element(in, in + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += (o[j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < n; ++j) o[j] /= z;
  }
  return detail::make_op(x.shape(), std::move(out), {x}, [n, rows](detail::Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = self.value.data() + r * n;
      const double* dy = self.grad.data() + r * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += dy[j] * y[j];
      for (std::size_t j = 0; j < n; ++j) g[r * n + j] += y[j] * (dy[j] - dot);
    }
  });
}

inline constexpr double kLayerNormEps = 1e-5;

/// Per last-axis slice: (x - mean) / sqrt(var + 1e-5) * gain + bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  const auto d = detail::last_dim(x);
  if (gain.size() != d || bias.size() != d) {
    throw DimensionError("layer_norm: affine " + shape_str(gain.shape()) + "/" +
                         shape_str(bias.shape()) + " does not match " + shape_str(x.shape()));
  }
  const auto rows = x.size() / d;
  std::vector<double> out(x.size());
  auto xhat = std::make_shared<std::vector<double>>(x.size());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += in[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + kLayerNormEps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (in[j] - mu) * is;
      (*xhat)[r * d + j] = h;
      out[r * d + j] = h * gain[j] + bias[j];
    }
  }
  return detail::make_op(x.shape(), std::move(out), {x, gain, bias},
                         [d, rows, xhat, inv_std](detail::Node& self) {
                           auto& px = *self.parents[0];
                           auto& pg = *self.parents[1];
                           auto& pb = *self.parents[2];
                           const auto dd = static_cast<double>(d);
                           std::vector<double> dxhat(d);
                           for (std::size_t r = 0; r < rows; ++r) {
                             const double* dy = self.grad.data() + r * d;
                             const double* h = xhat->data() + r * d;
                             if (pg.requires_grad) {
                               auto& g = pg.grad_buffer();
                               for (std::size_t j = 0; j < d; ++j) g[j] += dy[j] * h[j];
                             }
                             if (pb.requires_grad) {
                               auto& g = pb.grad_buffer();
                               for (std::size_t j = 0; j < d; ++j) g[j] += dy[j];
                             }
                             if (px.requires_grad) {
                               double m1 = 0.0, m2 = 0.0;
                               for (std::size_t j = 0; j < d; ++j) {
                                 dxhat[j] = dy[j] * pg.value[j];
                                 m1 += dxhat[j];
                                 m2 += dxhat[j] * h[j];
                               }
                               m1 /= dd;
                               m2 /= dd;
                               auto& g = px.grad_buffer();
                               for (std::size_t j = 0; j < d; ++j) {
                                 g[r * d + j] += (*inv_std)[r] * (dxhat[j] - m1 - h[j] * m2);
                               }
                             }
                           }
                         });
}

// ---------------------------------------------------------------------------
// Multi-head scaled dot-product attention core.
//
// q: [B, m, d], k/v: [B, n, d]. Heads split d into n_heads contiguous groups.
// key_mask (size B*n, nonzero = keep) removes keys from the softmax;
// query_mask (size B*m) zeroes the output rows of dropped queries.
// Empty masks mean "keep everything".

using Mask = std::vector<unsigned char>;

inline Tensor attention_core(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t n_heads,
                             const Mask& key_mask = {}, const Mask& query_mask = {}) {
  if (q.rank() != 3 || k.rank() != 3 || v.rank() != 3 || k.shape() != v.shape() ||
      q.dim(0) != k.dim(0) || q.dim(2) != k.dim(2)) {
    throw DimensionError("attention: incompatible q " + shape_str(q.shape()) + ", k " +
                         shape_str(k.shape()) + ", v " + shape_str(v.shape()));
  }
  const auto B = q.dim(0), m = q.dim(1), n = k.dim(1), d = q.dim(2);
  if (n_heads == 0 || d % n_heads != 0) {
    throw DimensionError("attention: width " + std::to_string(d) + " not divisible into " +
                         std::to_string(n_heads) + " heads");
  }
  if (!key_mask.empty() && key_mask.size() != B * n) throw DimensionError("attention: key mask size");
  if (!query_mask.empty() && query_mask.size() != B * m) throw DimensionError("attention: query mask size");
  const auto dh = d / n_heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  const double neg_inf = -std::numeric_limits<double>::infinity();

  auto probs = std::make_shared<std::vector<double>>(B * n_heads * m * n);
  std::vector<double> out(B * m * d, 0.0);
  using detail::ConstMatMap;
  using detail::MatMap;
  using detail::RowMat;
  RowMat scores(m, n);
  for (std::size_t b = 0; b < B; ++b) {
    ConstMatMap Q(q.data() + b * m * d, m, d);
    ConstMatMap K(k.data() + b * n * d, n, d);
    ConstMatMap V(v.data() + b * n * d, n, d);
    MatMap O(out.data() + b * m * d, m, d);
    bool any_key = key_mask.empty();
    for (std::size_t j = 0; !any_key && j < n; ++j) any_key = key_mask[b * n + j] != 0;
    for (std::size_t h = 0; h < n_heads; ++h) {
      MatMap P(probs->data() + (b * n_heads + h) * m * n, m, n);
      scores.noalias() = Q.middleCols(h * dh, dh) * K.middleCols(h * dh, dh).transpose();
      for (std::size_t i = 0; i < m; ++i) {
        const bool q_on = query_mask.empty() || query_mask[b * m + i] != 0;
        if (!q_on) {
          P.row(i).setZero();
          continue;
        }
        if (!any_key) throw ContractError("attention: every key is masked for an active query");
        double mx = neg_inf;
        for (std::size_t j = 0; j < n; ++j) {
          if (!key_mask.empty() && !key_mask[b * n + j]) continue;
          mx = std::max(mx, scores(i, j) * sc);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          double e = 0.0;
          if (key_mask.empty() || key_mask[b * n + j]) e = std::exp(scores(i, j) * sc - mx);
          P(i, j) = e;
          z += e;
        }
        P.row(i) /= z;
      }
      O.middleCols(h * dh, dh).noalias() = P * V.middleCols(h * dh, dh);
    }
  }

  return detail::make_op(
      {B, m, d}, std::move(out), {q, k, v}, [=](detail::Node& self) {
        auto& pq = *self.parents[0];
        auto& pk = *self.parents[1];
        auto& pv = *self.parents[2];
        double* gq = pq.requires_grad ? pq.grad_buffer().data() : nullptr;
        double* gk = pk.requires_grad ? pk.grad_buffer().data() : nullptr;
        double* gv = pv.requires_grad ? pv.grad_buffer().data() : nullptr;
        RowMat dP(m, n);
        for (std::size_t b = 0; b < B; ++b) {
          ConstMatMap Q(pq.value.data() + b * m * d, m, d);
          ConstMatMap K(pk.value.data() + b * n * d, n, d);
          ConstMatMap V(pv.value.data() + b * n * d, n, d);
          ConstMatMap dO(self.grad.data() + b * m * d, m, d);
          for (std::size_t h = 0; h < n_heads; ++h) {
            ConstMatMap P(probs->data() + (b * n_heads + h) * m * n, m, n);
            if (gv) MatMap(gv + b * n * d, n, d).middleCols(h * dh, dh).noalias() += P.transpose() * dO.middleCols(h * dh, dh);
            if (!gq && !gk) continue;
            dP.noalias() = dO.middleCols(h * dh, dh) * V.middleCols(h * dh, dh).transpose();
            for (std::size_t i = 0; i < m; ++i) {
              const double dot = dP.row(i).dot(P.row(i));
              for (std::size_t j = 0; j < n; ++j) dP(i, j) = P(i, j) * (dP(i, j) - dot) * sc;
            }
            if (gq) MatMap(gq + b * m * d, m, d).middleCols(h * dh, dh).noalias() += dP * K.middleCols(h * dh, dh);
            if (gk) MatMap(gk + b * n * d, n, d).middleCols(h * dh, dh).noalias() += dP.transpose() * Q.middleCols(h * dh, dh);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Convenience layers

/// x[..., in] * w[in, out] (+ b[out]); leading axes are preserved.
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor* b = nullptr) {
  const auto in = detail::last_dim(x);
  if (w.rank() != 2 || w.dim(0) != in) {
    throw DimensionError("linear: weight " + shape_str(w.shape()) + " does not accept " +
                         shape_str(x.shape()));
  }
  const auto rows = x.size() / in;
  Tensor y = matmul(x.rank() == 2 ? x : reshape(x, {rows, in}), w);
  if (b) y = add_bias(y, *b);
  Shape shape = x.shape();
  shape.back() = w.dim(1);
  return x.rank() == 2 ? y : reshape(y, std::move(shape));
}

}  // namespace trackdiff
