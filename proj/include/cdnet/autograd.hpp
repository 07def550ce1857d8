#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <limits>
#include <numbers>
#include <unordered_set>
#include <vector>

#include "cdnet/tensor.hpp"

namespace cdnet {

/// One value in the computation graph.
///
/// Nodes are created in increasing `id` order; every parent has a smaller id than
/// its child, so descending id is a valid reverse topological order.
struct Node {
  Tensor value;
  Tensor grad;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;
  bool requires_grad = false;
  std::uint64_t id = 0;

  /// Gradient buffer, allocated (zero) on first use so it always matches `value`.
  Tensor& grad_buffer() {
    if (grad.shape() != value.shape() || grad.size() != value.size()) grad = Tensor(value.shape());
    return grad;
  }
};

namespace detail {

inline std::uint64_t next_node_id() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

inline std::uint64_t& attention_entries() {
  thread_local std::uint64_t count = 0;
  return count;
}

}  // namespace detail

/// Disables graph recording for the lifetime of the guard (teacher forwards, evaluation).
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

inline bool grad_enabled() { return detail::grad_mode(); }

/// Running count of attention score entries (query-key pairs, not multiplied by heads)
/// materialized by attention() on this thread.
inline std::uint64_t attention_entry_count() { return detail::attention_entries(); }
inline void reset_attention_entry_count() { detail::attention_entries() = 0; }

/// Handle to a graph node. Copies share the node.
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor& value() const { return node_->value; }
  Tensor& value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_->requires_grad; }
  const Tensor& grad() const { return node_->grad_buffer(); }
  Tensor& grad() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad_buffer().fill(0.0); }
  double item() const { return node_->value.item(); }
  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& shared() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

inline Var make_leaf(Tensor value, bool requires_grad) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = requires_grad;
  node->id = detail::next_node_id();
  if (requires_grad) node->grad_buffer();
  return Var(std::move(node));
}

/// Trainable leaf.
inline Var parameter(Tensor value) { return make_leaf(std::move(value), true); }
/// Leaf that never receives gradient.
inline Var constant(Tensor value) { return make_leaf(std::move(value), false); }

namespace detail {

/// Builds an op result; records parents and the backward rule only when some input
/// requires grad and recording is enabled.
inline Var make_result(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->id = next_node_id();
  bool needs = false;
  if (grad_mode()) {
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    node->parents.reserve(inputs.size());
    for (auto& in : inputs) node->parents.push_back(in.shared());
    node->backward_fn = std::move(backward_fn);
  }
  return Var(std::move(node));
}

inline void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

template <class F>
Var unary_elementwise(const Var& a, F&& forward, std::function<double(double x, double y)> derivative) {
  Tensor out(a.shape());
  const auto& x = a.value();
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = forward(x[i]);
  return make_result(std::move(out), {a}, [derivative = std::move(derivative)](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * derivative(p.value[i], self.value[i]);
  });
}

}  // namespace detail

/// Reverse-mode sweep from a scalar loss. Gradients accumulate into every reachable
/// node that requires grad, visiting nodes in descending creation order.
inline void backward(const Var& loss) {
  if (!loss.defined() || loss.value().size() != 1) {
    throw UsageError("backward() requires a scalar loss, got shape " +
                     (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  if (!loss.requires_grad()) return;

  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<Node*> stack{loss.node()};
  seen.insert(loss.node());
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (auto& p : n->parents) {
      if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
    }
  }
  std::sort(order.begin(), order.end(), [](const Node* a, const Node* b) { return a->id > b->id; });

  loss.node()->grad_buffer()[0] += 1.0;
  for (Node* n : order) {
    n->grad_buffer();
    if (n->backward_fn) n->backward_fn(*n);
  }
}

// ---------------------------------------------------------------------------
// Elementwise and structural ops

inline Var add(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "add");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return detail::make_result(std::move(out), {a, b}, [](Node& self) {
    for (auto& p : self.parents) {
      if (!p->requires_grad) continue;
      auto& g = p->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

inline Var sub(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return detail::make_result(std::move(out), {a, b}, [](Node& self) {
    const double sign[2] = {1.0, -1.0};
    for (std::size_t k = 0; k < 2; ++k) {
      Node& p = *self.parents[k];
      if (!p.requires_grad) continue;
      auto& g = p.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += sign[k] * self.grad[i];
    }
  });
}

inline Var mul(const Var& a, const Var& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return detail::make_result(std::move(out), {a, b}, [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
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

inline Var scale(const Var& a, double s) {
  Tensor out = a.value();
  for (auto& v : out.data()) v *= s;
  return detail::make_result(std::move(out), {a}, [s](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
  });
}

inline Var add_scalar(const Var& a, double s) {
  Tensor out = a.value();
  for (auto& v : out.data()) v += s;
  return detail::make_result(std::move(out), {a}, [](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

inline Var exp(const Var& a) {
  return detail::unary_elementwise(a, [](double x) { return std::exp(x); },
                                   [](double, double y) { return y; });
}

inline Var log(const Var& a) {
  return detail::unary_elementwise(a, [](double x) { return std::log(x); },
                                   [](double x, double) { return 1.0 / x; });
}

inline Var sigmoid(const Var& a) {
  return detail::unary_elementwise(
      a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); }, [](double, double y) { return y * (1.0 - y); });
}

inline Var tanh(const Var& a) {
  return detail::unary_elementwise(a, [](double x) { return std::tanh(x); },
                                   [](double, double y) { return 1.0 - y * y; });
}

inline double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

inline double gelu_derivative(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

/// Exact GELU, x * Phi(x).
inline Var gelu(const Var& a) {
  return detail::unary_elementwise(a, gelu_value, [](double x, double) { return gelu_derivative(x); });
}

inline Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return detail::make_result(Tensor::scalar(s), {a}, [](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    const double up = self.grad[0];
    for (auto& v : g.data()) v += up;
  });
}

inline Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

inline Var reshape(const Var& a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return detail::make_result(std::move(out), {a}, [](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

/// Transpose of a rank-2 tensor.
inline Var transpose(const Var& a) {
  if (a.value().rank() != 2) throw DimensionError("transpose expects rank 2, got " + shape_str(a.shape()));
  const std::size_t r = a.shape()[0], c = a.shape()[1];
  Tensor out({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a.value()[i * c + j];
  return detail::make_result(std::move(out), {a}, [r, c](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[j * r + i];
  });
}

/// a[..., M, K] x b[K, N] (b broadcast) or a[..., M, K] x b[..., K, N] with equal leading dims.
inline Var matmul(const Var& a, const Var& b) {
  const auto& as = a.shape();
  const auto& bs = b.shape();
  auto fail = [&] {
    throw DimensionError("matmul: incompatible shapes " + shape_str(as) + " and " + shape_str(bs));
  };
  if (as.size() < 2 || bs.size() < 2) fail();
  const std::size_t M = as[as.size() - 2], K = as.back();
  const std::size_t Kb = bs[bs.size() - 2], N = bs.back();
  if (K != Kb) fail();
  const bool broadcast_b = bs.size() == 2;
  if (!broadcast_b && (bs.size() != as.size() || !std::equal(as.begin(), as.end() - 2, bs.begin()))) fail();
  const std::size_t batch = a.value().size() / (M * K);

  Shape os(as.begin(), as.end() - 1);
  os.push_back(N);
  Tensor out(os);
  for (std::size_t t = 0; t < batch; ++t) {
    const double* bp = b.value().data().data() + (broadcast_b ? 0 : t * K * N);
    kernels::gemm_nn(a.value().data().data() + t * M * K, bp, out.data().data() + t * M * N, M, K, N);
  }
  return detail::make_result(std::move(out), {a, b}, [=](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    for (std::size_t t = 0; t < batch; ++t) {
      const double* gout = self.grad.data().data() + t * M * N;
      const std::size_t boff = broadcast_b ? 0 : t * K * N;
      if (pa.requires_grad) {
        kernels::gemm_nt(gout, pb.value.data().data() + boff, pa.grad_buffer().data().data() + t * M * K, M, N, K);
      }
      if (pb.requires_grad) {
        kernels::gemm_tn(pa.value.data().data() + t * M * K, gout, pb.grad_buffer().data().data() + boff, K, M, N);
      }
    }
  });
}

/// x[..., in] * w[in, out] + bias[out]. `bias` may be undefined.
inline Var linear(const Var& x, const Var& w, const Var& bias = Var()) {
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  if (xs.empty() || ws.size() != 2 || xs.back() != ws[0]) {
    throw DimensionError("linear: input " + shape_str(xs) + " incompatible with weight " + shape_str(ws));
  }
  const std::size_t in = ws[0], outw = ws[1];
  const std::size_t rows = x.value().size() / in;
  if (bias.defined() && (bias.value().rank() != 1 || bias.shape()[0] != outw)) {
    throw DimensionError("linear: bias " + shape_str(bias.shape()) + " does not match weight " + shape_str(ws));
  }
  Shape os(xs.begin(), xs.end() - 1);
  os.push_back(outw);
  Tensor out(os);
  if (bias.defined()) {
    for (std::size_t r = 0; r < rows; ++r)
      std::copy(bias.value().data().begin(), bias.value().data().end(), out.data().begin() + r * outw);
  }
  // Narrow outputs vectorize poorly along `out`; run those as dot products against W^T.
  const bool narrow = outw < 16 && in >= 64;
  if (narrow) {
    std::vector<double> wt(in * outw);
    for (std::size_t i = 0; i < in; ++i)
      for (std::size_t j = 0; j < outw; ++j) wt[j * in + i] = w.value()[i * outw + j];
    kernels::gemm_nt(x.value().data().data(), wt.data(), out.data().data(), rows, in, outw);
  } else {
    kernels::gemm_nn(x.value().data().data(), w.value().data().data(), out.data().data(), rows, in, outw);
  }
  std::vector<Var> inputs{x, w};
  if (bias.defined()) inputs.push_back(bias);
  return detail::make_result(std::move(out), std::move(inputs), [=](Node& self) {
    Node& px = *self.parents[0];
    Node& pw = *self.parents[1];
    const double* gout = self.grad.data().data();
    if (px.requires_grad) kernels::gemm_nt(gout, pw.value.data().data(), px.grad_buffer().data().data(), rows, outw, in);
    if (pw.requires_grad) {
      if (narrow) {
        std::vector<double> gwt(outw * in, 0.0);
        kernels::gemm_tn(gout, px.value.data().data(), gwt.data(), outw, rows, in);
        auto& gw = pw.grad_buffer();
        for (std::size_t i = 0; i < in; ++i)
          for (std::size_t j = 0; j < outw; ++j) gw[i * outw + j] += gwt[j * in + i];
      } else {
        kernels::gemm_tn(px.value.data().data(), gout, pw.grad_buffer().data().data(), in, rows, outw);
      }
    }
    if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
      auto& gb = self.parents[2]->grad_buffer();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < outw; ++j) gb[j] += gout[r * outw + j];
    }
  });
}

/// x[..., R, D] + table[R, D], the table broadcast over leading dims (position encodings).
inline Var add_broadcast_rows(const Var& x, const Var& table) {
  const auto& xs = x.shape();
  const auto& ts = table.shape();
  if (ts.size() != 2 || xs.size() < 2 || xs[xs.size() - 2] != ts[0] || xs.back() != ts[1]) {
    throw DimensionError("add_broadcast_rows: " + shape_str(xs) + " vs table " + shape_str(ts));
  }
  const std::size_t block = table.value().size();
  const std::size_t groups = x.value().size() / block;
  Tensor out = x.value();
  for (std::size_t g = 0; g < groups; ++g)
    for (std::size_t i = 0; i < block; ++i) out[g * block + i] += table.value()[i];
  return detail::make_result(std::move(out), {x, table}, [=](Node& self) {
    Node& px = *self.parents[0];
    Node& pt = *self.parents[1];
    if (px.requires_grad) {
      auto& g = px.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (pt.requires_grad) {
      auto& g = pt.grad_buffer();
      for (std::size_t gi = 0; gi < groups; ++gi)
        for (std::size_t i = 0; i < block; ++i) g[i] += self.grad[gi * block + i];
    }
  });
}

/// x[B, T, D] with `row[D]` inserted at position 0 of every group -> [B, T+1, D].
inline Var prepend_row(const Var& x, const Var& row) {
  const auto& xs = x.shape();
  if (xs.size() != 3 || row.value().rank() != 1 || row.shape()[0] != xs[2]) {
    throw DimensionError("prepend_row: " + shape_str(xs) + " with row " + shape_str(row.shape()));
  }
  const std::size_t B = xs[0], T = xs[1], D = xs[2];
  Tensor out({B, T + 1, D});
  for (std::size_t b = 0; b < B; ++b) {
    std::copy_n(row.value().data().begin(), D, out.data().begin() + b * (T + 1) * D);
    std::copy_n(x.value().data().begin() + b * T * D, T * D, out.data().begin() + (b * (T + 1) + 1) * D);
  }
  return detail::make_result(std::move(out), {x, row}, [=](Node& self) {
    Node& px = *self.parents[0];
    Node& pr = *self.parents[1];
    for (std::size_t b = 0; b < B; ++b) {
      const double* gsrc = self.grad.data().data() + b * (T + 1) * D;
      if (pr.requires_grad) {
        auto& g = pr.grad_buffer();
        for (std::size_t d = 0; d < D; ++d) g[d] += gsrc[d];
      }
      if (px.requires_grad) {
        auto& g = px.grad_buffer();
        for (std::size_t i = 0; i < T * D; ++i) g[b * T * D + i] += gsrc[D + i];
      }
    }
  });
}

/// Rows of x (viewed as [rows, D]) selected by index -> [indices.size(), D].
inline Var gather_rows(const Var& x, std::vector<std::size_t> indices) {
  const std::size_t D = x.value().cols();
  const std::size_t R = x.value().rows();
  Tensor out({indices.size(), D});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= R) throw RangeError("gather_rows: index " + std::to_string(indices[i]) + " >= " + std::to_string(R));
    std::copy_n(x.value().data().begin() + indices[i] * D, D, out.data().begin() + i * D);
  }
  return detail::make_result(std::move(out), {x}, [D, indices = std::move(indices)](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < indices.size(); ++i)
      for (std::size_t d = 0; d < D; ++d) g[indices[i] * D + d] += self.grad[i * D + d];
  });
}

/// base[B, T, D] with inc[B, U, D] added into rows [offset, offset+U) of every group.
inline Var add_into_rows(const Var& base, const Var& inc, std::size_t offset) {
  const auto& bs = base.shape();
  const auto& is = inc.shape();
  if (bs.size() != 3 || is.size() != 3 || bs[0] != is[0] || bs[2] != is[2] || offset + is[1] > bs[1]) {
    throw DimensionError("add_into_rows: base " + shape_str(bs) + " inc " + shape_str(is) + " offset " +
                         std::to_string(offset));
  }
  const std::size_t B = bs[0], T = bs[1], U = is[1], D = bs[2];
  Tensor out = base.value();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < U * D; ++i) out[(b * T + offset) * D + i] += inc.value()[b * U * D + i];
  return detail::make_result(std::move(out), {base, inc}, [=](Node& self) {
    Node& pb = *self.parents[0];
    Node& pi = *self.parents[1];
    if (pb.requires_grad) {
      auto& g = pb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (pi.requires_grad) {
      auto& g = pi.grad_buffer();
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < U * D; ++i) g[b * U * D + i] += self.grad[(b * T + offset) * D + i];
    }
  });
}

// ---------------------------------------------------------------------------
// Normalization and softmax family

/// Softmax along `axis` with max subtraction.
inline Var softmax(const Var& x, std::size_t axis) {
  const auto& xs = x.shape();
  if (axis >= xs.size()) throw RangeError("softmax: axis " + std::to_string(axis) + " invalid for " + shape_str(xs));
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < xs.size(); ++i) inner *= xs[i];
  const std::size_t len = xs[axis];
  const std::size_t outer = x.value().size() / (len * inner);
  Tensor out(xs);
  const auto& in = x.value();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t r = 0; r < inner; ++r) {
      const std::size_t base = o * len * inner + r;
      double mx = in[base];
      for (std::size_t k = 1; k < len; ++k) mx = std::max(mx, in[base + k * inner]);
      double s = 0.0;
      for (std::size_t k = 0; k < len; ++k) s += (out[base + k * inner] = std::exp(in[base + k * inner] - mx));
      for (std::size_t k = 0; k < len; ++k) out[base + k * inner] /= s;
    }
  }
  return detail::make_result(std::move(out), {x}, [=](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t r = 0; r < inner; ++r) {
        const std::size_t base = o * len * inner + r;
        double dot = 0.0;
        for (std::size_t k = 0; k < len; ++k) dot += self.grad[base + k * inner] * self.value[base + k * inner];
        for (std::size_t k = 0; k < len; ++k) {
          const std::size_t i = base + k * inner;
          g[i] += self.value[i] * (self.grad[i] - dot);
        }
      }
    }
  });
}

/// Log-softmax over the last axis.
inline Var log_softmax(const Var& x) {
  const std::size_t D = x.value().cols(), R = x.value().rows();
  Tensor out(x.shape());
  for (std::size_t r = 0; r < R; ++r) {
    const double* in = x.value().data().data() + r * D;
    const double mx = *std::max_element(in, in + D);
    double s = 0.0;
    for (std::size_t d = 0; d < D; ++d) s += std::exp(in[d] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t d = 0; d < D; ++d) out[r * D + d] = in[d] - lse;
  }
  return detail::make_result(std::move(out), {x}, [R, D](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t r = 0; r < R; ++r) {
      double gs = 0.0;
      for (std::size_t d = 0; d < D; ++d) gs += self.grad[r * D + d];
      for (std::size_t d = 0; d < D; ++d) {
        const std::size_t i = r * D + d;
        g[i] += self.grad[i] - std::exp(self.value[i]) * gs;
      }
    }
  });
}

/// Layer normalization over the last axis followed by the affine map gain * xhat + bias.
inline Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-6) {
  const std::size_t D = x.value().cols(), R = x.value().rows();
  if (gain.shape() != Shape{D} || bias.shape() != Shape{D}) {
    throw DimensionError("layer_norm: input " + shape_str(x.shape()) + " gain " + shape_str(gain.shape()) +
                         " bias " + shape_str(bias.shape()));
  }
  Tensor out(x.shape());
  Tensor xhat(x.shape());
  std::vector<double> rstd(R);
  for (std::size_t r = 0; r < R; ++r) {
    const double* in = x.value().data().data() + r * D;
    double mu = 0.0;
    for (std::size_t d = 0; d < D; ++d) mu += in[d];
    mu /= static_cast<double>(D);
    double var = 0.0;
    for (std::size_t d = 0; d < D; ++d) var += (in[d] - mu) * (in[d] - mu);
    var /= static_cast<double>(D);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t d = 0; d < D; ++d) {
      const double h = (in[d] - mu) * rstd[r];
      xhat[r * D + d] = h;
      out[r * D + d] = gain.value()[d] * h + bias.value()[d];
    }
  }
  return detail::make_result(
      std::move(out), {x, gain, bias}, [R, D, xhat = std::move(xhat), rstd = std::move(rstd)](Node& self) {
        Node& px = *self.parents[0];
        Node& pg = *self.parents[1];
        Node& pb = *self.parents[2];
        const auto& gy = self.grad;
        if (pg.requires_grad) {
          auto& g = pg.grad_buffer();
          for (std::size_t i = 0; i < R * D; ++i) g[i % D] += gy[i] * xhat[i];
        }
        if (pb.requires_grad) {
          auto& g = pb.grad_buffer();
          for (std::size_t i = 0; i < R * D; ++i) g[i % D] += gy[i];
        }
        if (px.requires_grad) {
          auto& g = px.grad_buffer();
          const double invD = 1.0 / static_cast<double>(D);
          for (std::size_t r = 0; r < R; ++r) {
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t d = 0; d < D; ++d) {
              const double dh = gy[r * D + d] * pg.value[d];
              m1 += dh;
              m2 += dh * xhat[r * D + d];
            }
            m1 *= invD;
            m2 *= invD;
            for (std::size_t d = 0; d < D; ++d) {
              const double dh = gy[r * D + d] * pg.value[d];
              g[r * D + d] += rstd[r] * (dh - m1 - xhat[r * D + d] * m2);
            }
          }
        }
      });
}

/// Row-wise division by the Euclidean norm (floored at 1e-12) over the last axis.
inline Var l2_normalize(const Var& x) {
  const std::size_t D = x.value().cols(), R = x.value().rows();
  Tensor out(x.shape());
  std::vector<double> norms(R);
  for (std::size_t r = 0; r < R; ++r) {
    double s = 0.0;
    for (std::size_t d = 0; d < D; ++d) s += x.value()[r * D + d] * x.value()[r * D + d];
    norms[r] = std::max(std::sqrt(s), 1e-12);
    for (std::size_t d = 0; d < D; ++d) out[r * D + d] = x.value()[r * D + d] / norms[r];
  }
  return detail::make_result(std::move(out), {x}, [R, D, norms = std::move(norms)](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t r = 0; r < R; ++r) {
      double dot = 0.0;
      for (std::size_t d = 0; d < D; ++d) dot += self.grad[r * D + d] * self.value[r * D + d];
      for (std::size_t d = 0; d < D; ++d) {
        const std::size_t i = r * D + d;
        g[i] += (self.grad[i] - self.value[i] * dot) / norms[r];
      }
    }
  });
}

/// Mean over rows of the cross-entropy H(target, softmax(logits / temperature)).
/// `target` rows are probability vectors treated as constants.
inline Var soft_cross_entropy(const Var& logits, const Tensor& target, double temperature) {
  if (logits.shape() != target.shape()) {
    throw DimensionError("soft_cross_entropy: logits " + shape_str(logits.shape()) + " vs target " +
                         shape_str(target.shape()));
  }
  const std::size_t K = logits.value().cols(), R = logits.value().rows();
  Tensor probs(logits.shape());
  double loss = 0.0;
  for (std::size_t r = 0; r < R; ++r) {
    const double* z = logits.value().data().data() + r * K;
    double mx = z[0] / temperature;
    for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, z[k] / temperature);
    double s = 0.0;
    for (std::size_t k = 0; k < K; ++k) s += std::exp(z[k] / temperature - mx);
    const double lse = mx + std::log(s);
    for (std::size_t k = 0; k < K; ++k) {
      const double logp = z[k] / temperature - lse;
      probs[r * K + k] = std::exp(logp);
      loss -= target[r * K + k] * logp;
    }
  }
  loss /= static_cast<double>(R);
  return detail::make_result(Tensor::scalar(loss), {logits},
                             [R, K, temperature, target, probs = std::move(probs)](Node& self) {
                               auto& g = self.parents[0]->grad_buffer();
                               const double up = self.grad[0] / (static_cast<double>(R) * temperature);
                               for (std::size_t r = 0; r < R; ++r) {
                                 double tsum = 0.0;
                                 for (std::size_t k = 0; k < K; ++k) tsum += target[r * K + k];
                                 for (std::size_t k = 0; k < K; ++k) {
                                   const std::size_t i = r * K + k;
                                   g[i] += up * (tsum * probs[i] - target[i]);
                                 }
                               }
                             });
}

/// Binary cross-entropy of a probability tensor against 0/1 labels, averaged.
/// Probabilities are clamped to [1e-12, 1 - 1e-12] before the logarithm.
inline Var binary_cross_entropy(const Var& prob, const Tensor& labels) {
  if (prob.value().size() != labels.size()) {
    throw DimensionError("binary_cross_entropy: " + shape_str(prob.shape()) + " vs " + shape_str(labels.shape()));
  }
  constexpr double lo = 1e-12, hi = 1.0 - 1e-12;
  const std::size_t N = labels.size();
  double loss = 0.0;
  for (std::size_t i = 0; i < N; ++i) {
    const double p = std::clamp(prob.value()[i], lo, hi);
    loss -= labels[i] * std::log(p) + (1.0 - labels[i]) * std::log(1.0 - p);
  }
  loss /= static_cast<double>(N);
  return detail::make_result(Tensor::scalar(loss), {prob}, [N, labels](Node& self) {
    Node& pp = *self.parents[0];
    auto& g = pp.grad_buffer();
    const double up = self.grad[0] / static_cast<double>(N);
    for (std::size_t i = 0; i < N; ++i) {
      const double p = pp.value[i];
      if (p <= lo || p >= hi) continue;
      g[i] += up * (-(labels[i] / p) + (1.0 - labels[i]) / (1.0 - p));
    }
  });
}

// ---------------------------------------------------------------------------
// Attention

struct AttentionOutput {
  Var out;        // [G, T, D]
  Tensor probs;   // [G, heads, T, S]
};

/// Scaled dot-product attention for `heads` heads packed along the feature axis.
/// q: [G, T, D], k and v: [G, S, D]; head h uses columns [h*D/heads, (h+1)*D/heads).
inline AttentionOutput attention(const Var& q, const Var& k, const Var& v, std::size_t heads) {
  const auto& qs = q.shape();
  const auto& ks = k.shape();
  if (qs.size() != 3 || ks.size() != 3 || k.shape() != v.shape() || qs[0] != ks[0] || qs[2] != ks[2]) {
    throw DimensionError("attention: q " + shape_str(qs) + " k " + shape_str(ks) + " v " + shape_str(v.shape()));
  }
  const std::size_t G = qs[0], T = qs[1], S = ks[1], D = qs[2];
  if (heads == 0 || D % heads != 0) {
    throw ConfigError("attention: width " + std::to_string(D) + " not divisible by heads " + std::to_string(heads));
  }
  const std::size_t dh = D / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  detail::attention_entries() += G * T * S;

  Tensor probs({G, heads, T, S});
  Tensor out({G, T, D});
  const double* Q = q.value().data().data();
  const double* Kp = k.value().data().data();
  const double* V = v.value().data().data();
  std::vector<double> row(S);
  for (std::size_t g = 0; g < G; ++g) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t t = 0; t < T; ++t) {
        const double* qv = Q + (g * T + t) * D + h * dh;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t s = 0; s < S; ++s) {
          const double* kv = Kp + (g * S + s) * D + h * dh;
          double dot = 0.0;
          for (std::size_t d = 0; d < dh; ++d) dot += qv[d] * kv[d];
          row[s] = dot * sc;
          mx = std::max(mx, row[s]);
        }
        double z = 0.0;
        for (std::size_t s = 0; s < S; ++s) z += (row[s] = std::exp(row[s] - mx));
        double* prow = probs.data().data() + ((g * heads + h) * T + t) * S;
        double* orow = out.data().data() + (g * T + t) * D + h * dh;
        for (std::size_t s = 0; s < S; ++s) {
          prow[s] = row[s] / z;
          const double* vv = V + (g * S + s) * D + h * dh;
          for (std::size_t d = 0; d < dh; ++d) orow[d] += prow[s] * vv[d];
        }
      }
    }
  }
  Tensor saved = probs;
  Var result = detail::make_result(std::move(out), {q, k, v}, [=, probs = std::move(saved)](Node& self) {
    Node& pq = *self.parents[0];
    Node& pk = *self.parents[1];
    Node& pv = *self.parents[2];
    const double* Qv = pq.value.data().data();
    const double* Kv = pk.value.data().data();
    const double* Vv = pv.value.data().data();
    double* gq = pq.requires_grad ? pq.grad_buffer().data().data() : nullptr;
    double* gk = pk.requires_grad ? pk.grad_buffer().data().data() : nullptr;
    double* gv = pv.requires_grad ? pv.grad_buffer().data().data() : nullptr;
    std::vector<double> dp(S);
    for (std::size_t g = 0; g < G; ++g) {
      for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t t = 0; t < T; ++t) {
          const double* go = self.grad.data().data() + (g * T + t) * D + h * dh;
          const double* prow = probs.data().data() + ((g * heads + h) * T + t) * S;
          double dot = 0.0;
          for (std::size_t s = 0; s < S; ++s) {
            const double* vv = Vv + (g * S + s) * D + h * dh;
            double acc = 0.0;
            for (std::size_t d = 0; d < dh; ++d) acc += go[d] * vv[d];
            dp[s] = acc;
            dot += acc * prow[s];
            if (gv) {
              double* gvr = gv + (g * S + s) * D + h * dh;
              for (std::size_t d = 0; d < dh; ++d) gvr[d] += prow[s] * go[d];
            }
          }
          const double* qv = Qv + (g * T + t) * D + h * dh;
          double* gqr = gq ? gq + (g * T + t) * D + h * dh : nullptr;
          for (std::size_t s = 0; s < S; ++s) {
            const double ds = prow[s] * (dp[s] - dot) * sc;
            if (ds == 0.0) continue;
            const double* kv = Kv + (g * S + s) * D + h * dh;
            if (gqr)
              for (std::size_t d = 0; d < dh; ++d) gqr[d] += ds * kv[d];
            if (gk) {
              double* gkr = gk + (g * S + s) * D + h * dh;
              for (std::size_t d = 0; d < dh; ++d) gkr[d] += ds * qv[d];
            }
          }
        }
      }
    }
  });
  return {std::move(result), std::move(probs)};
}

}  // namespace cdnet
