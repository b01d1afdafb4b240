#pragma once

// Dynamic reverse-mode differentiation. Each op evaluates its kernel eagerly and,
// when any operand needs a gradient, records a node holding the result and a
// closure that pushes the result's gradient back to its operands.

#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mfpnet/error.hpp"
#include "mfpnet/kernels.hpp"
#include "mfpnet/tensor.hpp"

namespace mfpnet {

using kernels::Activation;
using kernels::Mode;
using kernels::RunningStats;

struct Node {
  Tensor value;  // value.grad() is the adjoint slot
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;
  bool requires_grad = false;
};

namespace detail {
inline bool& grad_enabled() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

/// Disables graph recording for its lifetime (inference, finite differences).
class NoGradGuard {
 public:
  NoGradGuard() : saved_(detail::grad_enabled()) { detail::grad_enabled() = false; }
  ~NoGradGuard() { detail::grad_enabled() = saved_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool saved_;
};

class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false) : node_(std::make_shared<Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  bool defined() const { return node_ != nullptr; }
  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t numel() const { return node_->value.numel(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }

  bool has_grad() const { return node_->value.has_grad(); }
  std::span<const double> grad() const { return std::as_const(node_->value).grad(); }
  std::span<double> grad_mut() { return node_->value.grad(); }
  void zero_grad() { node_->value.clear_grad(); }

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

namespace detail {

inline void accumulate(Node& node, const Tensor& g) {
  if (!node.requires_grad) return;
  auto& dst = node.value.ensure_grad();
  if (dst.size() != g.numel()) {
    throw ShapeError("gradient of length " + std::to_string(g.numel()) +
                     " does not match value " + node.value.shape().str());
  }
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
}

inline Tensor grad_of(Node& node) {
  Tensor g(node.value.shape(), std::vector<double>(node.value.grad().begin(),
                                                    node.value.grad().end()));
  return g;
}

inline Var make_op(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward) {
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& v : inputs) needs = needs || v.requires_grad();
  }
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (needs) {
    node->requires_grad = true;
    node->parents.reserve(inputs.size());
    for (auto& v : inputs) node->parents.push_back(v.node());
    node->backward = std::move(backward);
  }
  return Var(std::move(node));
}

}  // namespace detail

/// Runs reverse accumulation from `root`. A non-scalar root needs an explicit seed.
inline void backward(const Var& root, const Tensor* seed = nullptr) {
  if (!root.requires_grad()) return;
  if (seed == nullptr && root.numel() != 1) {
    throw ShapeError("backward: root is not a scalar " + root.shape().str() +
                     "; pass an explicit seed gradient");
  }
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.node().get(), 0}};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  auto& g = root.node()->value.ensure_grad();
  if (seed != nullptr) {
    if (seed->numel() != g.size()) throw ShapeError("backward: seed shape mismatch");
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += (*seed)[i];
  } else {
    g[0] += 1.0;
  }
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backward && node->value.has_grad()) node->backward(*node);
  }
}

// ---------------------------------------------------------------------------
// Differentiable ops

inline Var conv2d(const Var& x, const Var& weight, const Var& bias, const ConvSpec& spec) {
  Tensor out = kernels::conv2d(x.value(), weight.value(),
                               spec.has_bias ? &bias.value() : nullptr, spec);
  std::vector<Var> inputs{x, weight};
  if (spec.has_bias) inputs.push_back(bias);
  return detail::make_op(std::move(out), std::move(inputs), [spec](Node& self) {
    auto& xs = *self.parents[0];
    auto& ws = *self.parents[1];
    kernels::ConvSaved saved{&xs.value, &ws.value, spec};
    auto g = kernels::conv2d_backward(detail::grad_of(self), saved);
    detail::accumulate(xs, g.input);
    detail::accumulate(ws, g.weight);
    if (spec.has_bias) detail::accumulate(*self.parents[2], g.bias);
  });
}

/// `stats` must outlive the graph; train mode updates it in place.
inline Var batch_norm(const Var& x, const Var& gamma, const Var& beta, RunningStats& stats,
                      Mode mode) {
  auto saved = std::make_shared<kernels::BatchNormSaved>();
  Tensor out = kernels::batch_norm(x.value(), gamma.value(), beta.value(), stats, mode,
                                   saved.get());
  return detail::make_op(std::move(out), {x, gamma, beta}, [saved](Node& self) {
    auto& gs = *self.parents[1];
    auto g = kernels::batch_norm_backward(detail::grad_of(self), gs.value, *saved);
    detail::accumulate(*self.parents[0], g.input);
    detail::accumulate(gs, g.gamma);
    detail::accumulate(*self.parents[2], g.beta);
  });
}

inline Var activation(const Var& x, Activation kind) {
  Tensor out = kernels::activation(x.value(), kind);
  return detail::make_op(std::move(out), {x}, [kind](Node& self) {
    auto& xs = *self.parents[0];
    detail::accumulate(xs, kernels::activation_backward(detail::grad_of(self), xs.value,
                                                        self.value, kind));
  });
}

inline Var relu(const Var& x) { return activation(x, Activation::relu); }
inline Var sigmoid(const Var& x) { return activation(x, Activation::sigmoid); }

inline Var add(const Var& a, const Var& b) {
  Tensor out = kernels::add(a.value(), b.value());
  return detail::make_op(std::move(out), {a, b}, [](Node& self) {
    Tensor g = detail::grad_of(self);
    detail::accumulate(*self.parents[0], g);
    detail::accumulate(*self.parents[1], g);
  });
}

inline Var scale(const Var& a, double k) {
  Tensor out = kernels::scale(a.value(), k);
  return detail::make_op(std::move(out), {a}, [k](Node& self) {
    Tensor g = detail::grad_of(self);
    for (auto& v : g.data()) v *= k;
    detail::accumulate(*self.parents[0], g);
  });
}

inline Var channel_scale(const Var& x, const Var& gate) {
  Tensor out = kernels::channel_scale(x.value(), gate.value());
  return detail::make_op(std::move(out), {x, gate}, [](Node& self) {
    auto& xs = *self.parents[0];
    auto& gs = *self.parents[1];
    auto [gx, gg] = kernels::channel_scale_backward(detail::grad_of(self), xs.value, gs.value);
    detail::accumulate(xs, gx);
    detail::accumulate(gs, gg);
  });
}

inline Var concat_channels(const std::vector<Var>& parts) {
  std::vector<const Tensor*> ptrs;
  ptrs.reserve(parts.size());
  for (const auto& p : parts) ptrs.push_back(&p.value());
  Tensor out = kernels::concat_channels(ptrs);
  return detail::make_op(std::move(out), parts, [](Node& self) {
    Tensor g = detail::grad_of(self);
    std::size_t begin = 0;
    for (auto& p : self.parents) {
      const std::size_t c = p->value.shape().c;
      detail::accumulate(*p, kernels::slice_channels(g, begin, c));
      begin += c;
    }
  });
}

inline Var reshape(const Var& x, Shape shape) {
  Tensor out = x.value().reshaped(shape);
  return detail::make_op(std::move(out), {x}, [](Node& self) {
    auto& xs = *self.parents[0];
    detail::accumulate(xs, detail::grad_of(self).reshaped(xs.value.shape()));
  });
}

inline Var global_avg_pool(const Var& x) {
  Tensor out = kernels::global_avg_pool(x.value());
  return detail::make_op(std::move(out), {x}, [](Node& self) {
    auto& xs = *self.parents[0];
    detail::accumulate(xs, kernels::global_avg_pool_backward(detail::grad_of(self),
                                                             xs.value.shape()));
  });
}

inline Var avg_pool(const Var& x, std::size_t k) {
  Tensor out = kernels::avg_pool(x.value(), k);
  return detail::make_op(std::move(out), {x}, [](Node& self) {
    auto& xs = *self.parents[0];
    detail::accumulate(xs, kernels::avg_pool_backward(detail::grad_of(self), xs.value.shape()));
  });
}

inline Var adaptive_avg_pool(const Var& x, std::size_t out_h, std::size_t out_w) {
  Tensor out = kernels::adaptive_avg_pool(x.value(), out_h, out_w);
  return detail::make_op(std::move(out), {x}, [](Node& self) {
    auto& xs = *self.parents[0];
    detail::accumulate(xs, kernels::adaptive_avg_pool_backward(detail::grad_of(self),
                                                               xs.value.shape()));
  });
}

inline Var bilinear_resize(const Var& x, std::size_t out_h, std::size_t out_w) {
  Tensor out = kernels::bilinear_resize(x.value(), out_h, out_w);
  return detail::make_op(std::move(out), {x}, [](Node& self) {
    auto& xs = *self.parents[0];
    detail::accumulate(xs, kernels::bilinear_resize_backward(detail::grad_of(self),
                                                             xs.value.shape()));
  });
}

inline Var matmul(const Var& a, const Var& b) {
  Tensor out = kernels::matmul(a.value(), b.value());
  return detail::make_op(std::move(out), {a, b}, [](Node& self) {
    auto& as = *self.parents[0];
    auto& bs = *self.parents[1];
    auto [ga, gb] = kernels::matmul_backward(detail::grad_of(self), as.value, bs.value);
    detail::accumulate(as, ga);
    detail::accumulate(bs, gb);
  });
}

inline Var transpose(const Var& a) {
  Tensor out = kernels::transpose(a.value());
  return detail::make_op(std::move(out), {a}, [](Node& self) {
    detail::accumulate(*self.parents[0], kernels::transpose(detail::grad_of(self)));
  });
}

inline Var softmax_rows(const Var& m) {
  Tensor out = kernels::softmax_rows(m.value());
  return detail::make_op(std::move(out), {m}, [](Node& self) {
    detail::accumulate(*self.parents[0],
                       kernels::softmax_rows_backward(detail::grad_of(self), self.value));
  });
}

inline Var symmetrize(const Var& a) {
  Tensor out = kernels::symmetrize(a.value());
  return detail::make_op(std::move(out), {a}, [](Node& self) {
    detail::accumulate(*self.parents[0], kernels::symmetrize_backward(detail::grad_of(self)));
  });
}

inline Var normalize_adjacency(const Var& a) {
  Tensor out = kernels::normalize_adjacency(a.value());
  return detail::make_op(std::move(out), {a}, [](Node& self) {
    auto& as = *self.parents[0];
    detail::accumulate(as, kernels::normalize_adjacency_backward(detail::grad_of(self), as.value));
  });
}

/// Σ x_i w_i as a (1,1,1,1) scalar; the reduction used by gradient checks.
inline Var weighted_sum(const Var& x, const Tensor& weights) {
  if (weights.numel() != x.numel()) throw ShapeError("weighted_sum: weight length mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) acc += x.value()[i] * weights[i];
  Tensor out(Shape{1, 1, 1, 1}, acc);
  return detail::make_op(std::move(out), {x}, [weights](Node& self) {
    const double g = self.value.grad()[0];
    Tensor gx(weights.shape());
    for (std::size_t i = 0; i < gx.numel(); ++i) gx[i] = g * weights[i];
    auto& xs = *self.parents[0];
    detail::accumulate(xs, gx.reshaped(xs.value.shape()));
  });
}

inline Var sum_squares(const Var& x) {
  double acc = 0.0;
  for (double v : x.value().data()) acc += v * v;
  Tensor out(Shape{1, 1, 1, 1}, acc);
  return detail::make_op(std::move(out), {x}, [](Node& self) {
    const double g = self.value.grad()[0];
    auto& xs = *self.parents[0];
    Tensor gx(xs.value.shape());
    for (std::size_t i = 0; i < gx.numel(); ++i) gx[i] = 2.0 * g * xs.value[i];
    detail::accumulate(xs, gx);
  });
}

}  // namespace mfpnet
