// Tape-based reverse-mode differentiation over Tensor values.
//
// A Graph owns every node created during one forward evaluation. Nodes are
// appended in creation order, which is a valid topological order, so
// backward() is a single reverse sweep over the tape. Ops are free functions
// taking the graph; model-specific fused ops (attention pooling, contrastive
// loss, ...) live next to the code that uses them and register their own
// backward rules through Graph::record.

#ifndef TCMA_AUTODIFF_HPP
#define TCMA_AUTODIFF_HPP

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <utility>
#include <vector>

#include "tcma/error.hpp"
#include "tcma/tensor.hpp"

namespace tcma::ad {

struct Var {
  std::size_t id = std::numeric_limits<std::size_t>::max();
};

class Graph {
 public:
  /// Backward rule: receives the graph and the gradient of the node's output,
  /// accumulates into parents via grad_mut().
  using BackwardFn = std::function<void(Graph&, const Tensor&)>;

  Var constant(Tensor value) { return push(std::move(value), false, false, {}, nullptr); }

  Var parameter(Tensor value) { return push(std::move(value), true, true, {}, nullptr); }

  /// Appends an op result. The node needs a gradient iff any parent does.
  Var record(Tensor value, std::vector<Var> parents, BackwardFn fn) {
    bool needs = false;
    for (Var p : parents) needs = needs || node(p).needs_grad;
    return push(std::move(value), false, needs, std::move(parents), needs ? std::move(fn) : nullptr);
  }

  const Tensor& value(Var v) const { return node(v).value; }

  /// Gradient buffer of `v`; all zeros until backward() has run.
  const Tensor& grad(Var v) const {
    const Node& n = node(v);
    if (n.grad.empty()) n.grad = Tensor(n.value.shape());
    return n.grad;
  }

  Tensor& grad_mut(Var v) {
    Node& n = node(v);
    if (n.grad.empty()) n.grad = Tensor(n.value.shape());
    return n.grad;
  }

  bool needs_grad(Var v) const { return node(v).needs_grad; }
  bool trainable(Var v) const { return node(v).trainable; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Number of backward rules executed by the most recent backward() call.
  std::size_t backward_visits() const noexcept { return visits_; }

  /// Fills gradient buffers with d(root)/d(node) for every node on a path from
  /// a trainable leaf to `root`. Unreachable buffers stay zero.
  void backward(Var root) {
    const Node& r = node(root);
    if (r.value.size() != 1) {
      throw ContractError("backward: root must be scalar-valued, got shape " +
                          shape_string(r.value.shape()));
    }
    for (Node& n : nodes_) n.grad = Tensor(n.value.shape());
    nodes_[root.id].grad[0] = 1.0;
    visits_ = 0;
    for (std::size_t id = root.id + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!n.backward) continue;
      ++visits_;
      n.backward(*this, n.grad);
    }
  }

 private:
  struct Node {
    Tensor value;
    mutable Tensor grad;
    bool trainable = false;
    bool needs_grad = false;
    std::vector<Var> parents;
    BackwardFn backward;
  };

  Var push(Tensor value, bool trainable, bool needs, std::vector<Var> parents, BackwardFn fn) {
    nodes_.push_back(Node{std::move(value), Tensor(), trainable, needs, std::move(parents), std::move(fn)});
    return Var{nodes_.size() - 1};
  }

  Node& node(Var v) {
    if (v.id >= nodes_.size()) throw ContractError("autodiff: invalid variable handle");
    return nodes_[v.id];
  }
  const Node& node(Var v) const {
    if (v.id >= nodes_.size()) throw ContractError("autodiff: invalid variable handle");
    return nodes_[v.id];
  }

  std::vector<Node> nodes_;
  std::size_t visits_ = 0;
};

namespace detail {

inline void accumulate(Graph& g, Var v, std::size_t i, double d) {
  if (g.needs_grad(v)) g.grad_mut(v)[i] += d;
}

}  // namespace detail

inline Var add(Graph& g, Var a, Var b) {
  require_same_shape(g.value(a), g.value(b), "add");
  Tensor out = g.value(a);
  const auto& bv = g.value(b);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return g.record(std::move(out), {a, b}, [a, b](Graph& gr, const Tensor& go) {
    for (Var p : {a, b}) {
      if (!gr.needs_grad(p)) continue;
      auto& gp = gr.grad_mut(p);
      for (std::size_t i = 0; i < go.size(); ++i) gp[i] += go[i];
    }
  });
}

inline Var sub(Graph& g, Var a, Var b) {
  require_same_shape(g.value(a), g.value(b), "sub");
  Tensor out = g.value(a);
  const auto& bv = g.value(b);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return g.record(std::move(out), {a, b}, [a, b](Graph& gr, const Tensor& go) {
    for (std::size_t i = 0; i < go.size(); ++i) {
      detail::accumulate(gr, a, i, go[i]);
      detail::accumulate(gr, b, i, -go[i]);
    }
  });
}

/// Elementwise product.
inline Var mul(Graph& g, Var a, Var b) {
  require_same_shape(g.value(a), g.value(b), "mul");
  Tensor out = g.value(a);
  const auto& bv = g.value(b);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return g.record(std::move(out), {a, b}, [a, b](Graph& gr, const Tensor& go) {
    const auto& av = gr.value(a);
    const auto& bv2 = gr.value(b);
    for (std::size_t i = 0; i < go.size(); ++i) {
      detail::accumulate(gr, a, i, go[i] * bv2[i]);
      detail::accumulate(gr, b, i, go[i] * av[i]);
    }
  });
}

inline Var scale(Graph& g, Var a, double c) {
  Tensor out = g.value(a);
  for (double& v : out.data()) v *= c;
  return g.record(std::move(out), {a}, [a, c](Graph& gr, const Tensor& go) {
    auto& ga = gr.grad_mut(a);
    for (std::size_t i = 0; i < go.size(); ++i) ga[i] += c * go[i];
  });
}

inline Var add_constant(Graph& g, Var a, double c) {
  Tensor out = g.value(a);
  for (double& v : out.data()) v += c;
  return g.record(std::move(out), {a}, [a](Graph& gr, const Tensor& go) {
    auto& ga = gr.grad_mut(a);
    for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
  });
}

/// a + s where s is a single-element tensor broadcast over a.
inline Var add_scalar(Graph& g, Var a, Var s) {
  if (g.value(s).size() != 1) throw DimensionError("add_scalar: second operand must have one element");
  Tensor out = g.value(a);
  const double sv = g.value(s)[0];
  for (double& v : out.data()) v += sv;
  return g.record(std::move(out), {a, s}, [a, s](Graph& gr, const Tensor& go) {
    double total = 0.0;
    for (std::size_t i = 0; i < go.size(); ++i) {
      detail::accumulate(gr, a, i, go[i]);
      total += go[i];
    }
    detail::accumulate(gr, s, 0, total);
  });
}

inline Var sum(Graph& g, Var a) {
  double total = 0.0;
  for (double v : g.value(a).data()) total += v;
  return g.record(Tensor::scalar(total), {a}, [a](Graph& gr, const Tensor& go) {
    auto& ga = gr.grad_mut(a);
    for (double& v : ga.data()) v += go[0];
  });
}

/// Inner product of two equally shaped tensors.
inline Var dot(Graph& g, Var a, Var b) {
  require_same_shape(g.value(a), g.value(b), "dot");
  const double d = tcma::dot(g.value(a).data(), g.value(b).data());
  return g.record(Tensor::scalar(d), {a, b}, [a, b](Graph& gr, const Tensor& go) {
    const auto& av = gr.value(a);
    const auto& bv = gr.value(b);
    for (std::size_t i = 0; i < av.size(); ++i) {
      detail::accumulate(gr, a, i, go[0] * bv[i]);
      detail::accumulate(gr, b, i, go[0] * av[i]);
    }
  });
}

inline Var matmul(Graph& g, Var a, Var b) {
  Tensor out = tcma::matmul(g.value(a), g.value(b));
  return g.record(std::move(out), {a, b}, [a, b](Graph& gr, const Tensor& go) {
    const auto& av = gr.value(a);
    const auto& bv = gr.value(b);
    const std::size_t m = av.extent(0), k = av.extent(1), n = bv.extent(1);
    if (gr.needs_grad(a)) {
      auto& ga = gr.grad_mut(a);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += go.at(i, j) * bv.at(p, j);
          ga.at(i, p) += acc;
        }
    }
    if (gr.needs_grad(b)) {
      auto& gb = gr.grad_mut(b);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = av.at(i, p);
          for (std::size_t j = 0; j < n; ++j) gb.at(p, j) += aip * go.at(i, j);
        }
    }
  });
}

inline Var reshape(Graph& g, Var a, Shape shape) {
  Tensor out = g.value(a).reshaped(std::move(shape));
  return g.record(std::move(out), {a}, [a](Graph& gr, const Tensor& go) {
    auto& ga = gr.grad_mut(a);
    for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
  });
}

inline Var softplus(Graph& g, Var a) {
  Tensor out = tcma::softplus(g.value(a));
  return g.record(std::move(out), {a}, [a](Graph& gr, const Tensor& go) {
    const auto& av = gr.value(a);
    auto& ga = gr.grad_mut(a);
    for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * sigmoid(av[i]);
  });
}

inline Var exp(Graph& g, Var a) {
  Tensor out = g.value(a);
  for (double& v : out.data()) v = std::exp(v);
  return g.record(out, {a}, [a, out](Graph& gr, const Tensor& go) {
    auto& ga = gr.grad_mut(a);
    for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * out[i];
  });
}

inline Var square(Graph& g, Var a) { return mul(g, a, a); }

/// Temperature softmax of a vector; `tau` is a one-element node.
inline Var softmax_temp(Graph& g, Var s, Var tau) {
  const double t = g.value(tau)[0];
  Tensor out = tcma::softmax_temp(g.value(s), t);
  return g.record(out, {s, tau}, [s, tau, out, t](Graph& gr, const Tensor& go) {
    // dL/dz_i = a_i (go_i - <go, a>) with z = s / tau.
    const double inner = tcma::dot(go.data(), out.data());
    const auto& sv = gr.value(s);
    double dtau = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) {
      const double dz = out[i] * (go[i] - inner);
      detail::accumulate(gr, s, i, dz / t);
      dtau -= dz * sv[i] / (t * t);
    }
    detail::accumulate(gr, tau, 0, dtau);
  });
}

inline Var mean_axis(Graph& g, Var x, std::size_t axis) {
  const Tensor& xv = g.value(x);
  Tensor out = tcma::mean_axis(xv, axis);
  const auto split = tcma::detail::split_axis(xv.shape(), axis);
  return g.record(std::move(out), {x}, [x, split](Graph& gr, const Tensor& go) {
    auto& gx = gr.grad_mut(x);
    const double inv = 1.0 / static_cast<double>(split.extent);
    for (std::size_t o = 0; o < split.outer; ++o)
      for (std::size_t e = 0; e < split.extent; ++e)
        for (std::size_t in = 0; in < split.inner; ++in)
          gx[(o * split.extent + e) * split.inner + in] += go[o * split.inner + in] * inv;
  });
}

/// Unit-normalizes every slice along the last axis, clamping norms at `floor`.
inline Var l2_normalize_last(Graph& g, Var x, double floor = kNormFloor) {
  const Tensor& xv = g.value(x);
  const std::size_t d = xv.shape().back();
  const std::size_t rows = xv.size() / d;
  std::vector<double> norms(rows);
  Tensor out = xv;
  for (std::size_t r = 0; r < rows; ++r) {
    auto row = std::span<const double>(xv.data()).subspan(r * d, d);
    norms[r] = tcma::norm(row);
    const double inv = 1.0 / std::max(norms[r], floor);
    for (std::size_t k = 0; k < d; ++k) out[r * d + k] *= inv;
  }
  return g.record(out, {x}, [x, out, norms, d, floor](Graph& gr, const Tensor& go) {
    auto& gx = gr.grad_mut(x);
    const std::size_t rows2 = norms.size();
    for (std::size_t r = 0; r < rows2; ++r) {
      const double n = norms[r];
      if (n < floor) {
        // Clamped branch: y = x / floor is linear in x.
        for (std::size_t k = 0; k < d; ++k) gx[r * d + k] += go[r * d + k] / floor;
        continue;
      }
      double proj = 0.0;
      for (std::size_t k = 0; k < d; ++k) proj += go[r * d + k] * out[r * d + k];
      for (std::size_t k = 0; k < d; ++k) gx[r * d + k] += (go[r * d + k] - proj * out[r * d + k]) / n;
    }
  });
}

/// sum_k weights[k] * terms[k] for one-element terms.
inline Var weighted_sum(Graph& g, const std::vector<Var>& terms, const std::vector<double>& weights) {
  if (terms.size() != weights.size() || terms.empty()) {
    throw ContractError("weighted_sum: terms and weights must be non-empty and equally long");
  }
  double total = 0.0;
  for (std::size_t k = 0; k < terms.size(); ++k) {
    if (g.value(terms[k]).size() != 1) throw DimensionError("weighted_sum: terms must be scalars");
    total += weights[k] * g.value(terms[k])[0];
  }
  return g.record(Tensor::scalar(total), terms, [terms, weights](Graph& gr, const Tensor& go) {
    for (std::size_t k = 0; k < terms.size(); ++k) detail::accumulate(gr, terms[k], 0, weights[k] * go[0]);
  });
}

}  // namespace tcma::ad

#endif  // TCMA_AUTODIFF_HPP
