#pragma once

#include "tstereo/tensor.hpp"

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>

namespace tstereo {

/// Reverse-mode tape node. Values are materialized eagerly; gradients are
/// allocated on demand during backward().
template <typename S>
struct Node {
  Tensor<S> value;
  Tensor<S> grad;
  bool needs_grad = false;
  bool grad_ready = false;
  std::vector<std::shared_ptr<Node<S>>> inputs;
  std::function<void(Node<S>&)> backprop;

  Tensor<S>& ensureGrad() {
    if (!grad_ready) {
      grad = Tensor<S>::zeros(value.shape());
      grad_ready = true;
    }
    return grad;
  }
};

template <typename S>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<S>> n) : node_(std::move(n)) {}

  static Var leaf(Tensor<S> value, bool needs_grad) {
    auto n = std::make_shared<Node<S>>();
    n->value = std::move(value);
    n->needs_grad = needs_grad;
    return Var(std::move(n));
  }
  static Var constant(Tensor<S> value) { return leaf(std::move(value), false); }

  bool valid() const { return node_ != nullptr; }
  const Tensor<S>& value() const { return node_->value; }
  Tensor<S>& valueMut() { return node_->value; }
  const Tensor<S>& grad() const { return node_->grad; }
  bool needsGrad() const { return node_->needs_grad; }
  void zeroGrad() {
    node_->grad_ready = false;
    node_->grad = Tensor<S>();
  }
  std::shared_ptr<Node<S>> node() const { return node_; }

  const Shape& shape() const { return node_->value.shape(); }
  Index dim(Index i) const { return node_->value.dim(i); }

  /// Backpropagates from this (scalar) variable with seed gradient 1.
  void backward() {
    if (node_->value.numel() != 1)
      throw std::logic_error("backward() requires a scalar output");
    std::vector<Node<S>*> order;
    std::unordered_set<Node<S>*> seen;
    topo(node_.get(), seen, order);
    node_->ensureGrad().raw().setConstant(S(1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node<S>* n = *it;
      if (n->backprop && n->grad_ready) n->backprop(*n);
    }
  }

 private:
  static void topo(Node<S>* n, std::unordered_set<Node<S>*>& seen, std::vector<Node<S>*>& order) {
    // Iterative DFS: graphs here can be thousands of nodes deep.
    struct Frame {
      Node<S>* node;
      size_t next_child = 0;
    };
    std::vector<Frame> stack;
    if (seen.count(n)) return;
    stack.push_back({n});
    seen.insert(n);
    while (!stack.empty()) {
      Frame& f = stack.back();
      if (f.next_child < f.node->inputs.size()) {
        Node<S>* c = f.node->inputs[f.next_child++].get();
        if (c->needs_grad && !seen.count(c)) {
          seen.insert(c);
          stack.push_back({c});
        }
      } else {
        order.push_back(f.node);
        stack.pop_back();
      }
    }
  }

  std::shared_ptr<Node<S>> node_;
};

template <typename S>
Var<S> makeOp(std::vector<Var<S>> inputs, Tensor<S> value, std::function<void(Node<S>&)> bp) {
  auto n = std::make_shared<Node<S>>();
  n->value = std::move(value);
  for (auto& in : inputs) {
    n->inputs.push_back(in.node());
    n->needs_grad = n->needs_grad || in.needsGrad();
  }
  if (n->needs_grad) n->backprop = std::move(bp);
  return Var<S>(std::move(n));
}

// ---------------------------------------------------------------------------
// Elementwise ops

template <typename S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
  if (!a.value().sameShape(b.value()))
    throw std::invalid_argument("add: shape mismatch " + shapeStr(a.shape()) + " vs " +
                                shapeStr(b.shape()));
  Tensor<S> out(a.shape(), a.value().raw() + b.value().raw());
  return makeOp<S>({a, b}, std::move(out), [](Node<S>& n) {
    for (int i = 0; i < 2; ++i)
      if (n.inputs[i]->needs_grad) n.inputs[i]->ensureGrad().raw() += n.grad.raw();
  });
}

template <typename S>
Var<S> sub(const Var<S>& a, const Var<S>& b) {
  if (!a.value().sameShape(b.value())) throw std::invalid_argument("sub: shape mismatch");
  Tensor<S> out(a.shape(), a.value().raw() - b.value().raw());
  return makeOp<S>({a, b}, std::move(out), [](Node<S>& n) {
    if (n.inputs[0]->needs_grad) n.inputs[0]->ensureGrad().raw() += n.grad.raw();
    if (n.inputs[1]->needs_grad) n.inputs[1]->ensureGrad().raw() -= n.grad.raw();
  });
}

template <typename S>
Var<S> mul(const Var<S>& a, const Var<S>& b) {
  if (!a.value().sameShape(b.value())) throw std::invalid_argument("mul: shape mismatch");
  Tensor<S> out(a.shape(), a.value().raw() * b.value().raw());
  return makeOp<S>({a, b}, std::move(out), [](Node<S>& n) {
    if (n.inputs[0]->needs_grad)
      n.inputs[0]->ensureGrad().raw() += n.grad.raw() * n.inputs[1]->value.raw();
    if (n.inputs[1]->needs_grad)
      n.inputs[1]->ensureGrad().raw() += n.grad.raw() * n.inputs[0]->value.raw();
  });
}

template <typename S>
Var<S> scale(const Var<S>& a, S k) {
  Tensor<S> out(a.shape(), a.value().raw() * k);
  return makeOp<S>({a}, std::move(out), [k](Node<S>& n) {
    if (n.inputs[0]->needs_grad) n.inputs[0]->ensureGrad().raw() += n.grad.raw() * k;
  });
}

template <typename S>
Var<S> addScalar(const Var<S>& a, S k) {
  Tensor<S> out(a.shape(), a.value().raw() + k);
  return makeOp<S>({a}, std::move(out), [](Node<S>& n) {
    if (n.inputs[0]->needs_grad) n.inputs[0]->ensureGrad().raw() += n.grad.raw();
  });
}

/// Elementwise product with a constant tensor (e.g. a validity mask).
template <typename S>
Var<S> mulConst(const Var<S>& a, const Tensor<S>& c) {
  if (!a.value().sameShape(c)) throw std::invalid_argument("mulConst: shape mismatch");
  Tensor<S> out(a.shape(), a.value().raw() * c.raw());
  return makeOp<S>({a}, std::move(out), [c](Node<S>& n) {
    if (n.inputs[0]->needs_grad) n.inputs[0]->ensureGrad().raw() += n.grad.raw() * c.raw();
  });
}

template <typename S>
Var<S> sigmoid(const Var<S>& a) {
  Tensor<S> out(a.shape());
  out.raw() = S(1) / (S(1) + (-a.value().raw()).exp());
  return makeOp<S>({a}, std::move(out), [](Node<S>& n) {
    if (!n.inputs[0]->needs_grad) return;
    const auto& y = n.value.raw();
    n.inputs[0]->ensureGrad().raw() += n.grad.raw() * y * (S(1) - y);
  });
}

/// x * sigmoid(x): smooth, zero at zero.
template <typename S>
Var<S> silu(const Var<S>& a) {
  const auto& x = a.value().raw();
  Eigen::Array<S, Eigen::Dynamic, 1> sg = S(1) / (S(1) + (-x).exp());
  Tensor<S> out(a.shape(), x * sg);
  return makeOp<S>({a}, std::move(out), [](Node<S>& n) {
    if (!n.inputs[0]->needs_grad) return;
    const auto& x = n.inputs[0]->value.raw();
    Eigen::Array<S, Eigen::Dynamic, 1> sg = S(1) / (S(1) + (-x).exp());
    n.inputs[0]->ensureGrad().raw() += n.grad.raw() * (sg * (S(1) + x * (S(1) - sg)));
  });
}

template <typename S>
Var<S> absVal(const Var<S>& a) {
  Tensor<S> out(a.shape(), a.value().raw().abs());
  return makeOp<S>({a}, std::move(out), [](Node<S>& n) {
    if (!n.inputs[0]->needs_grad) return;
    const auto& x = n.inputs[0]->value.raw();
    n.inputs[0]->ensureGrad().raw() += n.grad.raw() * x.sign();
  });
}

// ---------------------------------------------------------------------------
// Shape ops

template <typename S>
Var<S> reshape(const Var<S>& a, Shape shape) {
  Tensor<S> out = a.value().reshaped(shape);
  return makeOp<S>({a}, std::move(out), [](Node<S>& n) {
    if (n.inputs[0]->needs_grad) n.inputs[0]->ensureGrad().raw() += n.grad.raw();
  });
}

template <typename S>
Var<S> concatDim(const std::vector<Var<S>>& parts, Index dim) {
  if (parts.empty()) throw std::invalid_argument("concatDim: no inputs");
  Shape shape = parts[0].shape();
  Index total = 0;
  for (auto& p : parts) {
    if (p.value().ndim() != static_cast<Index>(shape.size()))
      throw std::invalid_argument("concatDim: rank mismatch");
    for (Index i = 0; i < p.value().ndim(); ++i)
      if (i != dim && p.dim(i) != shape[static_cast<size_t>(i)])
        throw std::invalid_argument("concatDim: shape mismatch");
    total += p.dim(dim);
  }
  shape[static_cast<size_t>(dim)] = total;
  Index outer = 1, inner = 1;
  for (Index i = 0; i < dim; ++i) outer *= shape[static_cast<size_t>(i)];
  for (Index i = dim + 1; i < static_cast<Index>(shape.size()); ++i)
    inner *= shape[static_cast<size_t>(i)];

  Tensor<S> out(shape);
  std::vector<Index> lens;
  Index off = 0;
  for (auto& p : parts) {
    const Index len = p.dim(dim);
    lens.push_back(len);
    for (Index o = 0; o < outer; ++o)
      std::copy(p.value().ptr() + o * len * inner, p.value().ptr() + (o + 1) * len * inner,
                out.ptr() + (o * total + off) * inner);
    off += len;
  }
  return makeOp<S>(parts, std::move(out), [lens, outer, inner, total](Node<S>& n) {
    Index off = 0;
    for (size_t p = 0; p < n.inputs.size(); ++p) {
      const Index len = lens[p];
      if (n.inputs[p]->needs_grad) {
        auto& g = n.inputs[p]->ensureGrad();
        for (Index o = 0; o < outer; ++o)
          for (Index i = 0; i < len * inner; ++i)
            g[o * len * inner + i] += n.grad[(o * total + off) * inner + i];
      }
      off += len;
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions and softmax

template <typename S>
Var<S> sumAll(const Var<S>& a) {
  Tensor<S> out = Tensor<S>::scalar(a.value().raw().sum());
  return makeOp<S>({a}, std::move(out), [](Node<S>& n) {
    if (n.inputs[0]->needs_grad) n.inputs[0]->ensureGrad().raw() += n.grad[0];
  });
}

template <typename S>
Var<S> meanAll(const Var<S>& a) {
  return scale(sumAll(a), S(1) / static_cast<S>(a.value().numel()));
}

namespace detail {
struct DimSpan {
  Index outer, len, inner;
};
inline DimSpan dimSpan(const Shape& shape, Index dim) {
  DimSpan s{1, shape[static_cast<size_t>(dim)], 1};
  for (Index i = 0; i < dim; ++i) s.outer *= shape[static_cast<size_t>(i)];
  for (Index i = dim + 1; i < static_cast<Index>(shape.size()); ++i)
    s.inner *= shape[static_cast<size_t>(i)];
  return s;
}
}  // namespace detail

template <typename S>
Var<S> sumDim(const Var<S>& a, Index dim) {
  auto sp = detail::dimSpan(a.shape(), dim);
  Shape out_shape = a.shape();
  out_shape.erase(out_shape.begin() + dim);
  if (out_shape.empty()) out_shape = {1};
  Tensor<S> out(out_shape);
  for (Index o = 0; o < sp.outer; ++o)
    for (Index k = 0; k < sp.len; ++k)
      for (Index i = 0; i < sp.inner; ++i)
        out[o * sp.inner + i] += a.value()[(o * sp.len + k) * sp.inner + i];
  return makeOp<S>({a}, std::move(out), [sp](Node<S>& n) {
    if (!n.inputs[0]->needs_grad) return;
    auto& g = n.inputs[0]->ensureGrad();
    for (Index o = 0; o < sp.outer; ++o)
      for (Index k = 0; k < sp.len; ++k)
        for (Index i = 0; i < sp.inner; ++i)
          g[(o * sp.len + k) * sp.inner + i] += n.grad[o * sp.inner + i];
  });
}

/// Numerically stable softmax along `dim`.
template <typename S>
Var<S> softmaxDim(const Var<S>& a, Index dim) {
  auto sp = detail::dimSpan(a.shape(), dim);
  Tensor<S> out(a.shape());
  const auto& x = a.value();
  for (Index o = 0; o < sp.outer; ++o)
    for (Index i = 0; i < sp.inner; ++i) {
      S mx = x[(o * sp.len) * sp.inner + i];
      for (Index k = 1; k < sp.len; ++k) mx = std::max(mx, x[(o * sp.len + k) * sp.inner + i]);
      S z = S(0);
      for (Index k = 0; k < sp.len; ++k) {
        S e = std::exp(x[(o * sp.len + k) * sp.inner + i] - mx);
        out[(o * sp.len + k) * sp.inner + i] = e;
        z += e;
      }
      for (Index k = 0; k < sp.len; ++k) out[(o * sp.len + k) * sp.inner + i] /= z;
    }
  return makeOp<S>({a}, std::move(out), [sp](Node<S>& n) {
    if (!n.inputs[0]->needs_grad) return;
    auto& g = n.inputs[0]->ensureGrad();
    const auto& p = n.value;
    for (Index o = 0; o < sp.outer; ++o)
      for (Index i = 0; i < sp.inner; ++i) {
        S dot = S(0);
        for (Index k = 0; k < sp.len; ++k) {
          const Index idx = (o * sp.len + k) * sp.inner + i;
          dot += n.grad[idx] * p[idx];
        }
        for (Index k = 0; k < sp.len; ++k) {
          const Index idx = (o * sp.len + k) * sp.inner + i;
          g[idx] += p[idx] * (n.grad[idx] - dot);
        }
      }
  });
}

/// Multiplies slice k along `dim` by the fixed coefficient coeffs[k].
template <typename S>
Var<S> scaleAlongDim(const Var<S>& a, Index dim, std::vector<S> coeffs) {
  auto sp = detail::dimSpan(a.shape(), dim);
  if (static_cast<Index>(coeffs.size()) != sp.len)
    throw std::invalid_argument("scaleAlongDim: coefficient count mismatch");
  Tensor<S> out(a.shape());
  for (Index o = 0; o < sp.outer; ++o)
    for (Index k = 0; k < sp.len; ++k)
      for (Index i = 0; i < sp.inner; ++i) {
        const Index idx = (o * sp.len + k) * sp.inner + i;
        out[idx] = a.value()[idx] * coeffs[static_cast<size_t>(k)];
      }
  return makeOp<S>({a}, std::move(out), [sp, coeffs](Node<S>& n) {
    if (!n.inputs[0]->needs_grad) return;
    auto& g = n.inputs[0]->ensureGrad();
    for (Index o = 0; o < sp.outer; ++o)
      for (Index k = 0; k < sp.len; ++k)
        for (Index i = 0; i < sp.inner; ++i) {
          const Index idx = (o * sp.len + k) * sp.inner + i;
          g[idx] += n.grad[idx] * coeffs[static_cast<size_t>(k)];
        }
  });
}

// ---------------------------------------------------------------------------
// Channel ops (channel = dim 0)

/// y[c,...] = x[c,...] * s[c], s differentiable.
template <typename S>
Var<S> mulChannels(const Var<S>& x, const Var<S>& s) {
  const Index c = x.dim(0);
  if (s.value().numel() != c) throw std::invalid_argument("mulChannels: channel mismatch");
  const Index inner = x.value().numel() / c;
  Tensor<S> out(x.shape());
  for (Index ci = 0; ci < c; ++ci)
    for (Index i = 0; i < inner; ++i) out[ci * inner + i] = x.value()[ci * inner + i] * s.value()[ci];
  return makeOp<S>({x, s}, std::move(out), [c, inner](Node<S>& n) {
    if (n.inputs[0]->needs_grad) {
      auto& gx = n.inputs[0]->ensureGrad();
      for (Index ci = 0; ci < c; ++ci)
        for (Index i = 0; i < inner; ++i)
          gx[ci * inner + i] += n.grad[ci * inner + i] * n.inputs[1]->value[ci];
    }
    if (n.inputs[1]->needs_grad) {
      auto& gs = n.inputs[1]->ensureGrad();
      for (Index ci = 0; ci < c; ++ci) {
        S acc = S(0);
        for (Index i = 0; i < inner; ++i)
          acc += n.grad[ci * inner + i] * n.inputs[0]->value[ci * inner + i];
        gs[ci] += acc;
      }
    }
  });
}

/// y[c,...] = x[c,...] + b[c].
template <typename S>
Var<S> addChannels(const Var<S>& x, const Var<S>& b) {
  const Index c = x.dim(0);
  if (b.value().numel() != c) throw std::invalid_argument("addChannels: channel mismatch");
  const Index inner = x.value().numel() / c;
  Tensor<S> out(x.shape());
  for (Index ci = 0; ci < c; ++ci)
    for (Index i = 0; i < inner; ++i) out[ci * inner + i] = x.value()[ci * inner + i] + b.value()[ci];
  return makeOp<S>({x, b}, std::move(out), [c, inner](Node<S>& n) {
    if (n.inputs[0]->needs_grad) n.inputs[0]->ensureGrad().raw() += n.grad.raw();
    if (n.inputs[1]->needs_grad) {
      auto& gb = n.inputs[1]->ensureGrad();
      for (Index ci = 0; ci < c; ++ci) {
        S acc = S(0);
        for (Index i = 0; i < inner; ++i) acc += n.grad[ci * inner + i];
        gb[ci] += acc;
      }
    }
  });
}

/// y[c,...] = x[c,...] * a[c] + b[c] with constant a, b (running-stats path).
template <typename S>
Var<S> channelConstAffine(const Var<S>& x, const Tensor<S>& a, const Tensor<S>& b) {
  const Index c = x.dim(0);
  const Index inner = x.value().numel() / c;
  Tensor<S> out(x.shape());
  for (Index ci = 0; ci < c; ++ci)
    for (Index i = 0; i < inner; ++i)
      out[ci * inner + i] = x.value()[ci * inner + i] * a[ci] + b[ci];
  return makeOp<S>({x}, std::move(out), [a, c, inner](Node<S>& n) {
    if (!n.inputs[0]->needs_grad) return;
    auto& gx = n.inputs[0]->ensureGrad();
    for (Index ci = 0; ci < c; ++ci)
      for (Index i = 0; i < inner; ++i) gx[ci * inner + i] += n.grad[ci * inner + i] * a[ci];
  });
}

/// Mean over all non-channel dims: (C, ...) -> (C).
template <typename S>
Var<S> globalMeanPerChannel(const Var<S>& x) {
  const Index c = x.dim(0);
  const Index inner = x.value().numel() / c;
  Tensor<S> out({c});
  for (Index ci = 0; ci < c; ++ci) {
    S acc = S(0);
    for (Index i = 0; i < inner; ++i) acc += x.value()[ci * inner + i];
    out[ci] = acc / static_cast<S>(inner);
  }
  return makeOp<S>({x}, std::move(out), [c, inner](Node<S>& n) {
    if (!n.inputs[0]->needs_grad) return;
    auto& gx = n.inputs[0]->ensureGrad();
    for (Index ci = 0; ci < c; ++ci) {
      const S g = n.grad[ci] / static_cast<S>(inner);
      for (Index i = 0; i < inner; ++i) gx[ci * inner + i] += g;
    }
  });
}

// ---------------------------------------------------------------------------
// Dense algebra

/// C = A @ B with A (m,k) and B (k,n), row-major semantics.
template <typename S>
Var<S> matmul(const Var<S>& a, const Var<S>& b) {
  using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using CMap = Eigen::Map<const Mat>;
  using MMap = Eigen::Map<Mat>;
  const Index m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) throw std::invalid_argument("matmul: inner dim mismatch");
  Tensor<S> out({m, n});
  MMap(out.ptr(), m, n) = CMap(a.value().ptr(), m, k) * CMap(b.value().ptr(), k, n);
  return makeOp<S>({a, b}, std::move(out), [m, k, n](Node<S>& n_) {
    CMap g(n_.grad.ptr(), m, n);
    if (n_.inputs[0]->needs_grad) {
      MMap ga(n_.inputs[0]->ensureGrad().ptr(), m, k);
      ga.noalias() += g * CMap(n_.inputs[1]->value.ptr(), k, n).transpose();
    }
    if (n_.inputs[1]->needs_grad) {
      MMap gb(n_.inputs[1]->ensureGrad().ptr(), k, n);
      gb.noalias() += CMap(n_.inputs[0]->value.ptr(), m, k).transpose() * g;
    }
  });
}

template <typename S>
Var<S> transpose2d(const Var<S>& a) {
  const Index m = a.dim(0), n = a.dim(1);
  Tensor<S> out({n, m});
  for (Index i = 0; i < m; ++i)
    for (Index j = 0; j < n; ++j) out.at(j, i) = a.value().at(i, j);
  return makeOp<S>({a}, std::move(out), [m, n](Node<S>& nd) {
    if (!nd.inputs[0]->needs_grad) return;
    auto& g = nd.inputs[0]->ensureGrad();
    for (Index i = 0; i < m; ++i)
      for (Index j = 0; j < n; ++j) g.at(i, j) += nd.grad.at(j, i);
  });
}

/// Adds row vector b (n) to each row of A (m,n).
template <typename S>
Var<S> addRowVector(const Var<S>& a, const Var<S>& b) {
  const Index m = a.dim(0), n = a.dim(1);
  if (b.value().numel() != n) throw std::invalid_argument("addRowVector: size mismatch");
  Tensor<S> out(a.shape());
  for (Index i = 0; i < m; ++i)
    for (Index j = 0; j < n; ++j) out.at(i, j) = a.value().at(i, j) + b.value()[j];
  return makeOp<S>({a, b}, std::move(out), [m, n](Node<S>& nd) {
    if (nd.inputs[0]->needs_grad) nd.inputs[0]->ensureGrad().raw() += nd.grad.raw();
    if (nd.inputs[1]->needs_grad) {
      auto& gb = nd.inputs[1]->ensureGrad();
      for (Index i = 0; i < m; ++i)
        for (Index j = 0; j < n; ++j) gb[j] += nd.grad.at(i, j);
    }
  });
}

/// y = W x + b with x (n), W (m,n), b (m).
template <typename S>
Var<S> linear(const Var<S>& x, const Var<S>& w, const Var<S>& b) {
  const Index m = w.dim(0), n = w.dim(1);
  if (x.value().numel() != n || b.value().numel() != m)
    throw std::invalid_argument("linear: size mismatch");
  Tensor<S> out({m});
  for (Index i = 0; i < m; ++i) {
    S acc = b.value()[i];
    for (Index j = 0; j < n; ++j) acc += w.value().at(i, j) * x.value()[j];
    out[i] = acc;
  }
  return makeOp<S>({x, w, b}, std::move(out), [m, n](Node<S>& nd) {
    if (nd.inputs[0]->needs_grad) {
      auto& gx = nd.inputs[0]->ensureGrad();
      for (Index i = 0; i < m; ++i)
        for (Index j = 0; j < n; ++j) gx[j] += nd.grad[i] * nd.inputs[1]->value.at(i, j);
    }
    if (nd.inputs[1]->needs_grad) {
      auto& gw = nd.inputs[1]->ensureGrad();
      for (Index i = 0; i < m; ++i)
        for (Index j = 0; j < n; ++j) gw.at(i, j) += nd.grad[i] * nd.inputs[0]->value[j];
    }
    if (nd.inputs[2]->needs_grad) nd.inputs[2]->ensureGrad().raw() += nd.grad.raw();
  });
}

}  // namespace tstereo
