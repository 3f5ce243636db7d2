#pragma once

#include "tstereo/nn_ops.hpp"

#include <memory>
#include <string>

namespace tstereo {

/// Named parameters (trainable leaves) and buffers (running statistics).
/// Registration order is the checkpoint serialization order.
template <typename S>
class ParamRegistry {
 public:
  Var<S> add(const std::string& name, Tensor<S> init) {
    auto v = Var<S>::leaf(std::move(init), true);
    params_.emplace_back(qualify(name), v);
    return v;
  }
  std::shared_ptr<Tensor<S>> addBuffer(const std::string& name, Tensor<S> init) {
    auto t = std::make_shared<Tensor<S>>(std::move(init));
    buffers_.emplace_back(qualify(name), t);
    return t;
  }
  void pushScope(const std::string& s) { scope_.push_back(s); }
  void popScope() { scope_.pop_back(); }

  const std::vector<std::pair<std::string, Var<S>>>& params() const { return params_; }
  const std::vector<std::pair<std::string, std::shared_ptr<Tensor<S>>>>& buffers() const {
    return buffers_;
  }
  Index paramCount() const {
    Index n = 0;
    for (auto& [_, v] : params_) n += v.value().numel();
    return n;
  }
  void zeroGrad() {
    for (auto& [_, v] : params_) const_cast<Var<S>&>(v).zeroGrad();
  }

 private:
  std::string qualify(const std::string& name) const {
    std::string q;
    for (auto& s : scope_) q += s + ".";
    return q + name;
  }
  std::vector<std::string> scope_;
  std::vector<std::pair<std::string, Var<S>>> params_;
  std::vector<std::pair<std::string, std::shared_ptr<Tensor<S>>>> buffers_;
};

template <typename S>
struct ScopeGuard {
  ParamRegistry<S>& reg;
  ScopeGuard(ParamRegistry<S>& r, const std::string& s) : reg(r) { reg.pushScope(s); }
  ~ScopeGuard() { reg.popScope(); }
};

template <typename S>
Tensor<S> heInit(Shape shape, Index fan_in, std::mt19937& rng) {
  Tensor<S> t(shape);
  t.setRandomNormal(rng, static_cast<S>(std::sqrt(2.0 / static_cast<double>(fan_in))));
  return t;
}

// ---------------------------------------------------------------------------

template <typename S>
class Conv2dLayer {
 public:
  Conv2dLayer() = default;
  Conv2dLayer(ParamRegistry<S>& reg, const std::string& name, Index ci, Index co, Index k,
              Index stride, Index groups, std::mt19937& rng, bool zero_init = false) {
    stride_ = stride;
    groups_ = groups;
    Shape ws{co, ci / groups, k, k};
    Tensor<S> w = zero_init ? Tensor<S>::zeros(ws) : heInit<S>(ws, ci / groups * k * k, rng);
    w_ = reg.add(name + ".w", std::move(w));
    b_ = reg.add(name + ".b", Tensor<S>::zeros({co}));
  }
  Var<S> operator()(const Var<S>& x) const { return conv2d(x, w_, b_, stride_, groups_); }
  Var<S> weight() const { return w_; }
  Var<S> bias() const { return b_; }

 private:
  Var<S> w_, b_;
  Index stride_ = 1, groups_ = 1;
};

template <typename S>
class Conv3dLayer {
 public:
  Conv3dLayer() = default;
  Conv3dLayer(ParamRegistry<S>& reg, const std::string& name, Index ci, Index co, Index k,
              Index stride, Index groups, std::mt19937& rng, bool zero_init = false) {
    stride_ = stride;
    groups_ = groups;
    Shape ws{co, ci / groups, k, k, k};
    Tensor<S> w = zero_init ? Tensor<S>::zeros(ws) : heInit<S>(ws, ci / groups * k * k * k, rng);
    w_ = reg.add(name + ".w", std::move(w));
    b_ = reg.add(name + ".b", Tensor<S>::zeros({co}));
  }
  Var<S> operator()(const Var<S>& x) const { return conv3d(x, w_, b_, stride_, groups_); }

 private:
  Var<S> w_, b_;
  Index stride_ = 1, groups_ = 1;
};

template <typename S>
class LinearLayer {
 public:
  LinearLayer() = default;
  LinearLayer(ParamRegistry<S>& reg, const std::string& name, Index n_in, Index n_out,
              std::mt19937& rng) {
    w_ = reg.add(name + ".w", heInit<S>({n_out, n_in}, n_in, rng));
    b_ = reg.add(name + ".b", Tensor<S>::zeros({n_out}));
  }
  Var<S> operator()(const Var<S>& x) const { return linear(x, w_, b_); }

 private:
  Var<S> w_, b_;
};

/// Per-channel normalization against running statistics, with a learned
/// affine. Statistics are treated as constants on the tape and updated as a
/// side effect while the owning model is in training mode.
template <typename S>
class ChannelNorm {
 public:
  ChannelNorm() = default;
  ChannelNorm(ParamRegistry<S>& reg, const std::string& name, Index c,
              std::shared_ptr<const bool> train_mode)
      : train_mode_(std::move(train_mode)) {
    gamma_ = reg.add(name + ".gamma", Tensor<S>::full({c}, S(1)));
    beta_ = reg.add(name + ".beta", Tensor<S>::zeros({c}));
    mean_ = reg.addBuffer(name + ".running_mean", Tensor<S>::zeros({c}));
    var_ = reg.addBuffer(name + ".running_var", Tensor<S>::full({c}, S(1)));
  }

  Var<S> operator()(const Var<S>& x) const {
    const Index c = x.dim(0);
    const Index inner = x.value().numel() / c;
    if (*train_mode_) {
      for (Index ci = 0; ci < c; ++ci) {
        S mu = S(0), m2 = S(0);
        for (Index i = 0; i < inner; ++i) mu += x.value()[ci * inner + i];
        mu /= static_cast<S>(inner);
        for (Index i = 0; i < inner; ++i) {
          const S d = x.value()[ci * inner + i] - mu;
          m2 += d * d;
        }
        m2 /= static_cast<S>(inner);
        (*mean_)[ci] = (S(1) - momentum_) * (*mean_)[ci] + momentum_ * mu;
        (*var_)[ci] = (S(1) - momentum_) * (*var_)[ci] + momentum_ * m2;
      }
    }
    Tensor<S> a({c}), b({c});
    for (Index ci = 0; ci < c; ++ci) {
      a[ci] = S(1) / std::sqrt((*var_)[ci] + eps_);
      b[ci] = -(*mean_)[ci] * a[ci];
    }
    return addChannels(mulChannels(channelConstAffine(x, a, b), gamma_), beta_);
  }

 private:
  Var<S> gamma_, beta_;
  std::shared_ptr<Tensor<S>> mean_, var_;
  std::shared_ptr<const bool> train_mode_;
  S momentum_ = S(0.1);
  S eps_ = S(1e-5);
};

/// conv -> norm -> silu.
template <typename S>
class ConvNormAct2d {
 public:
  ConvNormAct2d() = default;
  ConvNormAct2d(ParamRegistry<S>& reg, const std::string& name, Index ci, Index co, Index k,
                Index stride, std::mt19937& rng, std::shared_ptr<const bool> train_mode)
      : conv_(reg, name + ".conv", ci, co, k, stride, 1, rng),
        norm_(reg, name + ".norm", co, std::move(train_mode)) {}
  Var<S> operator()(const Var<S>& x) const { return silu(norm_(conv_(x))); }

 private:
  Conv2dLayer<S> conv_;
  ChannelNorm<S> norm_;
};

/// Squeeze-and-excitation channel gate: global pool, bottleneck, sigmoid.
template <typename S>
class SEGate {
 public:
  SEGate() = default;
  SEGate(ParamRegistry<S>& reg, const std::string& name, Index c, Index reduction,
         std::mt19937& rng) {
    if (c < reduction)
      throw std::invalid_argument("SEGate: channels (" + std::to_string(c) +
                                  ") must be >= reduction ratio (" + std::to_string(reduction) +
                                  ")");
    fc1_ = LinearLayer<S>(reg, name + ".fc1", c, c / reduction, rng);
    fc2_ = LinearLayer<S>(reg, name + ".fc2", c / reduction, c, rng);
  }
  Var<S> operator()(const Var<S>& x) const {
    Var<S> s = sigmoid(fc2_(silu(fc1_(globalMeanPerChannel(x)))));
    return mulChannels(x, s);
  }

 private:
  LinearLayer<S> fc1_, fc2_;
};

}  // namespace tstereo
