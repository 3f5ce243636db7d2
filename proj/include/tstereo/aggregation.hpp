#pragma once

#include "tstereo/encoder.hpp"

namespace tstereo {

template <typename S>
struct AttentionMaps {
  Var<S> a4, a8, a16;  // pre-gating logits; sigmoid applied where consumed
};

struct AggregationConfig {
  Index c0 = 30;  // volume channels at 1/4
  Index c1 = 60;  // at 1/8
  Index c2 = 88;  // at 1/16
  Index expansion = 2;
  bool se_enabled = true;
  Index se_reduction = 4;
};

/// Single-head global cross-attention over the 1/16 features: the left map
/// supplies queries, the right map keys and values; the attended output is
/// added residually to the left features.
template <typename S>
class CrossAttention16 {
 public:
  CrossAttention16() = default;
  CrossAttention16(ParamRegistry<S>& reg, Index c, std::mt19937& rng) : c_(c) {
    ScopeGuard<S> sg(reg, "cross16");
    wq_ = reg.add("wq", heInit<S>({c, c}, c, rng));
    wk_ = reg.add("wk", heInit<S>({c, c}, c, rng));
    wv_ = reg.add("wv", heInit<S>({c, c}, c, rng));
    wo_ = reg.add("wo", heInit<S>({c, c}, c, rng));
    bq_ = reg.add("bq", Tensor<S>::zeros({c}));
    bk_ = reg.add("bk", Tensor<S>::zeros({c}));
    bv_ = reg.add("bv", Tensor<S>::zeros({c}));
    bo_ = reg.add("bo", Tensor<S>::zeros({c}));
  }

  Var<S> operator()(const Var<S>& f_l16, const Var<S>& f_r16) const {
    if (f_l16.shape() != f_r16.shape())
      throw std::invalid_argument("CrossAttention16: shape mismatch");
    const Index c = f_l16.dim(0), h = f_l16.dim(1), w = f_l16.dim(2);
    if (c != c_) throw std::invalid_argument("CrossAttention16: channel mismatch");
    auto tokens = [&](const Var<S>& f) { return transpose2d(reshape(f, {c, h * w})); };
    Var<S> xl = tokens(f_l16), xr = tokens(f_r16);
    Var<S> q = addRowVector(matmul(xl, wq_), bq_);
    Var<S> k = addRowVector(matmul(xr, wk_), bk_);
    Var<S> v = addRowVector(matmul(xr, wv_), bv_);
    Var<S> att = softmaxDim(scale(matmul(q, transpose2d(k)), S(1) / std::sqrt(static_cast<S>(c))), 1);
    Var<S> out = addRowVector(matmul(matmul(att, v), wo_), bo_);
    return add(f_l16, reshape(transpose2d(out), {c, h, w}));
  }

  /// Attention weights alone, for oracle comparison in tests.
  Var<S> attentionWeights(const Var<S>& f_l16, const Var<S>& f_r16) const {
    const Index c = f_l16.dim(0), h = f_l16.dim(1), w = f_l16.dim(2);
    auto tokens = [&](const Var<S>& f) { return transpose2d(reshape(f, {c, h * w})); };
    Var<S> q = addRowVector(matmul(tokens(f_l16), wq_), bq_);
    Var<S> k = addRowVector(matmul(tokens(f_r16), wk_), bk_);
    return softmaxDim(scale(matmul(q, transpose2d(k)), S(1) / std::sqrt(static_cast<S>(c))), 1);
  }

 private:
  Index c_ = 0;
  Var<S> wq_, wk_, wv_, wo_, bq_, bk_, bv_, bo_;
};

/// Multi-scale convolution attention: parallel 1x1 / 7x7 / 11x11 / 21x21
/// kernels (large kernels depthwise), summed, projected to the channel count
/// of the matching aggregation stage.
template <typename S>
class MscBranch {
 public:
  MscBranch() = default;
  MscBranch(ParamRegistry<S>& reg, const std::string& name, Index c_in, Index c_out,
            std::mt19937& rng) {
    ScopeGuard<S> sg(reg, name);
    k1_ = Conv2dLayer<S>(reg, "k1", c_in, c_in, 1, 1, 1, rng);
    k7_ = Conv2dLayer<S>(reg, "k7", c_in, c_in, 7, 1, c_in, rng);
    k11_ = Conv2dLayer<S>(reg, "k11", c_in, c_in, 11, 1, c_in, rng);
    k21_ = Conv2dLayer<S>(reg, "k21", c_in, c_in, 21, 1, c_in, rng);
    proj_ = Conv2dLayer<S>(reg, "proj", c_in, c_out, 1, 1, 1, rng);
  }
  Var<S> operator()(const Var<S>& f) const { return proj_(preProjection(f)); }
  Var<S> preProjection(const Var<S>& f) const {
    return add(add(k1_(f), k7_(f)), add(k11_(f), k21_(f)));
  }

 private:
  Conv2dLayer<S> k1_, k7_, k11_, k21_, proj_;
};

template <typename S>
class MscAttention {
 public:
  MscAttention() = default;
  MscAttention(ParamRegistry<S>& reg, const EncoderConfig& enc, const AggregationConfig& agg,
               std::mt19937& rng) {
    ScopeGuard<S> sg(reg, "msc");
    s4_ = MscBranch<S>(reg, "s4", enc.nc, agg.c0, rng);
    s8_ = MscBranch<S>(reg, "s8", enc.nc8, agg.c1, rng);
    s16_ = MscBranch<S>(reg, "s16", enc.nc16, agg.c2, rng);
  }
  AttentionMaps<S> operator()(const Var<S>& f_l4, const Var<S>& f_l8, const Var<S>& f_cross16) const {
    return {s4_(f_l4), s8_(f_l8), s16_(f_cross16)};
  }
  const MscBranch<S>& scale4() const { return s4_; }

 private:
  MscBranch<S> s4_, s8_, s16_;
};

/// MobileNetV3-style inverted residual block on a 4-D cost volume:
/// pointwise expand, depthwise 3x3x3, optional SE, pointwise project, skip.
template <typename S>
class InvertedResidual3d {
 public:
  InvertedResidual3d() = default;
  InvertedResidual3d(ParamRegistry<S>& reg, const std::string& name, Index c, Index expansion,
                     bool se, Index se_reduction, std::shared_ptr<const bool> train_mode,
                     std::mt19937& rng)
      : use_se_(se) {
    ScopeGuard<S> sg(reg, name);
    const Index ce = c * expansion;
    pw1_ = Conv3dLayer<S>(reg, "pw1", c, ce, 1, 1, 1, rng);
    n1_ = ChannelNorm<S>(reg, "n1", ce, train_mode);
    dw_ = Conv3dLayer<S>(reg, "dw", ce, ce, 3, 1, ce, rng);
    n2_ = ChannelNorm<S>(reg, "n2", ce, train_mode);
    if (se) se_ = SEGate<S>(reg, "se", ce, se_reduction, rng);
    pw2_ = Conv3dLayer<S>(reg, "pw2", ce, c, 1, 1, 1, rng);
    n3_ = ChannelNorm<S>(reg, "n3", c, train_mode);
  }
  Var<S> operator()(const Var<S>& x) const {
    Var<S> h = silu(n2_(dw_(silu(n1_(pw1_(x))))));
    if (use_se_) h = se_(h);
    return add(x, n3_(pw2_(h)));
  }

 private:
  bool use_se_ = true;
  Conv3dLayer<S> pw1_, dw_, pw2_;
  ChannelNorm<S> n1_, n2_, n3_;
  SEGate<S> se_;
};

/// Hourglass over (disparity, y, x): encoder stages at 1/4, 1/8, 1/16 volume
/// scales, each gated by the sigmoid of its attention map, decoded back with
/// skip connections.
template <typename S>
class Aggregation {
 public:
  Aggregation(ParamRegistry<S>& reg, const AggregationConfig& cfg,
              std::shared_ptr<const bool> train_mode, std::mt19937& rng)
      : cfg_(cfg) {
    ScopeGuard<S> sg(reg, "agg");
    auto train = train_mode;
    entry_ = Conv3dLayer<S>(reg, "entry", 1, cfg.c0, 1, 1, 1, rng);
    for (int i = 0; i < 2; ++i)
      enc4_.push_back(InvertedResidual3d<S>(reg, "enc4_" + std::to_string(i), cfg.c0, cfg.expansion,
                                            cfg.se_enabled, cfg.se_reduction, train, rng));
    down48_ = Conv3dLayer<S>(reg, "down48", cfg.c0, cfg.c1, 3, 2, 1, rng);
    dn48_ = ChannelNorm<S>(reg, "dn48", cfg.c1, train);
    for (int i = 0; i < 2; ++i)
      enc8_.push_back(InvertedResidual3d<S>(reg, "enc8_" + std::to_string(i), cfg.c1, cfg.expansion,
                                            cfg.se_enabled, cfg.se_reduction, train, rng));
    down816_ = Conv3dLayer<S>(reg, "down816", cfg.c1, cfg.c2, 3, 2, 1, rng);
    dn816_ = ChannelNorm<S>(reg, "dn816", cfg.c2, train);
    for (int i = 0; i < 2; ++i)
      enc16_.push_back(InvertedResidual3d<S>(reg, "enc16_" + std::to_string(i), cfg.c2,
                                             cfg.expansion, cfg.se_enabled, cfg.se_reduction, train,
                                             rng));
    up168_ = Conv3dLayer<S>(reg, "up168", cfg.c2, cfg.c1, 3, 1, 1, rng);
    un168_ = ChannelNorm<S>(reg, "un168", cfg.c1, train);
    dec8_ = InvertedResidual3d<S>(reg, "dec8", cfg.c1, cfg.expansion, cfg.se_enabled,
                                  cfg.se_reduction, train, rng);
    up84_ = Conv3dLayer<S>(reg, "up84", cfg.c1, cfg.c0, 3, 1, 1, rng);
    un84_ = ChannelNorm<S>(reg, "un84", cfg.c0, train);
    dec4_ = InvertedResidual3d<S>(reg, "dec4", cfg.c0, cfg.expansion, cfg.se_enabled,
                                  cfg.se_reduction, train, rng);
    exit_ = Conv3dLayer<S>(reg, "exit", cfg.c0, 1, 1, 1, 1, rng);
  }

  /// c_corr (D,H/4,W/4) -> C_refine of the same shape.
  Var<S> operator()(const Var<S>& c_corr, const AttentionMaps<S>& attn) const {
    const Index d = c_corr.dim(0), h = c_corr.dim(1), w = c_corr.dim(2);
    if (d % 4 != 0 || h % 4 != 0 || w % 4 != 0)
      throw SizingError("Aggregation: volume dims " + shapeStr(c_corr.shape()) +
                        " must be divisible by 4");
    Var<S> v4 = entry_(reshape(c_corr, {1, d, h, w}));
    for (auto& blk : enc4_) v4 = blk(v4);
    v4 = mulGateOverDepth(v4, sigmoid(attn.a4));

    Var<S> v8 = silu(dn48_(down48_(v4)));
    for (auto& blk : enc8_) v8 = blk(v8);
    v8 = mulGateOverDepth(v8, sigmoid(attn.a8));

    Var<S> v16 = silu(dn816_(down816_(v8)));
    for (auto& blk : enc16_) v16 = blk(v16);
    v16 = mulGateOverDepth(v16, sigmoid(attn.a16));

    Var<S> u8 = dec8_(add(silu(un168_(up168_(upsampleTrilinear2x(v16)))), v8));
    Var<S> u4 = dec4_(add(silu(un84_(up84_(upsampleTrilinear2x(u8)))), v4));
    return reshape(exit_(u4), {d, h, w});
  }

  const AggregationConfig& config() const { return cfg_; }

 private:
  AggregationConfig cfg_;
  Conv3dLayer<S> entry_, down48_, down816_, up168_, up84_, exit_;
  ChannelNorm<S> dn48_, dn816_, un168_, un84_;
  std::vector<InvertedResidual3d<S>> enc4_, enc8_, enc16_;
  InvertedResidual3d<S> dec8_, dec4_;
};

}  // namespace tstereo
