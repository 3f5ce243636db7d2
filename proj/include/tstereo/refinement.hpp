#pragma once

#include "tstereo/nn.hpp"

namespace tstereo {

struct RefinementConfig {
  Index nm = 120;       // merged feature channels
  Index corr_radius = 4;  // horizontal correlation window radius
  Index up_factor = 4;
};

/// Fuses 1/4 and 1/8 features into one 1/4-resolution map. Shared between
/// the two views.
template <typename S>
class MergeCnn {
 public:
  MergeCnn() = default;
  MergeCnn(ParamRegistry<S>& reg, Index nc, Index nc8, Index nm,
           std::shared_ptr<const bool> train_mode, std::mt19937& rng) {
    ScopeGuard<S> sg(reg, "merge");
    c1_ = ConvNormAct2d<S>(reg, "c1", nc + nc8, nm, 3, 1, rng, train_mode);
    c2_ = ConvNormAct2d<S>(reg, "c2", nm, nm, 3, 1, rng, train_mode);
  }
  Var<S> operator()(const Var<S>& f4, const Var<S>& f8) const {
    return c2_(c1_(concatDim<S>({f4, upsampleBilinear(f8, 2)}, 0)));
  }

 private:
  ConvNormAct2d<S> c1_, c2_;
};

template <typename S>
struct RefinementResult {
  Var<S> d_delta;  // (H/4, W/4), signed quarter-resolution adjustment
  Var<S> mask;     // (9*k^2, H/4, W/4), softmax-normalized over neighbours
};

/// Single-pass disparity refinement: warp-based correlation attention,
/// attention-blended dual-kernel decoding, and the convex upsampling mask.
template <typename S>
class Refinement {
 public:
  Refinement(ParamRegistry<S>& reg, const RefinementConfig& cfg, Index nc, Index nc8,
             std::shared_ptr<const bool> train_mode, std::mt19937& rng)
      : cfg_(cfg), merge_(reg, nc, nc8, cfg.nm, train_mode, rng) {
    ScopeGuard<S> sg(reg, "refine");
    const Index cin = cfg.nm + 1 + (2 * cfg.corr_radius + 1);
    b1a_ = ConvNormAct2d<S>(reg, "b1a", cin, cfg.nm, 1, 1, rng, train_mode);
    b1b_ = Conv2dLayer<S>(reg, "b1b", cfg.nm, cfg.nm, 1, 1, 1, rng);
    b3a_ = ConvNormAct2d<S>(reg, "b3a", cin, cfg.nm, 3, 1, rng, train_mode);
    b3b_ = Conv2dLayer<S>(reg, "b3b", cfg.nm, cfg.nm, 3, 1, 1, rng);
    attn_fc1_ = LinearLayer<S>(reg, "attn_fc1", cin, std::max<Index>(cin / 4, 4), rng);
    attn_fc2_ = LinearLayer<S>(reg, "attn_fc2", std::max<Index>(cin / 4, 4), cfg.nm, rng);
    head_ = ConvNormAct2d<S>(reg, "head", cfg.nm, cfg.nm, 3, 1, rng, train_mode);
    // zero-initialized so refinement starts as the identity
    delta_out_ = Conv2dLayer<S>(reg, "delta_out", cfg.nm, 1, 3, 1, 1, rng, /*zero_init=*/true);
    mask_head_ = ConvNormAct2d<S>(reg, "mask_head", cfg.nm, cfg.nm, 3, 1, rng, train_mode);
    mask_out_ = Conv2dLayer<S>(reg, "mask_out", cfg.nm, 9 * cfg.up_factor * cfg.up_factor, 3, 1, 1,
                               rng, /*zero_init=*/true);
  }

  Var<S> mergeFeatures(const Var<S>& f4, const Var<S>& f8) const { return merge_(f4, f8); }

  /// f_l_merge, f_r_merge at 1/4 resolution; d_init in quarter-pixel units.
  RefinementResult<S> operator()(const Var<S>& f_l_merge, const Var<S>& f_r_merge,
                                 const Var<S>& d_init) const {
    Var<S> warped = warpHorizontal(f_r_merge, d_init);
    Var<S> w_corr = localCorrelation(f_l_merge, warped, cfg_.corr_radius);
    const Index h = d_init.dim(0), w = d_init.dim(1);
    Var<S> f_concat = concatDim<S>({f_l_merge, reshape(d_init, {1, h, w}), w_corr}, 0);
    return decode(f_concat);
  }

  RefinementResult<S> decode(const Var<S>& f_concat) const {
    Var<S> w_attn = blendWeights(f_concat);
    Var<S> one_minus = addScalar(scale(w_attn, S(-1)), S(1));
    Var<S> merged =
        add(mulChannels(branch1(f_concat), w_attn), mulChannels(branch3(f_concat), one_minus));
    return decodeHeads(merged);
  }

  /// Runs the output heads on an already-blended feature map (test hook).
  RefinementResult<S> decodeHeads(const Var<S>& merged) const {
    const Index h = merged.dim(1), w = merged.dim(2);
    Var<S> d_delta = reshape(delta_out_(head_(merged)), {h, w});
    Var<S> logits = mask_out_(mask_head_(merged));
    const Index k2 = cfg_.up_factor * cfg_.up_factor;
    Var<S> mask = reshape(softmaxDim(reshape(logits, {9, k2, h, w}), 0), {9 * k2, h, w});
    return {d_delta, mask};
  }

  /// Per-channel blend weights for a given concat input (test hook).
  Var<S> blendWeights(const Var<S>& f_concat) const {
    return sigmoid(attn_fc2_(silu(attn_fc1_(globalMeanPerChannel(f_concat)))));
  }
  Var<S> branch1(const Var<S>& f_concat) const { return b1b_(b1a_(f_concat)); }
  Var<S> branch3(const Var<S>& f_concat) const { return b3b_(b3a_(f_concat)); }

  const RefinementConfig& config() const { return cfg_; }

 private:
  RefinementConfig cfg_;
  MergeCnn<S> merge_;
  ConvNormAct2d<S> b1a_, b3a_, head_, mask_head_;
  Conv2dLayer<S> b1b_, b3b_, delta_out_, mask_out_;
  LinearLayer<S> attn_fc1_, attn_fc2_;
};

}  // namespace tstereo
