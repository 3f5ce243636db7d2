#pragma once

#include "tstereo/aggregation.hpp"
#include "tstereo/cost_volume.hpp"
#include "tstereo/refinement.hpp"

namespace tstereo {

enum class Variant { Full, NoSe, NoSeNoRefine };

inline std::string variantName(Variant v) {
  switch (v) {
    case Variant::Full: return "full";
    case Variant::NoSe: return "no-se";
    case Variant::NoSeNoRefine: return "no-se-no-refine";
  }
  return "?";
}

inline Variant variantFromName(const std::string& s) {
  if (s == "full") return Variant::Full;
  if (s == "no-se" || s == "no_se") return Variant::NoSe;
  if (s == "no-se-no-refine" || s == "no_se_no_refine") return Variant::NoSeNoRefine;
  throw ConfigError("unknown variant '" + s + "' (want full | no-se | no-se-no-refine)");
}

struct ModelConfig {
  Variant variant = Variant::Full;
  Index d_max = 192;  // full-resolution maximum disparity
  EncoderConfig enc;
  AggregationConfig agg;
  RefinementConfig refine;
  uint32_t init_seed = 1234;

  Index dLevels() const { return d_max / 4; }

  void validate() const {
    if (d_max <= 0 || d_max % 16 != 0)
      throw ConfigError("d_max must be a positive multiple of 16, got " + std::to_string(d_max));
    if (enc.nc <= 0 || enc.nc8 <= 0 || enc.nc16 <= 0 || refine.nm <= 0)
      throw ConfigError("channel widths must be positive");
    if (agg.c0 <= 0 || agg.c1 <= 0 || agg.c2 <= 0) throw ConfigError("aggregation widths must be positive");
  }
};

/// A reduced configuration for CPU-scale experiments and tests.
inline ModelConfig tinyModelConfig(Index d_max = 32) {
  ModelConfig cfg;
  cfg.d_max = d_max;
  cfg.enc = {16, 24, 32, 12, 14};
  cfg.agg = {8, 12, 16, 2, true, 4};
  cfg.refine.nm = 16;
  return cfg;
}

template <typename S>
struct ModelOutput {
  Var<S> d_init_q;     // (H/4, W/4), quarter-pixel units
  Var<S> d_init_full;  // (H, W), full-pixel units
  Var<S> d_final;      // (H, W), full-pixel units
  Var<S> c_refine;     // (D, H/4, W/4)

  /// Supervision sequence in loss order (earlier predictions first).
  std::vector<Var<S>> predictions() const {
    if (d_init_full.node() == d_final.node()) return {d_final};
    return {d_init_full, d_final};
  }
};

/// The full stereo network: encoder, correlation volume, attention-gated
/// aggregation, soft-argmin readout, and (variant permitting) single-pass
/// refinement with convex upsampling.
template <typename S>
class StereoModel {
 public:
  explicit StereoModel(const ModelConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    train_mode_ = std::make_shared<bool>(false);
    std::mt19937 rng(cfg.init_seed);
    if (cfg_.variant != Variant::Full) agg_cfg_override().se_enabled = false;
    encoder_ = std::make_unique<Encoder<S>>(reg_, cfg_.enc, train_mode_, rng);
    cross_ = std::make_unique<CrossAttention16<S>>(reg_, cfg_.enc.nc16, rng);
    msc_ = std::make_unique<MscAttention<S>>(reg_, cfg_.enc, cfg_.agg, rng);
    agg_ = std::make_unique<Aggregation<S>>(reg_, cfg_.agg, train_mode_, rng);
    if (cfg_.variant != Variant::NoSeNoRefine)
      refine_ = std::make_unique<Refinement<S>>(reg_, cfg_.refine, cfg_.enc.nc, cfg_.enc.nc8,
                                                train_mode_, rng);
  }

  ModelOutput<S> forward(const Tensor<S>& left, const Tensor<S>& right) const {
    auto [fl, fr] = encoder_->encodePair(left, right);
    Var<S> c_corr = buildCorrelationVolume(fl.f4, fr.f4, cfg_.dLevels());
    Var<S> f_cross = (*cross_)(fl.f16, fr.f16);
    AttentionMaps<S> attn = (*msc_)(fl.f4, fl.f8, f_cross);
    Var<S> c_refine = (*agg_)(c_corr, attn);
    Var<S> d_init_q = softArgmin(c_refine);

    ModelOutput<S> out;
    out.c_refine = c_refine;
    out.d_init_q = d_init_q;
    if (refine_) {
      Var<S> fl_m = refine_->mergeFeatures(fl.f4, fl.f8);
      Var<S> fr_m = refine_->mergeFeatures(fr.f4, fr.f8);
      RefinementResult<S> r = (*refine_)(fl_m, fr_m, d_init_q);
      out.d_init_full = convexUpsample(d_init_q, r.mask, cfg_.refine.up_factor);
      out.d_final = convexUpsample(add(d_init_q, r.d_delta), r.mask, cfg_.refine.up_factor);
    } else {
      const Index h = d_init_q.dim(0), w = d_init_q.dim(1);
      Var<S> up = scale(
          reshape(upsampleBilinear(reshape(d_init_q, {1, h, w}), 4), {h * 4, w * 4}), S(4));
      out.d_init_full = up;
      out.d_final = up;
    }
    return out;
  }

  void setTrainMode(bool on) { *train_mode_ = on; }
  bool trainMode() const { return *train_mode_; }

  ParamRegistry<S>& registry() { return reg_; }
  const ParamRegistry<S>& registry() const { return reg_; }
  Index paramCount() const { return reg_.paramCount(); }
  const ModelConfig& config() const { return cfg_; }

  const Encoder<S>& encoder() const { return *encoder_; }
  const CrossAttention16<S>& crossAttention() const { return *cross_; }
  const MscAttention<S>& msc() const { return *msc_; }
  const Aggregation<S>& aggregation() const { return *agg_; }
  const Refinement<S>& refinement() const {
    if (!refine_) throw ConfigError("this variant has no refinement module");
    return *refine_;
  }
  bool hasRefinement() const { return refine_ != nullptr; }

 private:
  AggregationConfig& agg_cfg_override() { return cfg_.agg; }

  ModelConfig cfg_;
  ParamRegistry<S> reg_;
  std::shared_ptr<bool> train_mode_;
  std::unique_ptr<Encoder<S>> encoder_;
  std::unique_ptr<CrossAttention16<S>> cross_;
  std::unique_ptr<MscAttention<S>> msc_;
  std::unique_ptr<Aggregation<S>> agg_;
  std::unique_ptr<Refinement<S>> refine_;
};

}  // namespace tstereo
