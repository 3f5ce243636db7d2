#pragma once

#include "tstereo/errors.hpp"
#include "tstereo/nn.hpp"

#include <array>

namespace tstereo {

/// Average-pool pyramid over scales 1, 2, 4, 8, 16.
template <typename S>
struct ImagePyramid {
  std::array<Tensor<S>, 5> levels;  // index i holds scale 2^i

  const Tensor<S>& at(Index scale) const {
    switch (scale) {
      case 1: return levels[0];
      case 2: return levels[1];
      case 4: return levels[2];
      case 8: return levels[3];
      case 16: return levels[4];
      default: throw std::invalid_argument("ImagePyramid: scale must be in {1,2,4,8,16}");
    }
  }
};

template <typename S>
struct FeatureSet {
  Var<S> f4, f8, f16;
};

struct EncoderConfig {
  Index nc = 88;     // channels of f4
  Index nc8 = 120;   // channels of f8
  Index nc16 = 176;  // channels of f16
  Index c_stem = 44; // width after the 1/2-resolution block
  Index c_mid = 60;  // width after the 1/4-resolution block
};

template <typename S>
void checkImageDims(const Tensor<S>& image) {
  if (image.ndim() != 2) throw SizingError("image must be 2-D, got " + shapeStr(image.shape()));
  if (image.dim(0) % 16 != 0)
    throw SizingError("image height " + std::to_string(image.dim(0)) + " not divisible by 16");
  if (image.dim(1) % 16 != 0)
    throw SizingError("image width " + std::to_string(image.dim(1)) + " not divisible by 16");
}

template <typename S>
ImagePyramid<S> buildPyramid(const Tensor<S>& image) {
  checkImageDims(image);
  ImagePyramid<S> pyr;
  pyr.levels[0] = image;
  for (int i = 1; i < 5; ++i) pyr.levels[i] = avgPool2x2(pyr.levels[i - 1]);
  return pyr;
}

/// Shallow siamese feature extractor. The three finest pyramid levels feed
/// the 1/4-resolution features; coarser features concatenate downsampled
/// higher-resolution features with the next pyramid level.
template <typename S>
class Encoder {
 public:
  Encoder(ParamRegistry<S>& reg, const EncoderConfig& cfg, std::shared_ptr<const bool> train_mode,
          std::mt19937& rng)
      : cfg_(cfg) {
    ScopeGuard<S> sg(reg, "encoder");
    b1a_ = ConvNormAct2d<S>(reg, "b1a", 1, cfg.c_stem, 3, 2, rng, train_mode);
    b1b_ = ConvNormAct2d<S>(reg, "b1b", cfg.c_stem, cfg.c_stem, 3, 1, rng, train_mode);
    b2a_ = ConvNormAct2d<S>(reg, "b2a", cfg.c_stem + 1, cfg.c_mid, 3, 2, rng, train_mode);
    b2b_ = ConvNormAct2d<S>(reg, "b2b", cfg.c_mid, cfg.c_mid, 3, 1, rng, train_mode);
    b4a_ = ConvNormAct2d<S>(reg, "b4a", cfg.c_mid + 1, cfg.nc, 3, 1, rng, train_mode);
    b4b_ = ConvNormAct2d<S>(reg, "b4b", cfg.nc, cfg.nc, 3, 1, rng, train_mode);
    down4_ = Conv2dLayer<S>(reg, "down4", cfg.nc, cfg.nc, 3, 2, 1, rng);
    b8a_ = ConvNormAct2d<S>(reg, "b8a", cfg.nc + 1, cfg.nc8, 3, 1, rng, train_mode);
    b8b_ = ConvNormAct2d<S>(reg, "b8b", cfg.nc8, cfg.nc8, 3, 1, rng, train_mode);
    down8_ = Conv2dLayer<S>(reg, "down8", cfg.nc8, cfg.nc8, 3, 2, 1, rng);
    b16a_ = ConvNormAct2d<S>(reg, "b16a", cfg.nc8 + 1, cfg.nc16, 3, 1, rng, train_mode);
    b16b_ = ConvNormAct2d<S>(reg, "b16b", cfg.nc16, cfg.nc16, 3, 1, rng, train_mode);
  }

  FeatureSet<S> encode(const Tensor<S>& image) const {
    if (!image.allFinite()) throw std::invalid_argument("encode: non-finite input rejected");
    ImagePyramid<S> pyr = buildPyramid(image);
    auto lvl = [&](Index s) {
      const Tensor<S>& t = pyr.at(s);
      return Var<S>::constant(t.reshaped({1, t.dim(0), t.dim(1)}));
    };
    Var<S> a = b1b_(b1a_(lvl(1)));
    Var<S> b = b2b_(b2a_(concatDim<S>({a, lvl(2)}, 0)));
    Var<S> f4 = b4b_(b4a_(concatDim<S>({b, lvl(4)}, 0)));
    Var<S> f8 = b8b_(b8a_(concatDim<S>({down4_(f4), lvl(8)}, 0)));
    Var<S> f16 = b16b_(b16a_(concatDim<S>({down8_(f8), lvl(16)}, 0)));
    return {f4, f8, f16};
  }

  std::pair<FeatureSet<S>, FeatureSet<S>> encodePair(const Tensor<S>& left,
                                                     const Tensor<S>& right) const {
    if (left.shape() != right.shape())
      throw SizingError("encodePair: view dimension mismatch, left " + shapeStr(left.shape()) +
                        " vs right " + shapeStr(right.shape()));
    return {encode(left), encode(right)};
  }

  const EncoderConfig& config() const { return cfg_; }

 private:
  EncoderConfig cfg_;
  ConvNormAct2d<S> b1a_, b1b_, b2a_, b2b_, b4a_, b4b_, b8a_, b8b_, b16a_, b16b_;
  Conv2dLayer<S> down4_, down8_;
};

}  // namespace tstereo
