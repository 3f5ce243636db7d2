#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "test_util.hpp"
#include "tstereo/encoder.hpp"

using namespace tstereo;
using tstereo::testing::fdGradCheck;
using tstereo::testing::randomTensor;
using D = double;

namespace {
EncoderConfig tinyEnc() { return {8, 8, 8, 4, 6}; }
}  // namespace

TEST_CASE("build_pyramid") {
  SUBCASE("constant image stays constant at every level") {
    auto pyr = buildPyramid(Tensor<D>::full({32, 32}, 0.3));
    for (Index s : {1, 2, 4, 8, 16}) {
      CHECK(pyr.at(s).dim(0) == 32 / s);
      CHECK((pyr.at(s).raw() - 0.3).abs().maxCoeff() < 1e-15);
    }
  }
  SUBCASE("tiled checkerboard averages to 0.5 at level 2") {
    Tensor<D> img({32, 32});
    for (Index y = 0; y < 32; ++y)
      for (Index x = 0; x < 32; ++x) img.at(y, x) = ((y + x) % 2) ? 1.0 : 0.0;
    auto pyr = buildPyramid(img);
    CHECK((pyr.at(2).raw() - 0.5).abs().maxCoeff() < 1e-15);
  }
  SUBCASE("level 4 equals brute-force 4x4 block means") {
    std::mt19937 rng(5);
    Tensor<D> img({64, 64});
    img.setRandomUniform(rng, 0.0, 1.0);
    auto pyr = buildPyramid(img);
    for (Index by = 0; by < 16; ++by)
      for (Index bx = 0; bx < 16; ++bx) {
        D acc = 0;
        for (Index y = 0; y < 4; ++y)
          for (Index x = 0; x < 4; ++x) acc += img.at(4 * by + y, 4 * bx + x);
        CHECK(pyr.at(4).at(by, bx) == doctest::Approx(acc / 16.0).epsilon(1e-12));
      }
  }
  SUBCASE("level 1 is the input unchanged") {
    std::mt19937 rng(6);
    Tensor<D> img({32, 48});
    img.setRandomUniform(rng, 0.0, 1.0);
    auto pyr = buildPyramid(img);
    CHECK((pyr.at(1).raw() - img.raw()).abs().maxCoeff() == 0.0);
  }
  SUBCASE("non-divisible dims rejected naming the dimension") {
    CHECK_THROWS_WITH_AS((void)buildPyramid(Tensor<D>::zeros({30, 32})),
                         doctest::Contains("height 30"), SizingError);
    CHECK_THROWS_WITH_AS((void)buildPyramid(Tensor<D>::zeros({32, 40})),
                         doctest::Contains("width 40"), SizingError);
  }
  SUBCASE("average pooling preserves the global mean") {
    std::mt19937 rng(7);
    Tensor<D> img({48, 64});
    img.setRandomUniform(rng, 0.0, 1.0);
    auto pyr = buildPyramid(img);
    const D m1 = pyr.at(1).raw().mean();
    for (Index s : {2, 4, 8, 16}) CHECK(std::abs(pyr.at(s).raw().mean() - m1) < 1e-6);
  }
}

TEST_CASE("encode") {
  ParamRegistry<D> reg;
  auto train = std::make_shared<bool>(false);
  std::mt19937 rng(11);
  Encoder<D> enc(reg, tinyEnc(), train, rng);

  SUBCASE("zero image with zero biases gives zero features") {
    auto fs = enc.encode(Tensor<D>::zeros({32, 32}));
    CHECK(fs.f4.value().raw().abs().maxCoeff() < 1e-12);
    CHECK(fs.f8.value().raw().abs().maxCoeff() < 1e-12);
    CHECK(fs.f16.value().raw().abs().maxCoeff() < 1e-12);
  }
  SUBCASE("shape contract on 64x80") {
    std::mt19937 r2(3);
    Tensor<D> img({64, 80});
    img.setRandomUniform(r2, 0.0, 1.0);
    auto fs = enc.encode(img);
    CHECK(fs.f4.shape() == Shape{8, 16, 20});
    CHECK(fs.f8.shape() == Shape{8, 8, 10});
    CHECK(fs.f16.shape() == Shape{8, 4, 5});
    CHECK(fs.f4.value().allFinite());
    CHECK(fs.f8.value().allFinite());
    CHECK(fs.f16.value().allFinite());
  }
  SUBCASE("non-finite input rejected") {
    Tensor<D> img = Tensor<D>::zeros({32, 32});
    img[7] = std::numeric_limits<D>::quiet_NaN();
    CHECK_THROWS_AS((void)enc.encode(img), std::invalid_argument);
  }
  SUBCASE("horizontal shift equivariance probe (interior)") {
    std::mt19937 r2(17);
    Tensor<D> img({64, 64});
    img.setRandomUniform(r2, 0.0, 1.0);
    Tensor<D> shifted({64, 64});
    for (Index y = 0; y < 64; ++y)
      for (Index x = 0; x < 64; ++x) shifted.at(y, x) = img.at(y, (x + 4) % 64);
    auto fa = enc.encode(img);
    auto fb = enc.encode(shifted);
    // fb.f4(:, y, x) should be close to fa.f4(:, y, x+1) away from borders
    D max_dev = 0;
    for (Index c = 0; c < 8; ++c)
      for (Index y = 4; y < 12; ++y)
        for (Index x = 4; x < 11; ++x)
          max_dev = std::max(max_dev, std::abs(fb.f4.value().at(c, y, x) -
                                               fa.f4.value().at(c, y, x + 1)));
    MESSAGE("shift-equivariance max interior deviation: ", max_dev);
    // the stacked receptive field still touches reflected borders at this
    // image size; tolerance set empirically
    CHECK(max_dev < 0.05);
  }
}

TEST_CASE("encode_pair") {
  ParamRegistry<D> reg;
  auto train = std::make_shared<bool>(false);
  std::mt19937 rng(13);
  Encoder<D> enc(reg, tinyEnc(), train, rng);
  std::mt19937 r2(5);
  Tensor<D> a({32, 48}), b({32, 48});
  a.setRandomUniform(r2, 0.0, 1.0);
  b.setRandomUniform(r2, 0.0, 1.0);

  SUBCASE("identical inputs give identical features") {
    auto [fl, fr] = enc.encodePair(a, a);
    CHECK((fl.f4.value().raw() - fr.f4.value().raw()).abs().maxCoeff() == 0.0);
  }
  SUBCASE("swapped arguments swap outputs bit-for-bit") {
    auto [fl, fr] = enc.encodePair(a, b);
    auto [gl, gr] = enc.encodePair(b, a);
    CHECK((fl.f4.value().raw() - gr.f4.value().raw()).abs().maxCoeff() == 0.0);
    CHECK((fr.f16.value().raw() - gl.f16.value().raw()).abs().maxCoeff() == 0.0);
  }
  SUBCASE("pair equals two independent encode() calls") {
    auto [fl, fr] = enc.encodePair(a, b);
    auto sa = enc.encode(a);
    auto sb = enc.encode(b);
    CHECK((fl.f8.value().raw() - sa.f8.value().raw()).abs().maxCoeff() == 0.0);
    CHECK((fr.f8.value().raw() - sb.f8.value().raw()).abs().maxCoeff() == 0.0);
  }
  SUBCASE("dimension mismatch rejected") {
    CHECK_THROWS_AS((void)enc.encodePair(a, Tensor<D>::zeros({48, 32})), SizingError);
  }
}

TEST_CASE("encoder gradient check vs finite differences") {
  ParamRegistry<D> reg;
  auto train = std::make_shared<bool>(false);
  std::mt19937 rng(19);
  Encoder<D> enc(reg, {6, 6, 6, 4, 4}, train, rng);
  std::mt19937 r2(23);
  Tensor<D> img({16, 16});
  img.setRandomUniform(r2, 0.0, 1.0);

  std::vector<Var<D>> params;
  for (auto& [name, p] : reg.params()) params.push_back(p);
  auto loss = [&] { return sumAll(enc.encode(img).f4); };
  CHECK(fdGradCheck<D>(params, loss, 1e-4, 8) < 1e-3);
}
