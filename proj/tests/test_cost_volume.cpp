#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "test_util.hpp"
#include "tstereo/cost_volume.hpp"

using namespace tstereo;
using tstereo::testing::fdGradCheck;
using tstereo::testing::randomTensor;
using D = double;

TEST_CASE("build_correlation_volume") {
  SUBCASE("constant (1,0) features: 0.5 in range, 0 out of frame") {
    Tensor<D> f({2, 3, 6});
    for (Index y = 0; y < 3; ++y)
      for (Index x = 0; x < 6; ++x) {
        f.at(0, y, x) = 1.0;
        f.at(1, y, x) = 0.0;
      }
    auto c = buildCorrelationVolume(Var<D>::constant(f), Var<D>::constant(f), 4);
    for (Index d = 0; d < 4; ++d)
      for (Index y = 0; y < 3; ++y)
        for (Index x = 0; x < 6; ++x)
          CHECK(c.value().at(d, y, x) == doctest::Approx(x - d >= 0 ? 0.5 : 0.0));
  }
  SUBCASE("zero right features give zero volume") {
    std::mt19937 rng(3);
    auto fl = Var<D>::constant(randomTensor<D>({4, 5, 7}, rng));
    auto fr = Var<D>::constant(Tensor<D>::zeros({4, 5, 7}));
    auto c = buildCorrelationVolume(fl, fr, 5);
    CHECK(c.value().raw().abs().maxCoeff() == 0.0);
  }
  SUBCASE("random unit-norm features match the triple-loop oracle") {
    std::mt19937 rng(5);
    const Index nc = 6, h = 8, w = 8, dl = 4;
    Tensor<D> fl = randomTensor<D>({nc, h, w}, rng), fr = randomTensor<D>({nc, h, w}, rng);
    for (auto* f : {&fl, &fr})
      for (Index y = 0; y < h; ++y)
        for (Index x = 0; x < w; ++x) {
          D n = 0;
          for (Index c = 0; c < nc; ++c) n += f->at(c, y, x) * f->at(c, y, x);
          n = std::sqrt(n);
          for (Index c = 0; c < nc; ++c) f->at(c, y, x) /= n;
        }
    auto cv = buildCorrelationVolume(Var<D>::constant(fl), Var<D>::constant(fr), dl);
    D max_diff = 0;
    for (Index d = 0; d < dl; ++d)
      for (Index y = 0; y < h; ++y)
        for (Index x = 0; x < w; ++x) {
          D expect = 0;
          if (x - d >= 0)
            for (Index c = 0; c < nc; ++c) expect += fl.at(c, y, x) * fr.at(c, y, x - d);
          expect /= nc;
          max_diff = std::max(max_diff, std::abs(cv.value().at(d, y, x) - expect));
        }
    CHECK(max_diff < 1e-5);
  }
  SUBCASE("equal-norm identical features peak at d = 0") {
    std::mt19937 rng(7);
    const Index nc = 5, h = 4, w = 8, dl = 4;
    Tensor<D> f = randomTensor<D>({nc, h, w}, rng);
    for (Index y = 0; y < h; ++y)
      for (Index x = 0; x < w; ++x) {
        D n = 0;
        for (Index c = 0; c < nc; ++c) n += f.at(c, y, x) * f.at(c, y, x);
        n = std::sqrt(n);
        for (Index c = 0; c < nc; ++c) f.at(c, y, x) /= n;  // unit norm everywhere
      }
    auto cv = buildCorrelationVolume(Var<D>::constant(f), Var<D>::constant(f), dl);
    // pixels with full disparity support: x >= dl-1
    for (Index y = 0; y < h; ++y)
      for (Index x = dl - 1; x < w; ++x) {
        Index best = 0;
        for (Index d = 1; d < dl; ++d)
          if (cv.value().at(d, y, x) > cv.value().at(best, y, x)) best = d;
        CHECK(best == 0);  // Cauchy-Schwarz equality case
      }
  }
  SUBCASE("shape mismatch rejected") {
    auto a = Var<D>::constant(Tensor<D>::zeros({2, 4, 4}));
    auto b = Var<D>::constant(Tensor<D>::zeros({3, 4, 4}));
    CHECK_THROWS_AS((void)buildCorrelationVolume(a, b, 2), std::invalid_argument);
  }
}

TEST_CASE("soft_argmin") {
  SUBCASE("uniform costs give the mean index") {
    auto c = Var<D>::constant(Tensor<D>::full({48, 2, 3}, 1.7));
    auto d = softArgmin(c);
    CHECK((d.value().raw() - 23.5).abs().maxCoeff() < 1e-9);
  }
  SUBCASE("saturated one-hot peak") {
    Tensor<D> c = Tensor<D>::zeros({16, 2, 2});
    for (Index i = 0; i < 4; ++i) c[7 * 4 + i] = 1000.0;
    auto d = softArgmin(Var<D>::constant(c));
    CHECK((d.value().raw() - 7.0).abs().maxCoeff() < 1e-3);
  }
  SUBCASE("random costs match the per-pixel scalar oracle") {
    std::mt19937 rng(11);
    Tensor<D> c = randomTensor<D>({8, 4, 4}, rng, 2.0);
    auto d = softArgmin(Var<D>::constant(c));
    for (Index y = 0; y < 4; ++y)
      for (Index x = 0; x < 4; ++x) {
        D mx = -1e300;
        for (Index k = 0; k < 8; ++k) mx = std::max(mx, c.at(k, y, x));
        D z = 0, e = 0;
        for (Index k = 0; k < 8; ++k) z += std::exp(c.at(k, y, x) - mx);
        for (Index k = 0; k < 8; ++k) e += k * std::exp(c.at(k, y, x) - mx) / z;
        CHECK(d.value().at(y, x) == doctest::Approx(e).epsilon(1e-12));
      }
  }
  SUBCASE("softmax probabilities sum to one") {
    std::mt19937 rng(13);
    auto c = Var<D>::constant(randomTensor<D>({12, 3, 5}, rng, 3.0));
    auto p = softmaxDim(c, 0);
    for (Index i = 0; i < 15; ++i) {
      D s = 0;
      for (Index k = 0; k < 12; ++k) s += p.value()[k * 15 + i];
      CHECK(std::abs(s - 1.0) < 1e-6);
    }
  }
  SUBCASE("output bounded by [0, d_levels-1]") {
    std::mt19937 rng(17);
    auto c = Var<D>::constant(randomTensor<D>({6, 4, 4}, rng, 50.0));
    auto d = softArgmin(c);
    CHECK(d.value().raw().minCoeff() >= 0.0);
    CHECK(d.value().raw().maxCoeff() <= 5.0);
  }
  SUBCASE("per-pixel constant shift over disparities leaves output unchanged") {
    std::mt19937 rng(19);
    Tensor<D> c = randomTensor<D>({8, 3, 3}, rng);
    Tensor<D> shifted = c;
    std::mt19937 rng2(23);
    Tensor<D> offsets = randomTensor<D>({3, 3}, rng2);
    for (Index k = 0; k < 8; ++k)
      for (Index i = 0; i < 9; ++i) shifted[k * 9 + i] += offsets[i];
    auto d1 = softArgmin(Var<D>::constant(c));
    auto d2 = softArgmin(Var<D>::constant(shifted));
    CHECK((d1.value().raw() - d2.value().raw()).abs().maxCoeff() < 1e-6);
  }
  SUBCASE("gradient matches finite differences on a 2x2x4 volume") {
    std::mt19937 rng(29);
    auto c = Var<D>::leaf(randomTensor<D>({4, 2, 2}, rng), true);
    auto w = Var<D>::constant(randomTensor<D>({2, 2}, rng));
    auto loss = [&] { return sumAll(mul(softArgmin(c), w)); };
    CHECK(fdGradCheck<D>({c}, loss, 1e-5) < 1e-3);
  }
  SUBCASE("non-finite costs rejected") {
    Tensor<D> c = Tensor<D>::zeros({4, 2, 2});
    c[3] = std::numeric_limits<D>::infinity();
    CHECK_THROWS_AS((void)softArgmin(Var<D>::constant(c)), std::invalid_argument);
  }
}
