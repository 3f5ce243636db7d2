#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "test_util.hpp"
#include "tstereo/data.hpp"

using namespace tstereo;
using tstereo::testing::randomTensor;
using D = double;
namespace fs = std::filesystem;

namespace {
std::string tmpDir(const std::string& name) {
  auto p = fs::temp_directory_path() / name;
  fs::create_directories(p);
  return p.string();
}
}  // namespace

TEST_CASE("disparity_png16_codec") {
  const std::string dir = tmpDir("tstereo_codec");
  SUBCASE("raw 0 decodes as invalid, raw 256 as exactly one pixel") {
    GrayImage img;
    img.height = 1;
    img.width = 3;
    img.bit_depth = 16;
    img.pixels = {0, 256, 512};
    writeGrayPng(dir + "/raw.png", img);
    auto d = decodeDisparityPng16<D>(dir + "/raw.png");
    CHECK_FALSE(d.isValid(0, 0));
    CHECK(d.isValid(0, 1));
    CHECK(d.data.at(0, 1) == doctest::Approx(1.0));
    CHECK(d.data.at(0, 2) == doctest::Approx(2.0));
  }
  SUBCASE("sparse round-trip bounded by half a quantization step") {
    std::mt19937 rng(3);
    Tensor<D> data({16, 20});
    data.setRandomUniform(rng, 0.5, 100.0);
    Tensor<uint8_t> valid({16, 20});
    for (Index i = 0; i < 320; ++i) valid[i] = (i % 3 != 0);
    DisparityMap<D> d{data, valid, DispScale::Full};
    encodeDisparityPng16(dir + "/rt.png", d);
    auto back = decodeDisparityPng16<D>(dir + "/rt.png");
    for (Index y = 0; y < 16; ++y)
      for (Index x = 0; x < 20; ++x) {
        CHECK(back.isValid(y, x) == d.isValid(y, x));
        if (d.isValid(y, x))
          CHECK(std::abs(back.data.at(y, x) - data.at(y, x)) <= 1.0 / 512.0 + 1e-12);
      }
  }
  SUBCASE("8-bit file rejected") {
    GrayImage img;
    img.height = 2;
    img.width = 2;
    img.bit_depth = 8;
    img.pixels = {1, 2, 3, 4};
    writeGrayPng(dir + "/8bit.png", img);
    CHECK_THROWS_AS((void)decodeDisparityPng16<D>(dir + "/8bit.png"), CodecError);
  }
}

TEST_CASE("disparity_pfm_codec") {
  const std::string dir = tmpDir("tstereo_pfm");
  SUBCASE("write-then-read is exact at float precision") {
    std::mt19937 rng(5);
    Tensor<D> map({7, 9});
    map.setRandomUniform(rng, 0.0, 50.0);
    for (Index i = 0; i < map.numel(); ++i) map[i] = static_cast<float>(map[i]);
    writePfm(dir + "/rt.pfm", map);
    auto back = decodeDisparityPfm<D>(dir + "/rt.pfm");
    CHECK(back.dense());
    CHECK((back.data.raw() - map.raw()).abs().maxCoeff() == 0.0);
  }
  SUBCASE("negative scale stores rows bottom-up") {
    Tensor<D> map({2, 2});
    map.at(0, 0) = 1;
    map.at(0, 1) = 2;
    map.at(1, 0) = 3;
    map.at(1, 1) = 4;
    writePfm(dir + "/order.pfm", map);
    std::ifstream in(dir + "/order.pfm", std::ios::binary);
    std::string magic, dims1, dims2, scale;
    in >> magic >> dims1 >> dims2 >> scale;
    in.get();
    float first = 0;
    in.read(reinterpret_cast<char*>(&first), 4);
    CHECK(magic == "Pf");
    CHECK(first == 3.0f);  // bottom row first in the file
  }
  SUBCASE("non-finite values decode as invalid") {
    Tensor<D> map = Tensor<D>::full({3, 3}, 2.0);
    map.at(1, 1) = std::numeric_limits<D>::quiet_NaN();
    writePfm(dir + "/nan.pfm", map);
    auto back = decodeDisparityPfm<D>(dir + "/nan.pfm");
    CHECK(back.validCount() == 8);
    CHECK_FALSE(back.isValid(1, 1));
  }
  SUBCASE("malformed header rejected") {
    std::ofstream(dir + "/bad.pfm") << "P6\n2 2\n-1.0\n";
    CHECK_THROWS_AS((void)decodeDisparityPfm<D>(dir + "/bad.pfm"), CodecError);
  }
}

TEST_CASE("sceneflow_to_thermal") {
  SUBCASE("white maps to 40, black to 0") {
    std::vector<uint8_t> rgb = {255, 255, 255, 0, 0, 0};
    auto t = sceneflowToThermal<D>(rgb, 1, 2);
    CHECK(t.at(0, 0) == doctest::Approx(40.0).epsilon(1e-9));
    CHECK(t.at(0, 1) == 0.0);
  }
  SUBCASE("random image equals the luma oracle") {
    std::mt19937 rng(7);
    std::uniform_int_distribution<int> u8(0, 255);
    std::vector<uint8_t> rgb(4 * 5 * 3);
    for (auto& v : rgb) v = static_cast<uint8_t>(u8(rng));
    auto t = sceneflowToThermal<D>(rgb, 4, 5);
    for (Index i = 0; i < 20; ++i) {
      const double luma =
          0.299 * rgb[3 * i] + 0.587 * rgb[3 * i + 1] + 0.114 * rgb[3 * i + 2];
      CHECK(t[i] == doctest::Approx(luma * 40.0 / 255.0).epsilon(1e-6));
    }
    auto unit = thermalToUnit(t);
    CHECK(unit.raw().maxCoeff() <= 1.0);
    CHECK((unit.raw() * 40.0 - t.raw()).abs().maxCoeff() < 1e-9);
  }
  SUBCASE("wrong channel count rejected") {
    std::vector<uint8_t> rgb(5);
    CHECK_THROWS_AS((void)sceneflowToThermal<D>(rgb, 1, 2), std::invalid_argument);
  }
}

TEST_CASE("generate_synthetic") {
  SUBCASE("fixed seed reproduces the sample exactly") {
    SyntheticSceneSpec spec;
    spec.seed = 42;
    auto a = generateSynthetic<D>(spec, 32, 48);
    auto b = generateSynthetic<D>(spec, 32, 48);
    CHECK((a.left.raw() - b.left.raw()).abs().maxCoeff() == 0.0);
    CHECK((a.right.raw() - b.right.raw()).abs().maxCoeff() == 0.0);
    CHECK((a.gt->data.raw() - b.gt->data.raw()).abs().maxCoeff() == 0.0);
  }
  SUBCASE("constant disparity 5, no objects: right is the left shifted 5 px") {
    SyntheticSceneSpec spec;
    spec.seed = 3;
    spec.n_objects = 0;
    spec.disp_min = spec.disp_max = 5.0;
    spec.noise_sigma = 0.0;
    spec.blur_radius = 0;
    auto s = generateSynthetic<D>(spec, 16, 40);
    for (Index y = 0; y < 16; ++y)
      for (Index x = 0; x < 34; ++x)
        CHECK(s.right.at(y, x) == doctest::Approx(s.left.at(y, x + 5)).epsilon(1e-9));
    CHECK((s.gt->data.raw() - 5.0).abs().maxCoeff() < 1e-12);
  }
  SUBCASE("gt stays inside the requested disparity range") {
    SyntheticSceneSpec spec;
    spec.seed = 11;
    spec.disp_min = 2.0;
    spec.disp_max = 20.0;
    auto s = generateSynthetic<D>(spec, 48, 64);
    CHECK(s.gt->data.raw().minCoeff() >= 2.0);
    CHECK(s.gt->data.raw().maxCoeff() <= 20.0);
    CHECK(s.gt->dense());
  }
  SUBCASE("warping the right view back with gt reproduces the left view") {
    SyntheticSceneSpec spec;
    spec.seed = 17;
    spec.noise_sigma = 0.02;
    spec.blur_radius = 1;
    spec.disp_min = 2.0;
    spec.disp_max = 20.0;
    auto s = generateSynthetic<D>(spec, 64, 96);
    auto occ = occludedInRight(s.gt->data);
    double sum = 0;
    Index n = 0;
    for (Index y = 0; y < 64; ++y)
      for (Index x = 0; x < 96; ++x) {
        if (occ.at(y, x)) continue;
        const double xs = x - s.gt->data.at(y, x);
        if (xs < 0 || xs > 95) continue;
        const Index x0 = static_cast<Index>(std::floor(xs));
        const Index x1 = std::min<Index>(x0 + 1, 95);
        const double t = xs - x0;
        const double warped = (1 - t) * s.right.at(y, x0) + t * s.right.at(y, x1);
        sum += std::abs(warped - s.left.at(y, x));
        ++n;
      }
    REQUIRE(n > 64 * 96 / 4);  // the occlusion test is conservative
    MESSAGE("photometric mean abs diff on non-occluded pixels: ", sum / n);
    CHECK(sum / n < 3 * spec.noise_sigma);
  }
  SUBCASE("disparity range beyond d_max rejected") {
    SyntheticSceneSpec spec;
    spec.disp_max = 300.0;
    CHECK_THROWS_AS((void)generateSynthetic<D>(spec, 16, 16), ConfigError);
  }
}

TEST_CASE("sparsify") {
  std::mt19937 rng(3);
  Tensor<D> data({100, 100});
  data.setRandomUniform(rng, 1.0, 30.0);
  DisparityMap<D> dense{data, std::nullopt, DispScale::Full};

  SUBCASE("fraction 1 keeps the map identical") {
    auto out = sparsify(dense, 1.0, 7);
    CHECK(out.dense());
    CHECK((out.data.raw() - data.raw()).abs().maxCoeff() == 0.0);
  }
  SUBCASE("fraction 0.1 on 100x100 keeps roughly a tenth of the pixels") {
    auto out = sparsify(dense, 0.1, 7);
    const Index n = out.validCount();
    MESSAGE("kept ", n, " of 10000 pixels");
    CHECK(n >= 800);
    CHECK(n <= 1200);
  }
  SUBCASE("kept pixels carry the exact source values and validity subset") {
    Tensor<uint8_t> valid({100, 100});
    for (Index i = 0; i < 10000; ++i) valid[i] = (i % 7 != 0);
    DisparityMap<D> src{data, valid, DispScale::Full};
    auto out = sparsify(src, 0.2, 9);
    for (Index y = 0; y < 100; ++y)
      for (Index x = 0; x < 100; ++x)
        if (out.isValid(y, x)) {
          CHECK(src.isValid(y, x));
          CHECK(out.data.at(y, x) == data.at(y, x));
        }
  }
  SUBCASE("invalid fraction rejected") {
    CHECK_THROWS_AS((void)sparsify(dense, 0.0, 1), std::invalid_argument);
    CHECK_THROWS_AS((void)sparsify(dense, 1.5, 1), std::invalid_argument);
  }
}

TEST_CASE("manifest") {
  const std::string dir = tmpDir("tstereo_manifest");
  SUBCASE("empty manifest is a valid empty dataset") {
    std::ofstream(dir + "/empty.json") << R"({"split":"val","entries":[]})";
    auto m = loadManifest(dir + "/empty.json");
    CHECK(m.entries.empty());
    CHECK(m.split == "val");
  }
  SUBCASE("generated samples round-trip through save and load") {
    DatasetManifest m;
    m.split = "train";
    for (uint32_t seed : {1u, 2u, 3u}) {
      SyntheticSceneSpec spec;
      spec.seed = seed;
      spec.disp_min = 2.0;
      spec.disp_max = 20.0;
      auto s = generateSynthetic<D>(spec, 32, 48);
      writeSampleFiles(dir + "/set", s, m);
    }
    saveManifest(dir + "/set/manifest.json", m);
    auto loaded = loadManifest(dir + "/set/manifest.json");
    REQUIRE(loaded.entries.size() == 3);
    for (size_t i = 0; i < 3; ++i) {
      auto s = loadSample<D>(loaded, i);
      CHECK(s.id == "synthetic-" + std::to_string(i + 1));
      CHECK(s.left.shape() == Shape{32, 48});
      REQUIRE(s.gt.has_value());
      CHECK(s.gt->data.shape() == Shape{32, 48});
      CHECK(s.condition_tag == "synthetic");
    }
  }
  SUBCASE("entry without disp loads with gt absent") {
    DatasetManifest m;
    SyntheticSceneSpec spec;
    spec.seed = 5;
    auto s = generateSynthetic<D>(spec, 16, 16);
    s.gt.reset();
    s.id = "nogt";
    writeSampleFiles(dir + "/nogt", s, m);
    saveManifest(dir + "/nogt/manifest.json", m);
    auto loaded = loadManifest(dir + "/nogt/manifest.json");
    auto back = loadSample<D>(loaded, 0);
    CHECK_FALSE(back.gt.has_value());
  }
  SUBCASE("missing file rejected naming the entry") {
    std::ofstream(dir + "/missing.json") << R"({"root":")" << dir << R"(",
      "entries":[{"id":"a","left":"nope_l.png","right":"nope_r.png"}]})";
    CHECK_THROWS_WITH_AS((void)loadManifest(dir + "/missing.json"), doctest::Contains("'a'"),
                         ConfigError);
  }
  SUBCASE("duplicate ids rejected") {
    std::ofstream(dir + "/x.png") << "";  // placeholder so existence checks pass
    std::ofstream(dir + "/dup.json") << R"({"root":")" << dir << R"(","entries":[
      {"id":"a","left":"x.png","right":"x.png"},
      {"id":"a","left":"x.png","right":"x.png"}]})";
    CHECK_THROWS_WITH_AS((void)loadManifest(dir + "/dup.json"), doctest::Contains("duplicate"),
                         ConfigError);
  }
  SUBCASE("malformed JSON rejected") {
    std::ofstream(dir + "/bad.json") << "{not json";
    CHECK_THROWS_AS((void)loadManifest(dir + "/bad.json"), ConfigError);
  }
}
