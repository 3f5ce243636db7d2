#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "test_util.hpp"
#include "tstereo/distill.hpp"

#include <filesystem>

using namespace tstereo;
using F = float;
namespace fs = std::filesystem;

namespace {
ModelConfig deskModel() {
  ModelConfig cfg;
  cfg.d_max = 16;
  cfg.enc = {6, 6, 8, 4, 4};
  cfg.agg = {4, 6, 8, 2, true, 4};
  cfg.refine = {8, 4, 4};
  return cfg;
}

TrainConfig deskTrain() {
  TrainConfig cfg;
  cfg.model = deskModel();
  cfg.batch_size = 1;
  cfg.max_lr = 1e-3;
  cfg.total_steps = 50;
  cfg.seed = 3;
  return cfg;
}

/// Writes a small synthetic dataset and returns its loaded manifest.
DatasetManifest makeDataset(const std::string& dir, int n, Index h = 32, Index w = 32) {
  fs::remove_all(dir);
  DatasetManifest m;
  for (int i = 0; i < n; ++i) {
    SyntheticSceneSpec spec;
    spec.seed = 500 + static_cast<uint32_t>(i);
    spec.disp_min = 2.0;
    spec.disp_max = 12.0;
    spec.d_max = 16.0;
    auto s = generateSynthetic<F>(spec, h, w);
    writeSampleFiles(dir, s, m);
  }
  saveManifest(dir + "/manifest.json", m);
  return loadManifest(dir + "/manifest.json");
}

std::string tmpPath(const std::string& name) {
  return (fs::temp_directory_path() / name).string();
}
}  // namespace

TEST_CASE("pseudo_label_generation") {
  const std::string data_dir = tmpPath("distill_data");
  auto manifest = makeDataset(data_dir, 3);

  SUBCASE("gt-oracle labels equal the ground truth") {
    const std::string label_dir = tmpPath("labels_gt");
    fs::remove_all(label_dir);
    auto teacher = makeGtOracleTeacher<F>(16.0);
    auto store = generatePseudoLabels(teacher, manifest, label_dir, 16.0, "h1");
    REQUIRE(store.label_paths.size() == 3);
    CHECK(store.provenance["n_failed"].get<int>() == 0);
    CHECK(store.provenance["teacher"] == "gt-oracle");
    for (size_t i = 0; i < 3; ++i) {
      auto s = loadSample<F>(manifest, i);
      auto exact = teacher.predict(s);
      CHECK((exact.data.raw() - s.gt->data.raw()).abs().maxCoeff() == 0.0f);
      auto stored = decodeDisparityPng16<F>(store.label_paths.at(s.id));
      CHECK(stored.dense());
      CHECK((stored.data.raw() - s.gt->data.raw()).abs().maxCoeff() <= 1.0f / 512.0f + 1e-6f);
    }
  }
  SUBCASE("noisy-gt teacher matches the folded-Gaussian error level") {
    auto teacher = makeNoisyGtTeacher<F>(0.5, 11, 16.0);
    double sum = 0;
    long n = 0;
    for (size_t i = 0; i < 3; ++i) {
      auto s = loadSample<F>(manifest, i);
      auto label = teacher.predict(s);
      auto occ = occludedInRight(s.gt->data);
      for (Index k = 0; k < label.data.numel(); ++k) {
        if (occ[k]) continue;  // occlusion band carries an extra bias by design
        sum += std::abs(label.data[k] - s.gt->data[k]);
        ++n;
      }
    }
    const double expect = 0.5 * std::sqrt(2.0 / M_PI);
    MESSAGE("noisy teacher mean abs error ", sum / n, " expected ", expect);
    CHECK(sum / n == doctest::Approx(expect).epsilon(0.10));
  }
  SUBCASE("rerun over a complete store performs no new teacher calls") {
    const std::string label_dir = tmpPath("labels_resume");
    fs::remove_all(label_dir);
    int calls = 0;
    auto base = makeGtOracleTeacher<F>(16.0);
    TeacherOracle<F> counting{"counting", [&](const StereoSample<F>& s) {
                                ++calls;
                                return base.predict(s);
                              }};
    generatePseudoLabels(counting, manifest, label_dir, 16.0);
    CHECK(calls == 3);
    auto store = generatePseudoLabels(counting, manifest, label_dir, 16.0);
    CHECK(calls == 3);
    CHECK(store.label_paths.size() == 3);
  }
  SUBCASE("bad teacher output is excluded and counted, run continues") {
    const std::string label_dir = tmpPath("labels_bad");
    fs::remove_all(label_dir);
    auto base = makeGtOracleTeacher<F>(16.0);
    TeacherOracle<F> flaky{"flaky", [&](const StereoSample<F>& s) {
                             if (s.id == "synthetic-501")
                               return DisparityMap<F>{Tensor<F>::zeros({4, 4}), std::nullopt,
                                                      DispScale::Full};
                             return base.predict(s);
                           }};
    auto store = generatePseudoLabels(flaky, manifest, label_dir, 16.0);
    CHECK(store.label_paths.size() == 2);
    CHECK(store.provenance["n_failed"].get<int>() == 1);
    auto prov = nlohmann::json::parse(std::ifstream(label_dir + "/provenance.json"));
    CHECK(prov["n_failed"].get<int>() == 1);
    CHECK(prov["n_samples"].get<int>() == 2);
  }
}

TEST_CASE("distill_train") {
  const std::string data_dir = tmpPath("distill_train_data");
  auto manifest = makeDataset(data_dir, 2);
  TrainConfig cfg = deskTrain();
  auto samples = loadAllSamples<F>(manifest, cfg.model.d_max);
  const std::string label_dir = tmpPath("labels_train");
  fs::remove_all(label_dir);
  auto store = generatePseudoLabels(makeGtOracleTeacher<F>(16.0), manifest, label_dir, 16.0);

  SUBCASE("zero steps leave the initialization untouched") {
    StereoModel<F> model(cfg.model);
    auto before = model.forward(samples[0].left, samples[0].right).d_final.value();
    AdamW<F> opt(model.registry(), cfg.weight_decay);
    auto log = distillTrain(model, opt, samples, store, cfg, 0);
    CHECK(log.empty());
    auto after = model.forward(samples[0].left, samples[0].right).d_final.value();
    CHECK((after.raw() - before.raw()).abs().maxCoeff() == 0.0f);
  }
  SUBCASE("logged loss equals the sequence loss against the pseudo-label") {
    std::vector<StereoSample<F>> one{samples[0]};
    Index missing = 0;
    auto labeled = withPseudoLabels(one, store, missing);
    REQUIRE(missing == 0);

    StereoModel<F> probe(cfg.model);
    probe.setTrainMode(true);
    auto out = probe.forward(labeled[0].left, labeled[0].right);
    const double manual = sequenceLoss<F>(out.predictions(), *labeled[0].gt, 0.9f).total.value()[0];

    StereoModel<F> model(cfg.model);
    AdamW<F> opt(model.registry(), cfg.weight_decay);
    auto log = distillTrain(model, opt, one, store, cfg, 1);
    REQUIRE(log.size() == 1);
    CHECK(log[0].loss == doctest::Approx(manual).epsilon(1e-6));
  }
  SUBCASE("missing labels drop samples but training proceeds") {
    PseudoLabelStore partial = store;
    partial.label_paths.erase("synthetic-501");
    StereoModel<F> model(cfg.model);
    AdamW<F> opt(model.registry(), cfg.weight_decay);
    auto log = distillTrain(model, opt, samples, partial, cfg, 1);
    CHECK(log.size() == 1);
  }
  SUBCASE("loss trends down over an overfit run") {
    TrainConfig c = cfg;
    c.total_steps = 120;
    c.max_lr = 3e-3;
    std::vector<StereoSample<F>> one{samples[0]};
    StereoModel<F> model(c.model);
    AdamW<F> opt(model.registry(), c.weight_decay);
    auto log = distillTrain(model, opt, one, store, c, 120);
    double head = 0, tail = 0;
    for (int i = 0; i < 20; ++i) {
      head += log[static_cast<size_t>(i)].loss;
      tail += log[log.size() - 20 + static_cast<size_t>(i)].loss;
    }
    MESSAGE("distill overfit: first-20 mean ", head / 20, " last-20 mean ", tail / 20);
    CHECK(tail < head);
  }
}

TEST_CASE("finetune_sparse") {
  const std::string data_dir = tmpPath("finetune_data");
  auto manifest = makeDataset(data_dir, 2);
  TrainConfig cfg = deskTrain();
  auto samples = loadAllSamples<F>(manifest, cfg.model.d_max);
  for (auto& s : samples) *s.gt = sparsify(*s.gt, 0.1, 13);

  StereoModel<F> donor(cfg.model);
  AdamW<F> donor_opt(donor.registry(), cfg.weight_decay);
  trainLoop(donor, donor_opt, samples, cfg, 2);
  const std::string ck = tmpPath("finetune_ck.bin");
  saveCheckpoint(ck, donor, &donor_opt, 2, cfg.hash());

  SUBCASE("zero steps reproduce the checkpoint weights") {
    StereoModel<F> model(cfg.model);
    AdamW<F> opt(model.registry(), cfg.weight_decay);
    auto log = finetuneSparse(ck, model, opt, samples, cfg, 0);
    CHECK(log.empty());
    CHECK(opt.stepCount() == 0);  // optimizer state reset, not restored
    auto a = model.forward(samples[0].left, samples[0].right).d_final.value();
    auto b = donor.forward(samples[0].left, samples[0].right).d_final.value();
    CHECK((a.raw() - b.raw()).abs().maxCoeff() == 0.0f);
  }
  SUBCASE("architecture mismatch rejected naming the first bad parameter") {
    TrainConfig other = cfg;
    other.model.enc.nc = 12;
    StereoModel<F> model(other.model);
    AdamW<F> opt(model.registry(), other.weight_decay);
    CHECK_THROWS_AS((void)finetuneSparse(ck, model, opt, samples, other, 1), ConfigError);
  }
  SUBCASE("sparse fine-tuning runs and logs") {
    StereoModel<F> model(cfg.model);
    AdamW<F> opt(model.registry(), cfg.weight_decay);
    auto log = finetuneSparse(ck, model, opt, samples, cfg, 3);
    CHECK(log.size() == 3);
    for (auto& e : log) CHECK(std::isfinite(e.loss));
  }
  SUBCASE("distilled and sparse-only students share the parameter count") {
    StereoModel<F> a(cfg.model), b(cfg.model);
    CHECK(a.paramCount() == b.paramCount());
  }
}
