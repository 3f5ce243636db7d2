// Command-line front end for the thermal stereo pipeline: synthetic data
// generation, training, three-stage distillation, evaluation, inference,
// and benchmark reporting.

#include "tstereo/distill.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <iostream>

namespace fs = std::filesystem;
using namespace tstereo;
using F = float;

namespace {

// Categorized exit codes (CLI11 itself returns 1 for usage errors).
constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitTrain = 4;
constexpr int kExitInternal = 5;

void checkDevice() {
  const char* dev = std::getenv("TSTEREO_DEVICE");
  if (dev && std::string(dev) != "cpu")
    throw ConfigError(std::string("TSTEREO_DEVICE='") + dev + "' is not available (only cpu)");
}

struct Overrides {
  std::optional<uint32_t> seed;
  std::optional<std::string> variant;
  std::optional<Index> steps;
  std::optional<std::string> out;
};

/// Adds the shared --config/--seed/--variant/--steps/--out options.
CLI::Option* addConfigOptions(CLI::App* cmd, std::string& config_path, Overrides& ov) {
  auto* opt = cmd->add_option("--config", config_path, "training config JSON")->required();
  cmd->add_option("--seed", ov.seed, "override the run seed");
  cmd->add_option("--variant", ov.variant, "override the model variant")
      ->check(CLI::IsMember({"full", "no-se", "no-se-no-refine"}));
  cmd->add_option("--steps", ov.steps, "override the number of optimizer steps");
  cmd->add_option("--out", ov.out, "override the checkpoint/output directory");
  return opt;
}

TrainConfig loadConfig(const std::string& path, const Overrides& ov) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config is not valid JSON: " + std::string(e.what()));
  }
  TrainConfig cfg = TrainConfig::fromJson(j);
  if (ov.seed) cfg.seed = *ov.seed;
  if (ov.variant) cfg.model.variant = variantFromName(*ov.variant);
  if (ov.steps) cfg.total_steps = *ov.steps;
  if (ov.out) cfg.checkpoint_dir = *ov.out;
  if (cfg.checkpoint_dir.empty()) throw ConfigError("no output directory (checkpoint_dir/--out)");
  cfg.model.validate();
  return cfg;
}

std::vector<StereoSample<F>> loadTrainSet(const TrainConfig& cfg) {
  if (cfg.train_manifest.empty()) throw ConfigError("config has no train_manifest");
  return loadAllSamples<F>(loadManifest(cfg.train_manifest), cfg.model.d_max);
}

void writeTrainLog(const std::string& dir, const std::vector<TrainLogEntry>& log) {
  nlohmann::json entries = nlohmann::json::array();
  for (auto& e : log) entries.push_back({{"step", e.step}, {"loss", e.loss}, {"lr", e.lr}});
  std::ofstream(dir + "/train_log.json") << entries.dump() << "\n";
}

void printMetricRow(const std::string& tag, const MetricReport& r,
                    const std::vector<double>& thresholds) {
  std::printf("%-12s %8.3f", tag.c_str(), r.epe());
  for (double t : thresholds) std::printf(" %8.2f", r.outlierRate(t));
  std::printf(" %9lld\n", r.n_samples);
}

void printEvalTable(const EvalResult& res, const std::vector<double>& thresholds) {
  std::printf("%-12s %8s", "condition", "EPE");
  for (double t : thresholds) std::printf("    >%s px", detail::fmtThreshold(t).c_str());
  std::printf(" %9s\n", "samples");
  for (auto& [tag, r] : res.per_tag) printMetricRow(tag, r, thresholds);
  printMetricRow("all", res.aggregate, thresholds);
  if (res.skipped_no_gt > 0)
    std::printf("(%lld samples without ground truth excluded)\n",
                static_cast<long long>(res.skipped_no_gt));
}

/// Evaluates on the manifest and writes <dir>/metrics.json; returns the
/// aggregate EPE.
double runEval(const StereoModel<F>& model, const TrainConfig& cfg,
               const std::string& manifest_path, const std::string& out_dir,
               const std::vector<double>& thresholds) {
  auto samples = loadAllSamples<F>(loadManifest(manifest_path), cfg.model.d_max);
  const auto t0 = std::chrono::steady_clock::now();
  auto res = evaluateModel(model, samples, thresholds);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  nlohmann::json per_tag = nlohmann::json::object();
  for (auto& [tag, r] : res.per_tag) per_tag[tag] = r.toJson();
  nlohmann::json out{{"variant", variantName(cfg.model.variant)},
                     {"params", model.paramCount()},
                     {"config_hash", cfg.hash()},
                     {"aggregate", res.aggregate.toJson()},
                     {"per_tag", per_tag},
                     {"skipped_no_gt", res.skipped_no_gt},
                     {"throughput_sps", secs > 0 ? static_cast<double>(samples.size()) / secs : 0.0}};
  fs::create_directories(out_dir);
  std::ofstream(out_dir + "/metrics.json") << out.dump(2) << "\n";
  printEvalTable(res, thresholds);
  return res.aggregate.epe();
}

/// Shared tail of train/distill-train/finetune: checkpoint + log + optional
/// validation metrics.
void finishRun(StereoModel<F>& model, AdamW<F>& opt, const TrainConfig& cfg,
               const std::vector<TrainLogEntry>& log, const std::vector<double>& thresholds) {
  fs::create_directories(cfg.checkpoint_dir);
  saveCheckpoint(cfg.checkpoint_dir + "/model.ckpt", model, &opt,
                 log.empty() ? 0 : log.back().step + 1, cfg.hash());
  writeTrainLog(cfg.checkpoint_dir, log);
  if (!cfg.val_manifest.empty())
    runEval(model, cfg, cfg.val_manifest, cfg.checkpoint_dir, thresholds);
}

std::function<void(const TrainLogEntry&)> progressPrinter(Index every = 50) {
  return [every](const TrainLogEntry& e) {
    if (e.step % every == 0)
      std::printf("step %6lld  loss %10.4f  lr %.2e\n", static_cast<long long>(e.step), e.loss,
                  e.lr);
  };
}

TeacherOracle<F> buildTeacher(const std::string& kind, double sigma, uint32_t seed, double d_max) {
  if (kind == "gt-oracle") return makeGtOracleTeacher<F>(d_max);
  if (kind == "noisy-gt") return makeNoisyGtTeacher<F>(sigma, seed, d_max);
  throw ConfigError("unknown teacher '" + kind + "' (want gt-oracle | noisy-gt)");
}

/// Reopens a pseudo-label directory produced by distill-labels.
PseudoLabelStore openLabelStore(const std::string& dir, const DatasetManifest& m) {
  PseudoLabelStore store;
  store.dir = dir;
  const std::string prov_path = (fs::path(dir) / "provenance.json").string();
  if (fs::exists(prov_path)) {
    std::ifstream in(prov_path);
    try {
      in >> store.provenance;
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("malformed provenance.json in " + dir + ": " + e.what());
    }
  }
  for (auto& e : m.entries) {
    const std::string p = (fs::path(dir) / (e.id + "_pseudo.png")).string();
    if (fs::exists(p)) store.label_paths[e.id] = p;
  }
  if (store.label_paths.empty()) throw ConfigError("no pseudo-labels found in " + dir);
  return store;
}

Tensor<F> padToMultiple(const Tensor<F>& img, Index mult, Index& pad_h, Index& pad_w) {
  const Index h = img.dim(0), w = img.dim(1);
  pad_h = (mult - h % mult) % mult;
  pad_w = (mult - w % mult) % mult;
  if (pad_h == 0 && pad_w == 0) return img;
  Tensor<F> out({h + pad_h, w + pad_w});
  for (Index y = 0; y < h + pad_h; ++y)
    for (Index x = 0; x < w + pad_w; ++x)
      out.at(y, x) = img.at(std::min(y, h - 1), std::min(x, w - 1));  // edge replicate
  return out;
}

// -------------------------------------------------------------------------
// subcommand bodies

struct GenerateArgs {
  std::string out;
  int count = 20;
  uint32_t seed = 1;
  Index height = 96, width = 128;
  SyntheticSceneSpec spec;
  std::string condition = "day";
  std::string split = "train";
};

int cmdGenerateData(const GenerateArgs& a) {
  a.spec.validate();
  DatasetManifest m;
  m.split = a.split;
  for (int i = 0; i < a.count; ++i) {
    SyntheticSceneSpec spec = a.spec;
    spec.seed = a.seed + static_cast<uint32_t>(i);
    auto sample = generateSynthetic<F>(spec, a.height, a.width);
    sample.condition_tag = a.condition;
    if (spec.sparsity < 1.0) *sample.gt = sparsify(*sample.gt, spec.sparsity, spec.seed ^ 0x5f3759dfu);
    writeSampleFiles(a.out, sample, m);
  }
  saveManifest(a.out + "/manifest.json", m);
  std::printf("wrote %d samples (%lldx%lld, %s) to %s\n", a.count,
              static_cast<long long>(a.height), static_cast<long long>(a.width),
              a.condition.c_str(), a.out.c_str());
  return kExitOk;
}

int cmdTrain(const TrainConfig& cfg, const std::vector<double>& thresholds) {
  auto samples = loadTrainSet(cfg);
  StereoModel<F> model(cfg.model);
  std::printf("%s variant, %lld parameters, %zu train samples\n",
              variantName(cfg.model.variant).c_str(),
              static_cast<long long>(model.paramCount()), samples.size());
  AdamW<F> opt(model.registry(), cfg.weight_decay);
  auto log = trainLoop(model, opt, samples, cfg, cfg.total_steps, 0, progressPrinter());
  finishRun(model, opt, cfg, log, thresholds);
  return kExitOk;
}

int cmdDistillLabels(const TrainConfig& cfg, const std::string& out_dir,
                     const std::string& teacher_kind, double sigma, uint32_t teacher_seed) {
  auto manifest = loadManifest(cfg.train_manifest.empty()
                                   ? throw ConfigError("config has no train_manifest")
                                   : cfg.train_manifest);
  auto teacher = buildTeacher(teacher_kind, sigma, teacher_seed, cfg.model.d_max);
  auto store = generatePseudoLabels(teacher, manifest, out_dir, cfg.model.d_max, cfg.hash());
  std::printf("%zu pseudo-labels in %s (%d failed)\n", store.label_paths.size(), out_dir.c_str(),
              store.provenance["n_failed"].get<int>());
  return kExitOk;
}

int cmdDistillTrain(const TrainConfig& cfg, const std::string& label_dir,
                    const std::vector<double>& thresholds) {
  auto manifest = loadManifest(cfg.train_manifest);
  auto samples = loadAllSamples<F>(manifest, cfg.model.d_max);
  auto store = openLabelStore(label_dir, manifest);
  StereoModel<F> model(cfg.model);
  AdamW<F> opt(model.registry(), cfg.weight_decay);
  auto log = distillTrain(model, opt, samples, store, cfg, cfg.total_steps);
  finishRun(model, opt, cfg, log, thresholds);
  return kExitOk;
}

int cmdFinetune(const TrainConfig& cfg, const std::string& checkpoint,
                const std::vector<double>& thresholds) {
  auto samples = loadTrainSet(cfg);
  StereoModel<F> model(cfg.model);
  AdamW<F> opt(model.registry(), cfg.weight_decay);
  auto log = finetuneSparse(checkpoint, model, opt, samples, cfg, cfg.total_steps);
  finishRun(model, opt, cfg, log, thresholds);
  return kExitOk;
}

int cmdEval(const TrainConfig& cfg, const std::string& checkpoint, const std::string& data,
            const std::vector<double>& thresholds) {
  StereoModel<F> model(cfg.model);
  loadCheckpoint(checkpoint, model, static_cast<AdamW<F>*>(nullptr), cfg.hash());
  const std::string manifest = data.empty() ? cfg.val_manifest : data;
  if (manifest.empty()) throw ConfigError("no dataset (--data or config val_manifest)");
  runEval(model, cfg, manifest, cfg.checkpoint_dir, thresholds);
  return kExitOk;
}

int cmdInfer(const TrainConfig& cfg, const std::string& checkpoint, const std::string& left_path,
             const std::string& right_path, const std::string& out_path,
             const std::string& gt_path, const std::string& error_map_path) {
  StereoModel<F> model(cfg.model);
  loadCheckpoint(checkpoint, model, static_cast<AdamW<F>*>(nullptr), cfg.hash());
  auto left = imageToTensor<F>(readGrayPng(left_path));
  auto right = imageToTensor<F>(readGrayPng(right_path));
  if (left.shape() != right.shape())
    throw ConfigError("left " + shapeStr(left.shape()) + " and right " +
                      shapeStr(right.shape()) + " sizes differ");
  const Index h = left.dim(0), w = left.dim(1);
  Index pad_h = 0, pad_w = 0;
  auto out = model.forward(padToMultiple(left, 16, pad_h, pad_w),
                           padToMultiple(right, 16, pad_h, pad_w));
  Tensor<F> disp({h, w});  // crop the padding back off
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x) disp.at(y, x) = out.d_final.value().at(y, x);
  DisparityMap<F> result{disp, std::nullopt, DispScale::Full};
  encodeDisparityPng16(out_path, result);
  std::printf("wrote %s (%lldx%lld, divisor 256)\n", out_path.c_str(), static_cast<long long>(h),
              static_cast<long long>(w));
  if (!error_map_path.empty()) {
    if (gt_path.empty()) throw ConfigError("--error-map needs --gt");
    auto gt = decodeDisparityPng16<F>(gt_path);
    renderErrorMap(disp, gt, error_map_path);
    std::printf("wrote %s\n", error_map_path.c_str());
  }
  return kExitOk;
}

int cmdReport(const std::vector<std::string>& run_dirs, const std::string& csv_path) {
  struct Row {
    std::string run;
    nlohmann::json metrics;
    double epe;
  };
  std::vector<Row> rows;
  std::set<std::string> threshold_keys;
  for (auto& dir : run_dirs) {
    const std::string path = (fs::path(dir) / "metrics.json").string();
    try {
      std::ifstream in(path);
      if (!in) throw CodecError("cannot open " + path);
      nlohmann::json j;
      in >> j;
      const double epe = j.at("aggregate").at("epe").get<double>();
      for (auto& [k, v] : j.at("aggregate").at("outliers").items()) threshold_keys.insert(k);
      rows.push_back({fs::path(dir).filename().string(), j, epe});
    } catch (const std::exception& e) {
      std::cerr << "warning: skipping " << dir << ": " << e.what() << "\n";
    }
  }
  if (rows.empty()) throw ConfigError("no readable metrics.json among the run dirs");
  std::sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) { return a.epe < b.epe; });

  std::printf("%-20s %-16s %8s", "run", "variant", "EPE");
  for (auto& k : threshold_keys) std::printf("    >%s px", k.c_str());
  std::printf(" %10s %10s\n", "params", "sps");
  std::ofstream csv(csv_path);
  if (!csv) throw ConfigError("cannot write " + csv_path);
  csv << "run,variant,epe";
  for (auto& k : threshold_keys) csv << ",gt_" << k;
  csv << ",params,throughput_sps\n";
  for (auto& r : rows) {
    const auto& agg = r.metrics["aggregate"];
    std::printf("%-20s %-16s %8.3f", r.run.c_str(),
                r.metrics.value("variant", std::string("?")).c_str(), r.epe);
    csv << r.run << "," << r.metrics.value("variant", std::string("?")) << "," << r.epe;
    for (auto& k : threshold_keys) {
      const double v = agg["outliers"].value(k, 0.0);
      std::printf(" %8.2f", v);
      csv << "," << v;
    }
    const long long params = r.metrics.value("params", 0LL);
    const double sps = r.metrics.value("throughput_sps", 0.0);
    std::printf(" %10lld %10.2f\n", params, sps);
    csv << "," << params << "," << sps << "\n";
  }
  std::printf("csv written to %s\n", csv_path.c_str());
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"thermal stereo matching: train, distill, evaluate, infer"};
  app.require_subcommand(1);

  GenerateArgs gen;
  auto* c_gen = app.add_subcommand("generate-data", "write a synthetic stereo dataset");
  c_gen->add_option("--out", gen.out, "output directory")->required();
  c_gen->add_option("--count", gen.count, "number of scenes");
  c_gen->add_option("--seed", gen.seed, "seed of the first scene (incremented per scene)");
  c_gen->add_option("--height", gen.height);
  c_gen->add_option("--width", gen.width);
  c_gen->add_option("--disp-min", gen.spec.disp_min);
  c_gen->add_option("--disp-max", gen.spec.disp_max);
  c_gen->add_option("--d-max", gen.spec.d_max, "disparity cap recorded for validity");
  c_gen->add_option("--objects", gen.spec.n_objects);
  c_gen->add_option("--noise-sigma", gen.spec.noise_sigma);
  c_gen->add_option("--blur", gen.spec.blur_radius);
  c_gen->add_option("--sparsity", gen.spec.sparsity, "fraction of gt pixels kept");
  c_gen->add_option("--condition", gen.condition, "condition tag (day/night/rain/...)");
  c_gen->add_option("--split", gen.split);

  std::string cfg_path;
  Overrides ov;
  std::vector<double> thresholds{0.5, 1.0};

  auto* c_train = app.add_subcommand("train", "train from scratch on the train manifest");
  addConfigOptions(c_train, cfg_path, ov);

  std::string label_dir, teacher_kind = "gt-oracle";
  double sigma = 0.25;
  uint32_t teacher_seed = 1;
  auto* c_labels = app.add_subcommand("distill-labels", "write teacher pseudo-labels");
  addConfigOptions(c_labels, cfg_path, ov);
  c_labels->add_option("--labels", label_dir, "pseudo-label output directory")->required();
  c_labels->add_option("--teacher", teacher_kind, "gt-oracle | noisy-gt");
  c_labels->add_option("--sigma", sigma, "noisy-gt teacher noise level");
  c_labels->add_option("--teacher-seed", teacher_seed);

  auto* c_distill = app.add_subcommand("distill-train", "train a student on pseudo-labels");
  addConfigOptions(c_distill, cfg_path, ov);
  c_distill->add_option("--labels", label_dir, "pseudo-label directory")->required();

  std::string checkpoint;
  auto* c_finetune = app.add_subcommand("finetune", "resume a checkpoint on sparse gt");
  addConfigOptions(c_finetune, cfg_path, ov);
  c_finetune->add_option("--checkpoint", checkpoint, "checkpoint to resume")->required();

  std::string eval_data;
  auto* c_eval = app.add_subcommand("eval", "evaluate a checkpoint");
  addConfigOptions(c_eval, cfg_path, ov);
  c_eval->add_option("--checkpoint", checkpoint)->required();
  c_eval->add_option("--data", eval_data, "manifest (default: config val_manifest)");
  c_eval->add_option("--thresholds", thresholds, "outlier thresholds in px");

  std::string left_path, right_path, out_path, gt_path, error_map_path;
  auto* c_infer = app.add_subcommand("infer", "predict disparity for one stereo pair");
  addConfigOptions(c_infer, cfg_path, ov);
  c_infer->add_option("--checkpoint", checkpoint)->required();
  c_infer->add_option("--left", left_path)->required();
  c_infer->add_option("--right", right_path)->required();
  c_infer->add_option("--disp-out", out_path, "PNG16 disparity output")->required();
  c_infer->add_option("--gt", gt_path, "ground-truth PNG16 for the error map");
  c_infer->add_option("--error-map", error_map_path, "color-coded |error| PNG");

  std::vector<std::string> run_dirs;
  std::string csv_path = "report.csv";
  auto* c_report = app.add_subcommand("report", "merge run metrics into a benchmark table");
  c_report->add_option("runs", run_dirs, "run directories containing metrics.json")->required();
  c_report->add_option("--csv", csv_path, "merged CSV output path");

  CLI11_PARSE(app, argc, argv);

  try {
    checkDevice();
    if (c_gen->parsed()) return cmdGenerateData(gen);
    TrainConfig cfg;
    if (!c_report->parsed()) cfg = loadConfig(cfg_path, ov);
    if (c_train->parsed()) return cmdTrain(cfg, thresholds);
    if (c_labels->parsed()) return cmdDistillLabels(cfg, label_dir, teacher_kind, sigma, teacher_seed);
    if (c_distill->parsed()) return cmdDistillTrain(cfg, label_dir, thresholds);
    if (c_finetune->parsed()) return cmdFinetune(cfg, checkpoint, thresholds);
    if (c_eval->parsed()) return cmdEval(cfg, checkpoint, eval_data, thresholds);
    if (c_infer->parsed())
      return cmdInfer(cfg, checkpoint, left_path, right_path, out_path, gt_path, error_map_path);
    if (c_report->parsed()) return cmdReport(run_dirs, csv_path);
    return kExitInternal;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const CodecError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const TrainAbort& e) {
    std::cerr << "training aborted: " << e.what() << "\n";
    return kExitTrain;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return kExitInternal;
  }
}
