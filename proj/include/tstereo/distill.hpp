#pragma once

#include "tstereo/train.hpp"

namespace tstereo {

/// A pluggable dense-disparity predictor used for pseudo-labeling.
template <typename S>
struct TeacherOracle {
  std::string descriptor;
  std::function<DisparityMap<S>(const StereoSample<S>&)> predict;
};

/// Returns the sample's own dense ground truth (pipeline mechanics testing).
template <typename S>
TeacherOracle<S> makeGtOracleTeacher(double d_max) {
  return {"gt-oracle", [d_max](const StereoSample<S>& s) {
            if (!s.gt || !s.gt->dense())
              throw ConfigError("gt-oracle teacher needs dense gt on sample '" + s.id + "'");
            DisparityMap<S> out = *s.gt;
            for (Index i = 0; i < out.data.numel(); ++i)
              out.data[i] = std::clamp(out.data[i], S(0), static_cast<S>(d_max));
            return out;
          }};
}

/// Ground truth corrupted by Gaussian noise of the given sigma, plus a
/// stronger error band over right-view-occluded pixels (structured teacher
/// error). Deterministic per (seed, sample id).
template <typename S>
TeacherOracle<S> makeNoisyGtTeacher(double sigma, uint32_t seed, double d_max) {
  return {"noisy-gt sigma=" + std::to_string(sigma),
          [sigma, seed, d_max](const StereoSample<S>& s) {
            if (!s.gt || !s.gt->dense())
              throw ConfigError("noisy-gt teacher needs dense gt on sample '" + s.id + "'");
            std::mt19937 rng(seed ^ static_cast<uint32_t>(std::hash<std::string>{}(s.id)));
            DisparityMap<S> out = *s.gt;
            out.valid.reset();
            Tensor<S> noise(out.data.shape());
            noise.setRandomNormal(rng, static_cast<S>(sigma));
            auto occ = occludedInRight(s.gt->data);
            for (Index i = 0; i < out.data.numel(); ++i) {
              S v = out.data[i] + noise[i];
              if (occ[i]) v += static_cast<S>(3 * sigma);  // occlusion-band bias
              out.data[i] = std::clamp(v, S(0), static_cast<S>(d_max));
            }
            return out;
          }};
}

struct PseudoLabelStore {
  std::string dir;
  std::map<std::string, std::string> label_paths;  // sample id -> absolute path
  nlohmann::json provenance;
};

/// Writes one dense PNG16 label per sample. Existing valid labels are kept
/// (resumable); teacher failures are excluded and counted.
template <typename S>
PseudoLabelStore generatePseudoLabels(const TeacherOracle<S>& teacher, const DatasetManifest& m,
                                      const std::string& out_dir, double d_max,
                                      const std::string& config_hash = "") {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  PseudoLabelStore store;
  store.dir = out_dir;
  Index n_failed = 0;
  for (size_t i = 0; i < m.entries.size(); ++i) {
    const std::string id = m.entries[i].id;
    const std::string path = (fs::path(out_dir) / (id + "_pseudo.png")).string();
    if (fs::exists(path)) {
      try {
        auto existing = decodeDisparityPng16<S>(path);
        if (existing.dense()) {
          store.label_paths[id] = path;
          continue;
        }
      } catch (const CodecError&) {
        // unreadable stale file: regenerate below
      }
    }
    try {
      StereoSample<S> sample = loadSample<S>(m, i);
      DisparityMap<S> label = teacher.predict(sample);
      if (label.data.shape() != sample.left.shape() || !label.dense() ||
          label.data.raw().minCoeff() < S(0) ||
          label.data.raw().maxCoeff() > static_cast<S>(d_max))
        throw ConfigError("teacher output invalid for '" + id + "'");
      encodeDisparityPng16(path, label);
      store.label_paths[id] = path;
    } catch (const std::exception& e) {
      std::cerr << "pseudo-label failure on '" << id << "': " << e.what() << "\n";
      ++n_failed;
    }
  }
  store.provenance = {{"teacher", teacher.descriptor},
                      {"config_hash", config_hash},
                      {"created_at", static_cast<long long>(::time(nullptr))},
                      {"n_samples", store.label_paths.size()},
                      {"n_failed", n_failed}};
  std::ofstream((fs::path(out_dir) / "provenance.json").string())
      << store.provenance.dump(2) << "\n";
  return store;
}

/// Swaps each sample's supervision for its dense pseudo-label. Samples
/// without a label are dropped; the drop count is returned through
/// n_missing.
template <typename S>
std::vector<StereoSample<S>> withPseudoLabels(const std::vector<StereoSample<S>>& samples,
                                              const PseudoLabelStore& store, Index& n_missing) {
  std::vector<StereoSample<S>> out;
  n_missing = 0;
  for (const auto& s : samples) {
    auto it = store.label_paths.find(s.id);
    if (it == store.label_paths.end()) {
      ++n_missing;
      continue;
    }
    StereoSample<S> copy = s;
    copy.gt = decodeDisparityPng16<S>(it->second);
    out.push_back(std::move(copy));
  }
  if (n_missing > 0) std::cerr << "distillation: " << n_missing << " samples without labels\n";
  return out;
}

/// Stage 2: dense training against pseudo-labels.
template <typename S>
std::vector<TrainLogEntry> distillTrain(StereoModel<S>& model, AdamW<S>& opt,
                                        const std::vector<StereoSample<S>>& samples,
                                        const PseudoLabelStore& store, const TrainConfig& cfg,
                                        Index n_steps) {
  Index n_missing = 0;
  auto labeled = withPseudoLabels(samples, store, n_missing);
  if (labeled.empty()) throw ConfigError("no samples with pseudo-labels");
  return trainLoop(model, opt, labeled, cfg, n_steps);
}

/// Stage 3: resumes a checkpoint and fine-tunes on sparse ground truth with
/// a fresh optimizer and a restarted one-cycle schedule.
template <typename S>
std::vector<TrainLogEntry> finetuneSparse(const std::string& checkpoint_path,
                                          StereoModel<S>& model, AdamW<S>& opt,
                                          const std::vector<StereoSample<S>>& sparse_samples,
                                          const TrainConfig& cfg, Index n_steps) {
  loadCheckpoint(checkpoint_path, model, static_cast<AdamW<S>*>(nullptr), cfg.hash());
  opt.reset();
  return trainLoop(model, opt, sparse_samples, cfg, n_steps);
}

}  // namespace tstereo
