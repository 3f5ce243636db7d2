#pragma once

#include "tstereo/data.hpp"
#include "tstereo/loss_metrics.hpp"
#include "tstereo/model.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <ctime>
#include <functional>
#include <iomanip>
#include <numeric>
#include <sstream>

namespace tstereo {

struct TrainAbort : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  ModelConfig model;
  Index batch_size = 4;
  double max_lr = 1e-3;
  Index total_steps = 1000;
  double gamma = 0.9;
  double weight_decay = 1e-4;
  double clip_norm = 1.0;
  uint32_t seed = 0;
  std::string train_manifest, val_manifest, checkpoint_dir;

  nlohmann::json toJson() const {
    return {{"variant", variantName(model.variant)},
            {"d_max", model.d_max},
            {"init_seed", model.init_seed},
            {"encoder",
             {{"nc", model.enc.nc},
              {"nc8", model.enc.nc8},
              {"nc16", model.enc.nc16},
              {"c_stem", model.enc.c_stem},
              {"c_mid", model.enc.c_mid}}},
            {"aggregation",
             {{"c0", model.agg.c0},
              {"c1", model.agg.c1},
              {"c2", model.agg.c2},
              {"expansion", model.agg.expansion},
              {"se_enabled", model.agg.se_enabled},
              {"se_reduction", model.agg.se_reduction}}},
            {"refinement",
             {{"nm", model.refine.nm},
              {"corr_radius", model.refine.corr_radius},
              {"up_factor", model.refine.up_factor}}},
            {"batch_size", batch_size},
            {"max_lr", max_lr},
            {"total_steps", total_steps},
            {"gamma", gamma},
            {"weight_decay", weight_decay},
            {"clip_norm", clip_norm},
            {"seed", seed},
            {"train_manifest", train_manifest},
            {"val_manifest", val_manifest},
            {"checkpoint_dir", checkpoint_dir}};
  }

  static TrainConfig fromJson(const nlohmann::json& j) {
    TrainConfig c;
    try {
      if (j.contains("variant")) c.model.variant = variantFromName(j["variant"]);
      c.model.d_max = j.value("d_max", c.model.d_max);
      c.model.init_seed = j.value("init_seed", c.model.init_seed);
      if (j.contains("encoder")) {
        auto& e = j["encoder"];
        c.model.enc = {e.value("nc", c.model.enc.nc), e.value("nc8", c.model.enc.nc8),
                       e.value("nc16", c.model.enc.nc16), e.value("c_stem", c.model.enc.c_stem),
                       e.value("c_mid", c.model.enc.c_mid)};
      }
      if (j.contains("aggregation")) {
        auto& a = j["aggregation"];
        c.model.agg = {a.value("c0", c.model.agg.c0),
                       a.value("c1", c.model.agg.c1),
                       a.value("c2", c.model.agg.c2),
                       a.value("expansion", c.model.agg.expansion),
                       a.value("se_enabled", c.model.agg.se_enabled),
                       a.value("se_reduction", c.model.agg.se_reduction)};
      }
      if (j.contains("refinement")) {
        auto& r = j["refinement"];
        c.model.refine = {r.value("nm", c.model.refine.nm),
                          r.value("corr_radius", c.model.refine.corr_radius),
                          r.value("up_factor", c.model.refine.up_factor)};
      }
      c.batch_size = j.value("batch_size", c.batch_size);
      c.max_lr = j.value("max_lr", c.max_lr);
      c.total_steps = j.value("total_steps", c.total_steps);
      c.gamma = j.value("gamma", c.gamma);
      c.weight_decay = j.value("weight_decay", c.weight_decay);
      c.clip_norm = j.value("clip_norm", c.clip_norm);
      c.seed = j.value("seed", c.seed);
      c.train_manifest = j.value("train_manifest", c.train_manifest);
      c.val_manifest = j.value("val_manifest", c.val_manifest);
      c.checkpoint_dir = j.value("checkpoint_dir", c.checkpoint_dir);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("bad training config: ") + e.what());
    }
    c.model.validate();
    return c;
  }

  /// Stable hash of the architecture-relevant configuration.
  std::string hash() const {
    nlohmann::json arch = toJson();
    for (const char* k : {"train_manifest", "val_manifest", "checkpoint_dir", "seed",
                          "total_steps", "max_lr", "batch_size"})
      arch.erase(k);
    const size_t h = std::hash<std::string>{}(arch.dump());
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
  }
};

/// One-cycle schedule: linear warmup over the first 5% of steps from
/// max_lr/25 to max_lr, then cosine decay back to max_lr/25.
inline double oneCycleLr(Index step, Index total_steps, double max_lr) {
  const double lo = max_lr / 25.0;
  const double warm = 0.05 * static_cast<double>(total_steps);
  const double s = static_cast<double>(std::min(step, total_steps));
  if (s <= warm) return warm > 0 ? lo + (max_lr - lo) * (s / warm) : max_lr;
  const double t = (s - warm) / (static_cast<double>(total_steps) - warm);
  return lo + 0.5 * (max_lr - lo) * (1.0 + std::cos(M_PI * t));
}

/// Adam with decoupled weight decay over a parameter registry. Moment state
/// is kept in double regardless of the model scalar type.
template <typename S>
class AdamW {
 public:
  explicit AdamW(ParamRegistry<S>& reg, double weight_decay = 1e-4, double beta1 = 0.9,
                 double beta2 = 0.999, double eps = 1e-8)
      : reg_(reg), wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {
    for (auto& [name, p] : reg.params()) {
      m_.emplace_back(p.value().numel(), 0.0);
      v_.emplace_back(p.value().numel(), 0.0);
    }
  }

  void reset() {
    t_ = 0;
    for (auto& m : m_) std::fill(m.begin(), m.end(), 0.0);
    for (auto& v : v_) std::fill(v.begin(), v.end(), 0.0);
  }

  /// Applies one update from the gradients currently on the parameters.
  /// Gradients are clipped to a global norm of clip_norm first (0 = off).
  void step(double lr, double clip_norm) {
    double sq = 0.0;
    for (auto& [name, p] : reg_.params()) {
      if (!p.node()->grad_ready) continue;
      sq += static_cast<double>((p.grad().raw() * p.grad().raw()).sum());
    }
    const double norm = std::sqrt(sq);
    const double scale = (clip_norm > 0 && norm > clip_norm) ? clip_norm / norm : 1.0;
    ++t_;
    const double bc1 = 1.0 - std::pow(b1_, t_), bc2 = 1.0 - std::pow(b2_, t_);
    size_t pi = 0;
    for (auto& [name, p] : reg_.params()) {
      auto& par = const_cast<Var<S>&>(p);
      const bool has_grad = p.node()->grad_ready;
      const Index n = p.value().numel();
      for (Index i = 0; i < n; ++i) {
        const double g = has_grad ? static_cast<double>(p.grad()[i]) * scale : 0.0;
        m_[pi][static_cast<size_t>(i)] = b1_ * m_[pi][static_cast<size_t>(i)] + (1 - b1_) * g;
        v_[pi][static_cast<size_t>(i)] = b2_ * v_[pi][static_cast<size_t>(i)] + (1 - b2_) * g * g;
        const double mhat = m_[pi][static_cast<size_t>(i)] / bc1;
        const double vhat = v_[pi][static_cast<size_t>(i)] / bc2;
        const double upd = mhat / (std::sqrt(vhat) + eps_) + wd_ * static_cast<double>(p.value()[i]);
        par.valueMut()[i] -= static_cast<S>(lr * upd);
      }
      ++pi;
    }
  }

  long long stepCount() const { return t_; }
  const std::vector<std::vector<double>>& m() const { return m_; }
  const std::vector<std::vector<double>>& v() const { return v_; }
  void setState(long long t, std::vector<std::vector<double>> m, std::vector<std::vector<double>> v) {
    t_ = t;
    m_ = std::move(m);
    v_ = std::move(v);
  }

 private:
  ParamRegistry<S>& reg_;
  double wd_, b1_, b2_, eps_;
  long long t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// ---------------------------------------------------------------------------
// checkpoints

namespace detail {
inline void writeStr(std::ofstream& out, const std::string& s) {
  const uint32_t n = static_cast<uint32_t>(s.size());
  out.write(reinterpret_cast<const char*>(&n), 4);
  out.write(s.data(), n);
}
inline std::string readStr(std::ifstream& in) {
  uint32_t n = 0;
  in.read(reinterpret_cast<char*>(&n), 4);
  std::string s(n, '\0');
  in.read(s.data(), n);
  return s;
}
template <typename S>
void writeBlock(std::ofstream& out, const std::string& name, const Tensor<S>& t) {
  writeStr(out, name);
  const uint64_t n = static_cast<uint64_t>(t.numel());
  out.write(reinterpret_cast<const char*>(&n), 8);
  for (Index i = 0; i < t.numel(); ++i) {
    const double v = static_cast<double>(t[i]);
    out.write(reinterpret_cast<const char*>(&v), 8);
  }
}
template <typename S>
void readBlockInto(std::ifstream& in, const std::string& want_name, Tensor<S>& t) {
  const std::string name = readStr(in);
  uint64_t n = 0;
  in.read(reinterpret_cast<char*>(&n), 8);
  if (name != want_name || n != static_cast<uint64_t>(t.numel()))
    throw ConfigError("checkpoint mismatch at '" + want_name + "': stored '" + name + "' with " +
                      std::to_string(n) + " values, model expects " + std::to_string(t.numel()));
  for (Index i = 0; i < t.numel(); ++i) {
    double v = 0;
    in.read(reinterpret_cast<char*>(&v), 8);
    t[i] = static_cast<S>(v);
  }
}
}  // namespace detail

template <typename S>
void saveCheckpoint(const std::string& path, const StereoModel<S>& model, const AdamW<S>* opt,
                    Index step, const std::string& config_hash) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write checkpoint: " + path);
  out.write("TSCK\x01", 5);
  detail::writeStr(out, config_hash);
  const int64_t st = step;
  out.write(reinterpret_cast<const char*>(&st), 8);
  const auto& reg = model.registry();
  const uint32_t np = static_cast<uint32_t>(reg.params().size());
  const uint32_t nb = static_cast<uint32_t>(reg.buffers().size());
  out.write(reinterpret_cast<const char*>(&np), 4);
  out.write(reinterpret_cast<const char*>(&nb), 4);
  for (auto& [name, p] : reg.params()) detail::writeBlock(out, name, p.value());
  for (auto& [name, b] : reg.buffers()) detail::writeBlock(out, name, *b);
  const uint8_t has_opt = opt ? 1 : 0;
  out.write(reinterpret_cast<const char*>(&has_opt), 1);
  if (opt) {
    const int64_t t = opt->stepCount();
    out.write(reinterpret_cast<const char*>(&t), 8);
    for (auto* vec : {&opt->m(), &opt->v()})
      for (auto& arr : *vec)
        out.write(reinterpret_cast<const char*>(arr.data()),
                  static_cast<std::streamsize>(arr.size() * 8));
  }
  if (!out) throw ConfigError("short checkpoint write: " + path);

  nlohmann::json side{{"step", step},
                      {"config_hash", config_hash},
                      {"created_at", static_cast<long long>(::time(nullptr))},
                      {"variant", variantName(model.config().variant)},
                      {"param_count", model.paramCount()}};
  std::ofstream(path + ".json") << side.dump(2) << "\n";
}

/// Loads weights (and optimizer state if requested). A non-empty
/// expect_hash must match the stored one.
template <typename S>
Index loadCheckpoint(const std::string& path, StereoModel<S>& model, AdamW<S>* opt,
                     const std::string& expect_hash = "") {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open checkpoint: " + path);
  char magic[5];
  in.read(magic, 5);
  if (std::string(magic, 5) != "TSCK\x01") throw ConfigError("not a checkpoint file: " + path);
  const std::string stored_hash = detail::readStr(in);
  if (!expect_hash.empty() && stored_hash != expect_hash)
    throw ConfigError("checkpoint config hash " + stored_hash + " does not match expected " +
                      expect_hash);
  int64_t step = 0;
  in.read(reinterpret_cast<char*>(&step), 8);
  uint32_t np = 0, nb = 0;
  in.read(reinterpret_cast<char*>(&np), 4);
  in.read(reinterpret_cast<char*>(&nb), 4);
  auto& reg = model.registry();
  if (np != reg.params().size() || nb != reg.buffers().size())
    throw ConfigError("checkpoint has " + std::to_string(np) + " params / " + std::to_string(nb) +
                      " buffers, model has " + std::to_string(reg.params().size()) + " / " +
                      std::to_string(reg.buffers().size()));
  for (auto& [name, p] : reg.params())
    detail::readBlockInto(in, name, const_cast<Var<S>&>(p).valueMut());
  for (auto& [name, b] : reg.buffers()) detail::readBlockInto(in, name, *b);
  uint8_t has_opt = 0;
  in.read(reinterpret_cast<char*>(&has_opt), 1);
  if (opt && has_opt) {
    int64_t t = 0;
    in.read(reinterpret_cast<char*>(&t), 8);
    std::vector<std::vector<double>> m, v;
    for (auto* vec : {&m, &v})
      for (auto& [name, p] : reg.params()) {
        std::vector<double> arr(static_cast<size_t>(p.value().numel()));
        in.read(reinterpret_cast<char*>(arr.data()),
                static_cast<std::streamsize>(arr.size() * 8));
        vec->push_back(std::move(arr));
      }
    opt->setState(t, std::move(m), std::move(v));
  }
  if (!in) throw ConfigError("truncated checkpoint: " + path);
  return static_cast<Index>(step);
}

// ---------------------------------------------------------------------------
// training loop

/// LiDAR validity convention: d <= 0 or d >= d_max cannot be supervised.
template <typename S>
void applyValidityConvention(DisparityMap<S>& gt, double d_max) {
  if (!gt.valid) gt.valid = Tensor<uint8_t>::full(gt.data.shape(), 1);
  for (Index i = 0; i < gt.data.numel(); ++i)
    if (!(gt.data[i] > S(0)) || gt.data[i] >= static_cast<S>(d_max)) (*gt.valid)[i] = 0;
}

struct TrainLogEntry {
  Index step = 0;
  double loss = 0.0;
  double lr = 0.0;
};

/// Runs n_steps optimizer steps over the sample list (shuffled epochs).
/// `schedule_offset` shifts the one-cycle position for resumed runs.
template <typename S>
std::vector<TrainLogEntry> trainLoop(
    StereoModel<S>& model, AdamW<S>& opt, const std::vector<StereoSample<S>>& samples,
    const TrainConfig& cfg, Index n_steps, Index schedule_offset = 0,
    const std::function<void(const TrainLogEntry&)>& on_step = nullptr) {
  if (samples.empty()) throw ConfigError("training set is empty");
  std::mt19937 rng(cfg.seed ^ 0x9e3779b9u);
  std::vector<size_t> order(samples.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  size_t cursor = 0;
  std::vector<TrainLogEntry> log;
  model.setTrainMode(true);
  for (Index step = 0; step < n_steps; ++step) {
    model.registry().zeroGrad();
    Var<S> batch_loss;
    std::vector<std::string> batch_ids;
    Index used = 0;
    for (Index b = 0; b < cfg.batch_size; ++b) {
      if (cursor >= order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      const StereoSample<S>& s = samples[order[cursor++]];
      batch_ids.push_back(s.id);
      if (!s.gt) continue;
      auto out = model.forward(s.left, s.right);
      auto rep = sequenceLoss<S>(out.predictions(), *s.gt, static_cast<S>(cfg.gamma));
      if (rep.skipped) continue;
      batch_loss = batch_loss.valid() ? add(batch_loss, rep.total) : rep.total;
      ++used;
    }
    if (used == 0) throw ConfigError("batch with no supervisable samples");
    Var<S> loss = scale(batch_loss, S(1) / static_cast<S>(used));
    const double loss_val = static_cast<double>(loss.value()[0]);
    if (!std::isfinite(loss_val)) {
      std::string ids;
      for (auto& id : batch_ids) ids += (ids.empty() ? "" : ",") + id;
      if (!cfg.checkpoint_dir.empty()) {
        std::filesystem::create_directories(cfg.checkpoint_dir);
        std::ofstream(cfg.checkpoint_dir + "/failed_batch.json")
            << nlohmann::json{{"step", schedule_offset + step}, {"sample_ids", batch_ids}}.dump(2)
            << "\n";
      }
      model.setTrainMode(false);
      throw TrainAbort("non-finite loss at step " + std::to_string(schedule_offset + step) +
                       " on batch [" + ids + "]");
    }
    loss.backward();
    const double lr = oneCycleLr(schedule_offset + step, cfg.total_steps, cfg.max_lr);
    opt.step(lr, cfg.clip_norm);
    TrainLogEntry e{schedule_offset + step, loss_val, lr};
    if (on_step) on_step(e);
    log.push_back(e);
  }
  model.setTrainMode(false);
  return log;
}

// ---------------------------------------------------------------------------
// evaluation

struct EvalResult {
  std::map<std::string, MetricReport> per_tag;
  MetricReport aggregate;
  Index skipped_no_gt = 0;
};

template <typename S>
EvalResult evaluateModel(const StereoModel<S>& model, const std::vector<StereoSample<S>>& samples,
                         const std::vector<double>& thresholds) {
  EvalResult res;
  const double d_max = static_cast<double>(model.config().d_max);
  for (auto& s : samples) {
    if (!s.gt) {
      ++res.skipped_no_gt;
      continue;
    }
    auto out = model.forward(s.left, s.right);
    auto r = computeMetrics<S>(out.d_final.value(), *s.gt, thresholds, d_max, s.condition_tag);
    res.per_tag[s.condition_tag].merge(r);
    res.per_tag[s.condition_tag].condition = s.condition_tag;
    res.aggregate.merge(r);
  }
  res.aggregate.condition = "all";
  return res;
}

template <typename S>
std::vector<StereoSample<S>> loadAllSamples(const DatasetManifest& m, double d_max) {
  std::vector<StereoSample<S>> samples;
  for (size_t i = 0; i < m.entries.size(); ++i) {
    samples.push_back(loadSample<S>(m, i));
    if (samples.back().gt) applyValidityConvention(*samples.back().gt, d_max);
  }
  return samples;
}

}  // namespace tstereo
