#pragma once

#include "tstereo/autograd.hpp"
#include "tstereo/disparity.hpp"
#include "tstereo/image_io.hpp"

#include <json.hpp>

#include <cmath>
#include <iostream>
#include <map>

namespace tstereo {

template <typename S>
struct LossReport {
  Var<S> total;                   // scalar, on the tape
  std::vector<S> per_prediction;  // unweighted masked mean-L1 terms
  Index valid_pixel_count = 0;
  bool skipped = false;  // no valid pixels: sample contributes nothing
};

/// Weighted sequence loss over full-resolution predictions: term i is the
/// mean L1 error on valid pixels, weighted by gamma^(N-1-i) so the last
/// prediction carries weight 1.
template <typename S>
LossReport<S> sequenceLoss(const std::vector<Var<S>>& predictions, const DisparityMap<S>& gt,
                           S gamma = S(0.9)) {
  if (predictions.empty()) throw std::invalid_argument("sequenceLoss: no predictions");
  if (!(gamma > S(0) && gamma <= S(1)))
    throw std::invalid_argument("sequenceLoss: gamma must be in (0, 1]");
  for (auto& p : predictions)
    if (p.shape() != gt.data.shape())
      throw std::invalid_argument("sequenceLoss: prediction shape " + shapeStr(p.shape()) +
                                  " does not match gt " + shapeStr(gt.data.shape()));
  LossReport<S> report;
  report.valid_pixel_count = gt.validCount();
  if (report.valid_pixel_count == 0) {
    std::cerr << "warning: sample with zero valid pixels skipped\n";
    report.skipped = true;
    report.total = Var<S>::constant(Tensor<S>::zeros({1}));
    report.per_prediction.assign(predictions.size(), S(0));
    return report;
  }
  auto mask = Var<S>::constant(gt.maskTensor());
  auto gt_v = Var<S>::constant(gt.data);
  const S inv_n = S(1) / static_cast<S>(report.valid_pixel_count);
  const Index n = static_cast<Index>(predictions.size());
  Var<S> total;
  for (Index i = 0; i < n; ++i) {
    Var<S> term = scale(sumAll(mul(absVal(sub(predictions[static_cast<size_t>(i)], gt_v)), mask)),
                        inv_n);
    report.per_prediction.push_back(term.value()[0]);
    const S w = static_cast<S>(std::pow(static_cast<double>(gamma), static_cast<double>(n - 1 - i)));
    Var<S> weighted = scale(term, w);
    total = total.valid() ? add(total, weighted) : weighted;
  }
  report.total = total;
  return report;
}

namespace detail {
inline std::string fmtThreshold(double t) {
  std::string s = std::to_string(t);
  s.erase(s.find_last_not_of('0') + 1);
  if (!s.empty() && s.back() == '.') s.pop_back();
  return s;
}
}  // namespace detail

/// Accumulated evaluation statistics. Merging is associative and
/// order-independent (count-weighted sums).
struct MetricReport {
  double abs_err_sum = 0.0;
  long long n_valid = 0;
  long long n_samples = 0;
  std::map<double, long long> outlier_counts;  // threshold -> #valid pixels above it
  std::string condition;

  double epe() const { return n_valid ? abs_err_sum / static_cast<double>(n_valid) : 0.0; }
  double outlierRate(double threshold) const {
    auto it = outlier_counts.find(threshold);
    if (it == outlier_counts.end() || n_valid == 0) return 0.0;
    return 100.0 * static_cast<double>(it->second) / static_cast<double>(n_valid);
  }

  void merge(const MetricReport& other) {
    abs_err_sum += other.abs_err_sum;
    n_valid += other.n_valid;
    n_samples += other.n_samples;
    for (auto& [t, c] : other.outlier_counts) outlier_counts[t] += c;
  }

  nlohmann::json toJson() const {
    nlohmann::json outliers = nlohmann::json::object();
    for (auto& [t, c] : outlier_counts) outliers[detail::fmtThreshold(t)] = outlierRate(t);
    return {{"epe", epe()},
            {"outliers", outliers},
            {"n_samples", n_samples},
            {"condition", condition}};
  }
};

/// EPE and >threshold outlier counts over valid pixels. Predictions are
/// clamped to [0, d_max] first; gt and mask are taken as-is.
template <typename S>
MetricReport computeMetrics(const Tensor<S>& pred, const DisparityMap<S>& gt,
                            const std::vector<double>& thresholds, double d_max,
                            const std::string& condition = "") {
  if (pred.shape() != gt.data.shape())
    throw std::invalid_argument("computeMetrics: shape mismatch " + shapeStr(pred.shape()) +
                                " vs " + shapeStr(gt.data.shape()));
  MetricReport r;
  r.condition = condition;
  for (double t : thresholds) r.outlier_counts[t] = 0;
  const Index h = gt.height(), w = gt.width();
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x) {
      if (!gt.isValid(y, x)) continue;
      const double p = std::clamp(static_cast<double>(pred.at(y, x)), 0.0, d_max);
      const double err = std::abs(p - static_cast<double>(gt.data.at(y, x)));
      r.abs_err_sum += err;
      ++r.n_valid;
      for (double t : thresholds)
        if (err > t) ++r.outlier_counts[t];
    }
  if (r.n_valid == 0)
    std::cerr << "warning: sample with zero valid pixels skipped in metrics\n";
  else
    r.n_samples = 1;
  return r;
}

/// Linear blue-to-red colormap over t in [0, 1].
inline void errorColor(double t, uint8_t& r, uint8_t& g, uint8_t& b) {
  t = std::clamp(t, 0.0, 1.0);
  r = static_cast<uint8_t>(std::lround(255.0 * t));
  g = 0;
  b = static_cast<uint8_t>(std::lround(255.0 * (1.0 - t)));
}

/// Writes a color-mapped |pred - gt| image: blue (0,0,255) at zero error,
/// red (255,0,0) at err_max and beyond, invalid pixels black. The mapping is
/// recorded in the PNG text metadata.
template <typename S>
void renderErrorMap(const Tensor<S>& pred, const DisparityMap<S>& gt, const std::string& out_path,
                    double err_max = 5.0) {
  if (pred.shape() != gt.data.shape())
    throw std::invalid_argument("renderErrorMap: shape mismatch");
  const Index h = gt.height(), w = gt.width();
  std::vector<uint8_t> rgb(static_cast<size_t>(h * w * 3), 0);
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x) {
      if (!gt.isValid(y, x)) continue;
      const double err = std::abs(static_cast<double>(pred.at(y, x)) -
                                  static_cast<double>(gt.data.at(y, x)));
      uint8_t r, g, b;
      errorColor(err / err_max, r, g, b);
      const size_t i = static_cast<size_t>((y * w + x) * 3);
      rgb[i] = r;
      rgb[i + 1] = g;
      rgb[i + 2] = b;
    }
  writeRgbPng(out_path, h, w, rgb,
              {{"colormap", "linear blue(0,0,255)->red(255,0,0) over |err|/" +
                                std::to_string(err_max) + ", invalid pixels black"}});
}

}  // namespace tstereo
