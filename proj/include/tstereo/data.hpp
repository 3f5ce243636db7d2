#pragma once

#include "tstereo/disparity.hpp"
#include "tstereo/errors.hpp"
#include "tstereo/image_io.hpp"

#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <set>

namespace tstereo {

template <typename S>
struct StereoSample {
  Tensor<S> left, right;  // intensities normalized to [0, 1]
  std::optional<DisparityMap<S>> gt;
  std::string condition_tag;
  std::string id;
};

struct ManifestEntry {
  std::string id, left_path, right_path, disp_path, condition_tag;
};

struct DatasetManifest {
  std::string root;
  std::string split = "train";
  std::vector<ManifestEntry> entries;
};

// ---------------------------------------------------------------------------
// images

template <typename S>
Tensor<S> imageToTensor(const GrayImage& img) {
  const S denom = img.bit_depth == 16 ? S(65535) : S(255);
  Tensor<S> t({img.height, img.width});
  for (Index i = 0; i < t.numel(); ++i) t[i] = static_cast<S>(img.pixels[static_cast<size_t>(i)]) / denom;
  return t;
}

template <typename S>
GrayImage tensorToImage16(const Tensor<S>& t) {
  GrayImage img;
  img.height = t.dim(0);
  img.width = t.dim(1);
  img.bit_depth = 16;
  img.pixels.resize(static_cast<size_t>(t.numel()));
  for (Index i = 0; i < t.numel(); ++i) {
    const double v = std::clamp(static_cast<double>(t[i]), 0.0, 1.0);
    img.pixels[static_cast<size_t>(i)] = static_cast<uint16_t>(std::lround(v * 65535.0));
  }
  return img;
}

// ---------------------------------------------------------------------------
// disparity codecs

/// KITTI-style 16-bit disparity: raw = d * divisor, raw 0 = invalid.
template <typename S>
void encodeDisparityPng16(const std::string& path, const DisparityMap<S>& disp,
                          double divisor = 256.0) {
  GrayImage img;
  img.height = disp.height();
  img.width = disp.width();
  img.bit_depth = 16;
  img.pixels.resize(static_cast<size_t>(disp.data.numel()));
  for (Index y = 0; y < img.height; ++y)
    for (Index x = 0; x < img.width; ++x) {
      uint16_t raw = 0;
      if (disp.isValid(y, x)) {
        const double v = std::lround(static_cast<double>(disp.data.at(y, x)) * divisor);
        raw = static_cast<uint16_t>(std::clamp(v, 1.0, 65535.0));
      }
      img.pixels[static_cast<size_t>(y * img.width + x)] = raw;
    }
  writeGrayPng(path, img, {{"disparity_divisor", std::to_string(divisor)}});
}

template <typename S>
DisparityMap<S> decodeDisparityPng16(const std::string& path, double divisor = 256.0) {
  GrayImage img = readGrayPng(path);
  if (img.bit_depth != 16)
    throw CodecError("disparity PNG must be 16-bit, got " + std::to_string(img.bit_depth) +
                     "-bit: " + path);
  DisparityMap<S> d;
  d.data = Tensor<S>({img.height, img.width});
  d.valid = Tensor<uint8_t>({img.height, img.width});
  for (Index i = 0; i < d.data.numel(); ++i) {
    const uint16_t raw = img.pixels[static_cast<size_t>(i)];
    d.data[i] = static_cast<S>(raw / divisor);
    (*d.valid)[i] = raw != 0;
  }
  return d;
}

/// PFM float map, negative scale = little-endian, rows stored bottom-up.
template <typename S>
void writePfm(const std::string& path, const Tensor<S>& map) {
  const Index h = map.dim(0), w = map.dim(1);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CodecError("cannot open for writing: " + path);
  out << "Pf\n" << w << " " << h << "\n-1.0\n";
  for (Index y = h - 1; y >= 0; --y)
    for (Index x = 0; x < w; ++x) {
      const float v = static_cast<float>(map.at(y, x));
      out.write(reinterpret_cast<const char*>(&v), sizeof(float));
    }
  if (!out) throw CodecError("short write: " + path);
}

template <typename S>
DisparityMap<S> decodeDisparityPfm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CodecError("cannot open: " + path);
  std::string magic;
  Index w = 0, h = 0;
  double pfm_scale = 0;
  in >> magic >> w >> h >> pfm_scale;
  if (magic != "Pf" || w <= 0 || h <= 0 || pfm_scale == 0)
    throw CodecError("malformed PFM header: " + path);
  in.get();  // single whitespace after the header
  const bool little_endian = pfm_scale < 0;
  std::vector<float> raw(static_cast<size_t>(w * h));
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size() * 4));
  if (!in) throw CodecError("truncated PFM data: " + path);
  if (!little_endian)
    for (float& v : raw) {
      auto* b = reinterpret_cast<uint8_t*>(&v);
      std::swap(b[0], b[3]);
      std::swap(b[1], b[2]);
    }
  DisparityMap<S> d;
  d.data = Tensor<S>({h, w});
  d.valid = Tensor<uint8_t>({h, w});
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x) {
      const float v = raw[static_cast<size_t>((h - 1 - y) * w + x)];  // bottom-up
      d.data.at(y, x) = static_cast<S>(v);
      d.valid->at(y, x) = std::isfinite(v) ? 1 : 0;
    }
  return d;
}

// ---------------------------------------------------------------------------
// manifest

inline DatasetManifest loadManifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open manifest: " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("malformed manifest " + path + ": " + e.what());
  }
  DatasetManifest m;
  m.root = j.value("root", std::filesystem::path(path).parent_path().string());
  m.split = j.value("split", "train");
  std::set<std::string> ids;
  size_t line = 0;
  for (auto& e : j.value("entries", nlohmann::json::array())) {
    ++line;
    ManifestEntry entry;
    try {
      entry.id = e.at("id").get<std::string>();
      entry.left_path = e.at("left").get<std::string>();
      entry.right_path = e.at("right").get<std::string>();
      entry.disp_path = e.value("disp", "");
      entry.condition_tag = e.value("condition", "");
    } catch (const nlohmann::json::exception& ex) {
      throw ConfigError("manifest " + path + " entry " + std::to_string(line) + ": " + ex.what());
    }
    if (!ids.insert(entry.id).second)
      throw ConfigError("manifest " + path + ": duplicate id '" + entry.id + "'");
    auto resolve = [&](const std::string& p) {
      return (std::filesystem::path(m.root) / p).string();
    };
    for (const std::string* p : {&entry.left_path, &entry.right_path, &entry.disp_path}) {
      if (p->empty()) continue;
      if (!std::filesystem::exists(resolve(*p)))
        throw ConfigError("manifest entry '" + entry.id + "': missing file " + resolve(*p));
    }
    m.entries.push_back(std::move(entry));
  }
  return m;
}

inline void saveManifest(const std::string& path, const DatasetManifest& m) {
  nlohmann::json entries = nlohmann::json::array();
  for (auto& e : m.entries) {
    nlohmann::json je{{"id", e.id}, {"left", e.left_path}, {"right", e.right_path}};
    if (!e.disp_path.empty()) je["disp"] = e.disp_path;
    if (!e.condition_tag.empty()) je["condition"] = e.condition_tag;
    entries.push_back(std::move(je));
  }
  nlohmann::json j{{"root", m.root}, {"split", m.split}, {"entries", entries}};
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write manifest: " + path);
  out << j.dump(2) << "\n";
}

template <typename S>
StereoSample<S> loadSample(const DatasetManifest& m, size_t index) {
  const ManifestEntry& e = m.entries.at(index);
  auto resolve = [&](const std::string& p) { return (std::filesystem::path(m.root) / p).string(); };
  StereoSample<S> s;
  s.id = e.id;
  s.condition_tag = e.condition_tag;
  s.left = imageToTensor<S>(readGrayPng(resolve(e.left_path)));
  s.right = imageToTensor<S>(readGrayPng(resolve(e.right_path)));
  if (s.left.shape() != s.right.shape())
    throw SizingError("sample '" + e.id + "': left " + shapeStr(s.left.shape()) + " vs right " +
                      shapeStr(s.right.shape()));
  if (!e.disp_path.empty()) {
    const std::string dp = resolve(e.disp_path);
    s.gt = dp.size() > 4 && dp.substr(dp.size() - 4) == ".pfm" ? decodeDisparityPfm<S>(dp)
                                                               : decodeDisparityPng16<S>(dp);
    if (s.gt->data.shape() != s.left.shape())
      throw SizingError("sample '" + e.id + "': gt " + shapeStr(s.gt->data.shape()) +
                        " vs image " + shapeStr(s.left.shape()));
  }
  return s;
}

// ---------------------------------------------------------------------------
// SceneFlow-style conversion

/// Luma grayscale of an interleaved RGB8 image, linearly scaled to [0, 40]
/// (thermal-range convention). Normalize with thermalToUnit for the model.
template <typename S>
Tensor<S> sceneflowToThermal(const std::vector<uint8_t>& rgb, Index h, Index w) {
  if (static_cast<Index>(rgb.size()) != h * w * 3)
    throw std::invalid_argument("sceneflowToThermal: need 3-channel interleaved data");
  Tensor<S> t({h, w});
  for (Index i = 0; i < h * w; ++i) {
    const double luma = 0.299 * rgb[static_cast<size_t>(3 * i)] +
                        0.587 * rgb[static_cast<size_t>(3 * i + 1)] +
                        0.114 * rgb[static_cast<size_t>(3 * i + 2)];
    t[i] = static_cast<S>(luma * 40.0 / 255.0);
  }
  return t;
}

template <typename S>
Tensor<S> thermalToUnit(const Tensor<S>& t) {
  return Tensor<S>(t.shape(), t.raw() / S(40));
}

// ---------------------------------------------------------------------------
// synthetic generator

struct SyntheticSceneSpec {
  uint32_t seed = 1;
  int n_objects = 6;
  double disp_min = 2.0, disp_max = 24.0;  // full-resolution pixels
  double noise_sigma = 0.01;               // additive, unit-intensity scale
  int blur_radius = 1;
  double sparsity = 1.0;  // fraction of gt pixels kept when sparsifying
  double d_max = 192.0;

  void validate() const {
    if (!(sparsity > 0.0 && sparsity <= 1.0))
      throw ConfigError("sparsity must be in (0, 1], got " + std::to_string(sparsity));
    if (disp_min < 0 || disp_max < disp_min || disp_max > d_max)
      throw ConfigError("disparity range [" + std::to_string(disp_min) + ", " +
                        std::to_string(disp_max) + "] must satisfy 0 <= min <= max <= d_max");
    if (n_objects < 0 || blur_radius < 0 || noise_sigma < 0)
      throw ConfigError("n_objects, blur_radius, noise_sigma must be non-negative");
  }
};

namespace detail {

/// Smooth low-frequency field in [0, 1] from a few random sinusoids.
template <typename S>
Tensor<S> smoothField(Index h, Index w, std::mt19937& rng) {
  std::uniform_real_distribution<double> freq(0.5, 2.5), phase(0.0, 2 * M_PI);
  double fy[3], fx[3], ph[3];
  for (int k = 0; k < 3; ++k) {
    fy[k] = freq(rng);
    fx[k] = freq(rng);
    ph[k] = phase(rng);
  }
  Tensor<S> t({h, w});
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x) {
      double v = 0;
      for (int k = 0; k < 3; ++k)
        v += std::sin(2 * M_PI * (fy[k] * y / h + fx[k] * x / w) + ph[k]);
      t.at(y, x) = static_cast<S>(v / 6.0 + 0.5);
    }
  return t;
}

template <typename S>
Tensor<S> boxBlur(const Tensor<S>& img, int radius) {
  if (radius <= 0) return img;
  const Index h = img.dim(0), w = img.dim(1);
  Tensor<S> tmp({h, w}), out({h, w});
  const S inv = S(1) / static_cast<S>(2 * radius + 1);
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x) {
      S acc = 0;
      for (int k = -radius; k <= radius; ++k) acc += img.at(y, reflectIndex(x + k, w));
      tmp.at(y, x) = acc * inv;
    }
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x) {
      S acc = 0;
      for (int k = -radius; k <= radius; ++k) acc += tmp.at(reflectIndex(y + k, h), x);
      out.at(y, x) = acc * inv;
    }
  return out;
}

}  // namespace detail

/// Marks left-view pixels whose target column in the right view is taken by
/// a nearer (larger-disparity) pixel of the same row.
template <typename S>
Tensor<uint8_t> occludedInRight(const Tensor<S>& disp) {
  const Index h = disp.dim(0), w = disp.dim(1);
  Tensor<uint8_t> occ = Tensor<uint8_t>::zeros({h, w});
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x) {
      const double sx = x - disp.at(y, x);
      for (Index x2 = 0; x2 < w; ++x2) {
        if (x2 == x || disp.at(y, x2) <= disp.at(y, x)) continue;
        if (std::abs((x2 - disp.at(y, x2)) - sx) < 1.0) {
          occ.at(y, x) = 1;
          break;
        }
      }
    }
  return occ;
}

/// Deterministic synthetic thermal stereo pair with dense ground truth.
/// The right view is built by searching, per right-view column, the
/// left-view crossing of x - d(x); when several left pixels land on the same
/// column the largest disparity (nearest surface) wins.
template <typename S>
StereoSample<S> generateSynthetic(const SyntheticSceneSpec& spec, Index h, Index w) {
  spec.validate();
  std::mt19937 rng(spec.seed);

  Tensor<S> left = detail::smoothField<S>(h, w, rng);
  // thermal-like low contrast around mid-gray
  left = Tensor<S>(left.shape(), left.raw() * S(0.2) + S(0.4));
  Tensor<S> disp = detail::smoothField<S>(h, w, rng);
  disp = Tensor<S>(disp.shape(),
                   disp.raw() * static_cast<S>(spec.disp_max - spec.disp_min) +
                       static_cast<S>(spec.disp_min));

  std::uniform_real_distribution<double> u01(0.0, 1.0);
  for (int obj = 0; obj < spec.n_objects; ++obj) {
    const bool ellipse = u01(rng) < 0.5;
    const double cy = u01(rng) * h, cx = u01(rng) * w;
    const double ry = (0.05 + 0.15 * u01(rng)) * h, rx = (0.05 + 0.15 * u01(rng)) * w;
    const S intensity = static_cast<S>(0.35 + 0.3 * u01(rng));
    const double d0 = spec.disp_min + (spec.disp_max - spec.disp_min) * u01(rng);
    const double gx = 0.05 * (u01(rng) - 0.5), gy = 0.05 * (u01(rng) - 0.5);
    for (Index y = 0; y < h; ++y)
      for (Index x = 0; x < w; ++x) {
        const double dy = (y - cy) / ry, dx = (x - cx) / rx;
        const bool inside = ellipse ? (dy * dy + dx * dx <= 1.0)
                                    : (std::abs(dy) <= 1.0 && std::abs(dx) <= 1.0);
        if (!inside) continue;
        const double d = std::clamp(d0 + gx * (x - cx) + gy * (y - cy), spec.disp_min,
                                    spec.disp_max);
        if (d >= disp.at(y, x)) {  // nearer surfaces paint over farther ones
          disp.at(y, x) = static_cast<S>(d);
          left.at(y, x) = intensity;
        }
      }
  }

  Tensor<S> right({h, w});
  std::vector<double> s(static_cast<size_t>(w));
  for (Index y = 0; y < h; ++y) {
    for (Index x = 0; x < w; ++x) s[static_cast<size_t>(x)] = x - disp.at(y, x);
    for (Index xr = 0; xr < w; ++xr) {
      double best_d = -1.0;
      S val = left.at(y, w - 1);  // fallback right of every source
      for (Index x = 0; x + 1 < w; ++x) {
        const double a = s[static_cast<size_t>(x)] - xr, b = s[static_cast<size_t>(x + 1)] - xr;
        if (a * b > 0) continue;
        const double t = a == b ? 0.0 : a / (a - b);
        const double dc = (x + t) - xr;
        if (dc > best_d) {
          best_d = dc;
          val = static_cast<S>((1 - t) * left.at(y, x) + t * left.at(y, x + 1));
        }
      }
      right.at(y, xr) = val;
    }
  }

  left = detail::boxBlur(left, spec.blur_radius);
  right = detail::boxBlur(right, spec.blur_radius);
  if (spec.noise_sigma > 0) {
    Tensor<S> nl({h, w}), nr({h, w});
    nl.setRandomNormal(rng, static_cast<S>(spec.noise_sigma));
    nr.setRandomNormal(rng, static_cast<S>(spec.noise_sigma));
    left = Tensor<S>(left.shape(), left.raw() + nl.raw());
    right = Tensor<S>(right.shape(), right.raw() + nr.raw());
  }

  StereoSample<S> sample;
  sample.left = std::move(left);
  sample.right = std::move(right);
  sample.gt = DisparityMap<S>{std::move(disp), std::nullopt, DispScale::Full};
  sample.id = "synthetic-" + std::to_string(spec.seed);
  sample.condition_tag = "synthetic";
  return sample;
}

/// LiDAR-like sparsification: keeps pixels on jittered horizontal scan lines
/// totaling about `fraction` of the image.
template <typename S>
DisparityMap<S> sparsify(const DisparityMap<S>& gt, double fraction, uint32_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0))
    throw std::invalid_argument("sparsify: fraction must be in (0, 1]");
  DisparityMap<S> out;
  out.data = gt.data;
  out.scale = gt.scale;
  if (fraction == 1.0) {
    out.valid = gt.valid;
    return out;
  }
  const Index h = gt.height(), w = gt.width();
  out.valid = Tensor<uint8_t>::zeros({h, w});
  std::mt19937 rng(seed);
  const Index spacing = std::max<Index>(1, static_cast<Index>(std::lround(1.0 / fraction)));
  std::uniform_int_distribution<Index> offset(0, spacing - 1);
  std::uniform_int_distribution<int> jitter(-1, 1);
  for (Index r = offset(rng); r < h; r += spacing)
    for (Index x = 0; x < w; ++x) {
      const Index y = std::clamp<Index>(r + jitter(rng), 0, h - 1);
      if (gt.isValid(y, x)) out.valid->at(y, x) = 1;
    }
  return out;
}

// ---------------------------------------------------------------------------
// dataset writing (generator output consumed via the manifest loader)

template <typename S>
void writeSampleFiles(const std::string& dir, const StereoSample<S>& sample,
                      DatasetManifest& manifest) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  ManifestEntry e;
  e.id = sample.id;
  e.condition_tag = sample.condition_tag;
  e.left_path = sample.id + "_left.png";
  e.right_path = sample.id + "_right.png";
  writeGrayPng((fs::path(dir) / e.left_path).string(), tensorToImage16(sample.left));
  writeGrayPng((fs::path(dir) / e.right_path).string(), tensorToImage16(sample.right));
  if (sample.gt) {
    e.disp_path = sample.id + "_disp.png";
    encodeDisparityPng16((fs::path(dir) / e.disp_path).string(), *sample.gt);
  }
  manifest.root = dir;
  manifest.entries.push_back(std::move(e));
}

}  // namespace tstereo
