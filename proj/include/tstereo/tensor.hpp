#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace tstereo {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

inline Index shapeNumel(const Shape& s) {
  Index n = 1;
  for (Index d : s) n *= d;
  return n;
}

inline std::string shapeStr(const Shape& s) {
  std::string out = "(";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + ")";
}

/// Dense n-d array, flat row-major storage over an Eigen array.
/// Scalar is float for production runs and double for gradient checks.
template <typename S>
class Tensor {
 public:
  using Storage = Eigen::Array<S, Eigen::Dynamic, 1>;

  Tensor() = default;
  explicit Tensor(Shape shape)
      : shape_(std::move(shape)), data_(Storage::Zero(shapeNumel(shape_))) {}
  Tensor(Shape shape, Storage data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shapeNumel(shape_))
      throw std::invalid_argument("Tensor: storage size does not match shape " + shapeStr(shape_));
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, S v) {
    Tensor t(std::move(shape));
    t.data_.setConstant(v);
    return t;
  }
  static Tensor scalar(S v) { return full({1}, v); }

  const Shape& shape() const { return shape_; }
  Index ndim() const { return static_cast<Index>(shape_.size()); }
  Index dim(Index i) const { return shape_[static_cast<size_t>(i)]; }
  Index numel() const { return data_.size(); }

  Storage& raw() { return data_; }
  const Storage& raw() const { return data_; }
  S* ptr() { return data_.data(); }
  const S* ptr() const { return data_.data(); }

  S& operator[](Index i) { return data_[i]; }
  S operator[](Index i) const { return data_[i]; }

  S& at(Index i, Index j) { return data_[i * shape_[1] + j]; }
  S at(Index i, Index j) const { return data_[i * shape_[1] + j]; }
  S& at(Index i, Index j, Index k) { return data_[(i * shape_[1] + j) * shape_[2] + k]; }
  S at(Index i, Index j, Index k) const { return data_[(i * shape_[1] + j) * shape_[2] + k]; }
  S& at(Index i, Index j, Index k, Index l) {
    return data_[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
  }
  S at(Index i, Index j, Index k, Index l) const {
    return data_[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
  }

  Tensor reshaped(Shape shape) const {
    if (shapeNumel(shape) != numel())
      throw std::invalid_argument("Tensor::reshaped: numel mismatch");
    return Tensor(std::move(shape), data_);
  }

  bool allFinite() const { return data_.isFinite().all(); }

  bool sameShape(const Tensor& o) const { return shape_ == o.shape_; }

  template <typename T>
  Tensor<T> cast() const {
    Tensor<T> out(shape_);
    out.raw() = data_.template cast<T>();
    return out;
  }

  /// Fills with N(0, sigma^2) samples via Box-Muller so results are
  /// identical across standard library implementations.
  void setRandomNormal(std::mt19937& rng, S sigma = S(1)) {
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    for (Index i = 0; i < data_.size(); i += 2) {
      double u1 = 1.0 - uni(rng);
      double u2 = uni(rng);
      double r = std::sqrt(-2.0 * std::log(u1));
      data_[i] = static_cast<S>(r * std::cos(2.0 * M_PI * u2) * sigma);
      if (i + 1 < data_.size()) data_[i + 1] = static_cast<S>(r * std::sin(2.0 * M_PI * u2) * sigma);
    }
  }

  void setRandomUniform(std::mt19937& rng, S lo, S hi) {
    std::uniform_real_distribution<double> uni(lo, hi);
    for (Index i = 0; i < data_.size(); ++i) data_[i] = static_cast<S>(uni(rng));
  }

 private:
  Shape shape_;
  Storage data_;
};

/// Mirror index into [0, n): symmetric reflection without edge repeat.
inline Index reflectIndex(Index i, Index n) {
  if (n == 1) return 0;
  const Index period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

}  // namespace tstereo
