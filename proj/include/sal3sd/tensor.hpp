#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "sal3sd/error.hpp"

namespace sal3sd {

using Shape = std::vector<int>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) n *= static_cast<std::size_t>(d);
  return n;
}

/// Dense row-major float64 tensor. Feature maps are CHW, token sets are N x D.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {
    for (int d : shape_) {
      if (d < 0) throw ShapeError("negative dimension in " + shape_str(shape_));
    }
  }
  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_numel(shape_)) {
      throw ShapeError("data size " + std::to_string(data_.size()) + " does not match shape " +
                       shape_str(shape_));
    }
  }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& at(int y, int x) { return data_[static_cast<std::size_t>(y) * shape_[1] + x]; }
  double at(int y, int x) const { return data_[static_cast<std::size_t>(y) * shape_[1] + x]; }
  double& at(int c, int y, int x) {
    return data_[(static_cast<std::size_t>(c) * shape_[1] + y) * shape_[2] + x];
  }
  double at(int c, int y, int x) const {
    return data_[(static_cast<std::size_t>(c) * shape_[1] + y) * shape_[2] + x];
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor reshaped(Shape s) const {
    if (shape_numel(s) != size()) throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(s));
    return Tensor(std::move(s), data_);
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<double> data_;
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

/// RGB image, stored planar as a {3, H, W} tensor with values in [0,1].
class Image {
 public:
  Image() = default;
  Image(int height, int width, double fill = 0.0) : pixels_({3, height, width}, fill) {}
  explicit Image(Tensor chw) : pixels_(std::move(chw)) {
    if (pixels_.rank() != 3 || pixels_.dim(0) != 3) {
      throw ShapeError("image tensor must be 3xHxW, got " + shape_str(pixels_.shape()));
    }
  }

  int height() const { return pixels_.rank() == 3 ? pixels_.dim(1) : 0; }
  int width() const { return pixels_.rank() == 3 ? pixels_.dim(2) : 0; }
  double& at(int c, int y, int x) { return pixels_.at(c, y, x); }
  double at(int c, int y, int x) const { return pixels_.at(c, y, x); }

  const Tensor& tensor() const { return pixels_; }
  Tensor& tensor() { return pixels_; }

  /// 0.299 R + 0.587 G + 0.114 B
  double luma(int y, int x) const {
    return 0.299 * at(0, y, x) + 0.587 * at(1, y, x) + 0.114 * at(2, y, x);
  }

  bool valid() const {
    return std::all_of(pixels_.values().begin(), pixels_.values().end(),
                       [](double v) { return std::isfinite(v) && v >= 0.0 && v <= 1.0; });
  }

  friend bool operator==(const Image& a, const Image& b) { return a.pixels_ == b.pixels_; }

 private:
  Tensor pixels_;
};

/// Single-channel H x W map: predictions, CAMs, edges, gates and masks.
class SaliencyMap {
 public:
  SaliencyMap() = default;
  SaliencyMap(int height, int width, double fill = 0.0) : values_({height, width}, fill) {}
  explicit SaliencyMap(Tensor hw) : values_(std::move(hw)) {
    if (values_.rank() != 2) throw ShapeError("map tensor must be HxW, got " + shape_str(values_.shape()));
  }

  int height() const { return values_.rank() == 2 ? values_.dim(0) : 0; }
  int width() const { return values_.rank() == 2 ? values_.dim(1) : 0; }
  std::size_t size() const { return values_.size(); }
  double& at(int y, int x) { return values_.at(y, x); }
  double at(int y, int x) const { return values_.at(y, x); }
  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }

  const Tensor& tensor() const { return values_; }
  Tensor& tensor() { return values_; }

  bool same_size(const SaliencyMap& o) const { return values_.same_shape(o.values_); }

  friend bool operator==(const SaliencyMap& a, const SaliencyMap& b) { return a.values_ == b.values_; }

 private:
  Tensor values_;
};

inline void require_same_size(const SaliencyMap& a, const SaliencyMap& b, const char* what) {
  if (!a.same_size(b)) {
    throw ShapeError(std::string(what) + ": map size mismatch " + shape_str(a.tensor().shape()) +
                     " vs " + shape_str(b.tensor().shape()));
  }
}

inline SaliencyMap grayscale(const Image& img) {
  SaliencyMap g(img.height(), img.width());
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x) g.at(y, x) = img.luma(y, x);
  return g;
}

}  // namespace sal3sd
