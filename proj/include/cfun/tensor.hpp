#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace cfun {

/// Spatial extent in (z, y, x) = (D, H, W) order. This axis order is used by
/// every module in the project.
struct Shape3 {
  int d = 0;
  int h = 0;
  int w = 0;

  [[nodiscard]] std::size_t voxels() const {
    return static_cast<std::size_t>(d) * static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
  }
  [[nodiscard]] int operator[](int axis) const { return axis == 0 ? d : (axis == 1 ? h : w); }
  [[nodiscard]] std::string str() const;
  friend bool operator==(const Shape3&, const Shape3&) = default;
};

/// Dense row-major float tensor of rank 1..5.
///
/// Feature maps are rank 4 with layout (C, D, H, W); convolution kernels are
/// rank 5 (Cout, Cin, kz, ky, kx).
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape, float fill = 0.0f);
  Tensor(int channels, Shape3 spatial, float fill = 0.0f);

  static Tensor scalar(float v) { return Tensor({1}, v); }

  [[nodiscard]] const std::vector<int>& shape() const { return shape_; }
  [[nodiscard]] int rank() const { return static_cast<int>(shape_.size()); }
  [[nodiscard]] int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
  [[nodiscard]] std::size_t size() const { return data_.size(); }
  [[nodiscard]] bool empty() const { return data_.empty(); }

  // Rank-4 accessors.
  [[nodiscard]] int channels() const { return shape_.at(0); }
  [[nodiscard]] Shape3 spatial() const;
  [[nodiscard]] std::size_t channel_size() const { return size() / static_cast<std::size_t>(shape_.at(0)); }

  float* data() { return data_.data(); }
  [[nodiscard]] const float* data() const { return data_.data(); }
  std::span<float> values() { return data_; }
  [[nodiscard]] std::span<const float> values() const { return data_; }
  float* channel(int c) { return data_.data() + static_cast<std::size_t>(c) * channel_size(); }
  [[nodiscard]] const float* channel(int c) const {
    return data_.data() + static_cast<std::size_t>(c) * channel_size();
  }

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

  float& at(int c, int z, int y, int x) { return data_[offset(c, z, y, x)]; }
  [[nodiscard]] float at(int c, int z, int y, int x) const { return data_[offset(c, z, y, x)]; }

  void fill(float v);
  void reshape(std::vector<int> shape);
  [[nodiscard]] bool all_finite() const;
  [[nodiscard]] std::string shape_str() const;
  [[nodiscard]] bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

 private:
  [[nodiscard]] std::size_t offset(int c, int z, int y, int x) const {
    return ((static_cast<std::size_t>(c) * shape_[1] + z) * shape_[2] + y) * shape_[3] + x;
  }

  std::vector<int> shape_;
  std::vector<float> data_;
};

/// A rank-4 (C, D, H, W) feature map.
using Tensor4 = Tensor;

}  // namespace cfun
