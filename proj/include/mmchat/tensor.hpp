#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace mmchat::nn {

// Dense row-major float32 array. Most ops in this library work on rank-2
// tensors; a scalar is represented as shape {1, 1}.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape, float fill = 0.0f);
  Tensor(std::vector<int> shape, std::vector<float> data);

  static Tensor zeros(int rows, int cols) { return Tensor({rows, cols}); }
  static Tensor scalar(float v) { return Tensor({1, 1}, std::vector<float>{v}); }

  const std::vector<int>& shape() const noexcept { return shape_; }
  int rank() const noexcept { return static_cast<int>(shape_.size()); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  // Rank-2 accessors; throw DimensionError on other ranks.
  int rows() const;
  int cols() const;

  float* data() noexcept { return data_.data(); }
  const float* data() const noexcept { return data_.data(); }
  std::span<float> values() noexcept { return data_; }
  std::span<const float> values() const noexcept { return data_; }
  std::vector<float>& storage() noexcept { return data_; }
  const std::vector<float>& storage() const noexcept { return data_; }

  float& operator[](std::size_t i) noexcept { return data_[i]; }
  float operator[](std::size_t i) const noexcept { return data_[i]; }
  float& at(int r, int c) { return data_[static_cast<std::size_t>(r) * cols() + c]; }
  float at(int r, int c) const { return data_[static_cast<std::size_t>(r) * cols() + c]; }

  std::span<float> row(int r);
  std::span<const float> row(int r) const;

  void fill(float v);
  bool same_shape(const Tensor& other) const noexcept { return shape_ == other.shape_; }
  bool all_finite() const noexcept;
  std::string shape_string() const;

 private:
  std::vector<int> shape_;
  std::vector<float> data_;
};

std::size_t shape_numel(const std::vector<int>& shape);

}  // namespace mmchat::nn
