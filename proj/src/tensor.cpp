#include "mmchat/tensor.hpp"

#include <algorithm>
#include <cmath>

#include "mmchat/error.hpp"

namespace mmchat::nn {

std::size_t shape_numel(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw DimensionError("negative dimension in shape");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

Tensor::Tensor(std::vector<int> shape, float fill)
    : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor::Tensor(std::vector<int> shape, std::vector<float> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (data_.size() != shape_numel(shape_)) {
    throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                         " does not match shape " + shape_string());
  }
}

int Tensor::rows() const {
  if (shape_.size() != 2) throw DimensionError("expected rank-2 tensor, got " + shape_string());
  return shape_[0];
}

int Tensor::cols() const {
  if (shape_.size() != 2) throw DimensionError("expected rank-2 tensor, got " + shape_string());
  return shape_[1];
}

std::span<float> Tensor::row(int r) {
  const auto c = static_cast<std::size_t>(cols());
  return {data_.data() + r * c, c};
}

std::span<const float> Tensor::row(int r) const {
  const auto c = static_cast<std::size_t>(cols());
  return {data_.data() + r * c, c};
}

void Tensor::fill(float v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
}

std::string Tensor::shape_string() const {
  std::string s = "[";
  for (std::size_t i = 0; i < shape_.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape_[i]);
  }
  return s + "]";
}

}  // namespace mmchat::nn
