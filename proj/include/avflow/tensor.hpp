#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "avflow/common.hpp"

namespace avflow {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major float32 tensor. Data is shared and treated as immutable
// once the tensor has entered a graph; mutation is reserved for construction
// and optimizer updates.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<float> values);

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, float value);
  static Tensor scalar(float value);
  static Tensor randn(Shape shape, Rng& rng, float stddev = 1.0f);

  const Shape& shape() const { return shape_; }
  int64_t numel() const { return numel_; }
  int64_t dim(size_t i) const { return shape_[i]; }
  size_t rank() const { return shape_.size(); }

  const float* data() const { return data_->data(); }
  float* mutable_data() { return data_->data(); }

  float at(int64_t i) const { return (*data_)[static_cast<size_t>(i)]; }
  float& at(int64_t i) { return (*data_)[static_cast<size_t>(i)]; }

  bool defined() const { return data_ != nullptr; }
  bool all_finite() const;

  // Deep copy; shape-preserving.
  Tensor clone() const;

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

 private:
  Shape shape_;
  int64_t numel_ = 0;
  std::shared_ptr<std::vector<float>> data_;
};

void check_finite(const Tensor& t, const char* op_name);

}  // namespace avflow
