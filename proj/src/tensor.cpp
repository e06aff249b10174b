#include "avflow/tensor.hpp"

#include <cmath>
#include <sstream>

namespace avflow {

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) {
    if (d < 0) fail(ErrKind::ShapeMismatch, "negative dimension in " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

Tensor::Tensor(Shape shape)
    : shape_(std::move(shape)),
      numel_(shape_numel(shape_)),
      data_(std::make_shared<std::vector<float>>(static_cast<size_t>(numel_), 0.0f)) {}

Tensor::Tensor(Shape shape, std::vector<float> values)
    : shape_(std::move(shape)), numel_(shape_numel(shape_)) {
  if (static_cast<int64_t>(values.size()) != numel_)
    fail(ErrKind::ShapeMismatch,
         "value count " + std::to_string(values.size()) + " does not fill " + shape_str(shape_));
  data_ = std::make_shared<std::vector<float>>(std::move(values));
}

Tensor Tensor::zeros(Shape shape) { return Tensor(std::move(shape)); }

Tensor Tensor::full(Shape shape, float value) {
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.numel_; ++i) t.at(i) = value;
  return t;
}

Tensor Tensor::scalar(float value) { return full({1}, value); }

Tensor Tensor::randn(Shape shape, Rng& rng, float stddev) {
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.numel_; ++i)
    t.at(i) = static_cast<float>(rng.normal() * static_cast<double>(stddev));
  return t;
}

bool Tensor::all_finite() const {
  const float* p = data();
  for (int64_t i = 0; i < numel_; ++i)
    if (!std::isfinite(p[i])) return false;
  return true;
}

Tensor Tensor::clone() const {
  Tensor t;
  t.shape_ = shape_;
  t.numel_ = numel_;
  t.data_ = std::make_shared<std::vector<float>>(*data_);
  return t;
}

void check_finite(const Tensor& t, const char* op_name) {
  if (!t.all_finite())
    fail(ErrKind::NonFinite, std::string(op_name) + " produced NaN or Inf");
}

}  // namespace avflow
