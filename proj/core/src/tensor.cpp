#include "demun/tensor.hpp"

#include <cmath>
#include <sstream>

namespace demun {

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) {
    if (d < 0) throw ShapeError("negative dimension in " + shape_str(shape));
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

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  check_shape(shape_numel(shape_) == static_cast<int64_t>(data_.size()),
              "data size " + std::to_string(data_.size()) + " does not match shape " +
                  shape_str(shape_));
}

Tensor Tensor::full(Shape shape, double value) {
  Tensor t(std::move(shape));
  t.fill(value);
  return t;
}

Tensor Tensor::from(std::initializer_list<double> values, Shape shape) {
  return Tensor(std::move(shape), std::vector<double>(values));
}

double& Tensor::at4(int64_t b, int64_t c, int64_t h, int64_t w) {
  const auto& s = shape_;
  return data_[static_cast<size_t>(((b * s[1] + c) * s[2] + h) * s[3] + w)];
}

double Tensor::at4(int64_t b, int64_t c, int64_t h, int64_t w) const {
  const auto& s = shape_;
  return data_[static_cast<size_t>(((b * s[1] + c) * s[2] + h) * s[3] + w)];
}

Tensor Tensor::reshaped(Shape shape) const {
  check_shape(shape_numel(shape) == numel(),
              "reshape " + shape_str(shape_) + " -> " + shape_str(shape) + " changes element count");
  return Tensor(std::move(shape), data_);
}

void Tensor::fill(double value) {
  for (double& x : data_) x = value;
}

bool Tensor::all_finite() const {
  for (double x : data_) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

double Tensor::dot(const Tensor& other) const {
  check_shape(same_shape(other), "dot of " + shape_str(shape_) + " and " + shape_str(other.shape_));
  double acc = 0.0;
  for (size_t i = 0; i < data_.size(); ++i) acc += data_[i] * other.data_[i];
  return acc;
}

double Tensor::sum() const {
  double acc = 0.0;
  for (double x : data_) acc += x;
  return acc;
}

double Tensor::norm2_squared() const {
  double acc = 0.0;
  for (double x : data_) acc += x * x;
  return acc;
}

}  // namespace demun
