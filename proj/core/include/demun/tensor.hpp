#pragma once

#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

#include "demun/error.hpp"

namespace demun {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major f64 array. Plain value type; autodiff bookkeeping lives
/// in Graph nodes and Parameter buffers that hold Tensors.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_numel(shape_), 0.0) {}
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value) { return Tensor({1}, {value}); }
  static Tensor from(std::initializer_list<double> values, Shape shape);

  const Shape& shape() const { return shape_; }
  int64_t numel() const { return static_cast<int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  /// 4-D accessor for [B, C, H, W] layouts.
  double& at4(int64_t b, int64_t c, int64_t h, int64_t w);
  double at4(int64_t b, int64_t c, int64_t h, int64_t w) const;

  /// Same data, new shape; element count must match.
  Tensor reshaped(Shape shape) const;

  void fill(double value);
  bool all_finite() const;
  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  double dot(const Tensor& other) const;
  double sum() const;
  double norm2_squared() const;

 private:
  Shape shape_;
  std::vector<double> data_;
};

/// Trainable value with an accumulating gradient buffer.
struct Parameter {
  Tensor value;
  Tensor grad;

  Parameter() = default;
  explicit Parameter(Tensor v) : value(std::move(v)), grad(value.shape()) {}

  void zero_grad() { grad.fill(0.0); }
  int64_t numel() const { return value.numel(); }
};

}  // namespace demun
