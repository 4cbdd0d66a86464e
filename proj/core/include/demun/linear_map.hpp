#pragma once

#include <cstdint>

namespace demun {

/// A fixed linear operator R^n -> R^m with an exact adjoint. Implementations
/// must be immutable and thread-safe; the graph records shared handles and
/// uses apply_adjoint (resp. apply) to backpropagate through apply (resp.
/// apply_adjoint).
class LinearMap {
 public:
  virtual ~LinearMap() = default;

  virtual int64_t rows() const = 0;  // m
  virtual int64_t cols() const = 0;  // n

  /// y = A x, with x of length cols() and y of length rows().
  virtual void apply(const double* x, double* y) const = 0;

  /// x = A^T y, with y of length rows() and x of length cols().
  virtual void apply_adjoint(const double* y, double* x) const = 0;
};

}  // namespace demun
