#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "demun/graph.hpp"
#include "demun/linear_map.hpp"
#include "demun/rng.hpp"
#include "demun/tensor.hpp"

namespace demun {

/// Normalized forward operator A' = A / max-row-l2-norm, with its adjoint.
/// Gaussian operators store the dense normalized matrix; DCT operators are
/// applied matrix-free as separable 2-D transform passes plus row selection.
/// Immutable after construction and safe to share across threads; always
/// lives behind a shared_ptr (factories below).
class MeasurementOperator final : public LinearMap,
                                  public std::enable_shared_from_this<MeasurementOperator> {
 public:
  enum class Kind { kGaussian, kDct };

  Kind kind() const { return kind_; }
  int64_t m() const { return m_; }
  int64_t n() const { return n_; }
  int64_t image_k() const { return image_k_; }
  uint64_t seed() const { return seed_; }
  double norm_factor() const { return norm_factor_; }
  double rate() const { return static_cast<double>(m_) / static_cast<double>(n_); }

  /// Normalized dense matrix (Gaussian kind only).
  const Tensor& dense() const { return dense_; }
  /// Selected coefficient indices, sorted ascending (DCT kind only).
  const std::vector<int64_t>& dct_indices() const { return indices_; }
  /// 1-D orthonormal DCT-II basis, k x k (DCT kind only).
  const Tensor& dct_basis() const { return basis_; }

  /// Materializes A' as an m x n dense matrix (explicit-matrix oracle path
  /// for DCT; a reference for Gaussian).
  Tensor dense_matrix() const;

  // LinearMap
  int64_t rows() const override { return m_; }
  int64_t cols() const override { return n_; }
  void apply(const double* x, double* y) const override;
  void apply_adjoint(const double* y, double* x) const override;

  std::string to_sidecar_json() const;
  static std::shared_ptr<const MeasurementOperator> from_sidecar_json(const std::string& text);

 private:
  friend std::shared_ptr<const MeasurementOperator> make_gaussian(int64_t, int64_t, uint64_t);
  friend std::shared_ptr<const MeasurementOperator> make_dct(int64_t, double, uint64_t);
  MeasurementOperator() = default;

  Kind kind_ = Kind::kGaussian;
  int64_t m_ = 0, n_ = 0, image_k_ = 0;
  uint64_t seed_ = 0;
  double norm_factor_ = 1.0;
  Tensor dense_;                  // Gaussian: normalized m x n
  Tensor basis_;                  // DCT: k x k 1-D basis
  std::vector<int64_t> indices_;  // DCT: selected rows of F
};

using OperatorPtr = std::shared_ptr<const MeasurementOperator>;

/// i.i.d. N(0, 1/m) entries, then max-row-norm normalization. Requires 0 < m <= n.
OperatorPtr make_gaussian(int64_t m, int64_t n, uint64_t seed);

/// A = S F with F the orthonormal 2-D DCT-II on k x k images (n = k^2) and
/// S selecting m = round(rate * n) coefficients: the lowest-frequency block
/// covering 10% of n is always included (deterministic), the remainder is
/// drawn uniformly without replacement from the complement using `seed`.
OperatorPtr make_dct(int64_t k, double rate, uint64_t seed);

/// Divides a dense matrix by its maximum row l2 norm. Errors on all-zero input.
std::pair<Tensor, double> normalize(const Tensor& a_raw);

/// Differentiable application of the operator to [n] or [B,n] nodes.
Var apply(const MeasurementOperator& op, Var x);
Var apply_adjoint(const MeasurementOperator& op, Var r);

/// Value-level application (no graph).
Tensor apply_values(const MeasurementOperator& op, const Tensor& x);
Tensor apply_adjoint_values(const MeasurementOperator& op, const Tensor& y);

struct NoiseModel {
  double sigma = 0.0;
  uint64_t seed = 0;
};

/// y + sigma * z with z i.i.d. standard normal drawn from the model seed.
Tensor add_noise(const Tensor& y, const NoiseModel& model);

/// 10*log10(mean over images of ||A'x||^2 / (m sigma^2)). Requires sigma > 0.
double input_snr(const MeasurementOperator& op, std::span<const Tensor> images,
                 const NoiseModel& model);

/// 1-D orthonormal DCT-II matrix, k x k.
Tensor dct_matrix_1d(int64_t k);
/// Full 2-D transform F = G (x) G as an n x n dense matrix (test oracle scale).
Tensor dct_matrix_2d(int64_t k);
/// All k^2 flat indices sorted by (u+v, u): the fixed low-frequency ordering.
std::vector<int64_t> dct_lowfreq_order(int64_t k);

}  // namespace demun
