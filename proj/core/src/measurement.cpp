#include "demun/measurement.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>

#include <nlohmann/json.hpp>

namespace demun {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using json = nlohmann::json;

Tensor dct_matrix_1d(int64_t k) {
  check_config(k >= 1, "dct basis size must be >= 1");
  Tensor g({k, k});
  const double kd = static_cast<double>(k);
  for (int64_t u = 0; u < k; ++u) {
    const double s = u == 0 ? std::sqrt(1.0 / kd) : std::sqrt(2.0 / kd);
    for (int64_t t = 0; t < k; ++t) {
      g[u * k + t] = s * std::cos(M_PI * (2.0 * static_cast<double>(t) + 1.0) *
                                  static_cast<double>(u) / (2.0 * kd));
    }
  }
  return g;
}

Tensor dct_matrix_2d(int64_t k) {
  const Tensor g = dct_matrix_1d(k);
  const int64_t n = k * k;
  Tensor f({n, n});
  for (int64_t u = 0; u < k; ++u)
    for (int64_t v = 0; v < k; ++v)
      for (int64_t s = 0; s < k; ++s)
        for (int64_t t = 0; t < k; ++t)
          f[(u * k + v) * n + (s * k + t)] = g[u * k + s] * g[v * k + t];
  return f;
}

std::vector<int64_t> dct_lowfreq_order(int64_t k) {
  std::vector<int64_t> flats(static_cast<size_t>(k * k));
  std::iota(flats.begin(), flats.end(), 0);
  std::sort(flats.begin(), flats.end(), [k](int64_t a, int64_t b) {
    const int64_t ua = a / k, va = a % k, ub = b / k, vb = b % k;
    if (ua + va != ub + vb) return ua + va < ub + vb;
    if (ua != ub) return ua < ub;
    return va < vb;
  });
  return flats;
}

std::pair<Tensor, double> normalize(const Tensor& a_raw) {
  check_shape(a_raw.shape().size() == 2, "normalize: matrix must be 2-D");
  const int64_t m = a_raw.shape()[0], n = a_raw.shape()[1];
  double max_norm = 0.0;
  for (int64_t i = 0; i < m; ++i) {
    double acc = 0.0;
    const double* row = a_raw.data() + i * n;
    for (int64_t j = 0; j < n; ++j) acc += row[j] * row[j];
    max_norm = std::max(max_norm, std::sqrt(acc));
  }
  if (max_norm == 0.0) throw NumericError("normalize: all-zero matrix");
  Tensor out = a_raw;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] /= max_norm;
  return {std::move(out), max_norm};
}

OperatorPtr make_gaussian(int64_t m, int64_t n, uint64_t seed) {
  check_config(m > 0 && m <= n, "gaussian operator needs 0 < m <= n, got m=" + std::to_string(m) +
                                    " n=" + std::to_string(n));
  Rng rng(seed);
  Tensor raw({m, n});
  const double scale = 1.0 / std::sqrt(static_cast<double>(m));
  for (int64_t i = 0; i < raw.numel(); ++i) raw[i] = rng.normal() * scale;
  auto [normalized, factor] = normalize(raw);

  auto op = std::shared_ptr<MeasurementOperator>(new MeasurementOperator());
  op->kind_ = MeasurementOperator::Kind::kGaussian;
  op->m_ = m;
  op->n_ = n;
  op->seed_ = seed;
  op->norm_factor_ = factor;
  op->dense_ = std::move(normalized);
  return op;
}

OperatorPtr make_dct(int64_t k, double rate, uint64_t seed) {
  check_config(k >= 1, "dct operator needs k >= 1");
  check_config(rate > 0.0 && rate <= 1.0,
               "dct sampling rate must be in (0,1], got " + std::to_string(rate));
  const int64_t n = k * k;
  const int64_t m = std::llround(rate * static_cast<double>(n));
  check_config(m >= 1 && m <= n, "dct sampling rate yields empty or oversized index set");

  const std::vector<int64_t> order = dct_lowfreq_order(k);
  const int64_t fixed_count = std::min<int64_t>(m, std::llround(0.1 * static_cast<double>(n)));
  std::vector<char> taken(static_cast<size_t>(n), 0);
  std::vector<int64_t> indices;
  indices.reserve(static_cast<size_t>(m));
  for (int64_t i = 0; i < fixed_count; ++i) {
    indices.push_back(order[static_cast<size_t>(i)]);
    taken[static_cast<size_t>(order[static_cast<size_t>(i)])] = 1;
  }
  if (m > fixed_count) {
    std::vector<int64_t> complement;
    complement.reserve(static_cast<size_t>(n - fixed_count));
    for (int64_t f = 0; f < n; ++f)
      if (!taken[static_cast<size_t>(f)]) complement.push_back(f);
    Rng rng(seed);
    rng.shuffle(complement);
    for (int64_t i = 0; i < m - fixed_count; ++i) indices.push_back(complement[static_cast<size_t>(i)]);
  }
  std::sort(indices.begin(), indices.end());

  Tensor basis = dct_matrix_1d(k);
  // Row (u,v) of F has norm ||G_u|| * ||G_v||; the normalization factor is
  // the max over selected rows.
  std::vector<double> gnorm(static_cast<size_t>(k));
  for (int64_t u = 0; u < k; ++u) {
    double acc = 0.0;
    for (int64_t t = 0; t < k; ++t) acc += basis[u * k + t] * basis[u * k + t];
    gnorm[static_cast<size_t>(u)] = std::sqrt(acc);
  }
  double factor = 0.0;
  for (int64_t f : indices)
    factor = std::max(factor, gnorm[static_cast<size_t>(f / k)] * gnorm[static_cast<size_t>(f % k)]);

  auto op = std::shared_ptr<MeasurementOperator>(new MeasurementOperator());
  op->kind_ = MeasurementOperator::Kind::kDct;
  op->m_ = m;
  op->n_ = n;
  op->image_k_ = k;
  op->seed_ = seed;
  op->norm_factor_ = factor;
  op->basis_ = std::move(basis);
  op->indices_ = std::move(indices);
  return op;
}

void MeasurementOperator::apply(const double* x, double* y) const {
  if (kind_ == Kind::kGaussian) {
    Eigen::Map<const RowMat> a(dense_.data(), m_, n_);
    Eigen::Map<const Eigen::VectorXd> xv(x, n_);
    Eigen::Map<Eigen::VectorXd> yv(y, m_);
    yv.noalias() = a * xv;
    return;
  }
  const int64_t k = image_k_;
  Eigen::Map<const RowMat> g(basis_.data(), k, k);
  Eigen::Map<const RowMat> xm(x, k, k);
  RowMat coeffs = g * xm * g.transpose();
  const double inv = 1.0 / norm_factor_;
  for (int64_t i = 0; i < m_; ++i) y[i] = coeffs.data()[indices_[static_cast<size_t>(i)]] * inv;
}

void MeasurementOperator::apply_adjoint(const double* y, double* x) const {
  if (kind_ == Kind::kGaussian) {
    Eigen::Map<const RowMat> a(dense_.data(), m_, n_);
    Eigen::Map<const Eigen::VectorXd> yv(y, m_);
    Eigen::Map<Eigen::VectorXd> xv(x, n_);
    xv.noalias() = a.transpose() * yv;
    return;
  }
  const int64_t k = image_k_;
  RowMat z = RowMat::Zero(k, k);
  for (int64_t i = 0; i < m_; ++i) z.data()[indices_[static_cast<size_t>(i)]] = y[i];
  Eigen::Map<const RowMat> g(basis_.data(), k, k);
  RowMat out = g.transpose() * z * g;
  const double inv = 1.0 / norm_factor_;
  for (int64_t j = 0; j < n_; ++j) x[j] = out.data()[j] * inv;
}

Tensor MeasurementOperator::dense_matrix() const {
  if (kind_ == Kind::kGaussian) return dense_;
  Tensor a({m_, n_});
  const int64_t k = image_k_;
  const double inv = 1.0 / norm_factor_;
  for (int64_t i = 0; i < m_; ++i) {
    const int64_t u = indices_[static_cast<size_t>(i)] / k;
    const int64_t v = indices_[static_cast<size_t>(i)] % k;
    double* row = a.data() + i * n_;
    for (int64_t s = 0; s < k; ++s)
      for (int64_t t = 0; t < k; ++t) row[s * k + t] = basis_[u * k + s] * basis_[v * k + t] * inv;
  }
  return a;
}

std::string MeasurementOperator::to_sidecar_json() const {
  json j;
  j["kind"] = kind_ == Kind::kGaussian ? "gaussian" : "dct";
  j["m"] = m_;
  j["n"] = n_;
  j["seed"] = seed_;
  j["norm_factor"] = norm_factor_;
  if (kind_ == Kind::kDct) {
    j["k"] = image_k_;
    j["indices"] = indices_;
  }
  return j.dump();
}

OperatorPtr MeasurementOperator::from_sidecar_json(const std::string& text) {
  json j = json::parse(text);
  const std::string kind = j.at("kind").get<std::string>();
  const auto m = j.at("m").get<int64_t>();
  const auto n = j.at("n").get<int64_t>();
  const auto seed = j.at("seed").get<uint64_t>();
  OperatorPtr op;
  if (kind == "gaussian") {
    op = make_gaussian(m, n, seed);
  } else if (kind == "dct") {
    const auto k = j.at("k").get<int64_t>();
    op = make_dct(k, static_cast<double>(m) / static_cast<double>(n), seed);
    const auto indices = j.at("indices").get<std::vector<int64_t>>();
    if (indices != op->dct_indices())
      throw IoError("operator sidecar: reconstructed DCT index set does not match");
  } else {
    throw IoError("operator sidecar: unknown kind '" + kind + "'");
  }
  const double stored = j.at("norm_factor").get<double>();
  if (std::abs(stored - op->norm_factor()) > 1e-9 * std::max(1.0, std::abs(stored)))
    throw IoError("operator sidecar: reconstructed norm factor does not match");
  return op;
}

Var apply(const MeasurementOperator& op, Var x) {
  return apply_map(op.shared_from_this(), x);
}

Var apply_adjoint(const MeasurementOperator& op, Var r) {
  return apply_map_adjoint(op.shared_from_this(), r);
}

Tensor apply_values(const MeasurementOperator& op, const Tensor& x) {
  check_shape(x.shape().size() == 1 && x.shape()[0] == op.cols(),
              "apply: expected vector of length " + std::to_string(op.cols()) + ", got " +
                  shape_str(x.shape()));
  Tensor y({op.rows()});
  op.apply(x.data(), y.data());
  return y;
}

Tensor apply_adjoint_values(const MeasurementOperator& op, const Tensor& y) {
  check_shape(y.shape().size() == 1 && y.shape()[0] == op.rows(),
              "apply_adjoint: expected vector of length " + std::to_string(op.rows()) + ", got " +
                  shape_str(y.shape()));
  Tensor x({op.cols()});
  op.apply_adjoint(y.data(), x.data());
  return x;
}

Tensor add_noise(const Tensor& y, const NoiseModel& model) {
  check_config(model.sigma >= 0.0, "noise sigma must be >= 0");
  if (model.sigma == 0.0) return y;
  Rng rng(model.seed);
  Tensor out = y;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] += model.sigma * rng.normal();
  return out;
}

double input_snr(const MeasurementOperator& op, std::span<const Tensor> images,
                 const NoiseModel& model) {
  check_config(model.sigma > 0.0, "input_snr requires sigma > 0");
  check_config(!images.empty(), "input_snr requires at least one image");
  const double denom = static_cast<double>(op.rows()) * model.sigma * model.sigma;
  double mean_ratio = 0.0;
  for (const Tensor& x : images) {
    Tensor y = apply_values(op, x);
    mean_ratio += y.norm2_squared() / denom;
  }
  mean_ratio /= static_cast<double>(images.size());
  return 10.0 * std::log10(mean_ratio);
}

}  // namespace demun
