#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "demun/dataset.hpp"
#include "demun/measurement.hpp"
#include "demun/unroll.hpp"

namespace demun {

struct OperatorSpec {
  MeasurementOperator::Kind kind = MeasurementOperator::Kind::kGaussian;
  double rate = 0.0;  // used when m == 0
  int64_t m = 0;      // explicit measurement count, overrides rate
  uint64_t seed = 0;

  int64_t resolve_m(int64_t n) const;
};

OperatorPtr build_operator(const OperatorSpec& spec, int64_t image_k);

struct TrainConfig {
  int64_t epochs = 1;
  int64_t batch_size = 32;
  double lr = 1e-4;
  uint64_t seed = 0;
  double clip_norm = 0.0;  // 0 disables clipping
  LossSpec loss;
  UnrollPlan plan;
  OperatorSpec op;
  NoiseModel noise;

  void validate() const;
};

std::string train_config_to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const std::string& text);

struct NamedBlob {
  std::string name;
  Tensor tensor;
  bool trainable = false;
};

/// Every trainable parameter plus batch-norm running buffers at the
/// selected epoch, with the exact operator descriptor and a config echo.
struct Checkpoint {
  uint32_t version = 1;
  std::string config_json;
  std::string operator_sidecar;
  int64_t best_epoch = -1;  // 0-based epoch whose weights are stored
  std::vector<double> val_history;
  std::vector<double> train_history;  // mean per-sample training loss per epoch
  std::vector<NamedBlob> blobs;
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Rebuilds the model skeleton from the config echo and loads all blobs.
UnrollModel model_from_checkpoint(const Checkpoint& ckpt);

/// Fixed measurement for one tile: y = A'x plus (for sigma > 0) the noise
/// draw derived from the model seed and the tile's global index. Training
/// and evaluation share this so the dataset of measurements is fixed.
Tensor measurement_for_tile(const MeasurementOperator& op, const NoiseModel& noise,
                            const Tensor& tile, int64_t tile_index);

/// Epoch loop over the shuffled train split with the batch-mean of the
/// configured per-sample loss, ADAM updates, and per-epoch validation MSE
/// of x^T; returns the weights of the lowest-validation-loss epoch (final
/// epoch when the validation split is empty). A non-finite forward aborts
/// training and returns the best checkpoint so far.
Checkpoint train(const TrainConfig& config, const Dataset& dataset);

/// 10*log10(1 / mean squared error), peak 1.0. Identical inputs return
/// +infinity; aggregation paths cap at 99 dB.
double psnr(const Tensor& x_hat, const Tensor& x_star);

inline constexpr double kPsnrCap = 99.0;

struct MetricsReport {
  double mean_psnr = 0.0;          // equals curve.back()
  std::vector<double> curve;       // mean PSNR after each projection, length T
  std::vector<double> per_image;   // final-step PSNR per image (capped)
  double wall_seconds = 0.0;
  std::string config_json;
};

/// Inference-mode trajectories over a split with PSNR after every
/// projection. Side-effect free.
MetricsReport evaluate(const Checkpoint& ckpt, const Dataset& dataset, Split split);

struct Baselines {
  Tensor adjoint;      // A'^T y
  Tensor min_norm_ls;  // A'^T (A' A'^T)^{-1} y
};

/// Classical reconstructions for comparison. Rank-deficient systems fall
/// back to a lambda = 1e-10 regularized solve.
Baselines baseline_reconstructions(const MeasurementOperator& op, const Tensor& y);

/// Same, with the Gram factorization computed once for many measurements.
class BaselineSolver {
 public:
  explicit BaselineSolver(const MeasurementOperator& op);
  ~BaselineSolver();
  BaselineSolver(BaselineSolver&&) noexcept;
  Tensor adjoint(const Tensor& y) const;
  Tensor min_norm_ls(const Tensor& y) const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace demun
