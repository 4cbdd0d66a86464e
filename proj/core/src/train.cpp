#include "demun/train.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <iostream>
#include <limits>
#include <numeric>

#include <nlohmann/json.hpp>

#include "demun/adam.hpp"

namespace demun {

using json = nlohmann::json;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

int64_t OperatorSpec::resolve_m(int64_t n) const {
  if (m > 0) return m;
  check_config(rate > 0.0 && rate <= 1.0,
               "operator: rate must be in (0,1] when m is not given, got " + std::to_string(rate));
  return std::llround(rate * static_cast<double>(n));
}

OperatorPtr build_operator(const OperatorSpec& spec, int64_t image_k) {
  const int64_t n = image_k * image_k;
  const int64_t m = spec.resolve_m(n);
  if (spec.kind == MeasurementOperator::Kind::kGaussian) return make_gaussian(m, n, spec.seed);
  return make_dct(image_k, static_cast<double>(m) / static_cast<double>(n), spec.seed);
}

void TrainConfig::validate() const {
  check_config(epochs >= 1, "train: epochs must be >= 1");
  check_config(batch_size >= 1, "train: batch_size must be >= 1");
  check_config(lr >= 0.0, "train: lr must be >= 0");
  check_config(noise.sigma >= 0.0, "noise: sigma must be >= 0");
  plan.validate();
  loss.validate(plan.steps);
}

// ---- config echo ------------------------------------------------------------

std::string train_config_to_json(const TrainConfig& c) {
  json j;
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  j["lr"] = c.lr;
  j["seed"] = c.seed;
  j["clip_norm"] = c.clip_norm;
  j["loss"] = c.loss.id();
  j["plan"] = {{"algorithm", algorithm_id(c.plan.algorithm)},
               {"steps", c.plan.steps},
               {"residual", c.plan.residual},
               {"tie_weights", c.plan.tie_weights},
               {"amp_probe_eps", c.plan.amp_probe_eps},
               {"projector",
                {{"depth", c.plan.projector.depth_L},
                 {"channels", c.plan.projector.channels},
                 {"kernel", c.plan.projector.kernel},
                 {"image_k", c.plan.projector.image_k}}}};
  j["operator"] = {{"kind", c.op.kind == MeasurementOperator::Kind::kGaussian ? "gaussian" : "dct"},
                   {"rate", c.op.rate},
                   {"m", c.op.m},
                   {"seed", c.op.seed}};
  j["noise"] = {{"sigma", c.noise.sigma}, {"seed", c.noise.seed}};
  return j.dump();
}

TrainConfig train_config_from_json(const std::string& text) {
  const json j = json::parse(text);
  TrainConfig c;
  c.epochs = j.at("epochs").get<int64_t>();
  c.batch_size = j.at("batch_size").get<int64_t>();
  c.lr = j.at("lr").get<double>();
  c.seed = j.at("seed").get<uint64_t>();
  c.clip_norm = j.value("clip_norm", 0.0);
  c.loss = LossSpec::parse(j.at("loss").get<std::string>());
  const json& p = j.at("plan");
  c.plan.algorithm = parse_algorithm(p.at("algorithm").get<std::string>());
  c.plan.steps = p.at("steps").get<int64_t>();
  c.plan.residual = p.at("residual").get<bool>();
  c.plan.tie_weights = p.value("tie_weights", false);
  c.plan.amp_probe_eps = p.value("amp_probe_eps", 1e-3);
  const json& pr = p.at("projector");
  c.plan.projector.depth_L = pr.at("depth").get<int64_t>();
  c.plan.projector.channels = pr.at("channels").get<int64_t>();
  c.plan.projector.kernel = pr.value("kernel", static_cast<int64_t>(3));
  c.plan.projector.image_k = pr.at("image_k").get<int64_t>();
  const json& o = j.at("operator");
  const std::string kind = o.at("kind").get<std::string>();
  check_config(kind == "gaussian" || kind == "dct", "operator: unknown kind '" + kind + "'");
  c.op.kind = kind == "gaussian" ? MeasurementOperator::Kind::kGaussian
                                 : MeasurementOperator::Kind::kDct;
  c.op.rate = o.value("rate", 0.0);
  c.op.m = o.value("m", static_cast<int64_t>(0));
  c.op.seed = o.at("seed").get<uint64_t>();
  const json& nj = j.at("noise");
  c.noise.sigma = nj.at("sigma").get<double>();
  c.noise.seed = nj.at("seed").get<uint64_t>();
  c.validate();
  return c;
}

// ---- measurements -----------------------------------------------------------

Tensor measurement_for_tile(const MeasurementOperator& op, const NoiseModel& noise,
                            const Tensor& tile, int64_t tile_index) {
  Tensor y = apply_values(op, tile);
  if (noise.sigma > 0.0) {
    NoiseModel per_tile{noise.sigma, Rng::derive(noise.seed, 0x6e6f6973u, static_cast<uint64_t>(tile_index))};
    y = add_noise(y, per_tile);
  }
  return y;
}

// ---- training ----------------------------------------------------------------

namespace {

struct Snapshot {
  std::vector<Tensor> values;
};

Snapshot take_snapshot(std::vector<NamedTensor>& named) {
  Snapshot s;
  s.values.reserve(named.size());
  for (const NamedTensor& t : named) s.values.push_back(*t.tensor);
  return s;
}

void restore_snapshot(std::vector<NamedTensor>& named, const Snapshot& s) {
  for (size_t i = 0; i < named.size(); ++i) *named[i].tensor = s.values[i];
}

/// Mean over a split of ||x^T - x*||^2 / n, in inference mode.
double validation_loss(UnrollModel& model, const OperatorPtr& op,
                       const std::vector<Tensor>& measurements, const Dataset& dataset,
                       int64_t begin, int64_t count, int64_t batch_size) {
  const int64_t n = dataset.n();
  const int64_t m = op->m();
  double total = 0.0;
  for (int64_t start = 0; start < count; start += batch_size) {
    const int64_t b = std::min(batch_size, count - start);
    Tensor y_batch({b, m});
    for (int64_t i = 0; i < b; ++i) {
      const Tensor& y = measurements[static_cast<size_t>(begin + start + i)];
      std::copy(y.data(), y.data() + m, y_batch.data() + i * m);
    }
    Graph g(Mode::kInference);
    Trajectory traj = run_unrolled(g, model, leaf(g, std::move(y_batch)), op);
    const Tensor& last = traj.states.back().value();
    for (int64_t i = 0; i < b; ++i) {
      const Tensor& x_star = dataset.tiles[static_cast<size_t>(begin + start + i)];
      double acc = 0.0;
      const double* row = last.data() + i * n;
      for (int64_t jj = 0; jj < n; ++jj) {
        const double d = row[jj] - x_star[jj];
        acc += d * d;
      }
      total += acc;
    }
  }
  return total / (static_cast<double>(count) * static_cast<double>(n));
}

}  // namespace

Checkpoint train(const TrainConfig& config, const Dataset& dataset) {
  config.validate();
  check_config(dataset.n_train >= 1, "train: dataset has no training split");
  check_shape(config.plan.projector.image_k == dataset.k,
              "train: plan image side " + std::to_string(config.plan.projector.image_k) +
                  " does not match dataset resolution " + std::to_string(dataset.k));

  OperatorPtr op = build_operator(config.op, dataset.k);
  UnrollModel model = build_unroll_model(config.plan, Rng::derive(config.seed, 1));
  std::vector<NamedTensor> named = model.named_tensors();
  std::vector<Parameter*> trainables = model.trainable_params();
  AdamState adam = adam_init(trainables, config.lr);

  const int64_t n = dataset.n();
  const int64_t m = op->m();
  const int64_t batch_size = config.batch_size;

  // Fixed measurements for every tile (one noise draw per tile).
  std::vector<Tensor> measurements(static_cast<size_t>(dataset.total()));
  auto ensure_measurements = [&](int64_t begin, int64_t count) {
    for (int64_t i = begin; i < begin + count; ++i)
      measurements[static_cast<size_t>(i)] =
          measurement_for_tile(*op, config.noise, dataset.tiles[static_cast<size_t>(i)], i);
  };
  ensure_measurements(dataset.split_begin(Split::kTrain), dataset.n_train);
  ensure_measurements(dataset.split_begin(Split::kVal), dataset.n_val);

  Checkpoint ckpt;
  ckpt.config_json = train_config_to_json(config);
  ckpt.operator_sidecar = op->to_sidecar_json();

  Snapshot best = take_snapshot(named);
  double best_val = std::numeric_limits<double>::infinity();
  int64_t best_epoch = -1;

  std::vector<int64_t> order(static_cast<size_t>(dataset.n_train));
  std::iota(order.begin(), order.end(), dataset.split_begin(Split::kTrain));

  bool aborted = false;
  for (int64_t epoch = 0; epoch < config.epochs && !aborted; ++epoch) {
    Rng shuffle_rng(Rng::derive(config.seed, 2, static_cast<uint64_t>(epoch)));
    shuffle_rng.shuffle(order);

    double epoch_loss = 0.0;
    int64_t epoch_batches = 0;
    const int64_t full_batches = dataset.n_train / batch_size;  // final partial batch dropped
    for (int64_t bi = 0; bi < full_batches; ++bi) {
      Tensor y_batch({batch_size, m});
      Tensor x_batch({batch_size, n});
      for (int64_t i = 0; i < batch_size; ++i) {
        const int64_t idx = order[static_cast<size_t>(bi * batch_size + i)];
        const Tensor& y = measurements[static_cast<size_t>(idx)];
        std::copy(y.data(), y.data() + m, y_batch.data() + i * m);
        const Tensor& x = dataset.tiles[static_cast<size_t>(idx)];
        std::copy(x.data(), x.data() + n, x_batch.data() + i * n);
      }
      try {
        Graph g(Mode::kTraining);
        RunOptions opts;
        opts.probe_seed = Rng::derive(config.seed, 3,
                                      static_cast<uint64_t>(epoch) * 1000003u +
                                          static_cast<uint64_t>(bi));
        Trajectory traj = run_unrolled(g, model, leaf(g, std::move(y_batch)), op, opts);
        Var loss = scale_const(trajectory_loss(traj, leaf(g, std::move(x_batch)), config.loss),
                               1.0 / static_cast<double>(batch_size));
        zero_grads(trainables);
        g.backward(loss);
        clip_grad_norm(trainables, config.clip_norm);
        adam_step(adam, trainables);
        epoch_loss += loss.value()[0];
        ++epoch_batches;
      } catch (const NumericError& err) {
        std::cerr << "train: aborting at epoch " << epoch << " batch " << bi << ": " << err.what()
                  << "\n";
        aborted = true;
        break;
      }
    }
    if (epoch_batches > 0) ckpt.train_history.push_back(epoch_loss / static_cast<double>(epoch_batches));
    if (aborted) break;

    if (dataset.n_val > 0) {
      try {
        const double val = validation_loss(model, op, measurements, dataset,
                                           dataset.split_begin(Split::kVal), dataset.n_val,
                                           batch_size);
        ckpt.val_history.push_back(val);
        if (val < best_val) {
          best_val = val;
          best_epoch = epoch;
          best = take_snapshot(named);
        }
      } catch (const NumericError& err) {
        std::cerr << "train: aborting at epoch " << epoch << " validation: " << err.what()
                  << "\n";
        aborted = true;
      }
    }
  }

  if (dataset.n_val > 0 && best_epoch >= 0) {
    restore_snapshot(named, best);
    ckpt.best_epoch = best_epoch;
  } else {
    // No validation split (or nothing completed): keep the latest weights.
    ckpt.best_epoch = static_cast<int64_t>(ckpt.train_history.size()) - 1;
  }

  ckpt.blobs.reserve(named.size());
  for (const NamedTensor& t : named) ckpt.blobs.push_back({t.name, *t.tensor, t.param != nullptr});
  return ckpt;
}

// ---- psnr / evaluate ----------------------------------------------------------

double psnr(const Tensor& x_hat, const Tensor& x_star) {
  check_shape(x_hat.same_shape(x_star), "psnr: " + shape_str(x_hat.shape()) + " vs " +
                                            shape_str(x_star.shape()));
  double acc = 0.0;
  for (int64_t i = 0; i < x_hat.numel(); ++i) {
    const double d = x_hat[i] - x_star[i];
    acc += d * d;
  }
  const double mse = acc / static_cast<double>(x_hat.numel());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

UnrollModel model_from_checkpoint(const Checkpoint& ckpt) {
  const TrainConfig config = train_config_from_json(ckpt.config_json);
  UnrollModel model = build_unroll_model(config.plan, 0);
  std::vector<NamedTensor> named = model.named_tensors();
  check_config(named.size() == ckpt.blobs.size(),
               "checkpoint: expected " + std::to_string(named.size()) + " tensors, found " +
                   std::to_string(ckpt.blobs.size()));
  for (size_t i = 0; i < named.size(); ++i) {
    const NamedBlob& blob = ckpt.blobs[i];
    check_config(blob.name == named[i].name,
                 "checkpoint: tensor '" + blob.name + "' does not match model key '" +
                     named[i].name + "'");
    check_shape(blob.tensor.shape() == named[i].tensor->shape(),
                "checkpoint: shape mismatch for '" + blob.name + "'");
    *named[i].tensor = blob.tensor;
  }
  return model;
}

MetricsReport evaluate(const Checkpoint& ckpt, const Dataset& dataset, Split split) {
  const auto t0 = std::chrono::steady_clock::now();
  const TrainConfig config = train_config_from_json(ckpt.config_json);
  OperatorPtr op = MeasurementOperator::from_sidecar_json(ckpt.operator_sidecar);
  check_shape(op->n() == dataset.n(),
              "evaluate: checkpoint operator n=" + std::to_string(op->n()) +
                  " does not match dataset resolution " + std::to_string(dataset.k));
  const int64_t begin = dataset.split_begin(split);
  const int64_t count = dataset.split_size(split);
  check_config(count > 0, "evaluate: empty split");

  UnrollModel model = model_from_checkpoint(ckpt);
  const int64_t steps = model.plan.steps;
  const int64_t n = dataset.n();
  const int64_t m = op->m();
  const int64_t batch_size = config.batch_size;

  MetricsReport report;
  report.config_json = ckpt.config_json;
  report.curve.assign(static_cast<size_t>(steps), 0.0);
  report.per_image.reserve(static_cast<size_t>(count));
  std::vector<double> curve_sums(static_cast<size_t>(steps), 0.0);

  Tensor row({n});
  for (int64_t start = 0; start < count; start += batch_size) {
    const int64_t b = std::min(batch_size, count - start);
    Tensor y_batch({b, m});
    for (int64_t i = 0; i < b; ++i) {
      const int64_t idx = begin + start + i;
      Tensor y = measurement_for_tile(*op, config.noise, dataset.tiles[static_cast<size_t>(idx)], idx);
      std::copy(y.data(), y.data() + m, y_batch.data() + i * m);
    }
    Graph g(Mode::kInference);
    RunOptions opts;
    opts.probe_seed = Rng::derive(config.seed, 4, static_cast<uint64_t>(start));
    Trajectory traj = run_unrolled(g, model, leaf(g, std::move(y_batch)), op, opts);
    for (int64_t s = 0; s < steps; ++s) {
      const Tensor& state = traj.states[static_cast<size_t>(s)].value();
      for (int64_t i = 0; i < b; ++i) {
        const Tensor& x_star = dataset.tiles[static_cast<size_t>(begin + start + i)];
        std::copy(state.data() + i * n, state.data() + (i + 1) * n, row.data());
        const double value = std::min(psnr(row, x_star), kPsnrCap);
        curve_sums[static_cast<size_t>(s)] += value;
        if (s == steps - 1) report.per_image.push_back(value);
      }
    }
  }

  for (int64_t s = 0; s < steps; ++s)
    report.curve[static_cast<size_t>(s)] = curve_sums[static_cast<size_t>(s)] / static_cast<double>(count);
  report.mean_psnr = report.curve.back();
  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

// ---- classical baselines -------------------------------------------------------

struct BaselineSolver::Impl {
  RowMat a;                          // m x n
  Eigen::LLT<Eigen::MatrixXd> llt;   // of A A^T (or regularized)
};

BaselineSolver::BaselineSolver(const MeasurementOperator& op) : impl_(new Impl) {
  const Tensor dense = op.dense_matrix();
  impl_->a = Eigen::Map<const RowMat>(dense.data(), op.m(), op.n());
  Eigen::MatrixXd gram = impl_->a * impl_->a.transpose();
  impl_->llt.compute(gram);
  if (impl_->llt.info() != Eigen::Success) {
    gram.diagonal().array() += 1e-10;
    impl_->llt.compute(gram);
    if (impl_->llt.info() != Eigen::Success)
      throw NumericError("baseline: Gram matrix is not factorizable");
  }
}

BaselineSolver::~BaselineSolver() = default;
BaselineSolver::BaselineSolver(BaselineSolver&&) noexcept = default;

Tensor BaselineSolver::adjoint(const Tensor& y) const {
  const int64_t m = impl_->a.rows(), n = impl_->a.cols();
  check_shape(y.shape() == Shape{m}, "baseline: y must be [m]");
  Tensor out({n});
  Eigen::Map<Eigen::VectorXd>(out.data(), n).noalias() =
      impl_->a.transpose() * Eigen::Map<const Eigen::VectorXd>(y.data(), m);
  return out;
}

Tensor BaselineSolver::min_norm_ls(const Tensor& y) const {
  const int64_t m = impl_->a.rows(), n = impl_->a.cols();
  check_shape(y.shape() == Shape{m}, "baseline: y must be [m]");
  Eigen::VectorXd u = impl_->llt.solve(Eigen::Map<const Eigen::VectorXd>(y.data(), m));
  Tensor out({n});
  Eigen::Map<Eigen::VectorXd>(out.data(), n).noalias() = impl_->a.transpose() * u;
  return out;
}

Baselines baseline_reconstructions(const MeasurementOperator& op, const Tensor& y) {
  BaselineSolver solver(op);
  return Baselines{solver.adjoint(y), solver.min_norm_ls(y)};
}

}  // namespace demun
