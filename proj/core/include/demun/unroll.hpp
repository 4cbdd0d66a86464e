#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "demun/dncnn.hpp"
#include "demun/graph.hpp"
#include "demun/measurement.hpp"
#include "demun/rng.hpp"

namespace demun {

enum class Algorithm { kDemun, kPgd, kNesterov, kAmp };

Algorithm parse_algorithm(const std::string& id);
std::string algorithm_id(Algorithm a);

/// Trainable mixing weights of the memory update: alpha[i] multiplies x^i,
/// beta[i][j] (j <= i) multiplies the cached gradient from step j.
/// Initialization is alpha[i] = 1, beta[i][i] = 1, all others 0, which
/// reproduces a unit-step projected gradient step.
struct MemoryWeights {
  std::vector<Parameter> alpha;
  std::vector<std::vector<Parameter>> beta;
};

MemoryWeights init_memory_weights(int64_t steps);

struct UnrollPlan {
  Algorithm algorithm = Algorithm::kDemun;
  int64_t steps = 5;  // projection count T
  bool residual = true;
  DnCNNConfig projector;
  bool tie_weights = false;      // share one projector across steps
  double amp_probe_eps = 1e-3;   // probe scale, relative to input RMS

  void validate() const;
};

/// All trainable state of one unrolled network: per-step projectors
/// (untied by default), memory weights (DeMUN) or per-step step sizes
/// (PGD/Nesterov), each initialized from the given seed.
struct UnrollModel {
  UnrollPlan plan;
  std::vector<ProjectorParams> projectors;
  MemoryWeights memory;
  std::vector<Parameter> step_sizes;

  ProjectorParams& projector_at(int64_t step);
  std::vector<NamedTensor> named_tensors();
  std::vector<Parameter*> trainable_params();
};

UnrollModel build_unroll_model(const UnrollPlan& plan, uint64_t seed);

/// Differentiable record of one unrolled run over a batch. The Vars point
/// into the graph passed to run_unrolled and must not outlive it.
struct Trajectory {
  std::vector<Var> states;         // x^1 .. x^T, each [B,n]
  std::vector<Var> intermediates;  // x~^0 .. x~^{T-1}
  std::vector<double> t_sequence;  // Nesterov t_1 .. t_{T+1} (constants)
  std::vector<std::vector<double>> onsager;  // AMP: per-step per-sample divergence
};

struct RunOptions {
  uint64_t probe_seed = 0;
  /// When set, AMP reuses these divergence estimates instead of probing.
  const std::vector<std::vector<double>>* frozen_onsager = nullptr;
};

/// Runs the planned algorithm from x^0 = 0 on measurements y ([B,m] or [m]).
/// Every step computes the algorithm's x~^i and then the (optionally
/// residual) projection; all states stay on the graph.
Trajectory run_unrolled(Graph& g, UnrollModel& model, Var y, const OperatorPtr& op,
                        const RunOptions& options = {});

/// x~ = alpha * x_i + sum_j beta[j] * grad_stack[j].
Var demun_combine(Graph& g, Var x_i, std::span<const Var> grad_stack, Parameter& alpha,
                  std::vector<Parameter>& beta);

/// Single Monte-Carlo divergence estimate of fn at u with a Rademacher
/// probe: z . (fn(u + eps z) - fn(u)) / eps.
double divergence_probe(const std::function<Tensor(const Tensor&)>& fn, const Tensor& u,
                        double eps, Rng& rng);

// ---- losses over trajectories ---------------------------------------------

Var loss_last_layer(const Trajectory& traj, Var x_star);
Var loss_intermediate(const Trajectory& traj, Var x_star, double omega);
Var loss_skip(const Trajectory& traj, Var x_star, int64_t skip_L);

struct LossSpec {
  enum class Family { kLastLayer, kIntermediate, kSkip };
  Family family = Family::kIntermediate;
  double omega = 1.0;   // intermediate family
  int64_t skip_L = 1;   // skip family

  /// Parses "ll", "iw:<omega>", "skip:<L>".
  static LossSpec parse(const std::string& id);
  std::string id() const;
  void validate(int64_t steps) const;
};

Var trajectory_loss(const Trajectory& traj, Var x_star, const LossSpec& spec);

}  // namespace demun
