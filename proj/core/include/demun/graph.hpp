#pragma once

#include <memory>
#include <vector>

#include "demun/linear_map.hpp"
#include "demun/tensor.hpp"

namespace demun {

class Graph;
class Node;

enum class Mode { kTraining, kInference };

/// Handle to one node of a Graph. Cheap to copy; never outlives the graph.
struct Var {
  Graph* graph = nullptr;
  int32_t id = -1;

  bool valid() const { return graph != nullptr && id >= 0; }
  const Tensor& value() const;
  const Tensor& grad() const;
  const Shape& shape() const;
};

/// Running statistics of one batch-norm layer. Buffers, not trainable;
/// updated in place by training-mode forward passes.
struct BatchNormStats {
  Tensor running_mean;
  Tensor running_var;
  double eps = 1e-5;
  double momentum = 0.1;

  BatchNormStats() = default;
  explicit BatchNormStats(int64_t channels)
      : running_mean({channels}), running_var(Tensor::full({channels}, 1.0)) {}
};

/// Reverse-mode tape. Nodes are appended in execution order, which is a
/// topological order by construction; backward walks the tape in reverse
/// and accumulates gradients additively. One graph is single-writer:
/// build and differentiate it from one thread.
class Graph {
 public:
  explicit Graph(Mode mode = Mode::kTraining, bool update_running_stats = true);
  ~Graph();

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Mode mode() const { return mode_; }
  bool training() const { return mode_ == Mode::kTraining; }
  bool update_running_stats() const { return update_running_stats_; }

  int64_t size() const { return static_cast<int64_t>(nodes_.size()); }
  const Tensor& value(int32_t id) const;
  const Tensor& grad(int32_t id) const;

  /// Populates gradients of every node that the scalar loss depends on and
  /// accumulates into the grad buffer of every reachable Parameter.
  /// Repeated calls keep accumulating into Parameter grads.
  void backward(Var loss);

  // Internal: append a node, run finiteness checks, return its handle.
  Var push(std::unique_ptr<Node> node);
  Tensor& accum_grad(int32_t id);

 private:
  Mode mode_;
  bool update_running_stats_;
  std::vector<std::unique_ptr<Node>> nodes_;
};

// ---- node constructors --------------------------------------------------

/// Constant input (no gradient tracked beyond the node itself).
Var leaf(Graph& g, Tensor value);

/// Trainable leaf; backward adds into p.grad.
Var param(Graph& g, Parameter& p);

Var zeros(Graph& g, Shape shape);

Var add(Var a, Var b);
Var sub(Var a, Var b);

/// Elementwise x * s where s is a one-element node (trainable scalar).
Var scale(Var x, Var s);

/// Elementwise x * c for a fixed constant; c receives no gradient.
Var scale_const(Var x, double c);

/// Scales row b (leading-dimension slice) of x by the fixed constant c[b].
Var row_scale_const(Var x, const std::vector<double>& c);

Var relu(Var x);

/// Same-padding stride-1 cross-correlation.
/// input [B,Cin,H,W], kernel [Cout,Cin,kh,kw] (kh, kw odd), bias [Cout].
Var conv2d(Var input, Var kernel, Var bias);

/// Batch normalization over [B,C,H,W]. Training mode normalizes with batch
/// statistics (and updates `stats` in place when enabled on the graph);
/// inference mode uses the running statistics.
Var batch_norm(Var x, Var gamma, Var beta, BatchNormStats& stats);

/// y = A x for a constant dense matrix A [m,n] and x [n].
Var matvec(const Tensor& a, Var x);
/// x = A^T r for a constant dense matrix A [m,n] and r [m].
Var matvec_t(const Tensor& a, Var r);

/// y = M x through a LinearMap. x may be [n] or [B,n] (applied per row).
Var apply_map(std::shared_ptr<const LinearMap> map, Var x);
/// x = M^T r through a LinearMap. r may be [m] or [B,m].
Var apply_map_adjoint(std::shared_ptr<const LinearMap> map, Var r);

/// Sum of squared differences (unaveraged), returned as a scalar node.
Var mse(Var a, Var b);

Var reshape(Var x, Shape shape);

inline void backward(Var loss) { loss.graph->backward(loss); }

}  // namespace demun
