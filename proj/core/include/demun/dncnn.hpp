#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "demun/graph.hpp"
#include "demun/tensor.hpp"

namespace demun {

struct DnCNNConfig {
  int64_t depth_L = 5;    // intermediate conv+BN+ReLU blocks
  int64_t channels = 64;  // intermediate width
  int64_t kernel = 3;     // spatial kernel size, odd
  int64_t image_k = 50;   // spatial side length

  void validate() const;
};

struct ConvParams {
  Parameter weight;  // [Cout, Cin, k, k]
  Parameter bias;    // [Cout]
};

struct BatchNormParams {
  Parameter gamma;
  Parameter beta;
  BatchNormStats stats;
};

struct MidBlock {
  ConvParams conv;
  BatchNormParams bn;
};

/// Weights of one projector instance: input conv + ReLU, depth_L blocks of
/// conv + BN + ReLU, and a single-filter reconstruction conv. With the
/// residual flag the step output is x + net(x).
struct ProjectorParams {
  DnCNNConfig config;
  bool residual = false;
  ConvParams input;
  std::vector<MidBlock> blocks;
  ConvParams output;
};

/// Fan-in-scaled uniform initialization of all conv weights and biases,
/// drawn from U(-sqrt(1/(Cin*kh*kw)), +sqrt(1/(Cin*kh*kw))); BN starts at
/// gamma=1, beta=0 with zero-mean unit-variance running stats.
ProjectorParams build_projector(const DnCNNConfig& config, bool residual, uint64_t seed);

/// Trainable parameter count implied by a config (closed form).
int64_t projector_param_count(const DnCNNConfig& config);

/// Applies the projector to a [B,1,k,k] node; shape preserving. Training
/// vs inference statistics follow the graph mode.
Var project(Graph& g, ProjectorParams& params, Var x_img);

/// Named handle to a model tensor. `param` is set for trainable values and
/// null for buffers (running statistics); `tensor` is always valid.
struct NamedTensor {
  std::string name;
  Tensor* tensor = nullptr;
  Parameter* param = nullptr;
};

void collect_projector_tensors(ProjectorParams& params, const std::string& prefix,
                               std::vector<NamedTensor>& out);

}  // namespace demun
