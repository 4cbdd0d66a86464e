#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "demun/tensor.hpp"

namespace demun {

/// ADAM moment buffers and hyperparameters. Owned by exactly one trainer;
/// the moment layout is bound to the parameter list passed at init.
struct AdamState {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int64_t t = 0;
  std::vector<Tensor> m;
  std::vector<Tensor> v;
};

AdamState adam_init(std::span<Parameter* const> params, double lr = 1e-4, double beta1 = 0.9,
                    double beta2 = 0.999, double eps = 1e-8);

/// One bias-corrected ADAM update from the gradients currently held in
/// each parameter's grad buffer. Gradients are left untouched.
void adam_step(AdamState& state, std::span<Parameter* const> params);

void zero_grads(std::span<Parameter* const> params);

/// Global-norm gradient clipping; no-op when max_norm <= 0.
void clip_grad_norm(std::span<Parameter* const> params, double max_norm);

}  // namespace demun
