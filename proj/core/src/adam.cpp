#include "demun/adam.hpp"

#include <cmath>

namespace demun {

AdamState adam_init(std::span<Parameter* const> params, double lr, double beta1, double beta2,
                    double eps) {
  AdamState state;
  state.lr = lr;
  state.beta1 = beta1;
  state.beta2 = beta2;
  state.eps = eps;
  state.m.reserve(params.size());
  state.v.reserve(params.size());
  for (const Parameter* p : params) {
    state.m.emplace_back(p->value.shape());
    state.v.emplace_back(p->value.shape());
  }
  return state;
}

void adam_step(AdamState& state, std::span<Parameter* const> params) {
  check_shape(state.m.size() == params.size(),
              "adam_step: state tracks " + std::to_string(state.m.size()) + " parameters, got " +
                  std::to_string(params.size()));
  state.t += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
  for (size_t k = 0; k < params.size(); ++k) {
    Parameter& p = *params[k];
    Tensor& m = state.m[k];
    Tensor& v = state.v[k];
    check_shape(m.same_shape(p.value), "adam_step: parameter " + std::to_string(k) +
                                           " shape changed since init");
    for (int64_t i = 0; i < p.value.numel(); ++i) {
      const double g = p.grad[i];
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g;
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p.value[i] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

void zero_grads(std::span<Parameter* const> params) {
  for (Parameter* p : params) p->zero_grad();
}

void clip_grad_norm(std::span<Parameter* const> params, double max_norm) {
  if (max_norm <= 0.0) return;
  double total = 0.0;
  for (const Parameter* p : params) total += p->grad.norm2_squared();
  total = std::sqrt(total);
  if (total <= max_norm) return;
  const double s = max_norm / total;
  for (Parameter* p : params)
    for (int64_t i = 0; i < p->grad.numel(); ++i) p->grad[i] *= s;
}

}  // namespace demun
