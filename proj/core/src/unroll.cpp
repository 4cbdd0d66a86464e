#include "demun/unroll.hpp"

#include <cmath>
#include <cstdio>

namespace demun {

Algorithm parse_algorithm(const std::string& id) {
  if (id == "demun") return Algorithm::kDemun;
  if (id == "pgd") return Algorithm::kPgd;
  if (id == "nesterov") return Algorithm::kNesterov;
  if (id == "amp") return Algorithm::kAmp;
  throw ConfigError("unknown algorithm id '" + id + "' (expected demun|pgd|nesterov|amp)");
}

std::string algorithm_id(Algorithm a) {
  switch (a) {
    case Algorithm::kDemun: return "demun";
    case Algorithm::kPgd: return "pgd";
    case Algorithm::kNesterov: return "nesterov";
    case Algorithm::kAmp: return "amp";
  }
  return "?";
}

MemoryWeights init_memory_weights(int64_t steps) {
  MemoryWeights w;
  w.alpha.reserve(static_cast<size_t>(steps));
  w.beta.reserve(static_cast<size_t>(steps));
  for (int64_t i = 0; i < steps; ++i) {
    w.alpha.emplace_back(Tensor::scalar(1.0));
    std::vector<Parameter> row;
    row.reserve(static_cast<size_t>(i + 1));
    for (int64_t j = 0; j <= i; ++j) row.emplace_back(Tensor::scalar(j == i ? 1.0 : 0.0));
    w.beta.push_back(std::move(row));
  }
  return w;
}

void UnrollPlan::validate() const {
  check_config(steps >= 1, "unroll plan needs steps >= 1");
  check_config(amp_probe_eps > 0.0, "amp_probe_eps must be > 0");
  projector.validate();
}

ProjectorParams& UnrollModel::projector_at(int64_t step) {
  return plan.tie_weights ? projectors.front() : projectors[static_cast<size_t>(step)];
}

std::vector<NamedTensor> UnrollModel::named_tensors() {
  std::vector<NamedTensor> out;
  for (size_t i = 0; i < projectors.size(); ++i) {
    const std::string prefix =
        plan.tie_weights ? std::string("proj_shared") : "proj" + std::to_string(i);
    collect_projector_tensors(projectors[i], prefix, out);
  }
  for (size_t i = 0; i < memory.alpha.size(); ++i) {
    out.push_back({"mem.alpha" + std::to_string(i), &memory.alpha[i].value, &memory.alpha[i]});
    for (size_t j = 0; j < memory.beta[i].size(); ++j) {
      out.push_back({"mem.beta" + std::to_string(i) + "." + std::to_string(j),
                     &memory.beta[i][j].value, &memory.beta[i][j]});
    }
  }
  for (size_t i = 0; i < step_sizes.size(); ++i)
    out.push_back({"mu" + std::to_string(i), &step_sizes[i].value, &step_sizes[i]});
  return out;
}

std::vector<Parameter*> UnrollModel::trainable_params() {
  std::vector<Parameter*> out;
  for (const NamedTensor& t : named_tensors())
    if (t.param != nullptr) out.push_back(t.param);
  return out;
}

UnrollModel build_unroll_model(const UnrollPlan& plan, uint64_t seed) {
  plan.validate();
  UnrollModel model;
  model.plan = plan;
  const int64_t instances = plan.tie_weights ? 1 : plan.steps;
  model.projectors.reserve(static_cast<size_t>(instances));
  for (int64_t i = 0; i < instances; ++i) {
    model.projectors.push_back(
        build_projector(plan.projector, plan.residual, Rng::derive(seed, 1000 + i)));
  }
  if (plan.algorithm == Algorithm::kDemun) {
    model.memory = init_memory_weights(plan.steps);
  } else if (plan.algorithm == Algorithm::kPgd || plan.algorithm == Algorithm::kNesterov) {
    model.step_sizes.reserve(static_cast<size_t>(plan.steps));
    for (int64_t i = 0; i < plan.steps; ++i) model.step_sizes.emplace_back(Tensor::scalar(1.0));
  }
  return model;
}

Var demun_combine(Graph& g, Var x_i, std::span<const Var> grad_stack, Parameter& alpha,
                  std::vector<Parameter>& beta) {
  check_shape(grad_stack.size() == beta.size(),
              "demun_combine: " + std::to_string(grad_stack.size()) + " cached gradients vs " +
                  std::to_string(beta.size()) + " beta weights");
  Var acc = scale(x_i, param(g, alpha));
  for (size_t j = 0; j < grad_stack.size(); ++j)
    acc = add(acc, scale(grad_stack[j], param(g, beta[j])));
  return acc;
}

double divergence_probe(const std::function<Tensor(const Tensor&)>& fn, const Tensor& u,
                        double eps, Rng& rng) {
  check_config(eps > 0.0, "divergence probe eps must be > 0");
  Tensor probe(u.shape());
  for (int64_t i = 0; i < probe.numel(); ++i) probe[i] = rng.rademacher();
  Tensor shifted = u;
  for (int64_t i = 0; i < shifted.numel(); ++i) shifted[i] += eps * probe[i];
  const Tensor base = fn(u);
  const Tensor moved = fn(shifted);
  check_shape(base.same_shape(u) && moved.same_shape(u),
              "divergence probe: fn must be shape preserving");
  double acc = 0.0;
  for (int64_t i = 0; i < u.numel(); ++i) acc += probe[i] * (moved[i] - base[i]);
  return acc / eps;
}

namespace {

Var project_state(Graph& g, ProjectorParams& proj, Var state, int64_t k) {
  const int64_t b = state.shape()[0];
  Var img = reshape(state, {b, 1, k, k});
  Var out = project(g, proj, img);
  return reshape(out, {b, k * k});
}

// Per-sample single-probe divergence of the projector step at the batch of
// inputs u ([B,n]); evaluated on a throwaway graph in the same statistics
// mode, with running-stat updates suppressed. base holds project(u) values.
std::vector<double> batch_divergence(Graph& g, ProjectorParams& proj, const Tensor& u,
                                     const Tensor& base, int64_t k, double probe_eps, Rng& rng) {
  const int64_t b = u.shape()[0];
  const int64_t n = u.shape()[1];
  Tensor probe(u.shape());
  for (int64_t i = 0; i < probe.numel(); ++i) probe[i] = rng.rademacher();

  std::vector<double> eps(static_cast<size_t>(b));
  Tensor shifted = u;
  for (int64_t bi = 0; bi < b; ++bi) {
    const double* row = u.data() + bi * n;
    double sq = 0.0;
    for (int64_t j = 0; j < n; ++j) sq += row[j] * row[j];
    const double rms = std::sqrt(sq / static_cast<double>(n));
    eps[static_cast<size_t>(bi)] = probe_eps * (rms > 0.0 ? rms : 1.0);
    double* dst = shifted.data() + bi * n;
    const double* pr = probe.data() + bi * n;
    for (int64_t j = 0; j < n; ++j) dst[j] += eps[static_cast<size_t>(bi)] * pr[j];
  }

  Graph scratch(g.mode(), /*update_running_stats=*/false);
  Var moved = project_state(scratch, proj, leaf(scratch, shifted), k);
  const Tensor& moved_v = moved.value();

  std::vector<double> div(static_cast<size_t>(b));
  for (int64_t bi = 0; bi < b; ++bi) {
    const double* pr = probe.data() + bi * n;
    const double* mv = moved_v.data() + bi * n;
    const double* bs = base.data() + bi * n;
    double acc = 0.0;
    for (int64_t j = 0; j < n; ++j) acc += pr[j] * (mv[j] - bs[j]);
    div[static_cast<size_t>(bi)] = acc / eps[static_cast<size_t>(bi)];
  }
  return div;
}

}  // namespace

Trajectory run_unrolled(Graph& g, UnrollModel& model, Var y, const OperatorPtr& op,
                        const RunOptions& options) {
  const UnrollPlan& plan = model.plan;
  plan.validate();
  const int64_t k = plan.projector.image_k;
  const int64_t n = op->n();
  const int64_t m = op->m();
  check_shape(k * k == n, "run_unrolled: operator n=" + std::to_string(n) +
                              " does not match image side " + std::to_string(k));
  if (y.shape().size() == 1) y = reshape(y, {1, y.shape()[0]});
  check_shape(y.shape().size() == 2 && y.shape()[1] == m,
              "run_unrolled: measurements must be [B," + std::to_string(m) + "], got " +
                  shape_str(y.shape()));
  const int64_t batch = y.shape()[0];
  const int64_t steps = plan.steps;

  Trajectory traj;
  traj.states.reserve(static_cast<size_t>(steps));
  traj.intermediates.reserve(static_cast<size_t>(steps));

  Var x = zeros(g, {batch, n});  // x^0 = 0

  switch (plan.algorithm) {
    case Algorithm::kPgd: {
      for (int64_t i = 0; i < steps; ++i) {
        Var grad = apply_adjoint(*op, sub(y, apply(*op, x)));
        Var xt = add(x, scale(grad, param(g, model.step_sizes[static_cast<size_t>(i)])));
        traj.intermediates.push_back(xt);
        x = project_state(g, model.projector_at(i), xt, k);
        traj.states.push_back(x);
      }
      break;
    }
    case Algorithm::kDemun: {
      std::vector<Var> grad_stack;
      grad_stack.reserve(static_cast<size_t>(steps));
      for (int64_t i = 0; i < steps; ++i) {
        grad_stack.push_back(apply_adjoint(*op, sub(y, apply(*op, x))));
        Var xt = demun_combine(g, x, grad_stack, model.memory.alpha[static_cast<size_t>(i)],
                               model.memory.beta[static_cast<size_t>(i)]);
        traj.intermediates.push_back(xt);
        x = project_state(g, model.projector_at(i), xt, k);
        traj.states.push_back(x);
      }
      break;
    }
    case Algorithm::kNesterov: {
      // t_1 = 1, t_{i+1} = (1 + sqrt(1 + 4 t_i^2)) / 2; fixed constants,
      // excluded from the graph.
      traj.t_sequence.resize(static_cast<size_t>(steps + 1));
      traj.t_sequence[0] = 1.0;
      for (int64_t i = 1; i <= steps; ++i) {
        const double prev = traj.t_sequence[static_cast<size_t>(i - 1)];
        traj.t_sequence[static_cast<size_t>(i)] = (1.0 + std::sqrt(1.0 + 4.0 * prev * prev)) / 2.0;
      }
      Var xn = x;
      for (int64_t i = 0; i < steps; ++i) {
        Var grad = apply_adjoint(*op, sub(y, apply(*op, xn)));
        Var xt = add(xn, scale(grad, param(g, model.step_sizes[static_cast<size_t>(i)])));
        traj.intermediates.push_back(xt);
        Var x_next = project_state(g, model.projector_at(i), xt, k);
        traj.states.push_back(x_next);
        const double coeff = (traj.t_sequence[static_cast<size_t>(i)] - 1.0) /
                             traj.t_sequence[static_cast<size_t>(i + 1)];
        xn = add(x_next, scale_const(sub(x_next, x), coeff));
        x = x_next;
      }
      break;
    }
    case Algorithm::kAmp: {
      traj.onsager.resize(static_cast<size_t>(steps));
      Var z = y;  // z^0 = y
      for (int64_t i = 0; i < steps; ++i) {
        Var xt = add(x, apply_adjoint(*op, z));
        traj.intermediates.push_back(xt);
        ProjectorParams& proj = model.projector_at(i);
        Var x_next = project_state(g, proj, xt, k);
        traj.states.push_back(x_next);

        std::vector<double> div;
        if (options.frozen_onsager != nullptr) {
          div = (*options.frozen_onsager)[static_cast<size_t>(i)];
          check_shape(static_cast<int64_t>(div.size()) == batch,
                      "run_unrolled: frozen divergence batch mismatch at step " + std::to_string(i));
        } else {
          Rng probe_rng(Rng::derive(options.probe_seed, 7000 + i));
          div = batch_divergence(g, proj, xt.value(), x_next.value(), k, plan.amp_probe_eps,
                                 probe_rng);
        }
        traj.onsager[static_cast<size_t>(i)] = div;

        std::vector<double> coeff(div.size());
        for (size_t bi = 0; bi < div.size(); ++bi) coeff[bi] = div[bi] / static_cast<double>(m);
        z = add(sub(y, apply(*op, x_next)), row_scale_const(z, coeff));
        x = x_next;
      }
      break;
    }
  }
  return traj;
}

// ---- losses ---------------------------------------------------------------

Var loss_last_layer(const Trajectory& traj, Var x_star) {
  check_shape(!traj.states.empty(), "loss: empty trajectory");
  return mse(traj.states.back(), x_star);
}

Var loss_intermediate(const Trajectory& traj, Var x_star, double omega) {
  check_config(omega > 0.0 && omega <= 1.0,
               "loss: iw omega must be in (0,1], got " + std::to_string(omega));
  check_shape(!traj.states.empty(), "loss: empty trajectory");
  const int64_t steps = static_cast<int64_t>(traj.states.size());
  Var acc;
  for (int64_t i = 1; i <= steps; ++i) {
    Var term = mse(traj.states[static_cast<size_t>(i - 1)], x_star);
    const double w = std::pow(omega, static_cast<double>(steps - i));
    if (w != 1.0) term = scale_const(term, w);
    acc = (i == 1) ? term : add(acc, term);
  }
  return acc;
}

Var loss_skip(const Trajectory& traj, Var x_star, int64_t skip_L) {
  check_shape(!traj.states.empty(), "loss: empty trajectory");
  const int64_t steps = static_cast<int64_t>(traj.states.size());
  check_config(skip_L >= 1 && steps % skip_L == 0,
               "loss: skip_L must be a positive divisor of T=" + std::to_string(steps) + ", got " +
                   std::to_string(skip_L));
  Var acc;
  for (int64_t s = skip_L; s <= steps; s += skip_L) {
    Var term = mse(traj.states[static_cast<size_t>(s - 1)], x_star);
    acc = (s == skip_L) ? term : add(acc, term);
  }
  return acc;
}

LossSpec LossSpec::parse(const std::string& id) {
  LossSpec spec;
  if (id == "ll") {
    spec.family = Family::kLastLayer;
    return spec;
  }
  if (id.rfind("iw:", 0) == 0) {
    spec.family = Family::kIntermediate;
    try {
      spec.omega = std::stod(id.substr(3));
    } catch (const std::exception&) {
      throw ConfigError("loss id '" + id + "': cannot parse omega");
    }
    check_config(spec.omega > 0.0 && spec.omega <= 1.0,
                 "loss id '" + id + "': omega must be in (0,1]");
    return spec;
  }
  if (id.rfind("skip:", 0) == 0) {
    spec.family = Family::kSkip;
    try {
      spec.skip_L = std::stoll(id.substr(5));
    } catch (const std::exception&) {
      throw ConfigError("loss id '" + id + "': cannot parse L");
    }
    check_config(spec.skip_L >= 1, "loss id '" + id + "': L must be >= 1");
    return spec;
  }
  throw ConfigError("unknown loss id '" + id + "' (expected ll, iw:<omega>, or skip:<L>)");
}

std::string LossSpec::id() const {
  switch (family) {
    case Family::kLastLayer: return "ll";
    case Family::kIntermediate: {
      char buf[48];
      std::snprintf(buf, sizeof(buf), "iw:%g", omega);
      return buf;
    }
    case Family::kSkip: return "skip:" + std::to_string(skip_L);
  }
  return "?";
}

void LossSpec::validate(int64_t steps) const {
  switch (family) {
    case Family::kLastLayer: return;
    case Family::kIntermediate:
      check_config(omega > 0.0 && omega <= 1.0,
                   "loss: iw omega must be in (0,1], got " + std::to_string(omega));
      return;
    case Family::kSkip:
      check_config(skip_L >= 1 && steps % skip_L == 0,
                   "loss: skip_L must be a positive divisor of T=" + std::to_string(steps));
      return;
  }
}

Var trajectory_loss(const Trajectory& traj, Var x_star, const LossSpec& spec) {
  switch (spec.family) {
    case LossSpec::Family::kLastLayer: return loss_last_layer(traj, x_star);
    case LossSpec::Family::kIntermediate: return loss_intermediate(traj, x_star, spec.omega);
    case LossSpec::Family::kSkip: return loss_skip(traj, x_star, spec.skip_L);
  }
  throw ConfigError("loss: invalid family");
}

}  // namespace demun
