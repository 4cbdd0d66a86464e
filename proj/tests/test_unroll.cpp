#include <doctest.h>

#include <cmath>

#include "demun/unroll.hpp"
#include "helpers.hpp"

using namespace demun;
using demun::testing::random_tensor;

namespace {

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.same_shape(b));
  double worst = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

UnrollPlan small_plan(Algorithm alg, int64_t steps, int64_t k, int64_t depth, int64_t channels,
                      bool residual) {
  UnrollPlan plan;
  plan.algorithm = alg;
  plan.steps = steps;
  plan.residual = residual;
  plan.projector = DnCNNConfig{.depth_L = depth, .channels = channels, .kernel = 3, .image_k = k};
  return plan;
}

// ---- straight-line value-level oracle (no graph machinery) -----------------

Tensor conv_plain(const Tensor& x, const Tensor& w, const Tensor& bias) {
  const int64_t b = x.shape()[0], ci = x.shape()[1], h = x.shape()[2], wd = x.shape()[3];
  const int64_t co = w.shape()[0], kh = w.shape()[2], kw = w.shape()[3];
  const int64_t ph = (kh - 1) / 2, pw = (kw - 1) / 2;
  Tensor y({b, co, h, wd});
  for (int64_t bi = 0; bi < b; ++bi)
    for (int64_t oc = 0; oc < co; ++oc)
      for (int64_t i = 0; i < h; ++i)
        for (int64_t j = 0; j < wd; ++j) {
          double acc = bias[oc];
          for (int64_t ic = 0; ic < ci; ++ic)
            for (int64_t p = 0; p < kh; ++p)
              for (int64_t q = 0; q < kw; ++q) {
                const int64_t si = i + p - ph, sj = j + q - pw;
                if (si < 0 || si >= h || sj < 0 || sj >= wd) continue;
                acc += x.at4(bi, ic, si, sj) * w.at4(oc, ic, p, q);
              }
          y.at4(bi, oc, i, j) = acc;
        }
  return y;
}

Tensor project_plain(ProjectorParams& p, const Tensor& img) {
  auto relu_plain = [](Tensor t) {
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = t[i] > 0 ? t[i] : 0.0;
    return t;
  };
  Tensor h = relu_plain(conv_plain(img, p.input.weight.value, p.input.bias.value));
  for (MidBlock& block : p.blocks) {
    Tensor c = conv_plain(h, block.conv.weight.value, block.conv.bias.value);
    const int64_t channels = c.shape()[1], hw = c.shape()[2] * c.shape()[3];
    for (int64_t ch = 0; ch < channels; ++ch) {
      const double rm = block.bn.stats.running_mean[ch];
      const double rv = block.bn.stats.running_var[ch];
      const double ga = block.bn.gamma.value[ch], be = block.bn.beta.value[ch];
      const double inv = 1.0 / std::sqrt(rv + block.bn.stats.eps);
      for (int64_t i = 0; i < hw; ++i) {
        double& v = c[ch * hw + i];
        v = ga * (v - rm) * inv + be;
      }
    }
    h = relu_plain(std::move(c));
  }
  Tensor out = conv_plain(h, p.output.weight.value, p.output.bias.value);
  if (p.residual)
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += img[i];
  return out;
}

std::vector<Tensor> demun_oracle(UnrollModel& model, const Tensor& y, const Tensor& a_dense) {
  const int64_t m = a_dense.shape()[0], n = a_dense.shape()[1];
  const int64_t k = model.plan.projector.image_k;
  Tensor x({n});
  std::vector<Tensor> grads;
  std::vector<Tensor> states;
  for (int64_t step = 0; step < model.plan.steps; ++step) {
    Tensor resid({m});
    for (int64_t i = 0; i < m; ++i) {
      double acc = 0.0;
      for (int64_t j = 0; j < n; ++j) acc += a_dense[i * n + j] * x[j];
      resid[i] = y[i] - acc;
    }
    Tensor grad({n});
    for (int64_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int64_t i = 0; i < m; ++i) acc += a_dense[i * n + j] * resid[i];
      grad[j] = acc;
    }
    grads.push_back(grad);

    Tensor xt({n});
    const double alpha = model.memory.alpha[static_cast<size_t>(step)].value[0];
    for (int64_t j = 0; j < n; ++j) xt[j] = alpha * x[j];
    for (size_t gj = 0; gj <= static_cast<size_t>(step); ++gj) {
      const double beta = model.memory.beta[static_cast<size_t>(step)][gj].value[0];
      for (int64_t j = 0; j < n; ++j) xt[j] += beta * grads[gj][j];
    }
    const Tensor out = project_plain(model.projector_at(step), xt.reshaped({1, 1, k, k}));
    x = out.reshaped({n});
    states.push_back(x);
  }
  return states;
}

}  // namespace

TEST_CASE("memory weights: initialization reproduces the unit PGD step") {
  MemoryWeights w = init_memory_weights(4);
  REQUIRE(w.alpha.size() == 4);
  for (size_t i = 0; i < 4; ++i) {
    CHECK(w.alpha[i].value[0] == 1.0);
    REQUIRE(w.beta[i].size() == i + 1);
    for (size_t j = 0; j < w.beta[i].size(); ++j)
      CHECK(w.beta[i][j].value[0] == (j == i ? 1.0 : 0.0));
  }
}

TEST_CASE("demun_combine: initialization case, zero weights, loop oracle") {
  Graph g;
  Rng rng(3);
  const int64_t n = 12;
  Var x = leaf(g, random_tensor({1, n}, rng));
  std::vector<Var> stack;
  for (int i = 0; i < 3; ++i) stack.push_back(leaf(g, random_tensor({1, n}, rng)));

  MemoryWeights w = init_memory_weights(3);
  Var combined = demun_combine(g, x, stack, w.alpha[2], w.beta[2]);
  Tensor expected = x.value();
  for (int64_t j = 0; j < n; ++j) expected[j] += stack[2].value()[j];
  CHECK(max_abs_diff(combined.value(), expected) == 0.0);

  // alpha = 0, all beta = 0 gives the zero vector.
  w.alpha[2].value[0] = 0.0;
  w.beta[2][2].value[0] = 0.0;
  Var zeroed = demun_combine(g, x, stack, w.alpha[2], w.beta[2]);
  CHECK(max_abs_diff(zeroed.value(), Tensor({1, n})) == 0.0);

  // Random weights against the explicit scalar-weighted sum.
  Parameter alpha(Tensor::scalar(rng.uniform(-1, 1)));
  std::vector<Parameter> beta;
  for (int i = 0; i < 3; ++i) beta.emplace_back(Tensor::scalar(rng.uniform(-1, 1)));
  Var mixed = demun_combine(g, x, stack, alpha, beta);
  Tensor oracle({1, n});
  for (int64_t j = 0; j < n; ++j) {
    oracle[j] = alpha.value[0] * x.value()[j];
    for (int i = 0; i < 3; ++i) oracle[j] += beta[static_cast<size_t>(i)].value[0] * stack[static_cast<size_t>(i)].value()[j];
  }
  CHECK(max_abs_diff(mixed.value(), oracle) < 1e-12);

  std::vector<Var> short_stack(stack.begin(), stack.begin() + 2);
  CHECK_THROWS_AS(demun_combine(g, x, short_stack, alpha, beta), ShapeError);
}

TEST_CASE("run_unrolled: DeMUN at initialization equals PGD with unit steps") {
  const int64_t k = 8;
  OperatorPtr op = make_gaussian(26, k * k, 5);
  Rng rng(7);
  const Tensor y = random_tensor({1, op->m()}, rng);

  UnrollModel demun_model = build_unroll_model(small_plan(Algorithm::kDemun, 5, k, 1, 4, false), 99);
  UnrollModel pgd_model = build_unroll_model(small_plan(Algorithm::kPgd, 5, k, 1, 4, false), 99);

  Graph g1(Mode::kInference);
  Trajectory t1 = run_unrolled(g1, demun_model, leaf(g1, y), op);
  Graph g2(Mode::kInference);
  Trajectory t2 = run_unrolled(g2, pgd_model, leaf(g2, y), op);
  REQUIRE(t1.states.size() == 5);
  for (size_t i = 0; i < 5; ++i)
    CHECK(max_abs_diff(t1.states[i].value(), t2.states[i].value()) < 1e-12);
}

TEST_CASE("run_unrolled: first step coincidences across algorithms") {
  const int64_t k = 6;
  OperatorPtr op = make_gaussian(14, k * k, 9);
  Rng rng(11);
  const Tensor y = random_tensor({1, op->m()}, rng);

  auto first_state = [&](Algorithm alg) {
    UnrollModel model = build_unroll_model(small_plan(alg, 1, k, 1, 4, true), 31);
    Graph g(Mode::kInference);
    Trajectory traj = run_unrolled(g, model, leaf(g, y), op, RunOptions{.probe_seed = 5});
    return traj.states[0].value();
  };

  const Tensor pgd = first_state(Algorithm::kPgd);
  const Tensor nesterov = first_state(Algorithm::kNesterov);
  const Tensor demun = first_state(Algorithm::kDemun);
  CHECK(max_abs_diff(pgd, nesterov) == 0.0);  // momentum inactive at step 1
  CHECK(max_abs_diff(pgd, demun) < 1e-12);

  // x^1 = P(A^T y) for the unit-step initialization.
  UnrollModel model = build_unroll_model(small_plan(Algorithm::kPgd, 1, k, 1, 4, true), 31);
  Graph g(Mode::kInference);
  Var aty = leaf(g, apply_adjoint_values(*op, y.reshaped({op->m()})));
  Var img = reshape(aty, {1, 1, k, k});
  Var projected = project(g, model.projector_at(0), img);
  Graph g2(Mode::kInference);
  Trajectory traj = run_unrolled(g2, model, leaf(g2, y), op);
  CHECK(max_abs_diff(traj.states[0].value().reshaped({1, 1, k, k}),
                     projected.value()) < 1e-12);
}

TEST_CASE("run_unrolled: DeMUN matches the straight-line oracle at T=3") {
  const int64_t k = 8;
  OperatorPtr op = make_gaussian(20, k * k, 13);
  UnrollModel model = build_unroll_model(small_plan(Algorithm::kDemun, 3, k, 1, 4, true), 17);

  // Randomize the memory weights so the combine is non-trivial.
  Rng rng(19);
  for (auto& a : model.memory.alpha) a.value[0] = rng.uniform(0.2, 1.2);
  for (auto& row : model.memory.beta)
    for (auto& b : row) b.value[0] = rng.uniform(-0.4, 0.9);

  const Tensor y = random_tensor({op->m()}, rng);
  Graph g(Mode::kInference);
  Trajectory traj = run_unrolled(g, model, leaf(g, y), op);

  const std::vector<Tensor> oracle = demun_oracle(model, y, op->dense());
  REQUIRE(traj.states.size() == oracle.size());
  for (size_t i = 0; i < oracle.size(); ++i)
    CHECK(max_abs_diff(traj.states[i].value(), oracle[i].reshaped({1, k * k})) < 1e-12);
}

TEST_CASE("nesterov: t recurrence values and momentum bookkeeping") {
  const int64_t k = 6;
  OperatorPtr op = make_gaussian(10, k * k, 3);
  UnrollModel model = build_unroll_model(small_plan(Algorithm::kNesterov, 3, k, 0, 3, false), 5);
  Rng rng(23);
  const Tensor y = random_tensor({1, op->m()}, rng);
  Graph g(Mode::kInference);
  Trajectory traj = run_unrolled(g, model, leaf(g, y), op);

  REQUIRE(traj.t_sequence.size() == 4);
  CHECK(traj.t_sequence[0] == 1.0);
  CHECK(traj.t_sequence[1] == doctest::Approx((1.0 + std::sqrt(5.0)) / 2.0).epsilon(1e-12));
  // Evaluate the recurrence independently for t_3.
  const double t2 = (1.0 + std::sqrt(5.0)) / 2.0;
  const double t3 = (1.0 + std::sqrt(1.0 + 4.0 * t2 * t2)) / 2.0;
  CHECK(traj.t_sequence[2] == doctest::Approx(t3).epsilon(1e-12));
  CHECK(t3 == doctest::Approx(2.193527085331054).epsilon(1e-12));

  // (t_1 - 1)/t_2 = 0: the second gradient is taken at x_n^1 = x^1.
  // Verified structurally: x~^1 = x^1 + mu * A^T (y - A x^1).
  const Tensor x1 = traj.states[0].value();
  Tensor resid = y;
  {
    const Tensor ax = apply_values(*op, x1.reshaped({k * k}));
    for (int64_t i = 0; i < op->m(); ++i) resid[i] -= ax[i];
  }
  Tensor expected = apply_adjoint_values(*op, resid.reshaped({op->m()}));
  for (int64_t j = 0; j < k * k; ++j) expected[j] += x1[j];
  CHECK(max_abs_diff(traj.intermediates[1].value(), expected.reshaped({1, k * k})) < 1e-12);
}

TEST_CASE("divergence probe: linear map mean tracks the trace, identity is exact") {
  Rng mat_rng(29);
  const int64_t n = 64;
  Tensor m_mat({n, n});
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < n; ++j)
      m_mat[i * n + j] = (i == j ? 1.0 : 0.0) + 0.1 * mat_rng.normal();
  double trace = 0.0;
  for (int64_t i = 0; i < n; ++i) trace += m_mat[i * n + i];

  auto linear = [&](const Tensor& v) {
    Tensor out({n});
    for (int64_t i = 0; i < n; ++i) {
      double acc = 0.0;
      for (int64_t j = 0; j < n; ++j) acc += m_mat[i * n + j] * v[j];
      out[i] = acc;
    }
    return out;
  };

  Rng rng(31);
  Rng urng(33);
  const Tensor u = demun::testing::random_tensor({n}, urng);
  const int probes = 2000;
  double mean = 0.0, sq = 0.0;
  for (int p = 0; p < probes; ++p) {
    const double est = divergence_probe(linear, u, 1e-3, rng);
    mean += est;
    sq += est * est;
  }
  mean /= probes;
  const double var = sq / probes - mean * mean;
  const double se = std::sqrt(var / probes);
  CHECK(std::abs(mean - trace) < 4.0 * se);

  // Identity map at u = 0 with a power-of-two eps: exactly n per probe.
  auto identity = [](const Tensor& v) { return v; };
  Rng rng2(35);
  for (int p = 0; p < 10; ++p) {
    const double est = divergence_probe(identity, Tensor({n}), 0x1.0p-10, rng2);
    CHECK(est == static_cast<double>(n));
  }
}

TEST_CASE("amp: zero projector leaves a plain residual in the z recursion") {
  const int64_t k = 6;
  OperatorPtr op = make_gaussian(12, k * k, 41);
  UnrollModel model = build_unroll_model(small_plan(Algorithm::kAmp, 2, k, 0, 3, false), 43);
  for (ProjectorParams& p : model.projectors) {
    p.output.weight.value.fill(0.0);
    p.output.bias.value.fill(0.0);
  }
  Rng rng(47);
  const Tensor y = random_tensor({1, op->m()}, rng);
  Graph g(Mode::kInference);
  Trajectory traj = run_unrolled(g, model, leaf(g, y), op, RunOptions{.probe_seed = 3});

  // All states are zero, the divergence is identically zero, so z^1 = y and
  // x~^1 = A^T y exactly.
  CHECK(max_abs_diff(traj.states[0].value(), Tensor({1, k * k})) == 0.0);
  for (double d : traj.onsager[0]) CHECK(d == 0.0);
  const Tensor aty = apply_adjoint_values(*op, y.reshaped({op->m()}));
  CHECK(max_abs_diff(traj.intermediates[1].value(), aty.reshaped({1, k * k})) == 0.0);
}

TEST_CASE("amp: frozen divergence values reproduce a recorded run") {
  const int64_t k = 6;
  OperatorPtr op = make_gaussian(12, k * k, 51);
  UnrollModel model = build_unroll_model(small_plan(Algorithm::kAmp, 3, k, 1, 3, true), 53);
  Rng rng(55);
  const Tensor y = random_tensor({2, op->m()}, rng);

  Graph g(Mode::kInference);
  Trajectory first = run_unrolled(g, model, leaf(g, y), op, RunOptions{.probe_seed = 57});
  Graph g2(Mode::kInference);
  RunOptions frozen;
  frozen.frozen_onsager = &first.onsager;
  Trajectory second = run_unrolled(g2, model, leaf(g2, y), op, frozen);
  for (size_t i = 0; i < first.states.size(); ++i)
    CHECK(max_abs_diff(first.states[i].value(), second.states[i].value()) == 0.0);
}

TEST_CASE("losses: hand arithmetic, interpolation identities, validation") {
  Graph g;
  Rng rng(61);
  const int64_t n = 10;
  const Tensor x_star_t = random_tensor({1, n}, rng);
  Var x_star = leaf(g, x_star_t);

  auto fake_traj = [&](const std::vector<double>& error_norms) {
    Trajectory traj;
    for (double target : error_norms) {
      Tensor state = x_star_t;
      state[0] += std::sqrt(target);  // ||state - x*||^2 == target
      traj.states.push_back(leaf(g, state));
    }
    return traj;
  };

  Trajectory two = fake_traj({4.0, 9.0});
  CHECK(loss_intermediate(two, x_star, 1.0).value()[0] == doctest::Approx(13.0).epsilon(1e-12));
  CHECK(loss_intermediate(two, x_star, 0.5).value()[0] == doctest::Approx(11.0).epsilon(1e-12));
  CHECK(loss_last_layer(two, x_star).value()[0] == doctest::Approx(9.0).epsilon(1e-12));

  Trajectory one = fake_traj({5.0});
  CHECK(loss_last_layer(one, x_star).value()[0] ==
        loss_intermediate(one, x_star, 0.37).value()[0]);

  // Exact interpolation identities on a random trajectory.
  std::vector<double> errors;
  for (int i = 0; i < 6; ++i) errors.push_back(rng.uniform(0.5, 2.0));
  Trajectory six = fake_traj(errors);
  CHECK(loss_skip(six, x_star, 6).value()[0] == loss_last_layer(six, x_star).value()[0]);
  CHECK(loss_skip(six, x_star, 1).value()[0] == loss_intermediate(six, x_star, 1.0).value()[0]);

  // skip_L = 3 at T = 15 sums exactly the states x^3, x^6, ..., x^15.
  std::vector<double> fifteen;
  for (int i = 1; i <= 15; ++i) fifteen.push_back(static_cast<double>(i));
  Trajectory t15 = fake_traj(fifteen);
  CHECK(loss_skip(t15, x_star, 3).value()[0] ==
        doctest::Approx(3.0 + 6.0 + 9.0 + 12.0 + 15.0).epsilon(1e-12));

  // Small omega approaches the last-layer loss when errors are O(1).
  const double near_ll = loss_intermediate(t15, x_star, 0.01).value()[0];
  const double ll = loss_last_layer(t15, x_star).value()[0];
  CHECK(std::abs(near_ll - ll) / ll < 0.02);

  CHECK_THROWS_AS(loss_intermediate(t15, x_star, 0.0), ConfigError);
  CHECK_THROWS_AS(loss_intermediate(t15, x_star, 1.5), ConfigError);
  CHECK_THROWS_AS(loss_skip(t15, x_star, 4), ConfigError);
}

TEST_CASE("loss ids: parse and round trip") {
  CHECK(LossSpec::parse("ll").family == LossSpec::Family::kLastLayer);
  CHECK(LossSpec::parse("iw:0.85").omega == doctest::Approx(0.85));
  CHECK(LossSpec::parse("skip:5").skip_L == 5);
  CHECK(LossSpec::parse("iw:1").id() == "iw:1");
  CHECK(LossSpec::parse("skip:3").id() == "skip:3");
  CHECK_THROWS_AS(LossSpec::parse("iw:2.0"), ConfigError);
  CHECK_THROWS_AS(LossSpec::parse("iw:0"), ConfigError);
  CHECK_THROWS_AS(LossSpec::parse("huber"), ConfigError);
  CHECK_THROWS_AS(LossSpec::parse("skip:0"), ConfigError);
}

TEST_CASE("algorithm ids: parse and round trip") {
  for (const std::string id : {"demun", "pgd", "nesterov", "amp"})
    CHECK(algorithm_id(parse_algorithm(id)) == id);
  CHECK_THROWS_AS(parse_algorithm("admm"), ConfigError);
}

TEST_CASE("trajectories stay finite over many random seeded runs") {
  const int64_t k = 4;
  const Algorithm algs[] = {Algorithm::kDemun, Algorithm::kPgd, Algorithm::kNesterov,
                            Algorithm::kAmp};
  int64_t runs = 0;
  for (uint64_t seed = 0; seed < 2500; ++seed) {
    for (int which = 0; which < 4; ++which, ++runs) {
      const uint64_t s = Rng::derive(seed, static_cast<uint64_t>(which));
      Rng rng(s);
      OperatorPtr op = (seed % 2 == 0) ? make_gaussian(6, k * k, s) : make_dct(k, 0.4, s);
      UnrollPlan plan = small_plan(algs[which], 3, k, 1, 2, seed % 3 == 0);
      UnrollModel model = build_unroll_model(plan, s);
      // Stress the weights a bit beyond their initialization.
      for (Parameter* p : model.trainable_params())
        for (int64_t i = 0; i < p->value.numel(); ++i) p->value[i] *= rng.uniform(0.5, 2.0);
      const Tensor y = random_tensor({1, op->m()}, rng);
      Graph g(seed % 2 == 0 ? Mode::kTraining : Mode::kInference, false);
      Trajectory traj = run_unrolled(g, model, leaf(g, y), op, RunOptions{.probe_seed = s});
      for (const Var& state : traj.states) CHECK(state.value().all_finite());
    }
  }
  CHECK(runs == 10000);
}
