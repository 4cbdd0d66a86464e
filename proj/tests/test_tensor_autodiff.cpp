#include <doctest.h>

#include <cmath>
#include <limits>

#include "demun/adam.hpp"
#include "demun/graph.hpp"
#include "helpers.hpp"

using namespace demun;
using demun::testing::check_gradients;
using demun::testing::random_tensor;

namespace {

// Direct six-nested-loop convolution, the independent oracle for conv2d.
Tensor conv_oracle(const Tensor& x, const Tensor& w, const Tensor& bias) {
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

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.same_shape(b));
  double worst = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

}  // namespace

TEST_CASE("conv2d: identity kernel reproduces the input") {
  Graph g;
  Rng rng(7);
  Var x = leaf(g, random_tensor({1, 1, 3, 3}, rng));
  Tensor w({1, 1, 3, 3});
  w.at4(0, 0, 1, 1) = 1.0;
  Var y = conv2d(x, leaf(g, w), leaf(g, Tensor({1})));
  CHECK(max_abs_diff(y.value(), x.value()) == 0.0);
}

TEST_CASE("conv2d: 1x1 kernel is scale plus shift") {
  Graph g;
  Var x = leaf(g, Tensor::from({1, 2, 3, 4}, {1, 1, 2, 2}));
  Var y = conv2d(x, leaf(g, Tensor::from({2}, {1, 1, 1, 1})),
                 leaf(g, Tensor::from({0.5}, {1})));
  const Tensor expected = Tensor::from({2.5, 4.5, 6.5, 8.5}, {1, 1, 2, 2});
  CHECK(max_abs_diff(y.value(), expected) == 0.0);
}

TEST_CASE("conv2d: matches the brute-force loop oracle") {
  Rng rng(42);
  const Tensor x = random_tensor({2, 3, 5, 5}, rng);
  const Tensor w = random_tensor({4, 3, 3, 3}, rng);
  const Tensor b = random_tensor({4}, rng);
  Graph g;
  Var y = conv2d(leaf(g, x), leaf(g, w), leaf(g, b));
  CHECK(max_abs_diff(y.value(), conv_oracle(x, w, b)) < 1e-12);
}

TEST_CASE("conv2d: shape mismatches raise") {
  Graph g;
  Rng rng(3);
  Var x = leaf(g, random_tensor({1, 2, 4, 4}, rng));
  CHECK_THROWS_AS(conv2d(x, leaf(g, random_tensor({4, 3, 3, 3}, rng)),
                         leaf(g, random_tensor({4}, rng))),
                  ShapeError);
  CHECK_THROWS_AS(conv2d(x, leaf(g, random_tensor({4, 2, 2, 2}, rng)),
                         leaf(g, random_tensor({4}, rng))),
                  ShapeError);
  CHECK_THROWS_AS(conv2d(x, leaf(g, random_tensor({4, 2, 3, 3}, rng)),
                         leaf(g, random_tensor({3}, rng))),
                  ShapeError);
}

TEST_CASE("batch_norm: near-identity on normalized input, exact beta at gamma=0") {
  Rng rng(11);
  // Build a tensor with exact per-channel zero mean and unit variance.
  Tensor x({2, 1, 1, 2});
  x[0] = -1;
  x[1] = 1;
  x[2] = 1;
  x[3] = -1;
  BatchNormStats stats(1);
  {
    Graph g(Mode::kTraining);
    Var y = batch_norm(leaf(g, x), leaf(g, Tensor::full({1}, 1.0)), leaf(g, Tensor({1})), stats);
    CHECK(max_abs_diff(y.value(), x) < 1e-4);  // shrunk only by eps
  }
  {
    Graph g(Mode::kTraining);
    BatchNormStats s2(3);
    Var y = batch_norm(leaf(g, random_tensor({2, 3, 2, 2}, rng)), leaf(g, Tensor({3})),
                       leaf(g, Tensor::from({0.5, -1, 2}, {3})), s2);
    for (int64_t b = 0; b < 2; ++b)
      for (int64_t c = 0; c < 3; ++c)
        for (int64_t i = 0; i < 2; ++i)
          for (int64_t j = 0; j < 2; ++j)
            CHECK(y.value().at4(b, c, i, j) == Tensor::from({0.5, -1, 2}, {3})[c]);
  }
}

TEST_CASE("batch_norm: output statistics match a direct recomputation") {
  Rng rng(19);
  Tensor x = random_tensor({4, 2, 3, 3}, rng, -25.0, 25.0);  // variance >> eps
  BatchNormStats stats(2);
  Graph g(Mode::kTraining);
  Var y = batch_norm(leaf(g, x), leaf(g, Tensor::full({2}, 1.0)), leaf(g, Tensor({2})), stats);
  const int64_t n = 4 * 3 * 3;
  for (int64_t c = 0; c < 2; ++c) {
    double mean = 0.0, var = 0.0;
    for (int64_t b = 0; b < 4; ++b)
      for (int64_t i = 0; i < 3; ++i)
        for (int64_t j = 0; j < 3; ++j) mean += y.value().at4(b, c, i, j);
    mean /= n;
    for (int64_t b = 0; b < 4; ++b)
      for (int64_t i = 0; i < 3; ++i)
        for (int64_t j = 0; j < 3; ++j) {
          const double d = y.value().at4(b, c, i, j) - mean;
          var += d * d;
        }
    var /= n;
    CHECK(std::abs(mean) < 1e-10);
    CHECK(std::abs(var - 1.0) < 1e-6);
  }
}

TEST_CASE("batch_norm: degenerate training batch raises") {
  Graph g(Mode::kTraining);
  BatchNormStats stats(1);
  Var x = leaf(g, Tensor::full({1, 1, 1, 1}, 2.0));
  CHECK_THROWS_AS(batch_norm(x, leaf(g, Tensor::full({1}, 1.0)), leaf(g, Tensor({1})), stats),
                  NumericError);
}

TEST_CASE("batch_norm: running stats update and drive inference mode") {
  Tensor x({1, 1, 1, 4});
  x[0] = 1;
  x[1] = 3;
  x[2] = 5;
  x[3] = 7;  // mean 4, biased var 5, unbiased 20/3
  BatchNormStats stats(1);
  {
    Graph g(Mode::kTraining);
    batch_norm(leaf(g, x), leaf(g, Tensor::full({1}, 1.0)), leaf(g, Tensor({1})), stats);
  }
  CHECK(stats.running_mean[0] == doctest::Approx(0.9 * 0.0 + 0.1 * 4.0).epsilon(1e-12));
  CHECK(stats.running_var[0] == doctest::Approx(0.9 * 1.0 + 0.1 * (20.0 / 3.0)).epsilon(1e-12));
  {
    Graph g(Mode::kInference);
    Var y = batch_norm(leaf(g, x), leaf(g, Tensor::full({1}, 1.0)), leaf(g, Tensor({1})), stats);
    const double expected = (1.0 - stats.running_mean[0]) / std::sqrt(stats.running_var[0] + 1e-5);
    CHECK(y.value()[0] == doctest::Approx(expected).epsilon(1e-12));
  }
}

TEST_CASE("relu: clamping and elementwise identity property") {
  Graph g;
  Var a = relu(leaf(g, Tensor::from({-1, 0, 2}, {3})));
  CHECK(a.value()[0] == 0.0);
  CHECK(a.value()[1] == 0.0);
  CHECK(a.value()[2] == 2.0);

  Rng rng(5);
  const Tensor x = random_tensor({64}, rng);
  Var pos = relu(leaf(g, x));
  Tensor neg_in = x;
  for (int64_t i = 0; i < neg_in.numel(); ++i) neg_in[i] = -neg_in[i];
  Var neg = relu(leaf(g, neg_in));
  for (int64_t i = 0; i < x.numel(); ++i)
    CHECK(pos.value()[i] + neg.value()[i] == std::abs(x[i]));
}

TEST_CASE("relu: all-negative input has zero output and zero gradient") {
  Graph g;
  Parameter p(Tensor::from({-1, -2, -3}, {3}));
  Var y = relu(param(g, p));
  Var loss = mse(y, leaf(g, Tensor({3})));
  CHECK(loss.value()[0] == 0.0);
  g.backward(loss);
  for (int64_t i = 0; i < 3; ++i) CHECK(p.grad[i] == 0.0);
}

TEST_CASE("matvec: identity, hand arithmetic, and A^T A oracle") {
  Graph g;
  Tensor eye({3, 3});
  for (int64_t i = 0; i < 3; ++i) eye[i * 3 + i] = 1.0;
  Var x = leaf(g, Tensor::from({1, 2, 3}, {3}));
  CHECK(max_abs_diff(matvec(eye, x).value(), x.value()) == 0.0);

  const Tensor a = Tensor::from({1, 0, 0, 2, 1, 1}, {3, 2});
  Var v = leaf(g, Tensor::from({3, 4}, {2}));
  const Tensor got = matvec(a, v).value();
  CHECK(got[0] == 3.0);
  CHECK(got[1] == 8.0);
  CHECK(got[2] == 7.0);

  Rng rng(23);
  const Tensor a2 = random_tensor({7, 5}, rng);
  const Tensor xv = random_tensor({5}, rng);
  Var xt = leaf(g, xv);
  const Tensor ata_x = matvec_t(a2, matvec(a2, xt)).value();
  Tensor oracle({5});
  for (int64_t i = 0; i < 5; ++i)
    for (int64_t j = 0; j < 5; ++j) {
      double entry = 0.0;
      for (int64_t r = 0; r < 7; ++r) entry += a2[r * 5 + i] * a2[r * 5 + j];
      oracle[i] += entry * xv[j];
    }
  CHECK(max_abs_diff(ata_x, oracle) < 1e-12);

  CHECK_THROWS_AS(matvec(a2, leaf(g, random_tensor({4}, rng))), ShapeError);
}

TEST_CASE("mse: trivial values and loop oracle") {
  Graph g;
  Rng rng(31);
  const Tensor a = random_tensor({17}, rng);
  CHECK(mse(leaf(g, a), leaf(g, a)).value()[0] == 0.0);

  Var v = mse(leaf(g, Tensor::from({1, 2}, {2})), leaf(g, Tensor::from({0, 0}, {2})));
  CHECK(v.value()[0] == 5.0);

  const Tensor b = random_tensor({17}, rng);
  double oracle = 0.0;
  for (int64_t i = 0; i < 17; ++i) oracle += (a[i] - b[i]) * (a[i] - b[i]);
  CHECK(std::abs(mse(leaf(g, a), leaf(g, b)).value()[0] - oracle) < 1e-12);

  CHECK_THROWS_AS(mse(leaf(g, a), leaf(g, random_tensor({5}, rng))), ShapeError);
}

TEST_CASE("backward: quadratic gradient and unreachable parameters") {
  Parameter x(Tensor::from({3}, {1}));
  Parameter unused(Tensor::from({5}, {1}));
  Graph g;
  Var loss = mse(param(g, x), leaf(g, Tensor({1})));
  param(g, unused);  // on the tape but not part of the loss
  g.backward(loss);
  CHECK(x.grad[0] == 6.0);
  CHECK(unused.grad[0] == 0.0);
}

TEST_CASE("backward: repeated calls accumulate parameter gradients") {
  Parameter x(Tensor::from({3}, {1}));
  Graph g;
  Var loss = mse(param(g, x), leaf(g, Tensor({1})));
  g.backward(loss);
  g.backward(loss);
  CHECK(x.grad[0] == 12.0);
}

TEST_CASE("backward: scaling the loss scales the gradients") {
  Rng rng(77);
  Parameter w(random_tensor({2, 1, 3, 3}, rng));
  Parameter b(random_tensor({2}, rng));
  const Tensor x = random_tensor({1, 1, 4, 4}, rng);
  const Tensor target = random_tensor({1, 2, 4, 4}, rng);

  auto grads_for = [&](double alpha) {
    w.zero_grad();
    b.zero_grad();
    Graph g;
    Var loss = mse(conv2d(leaf(g, x), param(g, w), param(g, b)), leaf(g, target));
    if (alpha != 1.0) loss = scale_const(loss, alpha);
    g.backward(loss);
    return std::pair<Tensor, Tensor>(w.grad, b.grad);
  };
  const auto [gw1, gb1] = grads_for(1.0);
  const auto [gw2, gb2] = grads_for(2.0);
  for (int64_t i = 0; i < gw1.numel(); ++i) CHECK(gw2[i] == 2.0 * gw1[i]);
  for (int64_t i = 0; i < gb1.numel(); ++i) CHECK(gb2[i] == 2.0 * gb1[i]);

  const auto [gw3, gb3] = grads_for(1.7);
  for (int64_t i = 0; i < gw1.numel(); ++i)
    CHECK(gw3[i] == doctest::Approx(1.7 * gw1[i]).epsilon(1e-12));
}

TEST_CASE("backward: non-scalar loss and non-finite inputs raise") {
  Graph g;
  Var v = leaf(g, Tensor::from({1, 2}, {2}));
  CHECK_THROWS_AS(g.backward(v), ShapeError);

  Tensor bad({2});
  bad[0] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(leaf(g, bad), NumericError);  // rejected on entry

  // Finite inputs that overflow an op are caught at that op.
  Tensor huge({2});
  huge[0] = 1e308;
  huge[1] = 1e308;
  Var h = leaf(g, huge);
  CHECK_THROWS_AS(mse(h, scale_const(h, -1.0)), NumericError);
}

TEST_CASE("gradient check: composite conv/bn/relu/matvec/mse graph") {
  Rng rng(123);
  Parameter w(random_tensor({2, 1, 3, 3}, rng, -0.5, 0.5));
  Parameter b(random_tensor({2}, rng, -0.5, 0.5));
  Parameter gamma(random_tensor({2}, rng, 0.5, 1.5));
  Parameter beta(random_tensor({2}, rng, -0.5, 0.5));
  Parameter x(random_tensor({2, 1, 4, 4}, rng));
  const Tensor a = random_tensor({3, 32}, rng);
  const Tensor branch_target = random_tensor({3}, rng);
  const Tensor flat_target = random_tensor({2, 32}, rng);
  BatchNormStats stats(2);

  // conv -> bn -> relu -> mse, plus a matvec branch straight off x.
  auto build_loss = [&](Graph& g) {
    Var h = relu(batch_norm(conv2d(param(g, x), param(g, w), param(g, b)), param(g, gamma),
                            param(g, beta), stats));
    Var main = mse(reshape(h, {2, 32}), leaf(g, flat_target));
    Var branch = mse(matvec(a, reshape(param(g, x), {32})), leaf(g, branch_target));
    return add(main, branch);
  };

  std::vector<Parameter*> params{&w, &b, &gamma, &beta, &x};
  auto backward_once = [&]() {
    Graph g(Mode::kTraining, false);
    g.backward(build_loss(g));
  };
  auto forward_value = [&]() {
    Graph g(Mode::kTraining, false);
    return build_loss(g).value()[0];
  };
  const auto result = check_gradients(params, backward_once, forward_value);
  INFO(result.worst);
  CHECK(result.ok);
  CHECK(result.checked == w.numel() + b.numel() + gamma.numel() + beta.numel() + x.numel());
}

TEST_CASE("adam: zero gradient leaves parameters fixed, unit step is lr-sized") {
  Parameter p(Tensor::from({1.5}, {1}));
  std::vector<Parameter*> params{&p};
  AdamState state = adam_init(params, 0.1);
  p.zero_grad();
  adam_step(state, params);
  CHECK(p.value[0] == 1.5);
  CHECK(state.t == 1);

  Parameter q(Tensor::from({1.0}, {1}));
  std::vector<Parameter*> qp{&q};
  AdamState qs = adam_init(qp, 0.1);
  q.grad[0] = 1.0;
  adam_step(qs, qp);
  // Bias correction makes the first step lr / (1 + eps) regardless of g scale.
  CHECK(q.value[0] == doctest::Approx(1.0 - 0.1).epsilon(1e-7));
}

TEST_CASE("adam: identical seeds give bit-identical trajectories") {
  auto run = [&]() {
    Rng rng(99);
    Parameter w(random_tensor({8}, rng));
    std::vector<Parameter*> params{&w};
    AdamState state = adam_init(params, 1e-2);
    const Tensor target = random_tensor({8}, rng);
    for (int step = 0; step < 25; ++step) {
      w.zero_grad();
      Graph g;
      Var loss = mse(param(g, w), leaf(g, target));
      g.backward(loss);
      adam_step(state, params);
    }
    return w.value;
  };
  const Tensor a = run();
  const Tensor b = run();
  for (int64_t i = 0; i < a.numel(); ++i) CHECK(a[i] == b[i]);
}
