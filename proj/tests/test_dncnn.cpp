#include <doctest.h>

#include <cmath>

#include "demun/dncnn.hpp"
#include "helpers.hpp"

using namespace demun;
using demun::testing::check_gradients;
using demun::testing::random_tensor;

namespace {

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.same_shape(b));
  double worst = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

}  // namespace

TEST_CASE("build_projector: layer stack matches the configured depth") {
  DnCNNConfig cfg{.depth_L = 3, .channels = 8, .kernel = 3, .image_k = 8};
  ProjectorParams p = build_projector(cfg, false, 1);
  CHECK(p.blocks.size() == 3);
  CHECK(p.input.weight.value.shape() == Shape{8, 1, 3, 3});
  CHECK(p.output.weight.value.shape() == Shape{1, 8, 3, 3});
  CHECK(p.output.bias.value.shape() == Shape{1});
  for (const MidBlock& b : p.blocks) {
    CHECK(b.conv.weight.value.shape() == Shape{8, 8, 3, 3});
    CHECK(b.bn.gamma.value[0] == 1.0);
    CHECK(b.bn.beta.value[0] == 0.0);
  }

  // Empty middle is still a valid projector.
  DnCNNConfig flat{.depth_L = 0, .channels = 4, .kernel = 3, .image_k = 6};
  ProjectorParams p0 = build_projector(flat, false, 2);
  CHECK(p0.blocks.empty());
  Graph g;
  Rng rng(5);
  Var out = project(g, p0, leaf(g, random_tensor({1, 1, 6, 6}, rng)));
  CHECK(out.shape() == Shape{1, 1, 6, 6});
}

TEST_CASE("build_projector: initialization is fan-in bounded and seeded") {
  DnCNNConfig cfg{.depth_L = 2, .channels = 8, .kernel = 3, .image_k = 8};
  ProjectorParams a = build_projector(cfg, false, 42);
  ProjectorParams b = build_projector(cfg, false, 42);
  ProjectorParams c = build_projector(cfg, false, 43);
  CHECK(max_abs_diff(a.input.weight.value, b.input.weight.value) == 0.0);
  CHECK(max_abs_diff(a.input.weight.value, c.input.weight.value) > 0.0);

  const double bound_in = std::sqrt(1.0 / 9.0);
  for (int64_t i = 0; i < a.input.weight.value.numel(); ++i)
    CHECK(std::abs(a.input.weight.value[i]) <= bound_in);
  const double bound_mid = std::sqrt(1.0 / (8.0 * 9.0));
  for (int64_t i = 0; i < a.blocks[0].conv.weight.value.numel(); ++i)
    CHECK(std::abs(a.blocks[0].conv.weight.value[i]) <= bound_mid);
}

TEST_CASE("projector parameter count: closed form equals buffer enumeration") {
  DnCNNConfig cfg{.depth_L = 5, .channels = 64, .kernel = 3, .image_k = 16};
  ProjectorParams p = build_projector(cfg, false, 7);
  std::vector<NamedTensor> named;
  collect_projector_tensors(p, "p", named);
  int64_t enumerated = 0;
  for (const NamedTensor& t : named)
    if (t.param != nullptr) enumerated += t.tensor->numel();
  CHECK(enumerated == projector_param_count(cfg));
  CHECK(projector_param_count(cfg) == 64 * 9 + 64 + 5 * (64 * 64 * 9 + 64 + 128) + 64 * 9 + 1);
}

TEST_CASE("project: residual wrapper is the identity for a zero core") {
  DnCNNConfig cfg{.depth_L = 1, .channels = 4, .kernel = 3, .image_k = 5};
  ProjectorParams p = build_projector(cfg, true, 3);
  p.output.weight.value.fill(0.0);
  p.output.bias.value.fill(0.0);
  Rng rng(9);
  const Tensor x = random_tensor({2, 1, 5, 5}, rng);
  Graph g(Mode::kTraining, false);
  Var out = project(g, p, leaf(g, x));
  CHECK(max_abs_diff(out.value(), x) == 0.0);

  // Without the residual flag the zero core returns exactly zero.
  ProjectorParams direct = build_projector(cfg, false, 3);
  direct.output.weight.value.fill(0.0);
  direct.output.bias.value.fill(0.0);
  Graph g2(Mode::kTraining, false);
  Var out2 = project(g2, direct, leaf(g2, x));
  CHECK(max_abs_diff(out2.value(), Tensor({2, 1, 5, 5})) == 0.0);
}

TEST_CASE("project: batched inference equals per-sample inference") {
  DnCNNConfig cfg{.depth_L = 2, .channels = 6, .kernel = 3, .image_k = 7};
  ProjectorParams p = build_projector(cfg, true, 11);
  Rng rng(13);
  const Tensor x = random_tensor({2, 1, 7, 7}, rng);

  Graph g(Mode::kInference);
  const Tensor batched = project(g, p, leaf(g, x)).value();

  for (int64_t b = 0; b < 2; ++b) {
    Tensor single({1, 1, 7, 7});
    for (int64_t i = 0; i < 49; ++i) single[i] = x[b * 49 + i];
    Graph gs(Mode::kInference);
    const Tensor out = project(gs, p, leaf(gs, single)).value();
    for (int64_t i = 0; i < 49; ++i) CHECK(std::abs(out[i] - batched[b * 49 + i]) < 1e-12);
  }
}

TEST_CASE("project: shape contract and mismatches") {
  DnCNNConfig cfg{.depth_L = 1, .channels = 4, .kernel = 3, .image_k = 8};
  ProjectorParams p = build_projector(cfg, false, 1);
  Graph g;
  Rng rng(1);
  CHECK_THROWS_AS(project(g, p, leaf(g, random_tensor({1, 1, 6, 6}, rng))), ShapeError);
  CHECK_THROWS_AS(project(g, p, leaf(g, random_tensor({1, 2, 8, 8}, rng))), ShapeError);
}

TEST_CASE("project: input gradient matches finite differences on 8x8") {
  DnCNNConfig cfg{.depth_L = 2, .channels = 4, .kernel = 3, .image_k = 8};
  ProjectorParams p = build_projector(cfg, true, 21);
  Rng rng(23);
  Parameter x(random_tensor({1, 1, 8, 8}, rng));
  const Tensor target = random_tensor({1, 1, 8, 8}, rng);

  std::vector<Parameter*> params{&x};
  auto backward_once = [&]() {
    Graph g(Mode::kTraining, false);
    g.backward(mse(project(g, p, param(g, x)), leaf(g, target)));
  };
  auto forward_value = [&]() {
    Graph g(Mode::kTraining, false);
    return mse(project(g, p, param(g, x)), leaf(g, target)).value()[0];
  };
  const auto result = check_gradients(params, backward_once, forward_value);
  INFO(result.worst);
  CHECK(result.ok);
}
