#include <benchmark/benchmark.h>

#include "demun/unroll.hpp"

namespace {

void BM_UnrolledForwardBackward(benchmark::State& state) {
  const int64_t k = 16, batch = state.range(0), steps = state.range(1);
  auto op = demun::make_gaussian(102, k * k, 7);
  demun::UnrollPlan plan;
  plan.algorithm = demun::Algorithm::kDemun;
  plan.steps = steps;
  plan.residual = true;
  plan.projector = demun::DnCNNConfig{.depth_L = 2, .channels = 16, .kernel = 3, .image_k = k};
  demun::UnrollModel model = demun::build_unroll_model(plan, 5);

  demun::Rng rng(9);
  demun::Tensor y({batch, op->m()});
  demun::Tensor x_star({batch, op->n()});
  for (int64_t i = 0; i < y.numel(); ++i) y[i] = rng.uniform(-1, 1);
  for (int64_t i = 0; i < x_star.numel(); ++i) x_star[i] = rng.uniform(0, 1);

  auto params = model.trainable_params();
  for (auto _ : state) {
    for (auto* p : params) p->zero_grad();
    demun::Graph g(demun::Mode::kTraining, false);
    demun::Trajectory traj = demun::run_unrolled(g, model, demun::leaf(g, y), op);
    g.backward(demun::loss_intermediate(traj, demun::leaf(g, x_star), 1.0));
    benchmark::DoNotOptimize(params.front()->grad.data());
  }
}
BENCHMARK(BM_UnrolledForwardBackward)->Args({32, 5})->Args({8, 15});

}  // namespace
