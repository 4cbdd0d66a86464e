#include <benchmark/benchmark.h>

#include "demun/graph.hpp"
#include "demun/rng.hpp"

namespace {

demun::Tensor random_tensor(demun::Shape shape, demun::Rng& rng) {
  demun::Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(-1, 1);
  return t;
}

void BM_Conv2dForward(benchmark::State& state) {
  const int64_t b = state.range(0), c = state.range(1), k = state.range(2);
  demun::Rng rng(1);
  const demun::Tensor x = random_tensor({b, c, k, k}, rng);
  const demun::Tensor w = random_tensor({c, c, 3, 3}, rng);
  const demun::Tensor bias = random_tensor({c}, rng);
  for (auto _ : state) {
    demun::Graph g;
    auto y = demun::conv2d(demun::leaf(g, x), demun::leaf(g, w), demun::leaf(g, bias));
    benchmark::DoNotOptimize(y.value().data());
  }
  state.SetItemsProcessed(state.iterations() * b * c * c * k * k * 9);
}
BENCHMARK(BM_Conv2dForward)->Args({32, 16, 16})->Args({32, 64, 16})->Args({1, 64, 50});

void BM_Conv2dTrainStep(benchmark::State& state) {
  const int64_t b = state.range(0), c = state.range(1), k = state.range(2);
  demun::Rng rng(1);
  demun::Parameter w(random_tensor({c, c, 3, 3}, rng));
  demun::Parameter bias(random_tensor({c}, rng));
  const demun::Tensor x = random_tensor({b, c, k, k}, rng);
  const demun::Tensor target = random_tensor({b, c, k, k}, rng);
  for (auto _ : state) {
    w.zero_grad();
    bias.zero_grad();
    demun::Graph g;
    auto y = demun::conv2d(demun::leaf(g, x), demun::param(g, w), demun::param(g, bias));
    g.backward(demun::mse(y, demun::leaf(g, target)));
    benchmark::DoNotOptimize(w.grad.data());
  }
}
BENCHMARK(BM_Conv2dTrainStep)->Args({32, 16, 16})->Args({8, 64, 50});

}  // namespace
