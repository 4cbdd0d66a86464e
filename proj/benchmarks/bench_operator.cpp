#include <benchmark/benchmark.h>

#include "demun/measurement.hpp"
#include "demun/rng.hpp"

namespace {

demun::Tensor random_vec(int64_t n, demun::Rng& rng) {
  demun::Tensor t({n});
  for (int64_t i = 0; i < n; ++i) t[i] = rng.uniform(-1, 1);
  return t;
}

void BM_GaussianApply(benchmark::State& state) {
  const int64_t k = state.range(0);
  const int64_t n = k * k;
  auto op = demun::make_gaussian(n * 4 / 10, n, 7);
  demun::Rng rng(3);
  const demun::Tensor x = random_vec(n, rng);
  demun::Tensor y({op->m()});
  for (auto _ : state) {
    op->apply(x.data(), y.data());
    benchmark::DoNotOptimize(y.data());
  }
}
BENCHMARK(BM_GaussianApply)->Arg(16)->Arg(50);

void BM_DctApply(benchmark::State& state) {
  const int64_t k = state.range(0);
  auto op = demun::make_dct(k, 0.4, 7);
  demun::Rng rng(3);
  const demun::Tensor x = random_vec(k * k, rng);
  demun::Tensor y({op->m()});
  for (auto _ : state) {
    op->apply(x.data(), y.data());
    benchmark::DoNotOptimize(y.data());
  }
}
BENCHMARK(BM_DctApply)->Arg(16)->Arg(50)->Arg(80);

}  // namespace
