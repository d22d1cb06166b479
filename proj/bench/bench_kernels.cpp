#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "spurmem/config.hpp"
#include "spurmem/data.hpp"
#include "spurmem/kernels.hpp"
#include "spurmem/tracing.hpp"
#include "spurmem/trainer.hpp"

namespace {

using namespace spurmem;

std::vector<double> filled(std::size_t n, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d;
  std::vector<double> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

template <auto Kernel>
void BM_matmul(benchmark::State& state) {
  const auto m = static_cast<std::size_t>(state.range(0)), k = static_cast<std::size_t>(state.range(1)),
             n = static_cast<std::size_t>(state.range(2));
  const auto a = filled(m * k, 1), b = filled(k * n, 2);
  std::vector<double> c(m * n);
  for (auto _ : state) {
    Kernel(a, b, c, m, k, n, false);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * m * k * n));
}

void shapes(benchmark::internal::Benchmark* b) {
  // Batch x layer widths seen in training, plus full-split evaluation.
  b->Args({128, 20, 64})->Args({128, 64, 32})->Args({5000, 20, 64})->Args({5000, 64, 32})->Args({512, 512, 512});
}

BENCHMARK(BM_matmul<kernels::serial::matmul>)->Name("matmul/serial")->Apply(shapes)->UseRealTime();
BENCHMARK(BM_matmul<kernels::parallel::matmul>)->Name("matmul/parallel")->Apply(shapes)->UseRealTime();
BENCHMARK(BM_matmul<kernels::serial::matmul_tn>)->Name("matmul_tn/serial")->Apply(shapes)->UseRealTime();
BENCHMARK(BM_matmul<kernels::parallel::matmul_tn>)->Name("matmul_tn/parallel")->Apply(shapes)->UseRealTime();

struct TraceFixture {
  DatasetSplits data;
  Model model;
  TraceFixture() : model(build_model(default_benchmark_config().model, 0)) {
    const auto cfg = default_benchmark_config();
    data = generate(cfg.data.groups, cfg.data.features, 0);
  }
};

const TraceFixture& fixture() {
  static const TraceFixture f;
  return f;
}

void BM_trace(benchmark::State& state) {
  const auto exec = state.range(0) ? Execution::kParallel : Execution::kSerial;
  const auto& f = fixture();
  TraceConfig tc;
  for (auto _ : state) benchmark::DoNotOptimize(unstructured_trace(f.model, f.data.train, tc, exec));
}
BENCHMARK(BM_trace)->ArgName("parallel")->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond)->UseRealTime();

}  // namespace

BENCHMARK_MAIN();
