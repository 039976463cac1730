// Serial reference kernels against their OpenMP counterparts at the shapes the
// models use (batch of 64 examples x 4 stimuli).

#include <vector>

#include <benchmark/benchmark.h>

#include "compostruct/kernels.hpp"
#include "compostruct/rng.hpp"

using namespace compostruct;
using namespace compostruct::kernels;

namespace {

std::vector<double> random_values(std::size_t n, std::uint64_t seed, double density = 1.0) {
  Rng rng(seed);
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform() < density ? rng.uniform(-1.0, 1.0) : 0.0;
  return v;
}

template <auto Kernel>
void gemm_nn(benchmark::State& state) {
  const std::size_t m = 256, k = static_cast<std::size_t>(state.range(0)), n = static_cast<std::size_t>(state.range(1));
  // First-layer inputs are sparse rasters.
  const auto a = random_values(m * k, 1, k == 1024 ? 0.1 : 1.0);
  const auto b = random_values(k * n, 2);
  std::vector<double> c(m * n);
  for (auto _ : state) {
    Kernel({a.data(), m, k}, {b.data(), k, n}, {c.data(), m, n});
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * m * k * n));
}

template <auto Kernel>
void gemm_nt(benchmark::State& state) {
  const std::size_t m = 256, k = static_cast<std::size_t>(state.range(1)), n = static_cast<std::size_t>(state.range(0));
  const auto a = random_values(m * k, 3);
  const auto b = random_values(n * k, 4);
  std::vector<double> c(m * n);
  for (auto _ : state) {
    Kernel({a.data(), m, k}, {b.data(), n, k}, {c.data(), m, n});
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * m * k * n));
}

template <auto Kernel>
void gemm_tn(benchmark::State& state) {
  const std::size_t m = 256, k = static_cast<std::size_t>(state.range(0)), n = static_cast<std::size_t>(state.range(1));
  const auto a = random_values(m * k, 5);
  const auto b = random_values(m * n, 6);
  std::vector<double> c(k * n);
  for (auto _ : state) {
    Kernel({a.data(), m, k}, {b.data(), m, n}, {c.data(), k, n});
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * m * k * n));
}

template <auto Kernel>
void soft_mask_bench(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto w = random_values(n, 7), s = random_values(n, 8);
  std::vector<double> gate(n), out(n);
  for (auto _ : state) {
    Kernel(w, s, 50.0, gate, out);
    benchmark::DoNotOptimize(out.data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * n));
}

template <auto Kernel>
void logits_bench(benchmark::State& state) {
  const std::size_t rows = 256, d = 32;
  const auto e = random_values(rows * d, 9);
  std::vector<double> logits(rows);
  for (auto _ : state) {
    Kernel({e.data(), rows, d}, 4, logits);
    benchmark::DoNotOptimize(logits.data());
  }
}

}  // namespace

BENCHMARK(gemm_nn<serial::gemm_nn_acc>)->Name("gemm_nn/serial")->Args({1024, 256})->Args({256, 128});
BENCHMARK(gemm_nn<omp::gemm_nn_acc>)->Name("gemm_nn/omp")->Args({1024, 256})->Args({256, 128});
BENCHMARK(gemm_nt<serial::gemm_nt_acc>)->Name("gemm_nt/serial")->Args({1024, 256})->Args({256, 128});
BENCHMARK(gemm_nt<omp::gemm_nt_acc>)->Name("gemm_nt/omp")->Args({1024, 256})->Args({256, 128});
BENCHMARK(gemm_tn<serial::gemm_tn_acc>)->Name("gemm_tn/serial")->Args({1024, 256})->Args({256, 128});
BENCHMARK(gemm_tn<omp::gemm_tn_acc>)->Name("gemm_tn/omp")->Args({1024, 256})->Args({256, 128});
BENCHMARK(soft_mask_bench<serial::soft_mask>)->Name("soft_mask/serial")->Arg(262144);
BENCHMARK(soft_mask_bench<omp::soft_mask>)->Name("soft_mask/omp")->Arg(262144);
BENCHMARK(logits_bench<serial::odd_one_out_logits>)->Name("odd_one_out_logits/serial");
BENCHMARK(logits_bench<omp::odd_one_out_logits>)->Name("odd_one_out_logits/omp");

BENCHMARK_MAIN();
