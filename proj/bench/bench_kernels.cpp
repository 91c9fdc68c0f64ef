// SPDX-License-Identifier: Apache-2.0
// Serial reference kernels vs. their OpenMP counterparts.
#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "gtrelax/kernels.hpp"
#include "gtrelax/paths.hpp"

namespace {

using gtrelax::kernels::Trans;

std::vector<double> random_vec(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

template <auto Kernel>
void BM_gemm(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random_vec(n * n, 1);
  const auto b = random_vec(n * n, 2);
  std::vector<double> c(n * n);
  for (auto _ : state) {
    std::fill(c.begin(), c.end(), 0.0);
    Kernel(Trans::no, Trans::no, n, n, n, a.data(), b.data(), c.data());
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n * n));
}

// Dijkstra from every source on a random weighted graph with ~8 neighbours
// per node.
template <auto Apsp>
void BM_apsp(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  gtrelax::Matrix a(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (u(rng) < 8.0 / static_cast<double>(n)) a(i, j) = a(j, i) = 0.05 + 0.95 * u(rng);
  const auto r = gtrelax::paths::reciprocal_weights(a);
  for (auto _ : state) {
    auto res = Apsp(r);
    benchmark::DoNotOptimize(res.dist.data.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n));
}

}  // namespace

BENCHMARK(BM_gemm<gtrelax::kernels::gemm_serial>)->Name("gemm/serial")->RangeMultiplier(2)->Range(32, 256);
BENCHMARK(BM_gemm<gtrelax::kernels::gemm_omp>)->Name("gemm/omp")->RangeMultiplier(2)->Range(32, 256);

BENCHMARK(BM_apsp<gtrelax::paths::all_pairs_shortest_serial>)->Name("apsp/serial")->RangeMultiplier(2)->Range(32, 256);
BENCHMARK(BM_apsp<gtrelax::paths::all_pairs_shortest>)->Name("apsp/omp")->RangeMultiplier(2)->Range(32, 256);

BENCHMARK_MAIN();
