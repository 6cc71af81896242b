#include <benchmark/benchmark.h>

#include "moekit/es_ops.hpp"
#include "moekit/random.hpp"
#include "moekit/routing.hpp"

using namespace moekit;

namespace {

struct OpFixture {
  Matrix2D x;
  Matrix2D g;
  Tensor3D w;
  Tensor3D w_t;
  Matrix2D b;
  ReIndex rx;
};

OpFixture make_fixture(std::size_t n, std::size_t experts, std::size_t d,
                       std::size_t blk) {
  Rng rng(7);
  OpFixture f{random_matrix(n, d, rng),
              random_matrix(n, d, rng),
              random_tensor(experts, d, d, rng),
              Tensor3D{},
              random_matrix(experts, d, rng),
              {}};
  f.w_t = transpose_experts(f.w);
  const RoutingChoice r =
      synthesize_routing(n, experts, 1, RoutingDistribution::uniform(), 11);
  f.rx = build_reindex(r.assignments[0], experts, blk);
  return f;
}

}  // namespace

static void BM_Esmm(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto d = static_cast<std::size_t>(state.range(1));
  const OpFixture f = make_fixture(n, 8, d, 8);
  for (auto _ : state) {
    benchmark::DoNotOptimize(esmm(f.x, f.w, &f.b, f.rx));
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations()) *
                          static_cast<std::int64_t>(n * d * d));
}
BENCHMARK(BM_Esmm)->Args({256, 64})->Args({1024, 64})->Args({1024, 128});

static void BM_Ess(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto d = static_cast<std::size_t>(state.range(1));
  const OpFixture f = make_fixture(n, 8, d, 8);
  for (auto _ : state) {
    benchmark::DoNotOptimize(ess(f.x, f.rx));
  }
}
BENCHMARK(BM_Ess)->Args({1024, 64})->Args({4096, 128});

static void BM_Estmm(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto d = static_cast<std::size_t>(state.range(1));
  const OpFixture f = make_fixture(n, 8, d, 8);
  for (auto _ : state) {
    benchmark::DoNotOptimize(estmm(f.x, f.g, f.rx));
  }
}
BENCHMARK(BM_Estmm)->Args({256, 64})->Args({1024, 64});

static void BM_Esfk(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto d = static_cast<std::size_t>(state.range(1));
  const OpFixture f = make_fixture(n, 8, d, 8);
  for (auto _ : state) {
    benchmark::DoNotOptimize(esfk(f.x, f.g, f.w_t, f.rx));
  }
}
BENCHMARK(BM_Esfk)->Args({256, 64})->Args({1024, 64});

static void BM_EsfkUnfused(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto d = static_cast<std::size_t>(state.range(1));
  const OpFixture f = make_fixture(n, 8, d, 8);
  for (auto _ : state) {
    benchmark::DoNotOptimize(esmm(f.g, f.w_t, nullptr, f.rx));
    benchmark::DoNotOptimize(ess(f.g, f.rx));
    benchmark::DoNotOptimize(estmm(f.x, f.g, f.rx));
  }
}
BENCHMARK(BM_EsfkUnfused)->Args({256, 64})->Args({1024, 64});

BENCHMARK_MAIN();
