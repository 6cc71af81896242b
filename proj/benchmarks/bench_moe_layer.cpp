#include <benchmark/benchmark.h>

#include "moekit/gemm_oracle.hpp"
#include "moekit/moe_layer.hpp"
#include "moekit/random.hpp"

using namespace moekit;

namespace {

struct LayerFixture {
  MoeLayerParams params;
  Matrix2D x;
  Matrix2D g_y;
  RoutingChoice routing;
};

LayerFixture make_fixture(std::size_t n, std::size_t experts, std::size_t k,
                          std::size_t d, std::size_t hidden) {
  Rng rng(13);
  LayerFixture f{
      make_random_params(experts, d, hidden, d, ActivationKind::kGelu, rng),
      random_matrix(n, d, rng), random_matrix(n, d, rng),
      synthesize_routing(n, experts, k, RoutingDistribution::uniform(), 17)};
  return f;
}

}  // namespace

static void BM_MoeForward(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto k = static_cast<std::size_t>(state.range(1));
  const bool naive = state.range(2) != 0;
  const LayerFixture f = make_fixture(n, 8, k, 64, 256);
  const MoeScheme scheme = naive ? MoeScheme::kNaive : MoeScheme::kMemoryEfficient;
  for (auto _ : state) {
    benchmark::DoNotOptimize(moe_forward(f.x, f.params, f.routing, 8, scheme));
  }
}
BENCHMARK(BM_MoeForward)
    ->Args({256, 1, 0})
    ->Args({256, 2, 0})
    ->Args({256, 2, 1})
    ->Args({256, 4, 0});

static void BM_MoeBackward(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const bool fused = state.range(1) != 0;
  const LayerFixture f = make_fixture(n, 8, 2, 64, 256);
  const MoeForwardResult fw =
      moe_forward(f.x, f.params, f.routing, 8, MoeScheme::kMemoryEfficient);
  for (auto _ : state) {
    benchmark::DoNotOptimize(moe_backward(fw.stash, f.params, f.g_y, fused));
  }
}
BENCHMARK(BM_MoeBackward)->Args({256, 0})->Args({256, 1});

static void BM_OracleForward(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const LayerFixture f = make_fixture(n, 8, 2, 64, 256);
  for (auto _ : state) {
    benchmark::DoNotOptimize(oracle_forward(f.x, f.params, f.routing));
  }
}
BENCHMARK(BM_OracleForward)->Arg(256);

BENCHMARK_MAIN();
