#include <filesystem>
#include <fstream>

#include <doctest.h>

#include "moekit/dist_sim.hpp"
#include "moekit/random.hpp"

using namespace moekit;

namespace {

std::vector<DeviceSpec> homogeneous(std::size_t n, double rate = 1e9,
                                    double bw = 1e8, double lat = 1e-4) {
  std::vector<DeviceSpec> devs;
  for (std::size_t d = 0; d < n; ++d) {
    devs.push_back({static_cast<int>(d), rate, bw, lat});
  }
  return devs;
}

struct DistInstance {
  MoeLayerParams params;
  std::vector<Matrix2D> x;
  std::vector<RoutingChoice> routing;
  std::vector<Matrix2D> gy;
  Matrix2D global_x;
  RoutingChoice global_routing;
  Matrix2D global_gy;
};

DistInstance make_instance(const std::vector<std::size_t>& batches,
                           std::size_t experts, std::size_t k, std::size_t din,
                           std::size_t hidden, std::size_t dout,
                           std::uint64_t seed) {
  DistInstance in;
  Rng rng(seed);
  in.params = make_random_params(experts, din, hidden, dout,
                                 ActivationKind::kGelu, rng);
  std::size_t total = 0;
  for (std::size_t b : batches) total += b;
  in.global_routing =
      synthesize_routing(total, experts, k, RoutingDistribution::uniform(), seed);
  in.global_x = random_matrix(total, din, rng);
  in.global_gy = random_matrix(total, dout, rng);

  std::size_t at = 0;
  for (std::size_t b : batches) {
    Matrix2D x(b, din), gy(b, dout);
    RoutingChoice r{b, experts, k, {}};
    r.assignments.assign(k, std::vector<std::int32_t>(b));
    for (std::size_t t = 0; t < b; ++t) {
      for (std::size_t j = 0; j < din; ++j) x.at(t, j) = in.global_x.at(at + t, j);
      for (std::size_t j = 0; j < dout; ++j) gy.at(t, j) = in.global_gy.at(at + t, j);
      for (std::size_t i = 0; i < k; ++i) {
        r.assignments[i][t] = in.global_routing.assignments[i][at + t];
      }
    }
    at += b;
    in.x.push_back(std::move(x));
    in.routing.push_back(std::move(r));
    in.gy.push_back(std::move(gy));
  }
  return in;
}

double grads_delta(const MoeGrads& a, const MoeGrads& b) {
  double d = 0.0;
  d = std::max(d, max_abs_diff(a.gw1, b.gw1) / (1.0 + max_abs(b.gw1)));
  d = std::max(d, max_abs_diff(a.gb1, b.gb1) / (1.0 + max_abs(b.gb1)));
  d = std::max(d, max_abs_diff(a.gw2, b.gw2) / (1.0 + max_abs(b.gw2)));
  d = std::max(d, max_abs_diff(a.gb2, b.gb2) / (1.0 + max_abs(b.gb2)));
  d = std::max(d, max_abs_diff(a.gx, b.gx) / (1.0 + max_abs(b.gx)));
  return d;
}

std::vector<PipelineSharedCache> caches_for(const ShardedParams& s) {
  return std::vector<PipelineSharedCache>(
      s.n_devices(), PipelineSharedCache(s.full_param_elements()));
}

}  // namespace

TEST_CASE("shard_params slices the hidden dimension exactly") {
  Rng rng(71);
  const MoeLayerParams p =
      make_random_params(2, 3, 4, 2, ActivationKind::kGelu, rng);
  const ShardedParams s = shard_params(p, {2, 2});
  REQUIRE(s.shards.size() == 2);
  for (std::size_t e = 0; e < 2; ++e) {
    for (std::size_t i = 0; i < 3; ++i) {
      CHECK(s.shards[0].w1.at(e, i, 0) == p.w1.at(e, i, 0));
      CHECK(s.shards[0].w1.at(e, i, 1) == p.w1.at(e, i, 1));
      CHECK(s.shards[1].w1.at(e, i, 0) == p.w1.at(e, i, 2));
      CHECK(s.shards[1].w1.at(e, i, 1) == p.w1.at(e, i, 3));
    }
  }

  const ShardedParams whole = shard_params(p, {4});
  CHECK(whole.shards[0].w1 == p.w1);
  CHECK(whole.shards[0].b1 == p.b1);
  CHECK(whole.shards[0].w2 == p.w2);

  const ShardedParams uneven = shard_params(p, {3, 1});
  const MoeLayerParams back = unshard_params(uneven);
  CHECK(back.w1 == p.w1);
  CHECK(back.b1 == p.b1);
  CHECK(back.w2 == p.w2);
  CHECK(back.b2 == p.b2);

  CHECK_THROWS_AS(shard_params(p, {2, 3}), std::invalid_argument);
  CHECK_THROWS_AS(shard_params(p, {}), std::invalid_argument);
  CHECK_THROWS_AS(shard_params(p, {4, 0}), std::invalid_argument);
}

TEST_CASE("a device with a zero batch share idles through the run") {
  DistInstance in = make_instance({7, 0}, 3, 2, 4, 6, 4, 306);
  const ShardedParams shards = shard_params(in.params, {3, 3});
  auto caches = caches_for(shards);
  const DistRunResult dc = run_data_centric(in.x, shards, caches, in.routing,
                                            in.gy, homogeneous(2), {});
  const MoeForwardResult ref = moe_forward(in.global_x, in.params,
                                           in.global_routing, 8,
                                           MoeScheme::kMemoryEfficient);
  const MoeGrads ref_grads = moe_backward(ref.stash, in.params, in.global_gy);
  CHECK(max_abs_diff(dc.y, ref.y) <= 1e-10 * (1.0 + max_abs(ref.y)));
  CHECK(grads_delta(dc.grads, ref_grads) <= 1e-10);
  CHECK(dc.report.device_compute_seconds[1] == 0.0);
}

TEST_CASE("collectives reduce and gather deterministically") {
  const std::vector<std::vector<double>> vals = {{1}, {2}, {3}};
  CHECK(all_reduce_sum(vals) == std::vector<double>{6});

  const std::vector<Matrix2D> rows = {Matrix2D(1, 2, {1, 2}),
                                      Matrix2D(2, 2, {3, 4, 5, 6})};
  const Matrix2D gathered = all_gather_rows(rows);
  CHECK(gathered.rows() == 3);
  CHECK(gathered.at(0, 0) == 1.0);
  CHECK(gathered.at(2, 1) == 6.0);

  // repeated reduction is bit-identical
  Rng rng(72);
  std::vector<Matrix2D> ms;
  for (int i = 0; i < 4; ++i) ms.push_back(random_matrix(3, 3, rng));
  CHECK(all_reduce_sum(ms) == all_reduce_sum(ms));

  CHECK_THROWS_AS(all_gather_rows({Matrix2D(1, 2), Matrix2D(1, 3)}), ShapeError);
  CHECK_THROWS_AS(all_reduce_sum(std::vector<Matrix2D>{Matrix2D(1, 2), Matrix2D(2, 2)}),
                  ShapeError);
}

TEST_CASE("collective_seconds follows latency + volume over min bandwidth") {
  const auto devs = homogeneous(2, 1e9, 1e6, 1e-3);
  CHECK(collective_seconds(1000, devs) == doctest::Approx(1e-3 + 1e-3));
  CHECK(collective_seconds(12345, homogeneous(1)) == 0.0);
}

TEST_CASE("pipeline-shared cache holds at most one layer and checks capacity") {
  Rng rng(73);
  const MoeLayerParams p =
      make_random_params(2, 3, 4, 2, ActivationKind::kGelu, rng);
  PipelineSharedCache cache(p.param_elements());
  CHECK_FALSE(cache.filled());
  CHECK_THROWS_AS(cache.params(), CacheError);
  cache.fill(0, p);
  CHECK(cache.filled());
  CHECK(cache.layer() == 0);
  cache.fill(1, p);  // replaces, never grows
  CHECK(cache.layer() == 1);

  PipelineSharedCache tiny(p.param_elements() - 1);
  CHECK_THROWS_AS(tiny.fill(0, p), CacheError);
}

TEST_CASE("data-centric run equals the single-device layer") {
  for (std::size_t n_dev = 1; n_dev <= 4; ++n_dev) {
    std::vector<std::size_t> batches(n_dev, 6);
    batches[0] = 8;  // uneven local batches
    DistInstance in = make_instance(batches, 4, 2, 5, 8, 5, 100 + n_dev);
    std::vector<std::size_t> hidden_alloc(n_dev, 8 / n_dev);
    hidden_alloc[0] += 8 % n_dev;
    const ShardedParams shards = shard_params(in.params, hidden_alloc);
    auto caches = caches_for(shards);

    const DistRunResult run =
        run_data_centric(in.x, shards, caches, in.routing, in.gy,
                         homogeneous(n_dev), {});

    const MoeForwardResult ref = moe_forward(in.global_x, in.params,
                                             in.global_routing, 8,
                                             MoeScheme::kMemoryEfficient);
    const MoeGrads ref_grads = moe_backward(ref.stash, in.params, in.global_gy);
    CHECK(max_abs_diff(run.y, ref.y) <= 1e-10 * (1.0 + max_abs(ref.y)));
    CHECK(grads_delta(run.grads, ref_grads) <= 1e-10);

    for (const auto& cache : caches) {
      CHECK(cache.filled());
      CHECK(cache.capacity_elements() == shards.full_param_elements());
    }
  }
}

TEST_CASE("model-centric run equals the single-device layer, even shards or not") {
  const std::vector<std::vector<std::size_t>> splits = {
      {16}, {8, 8}, {12, 4}, {6, 6, 4}, {4, 4, 4, 4}};
  for (const auto& hidden_alloc : splits) {
    const std::size_t n_dev = hidden_alloc.size();
    DistInstance in = make_instance(std::vector<std::size_t>(n_dev, 5), 4, 2,
                                    5, 16, 5, 200 + n_dev);
    const ShardedParams shards = shard_params(in.params, hidden_alloc);
    const DistRunResult run = run_model_centric(in.x, shards, in.routing,
                                                in.gy, homogeneous(n_dev), {});

    const MoeForwardResult ref = moe_forward(in.global_x, in.params,
                                             in.global_routing, 8,
                                             MoeScheme::kMemoryEfficient);
    const MoeGrads ref_grads = moe_backward(ref.stash, in.params, in.global_gy);
    CHECK(max_abs_diff(run.y, ref.y) <= 1e-10 * (1.0 + max_abs(ref.y)));
    CHECK(grads_delta(run.grads, ref_grads) <= 1e-10);
  }
}

TEST_CASE("single device runs have zero communication time") {
  DistInstance in = make_instance({10}, 3, 2, 4, 6, 4, 300);
  const ShardedParams shards = shard_params(in.params, {6});
  auto caches = caches_for(shards);
  const DistRunResult dc = run_data_centric(in.x, shards, caches, in.routing,
                                            in.gy, homogeneous(1), {});
  CHECK(dc.report.comm_seconds == 0.0);
  const DistRunResult mc =
      run_model_centric(in.x, shards, in.routing, in.gy, homogeneous(1), {});
  CHECK(mc.report.comm_seconds == 0.0);

  // identical to the plain layer, bit for bit
  const MoeForwardResult ref = moe_forward(in.global_x, in.params,
                                           in.global_routing, 8,
                                           MoeScheme::kMemoryEfficient);
  CHECK(max_abs_diff(dc.y, ref.y) == 0.0);
  CHECK(max_abs_diff(mc.y, ref.y) == 0.0);
}

TEST_CASE("fused backward inside the simulator stays equivalent") {
  DistInstance in = make_instance({5, 7}, 4, 2, 4, 8, 4, 301);
  const ShardedParams shards = shard_params(in.params, {5, 3});
  DistOptions opt;
  opt.use_fused = true;
  auto caches = caches_for(shards);
  const DistRunResult dc = run_data_centric(in.x, shards, caches, in.routing,
                                            in.gy, homogeneous(2), opt);
  const DistRunResult mc =
      run_model_centric(in.x, shards, in.routing, in.gy, homogeneous(2), opt);
  const MoeForwardResult ref = moe_forward(in.global_x, in.params,
                                           in.global_routing, 8,
                                           MoeScheme::kMemoryEfficient);
  const MoeGrads ref_grads = moe_backward(ref.stash, in.params, in.global_gy);
  CHECK(grads_delta(dc.grads, ref_grads) <= 1e-10);
  CHECK(grads_delta(mc.grads, ref_grads) <= 1e-10);
}

TEST_CASE("repeated runs are bit-identical") {
  DistInstance in = make_instance({6, 6}, 4, 2, 4, 8, 4, 302);
  const ShardedParams shards = shard_params(in.params, {4, 4});
  DistOptions opt;
  opt.non_moe_seconds = 1e-4;
  auto c1 = caches_for(shards);
  auto c2 = caches_for(shards);
  const DistRunResult a = run_data_centric(in.x, shards, c1, in.routing, in.gy,
                                           homogeneous(2), opt);
  const DistRunResult b = run_data_centric(in.x, shards, c2, in.routing, in.gy,
                                           homogeneous(2), opt);
  CHECK(a.y == b.y);
  CHECK(a.grads.gw1 == b.grads.gw1);
  CHECK(a.report.makespan == b.report.makespan);
  CHECK(a.report.to_json() == b.report.to_json());
}

TEST_CASE("overlap credit only helps when there is non-MoE work") {
  DistInstance in = make_instance({6, 6}, 4, 2, 4, 8, 4, 303);
  const ShardedParams shards = shard_params(in.params, {4, 4});

  DistOptions with_stage;
  with_stage.non_moe_seconds = 5e-4;
  auto c1 = caches_for(shards);
  const DistRunResult overlapped = run_data_centric(
      in.x, shards, c1, in.routing, in.gy, homogeneous(2), with_stage);
  CHECK(overlapped.report.makespan < overlapped.report.makespan_no_overlap);
  CHECK(overlapped.report.overlap_savings > 0.0);

  DistOptions no_stage;
  no_stage.non_moe_seconds = 0.0;
  auto c2 = caches_for(shards);
  const DistRunResult flat = run_data_centric(in.x, shards, c2, in.routing,
                                              in.gy, homogeneous(2), no_stage);
  CHECK(flat.report.makespan == flat.report.makespan_no_overlap);
  CHECK(flat.report.overlap_savings == 0.0);

  // makespan never beats the busiest device's compute time
  double max_compute = 0.0;
  for (double c : overlapped.report.device_compute_seconds) {
    max_compute = std::max(max_compute, c);
  }
  CHECK(overlapped.report.makespan >= max_compute);
}

TEST_CASE("cache capacity and resident parameter accounting") {
  DistInstance in = make_instance({4, 4}, 2, 1, 3, 4, 3, 304);
  const ShardedParams shards = shard_params(in.params, {2, 2});

  // caches sized below one layer trip the capacity check
  std::vector<PipelineSharedCache> small(
      2, PipelineSharedCache(shards.full_param_elements() - 1));
  CHECK_THROWS_AS(run_data_centric(in.x, shards, small, in.routing, in.gy,
                                   homogeneous(2), {}),
                  CacheError);

  DistOptions deep;
  deep.n_layers = 3;
  auto caches = caches_for(shards);
  const DistRunResult run = run_data_centric(in.x, shards, caches, in.routing,
                                             in.gy, homogeneous(2), deep);
  // shard + one cached layer, strictly below retaining all L layers
  for (std::size_t d = 0; d < 2; ++d) {
    CHECK(run.report.param_elements_per_device[d] ==
          shards.shard_elements(d) + shards.full_param_elements());
    CHECK(run.report.param_elements_per_device[d] <
          run.report.retain_all_layers_param_elements);
  }
  // one gather per forward layer, L-1 re-gathers in backward, L reduces
  std::size_t gathers = 0, reduces = 0;
  for (const auto& ev : run.report.collectives) {
    if (ev.label.find("gather") != std::string::npos) ++gathers;
    if (ev.label.find("reduce") != std::string::npos) ++reduces;
  }
  CHECK(gathers == 2 * deep.n_layers - 1);
  CHECK(reduces == deep.n_layers);
  // backward ends with the first layer resident
  for (const auto& cache : caches) {
    CHECK(cache.filled());
    CHECK(cache.layer() == 0);
  }
}

TEST_CASE("batch-sum precondition is enforced when configured") {
  DistInstance in = make_instance({4, 4}, 2, 1, 3, 4, 3, 305);
  const ShardedParams shards = shard_params(in.params, {2, 2});
  DistOptions opt;
  opt.expected_global_batch = 9;  // actual is 8
  auto caches = caches_for(shards);
  CHECK_THROWS_AS(run_data_centric(in.x, shards, caches, in.routing, in.gy,
                                   homogeneous(2), opt),
                  std::invalid_argument);
}

TEST_CASE("run reports agree with the analytic cost model") {
  DistInstance in = make_instance({6, 10}, 4, 2, 5, 8, 5, 307);
  const ShardedParams shards = shard_params(in.params, {5, 3});
  const std::vector<DeviceSpec> devices = {{0, 1e9, 1e8, 1e-4},
                                           {1, 2e9, 5e7, 2e-4}};
  DistOptions opt;
  opt.non_moe_seconds = 1e-4;
  const LayerDims dims{4, 5, 8, 5, 2};

  auto caches = caches_for(shards);
  const DistRunResult dc =
      run_data_centric(in.x, shards, caches, in.routing, in.gy, devices, opt);
  CHECK(dc.report.makespan ==
        estimate_data_centric_seconds(devices, dims, {6, 10}, opt));

  const DistRunResult mc =
      run_model_centric(in.x, shards, in.routing, in.gy, devices, opt);
  CHECK(mc.report.makespan ==
        estimate_model_centric_seconds(devices, dims, {5, 3}, 16, opt));
}

TEST_CASE("crossover probe reproduces the workload-dependent preference") {
  const LayerDims dims{8, 64, 256, 64, 2};
  const std::vector<std::size_t> workloads = {16,   64,   256,  1024,
                                              4096, 8192, 16384};
  const CrossoverTable table =
      crossover_probe(homogeneous(2, 1e9, 1e8, 1e-5), dims, workloads, {});
  REQUIRE(table.rows.size() == workloads.size());

  // tiny token volume with large parameters: model-centric wins
  CHECK(table.rows.front().model_centric_seconds <
        table.rows.front().data_centric_seconds);
  // large token volume: data-centric wins
  CHECK(table.rows.back().data_centric_seconds <
        table.rows.back().model_centric_seconds);
  CHECK(table.unique_crossover);
  REQUIRE(table.crossover_workload.has_value());

  // near-zero parameter volume: data-centric never loses
  const LayerDims tiny{1, 1, 2, 1, 1};
  const CrossoverTable flat = crossover_probe(
      homogeneous(2, 1e9, 1e8, 0.0), tiny, {1024, 2048, 4096}, {});
  for (const CrossoverRow& row : flat.rows) {
    CHECK(row.data_centric_seconds <= row.model_centric_seconds);
  }

  CHECK_THROWS_AS(crossover_probe(homogeneous(2), dims, {8, 8}, {}),
                  std::invalid_argument);
}

TEST_CASE("scenario files parse into simulation configs") {
  namespace fs = std::filesystem;
  const fs::path p = fs::temp_directory_path() / "moekit_scenario.json";
  {
    std::ofstream os(p);
    os << R"({
      "devices": [
        {"id": 0, "compute_rate": 2e9, "link_bandwidth": 1e8, "link_latency": 1e-4},
        {"id": 1, "compute_rate": 1e9, "link_bandwidth": 5e7, "link_latency": 2e-4}
      ],
      "n": 48, "experts": 4, "topk": 2, "din": 8, "hidden": 16, "dout": 8,
      "blk": 4, "seed": 9, "mode": "model_centric",
      "moe_scheme": "naive", "activation": "relu",
      "non_moe_seconds": 0.001, "n_layers": 2,
      "hidden_shares": [12, 4], "device_latencies": [3.28, 9.42]
    })";
  }
  const SimScenario s = load_scenario(p.string());
  CHECK(s.devices.size() == 2);
  CHECK(s.devices[1].link_bandwidth == 5e7);
  CHECK(s.n == 48);
  CHECK(s.mode == "model_centric");
  CHECK(s.moe_scheme == MoeScheme::kNaive);
  CHECK(s.activation == ActivationKind::kRelu);
  CHECK(s.n_layers == 2);
  CHECK(s.hidden_shares == std::vector<std::size_t>{12, 4});
  CHECK(s.device_latencies == std::vector<double>{3.28, 9.42});
  fs::remove(p);

  CHECK_THROWS(load_scenario("/nonexistent/scenario.json"));
}
