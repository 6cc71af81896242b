// Acceptance suite: one line per criterion, nonzero exit if any fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "moekit/dist_sim.hpp"
#include "moekit/es_ops.hpp"
#include "moekit/gemm_oracle.hpp"
#include "moekit/hetero_alloc.hpp"
#include "moekit/moe_layer.hpp"
#include "moekit/random.hpp"
#include "verifylib/verify_suites.hpp"

using namespace moekit;

namespace {

int failures = 0;

class Timer {
 public:
  Timer() : start_(std::chrono::steady_clock::now()) {}
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                         start_)
        .count();
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

void report(int criterion, const std::string& name, bool pass,
            const std::string& detail) {
  std::printf("[%s] %2d %s (%s)\n", pass ? "PASS" : "FAIL", criterion,
              name.c_str(), detail.c_str());
  if (!pass) ++failures;
}

std::string fmt(const char* format, double a, double b = 0.0) {
  char buf[160];
  std::snprintf(buf, sizeof(buf), format, a, b);
  return buf;
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

void criterion_1_operator_oracle() {
  Timer t;
  verify::SuiteConfig cfg;
  cfg.instances = 200;
  cfg.seed = 20240601;
  const verify::SuiteResult r = verify::run_operator_oracle_suite(cfg);
  const double s = t.seconds();
  report(1, "operator-oracle equivalence, 200 instances",
         r.pass && s < 10.0,
         fmt("max scaled err %.3e <= 1e-12, %.1fs < 10s", r.max_error, s));
}

void criterion_2_layer_oracle() {
  Timer t;
  verify::SuiteConfig cfg;
  cfg.instances = 100;
  cfg.seed = 20240602;
  const verify::SuiteResult r = verify::run_layer_oracle_suite(cfg);
  const double s = t.seconds();
  report(2, "layer equivalence vs dispatch-combine oracle, 100 instances",
         r.pass && s < 20.0,
         fmt("max scaled err %.3e <= 1e-10, %.1fs < 20s", r.max_error, s));
}

void criterion_3_gradients() {
  Timer t;
  double worst = 0.0;
  std::size_t max_params = 0;
  const ActivationKind kinds[] = {ActivationKind::kGelu,
                                  ActivationKind::kIdentity,
                                  ActivationKind::kRelu};
  std::uint64_t seed = 20240603;
  for (ActivationKind kind : kinds) {
    for (std::size_t k : {std::size_t{1}, std::size_t{2}}) {
      verify::GradcheckConfig cfg;
      cfg.n = 6;
      cfg.experts = 4;
      cfg.k = k;
      cfg.d_in = 4;
      cfg.hidden = 6;
      cfg.d_out = 4;
      cfg.blk = 4;
      cfg.activation = kind;
      cfg.seed = seed++;
      const verify::GradcheckResult r = verify::run_gradcheck(cfg);
      worst = std::max(worst, r.worst());
      max_params = std::max(max_params, r.param_count);
    }
  }
  const double s = t.seconds();
  report(3, "gradient correctness vs central finite differences",
         worst <= 1e-6 && max_params <= 500 && s < 30.0,
         fmt("max rel err %.3e <= 1e-6, %.1fs < 30s", worst, s));
}

void criterion_4_fused() {
  verify::SuiteConfig cfg;
  cfg.instances = 100;
  cfg.seed = 20240604;
  const verify::SuiteResult r = verify::run_fused_equivalence_suite(cfg);
  report(4, "fused backward bit-identical to unfused, 100 instances", r.pass,
         fmt("max abs diff %.1f == 0", r.max_error));
}

void criterion_5_memory_scheme() {
  verify::SuiteConfig cfg;
  cfg.instances = 100;
  cfg.seed = 20240605;
  const verify::SuiteResult r = verify::run_scheme_equivalence_suite(cfg);

  bool formula_ok = true;
  for (std::size_t n : {1, 4, 16, 64, 333}) {
    for (std::size_t k : {1, 2, 3, 4, 8}) {
      const double naive =
          estimate_activation_memory(n, k, 4.0, MoeScheme::kNaive);
      const double eff =
          estimate_activation_memory(n, k, 4.0, MoeScheme::kMemoryEfficient);
      formula_ok = formula_ok && (naive - eff == static_cast<double>(k * n));
    }
  }
  report(5, "memory-efficient scheme equivalence and unit model",
         r.pass && formula_ok,
         fmt("max rel err %.3e <= 1e-12, naive-efficient == k*N", r.max_error));
}

void criterion_6_zero_redundancy() {
  bool macs_exact = true;
  const std::size_t n = 512, e = 8, din = 16, hid = 32, dout = 16;
  const RoutingDistribution skews[] = {RoutingDistribution::uniform(),
                                       RoutingDistribution::zipf(1.5),
                                       RoutingDistribution::fixed_expert(0)};
  Rng rng(20240606);
  for (const RoutingDistribution& dist : skews) {
    for (std::size_t k : {std::size_t{1}, std::size_t{2}, std::size_t{4}}) {
      const RoutingChoice r = synthesize_routing(n, e, k, dist, rng.next_u64());
      const MoeLayerParams p =
          make_random_params(e, din, hid, dout, ActivationKind::kGelu, rng);
      const Matrix2D x = random_matrix(n, din, rng);
      OpStats stats;
      EsOptions opt;
      opt.stats = &stats;
      moe_forward(x, p, r, 8, MoeScheme::kMemoryEfficient, opt);
      const std::uint64_t want =
          static_cast<std::uint64_t>(k) * n * (din * hid + hid * dout);
      macs_exact = macs_exact && stats.macs == want;
    }
  }

  const RoutingChoice skewed =
      synthesize_routing(n, e, 1, RoutingDistribution::fixed_expert(0), 1);
  const RedundancyReport rep = count_redundancy(skewed, din, hid, dout, 1.0);
  const bool oracle_pays =
      rep.token_macs_oracle > rep.token_macs_expert_specific ||
      rep.dropped_tokens > 0;
  report(6, "zero token-level redundancy under arbitrary skew",
         macs_exact && oracle_pays,
         "counted MACs == k*N*(Di*H + H*Do); all-to-one oracle: " +
             std::to_string(rep.token_macs_oracle) + " MACs, " +
             std::to_string(rep.dropped_tokens) + " dropped");
}

void criterion_7_reindex() {
  verify::SuiteConfig cfg;
  cfg.instances = 500;
  cfg.seed = 20240607;
  const verify::SuiteResult r = verify::run_reindex_property_suite(cfg);
  report(7, "re-index invariants over 500 random instances", r.pass,
         fmt("%0.f violations", r.max_error));
}

void criterion_8_distributed() {
  Timer t;
  double worst = 0.0;
  Rng rng(20240608);
  const std::vector<std::vector<std::size_t>> shard_table = {
      {12}, {7, 5}, {5, 4, 3}, {4, 4, 3, 1}};  // deliberately uneven
  for (std::size_t n_dev = 1; n_dev <= 4; ++n_dev) {
    const std::size_t hidden = 12;
    const std::vector<std::size_t>& hidden_alloc = shard_table[n_dev - 1];

    std::vector<std::size_t> batches(n_dev, 6);
    batches[0] = 9;
    std::size_t total = 0;
    for (std::size_t b : batches) total += b;

    MoeLayerParams params =
        make_random_params(4, 5, hidden, 5, ActivationKind::kGelu, rng);
    const RoutingChoice global = synthesize_routing(
        total, 4, 2, RoutingDistribution::uniform(), rng.next_u64());
    const Matrix2D gx = random_matrix(total, 5, rng);
    const Matrix2D ggy = random_matrix(total, 5, rng);

    std::vector<Matrix2D> xs, gys;
    std::vector<RoutingChoice> routings;
    std::size_t at = 0;
    for (std::size_t b : batches) {
      Matrix2D x(b, 5), gy(b, 5);
      RoutingChoice r{b, 4, 2, {}};
      r.assignments.assign(2, std::vector<std::int32_t>(b));
      for (std::size_t tk = 0; tk < b; ++tk) {
        for (std::size_t j = 0; j < 5; ++j) {
          x.at(tk, j) = gx.at(at + tk, j);
          gy.at(tk, j) = ggy.at(at + tk, j);
        }
        for (std::size_t i = 0; i < 2; ++i) {
          r.assignments[i][tk] = global.assignments[i][at + tk];
        }
      }
      at += b;
      xs.push_back(std::move(x));
      routings.push_back(std::move(r));
      gys.push_back(std::move(gy));
    }

    std::vector<DeviceSpec> devices;
    for (std::size_t d = 0; d < n_dev; ++d) {
      devices.push_back({static_cast<int>(d), 1e9, 1e8, 1e-4});
    }
    const ShardedParams shards = shard_params(params, hidden_alloc);

    const MoeForwardResult ref =
        moe_forward(gx, params, global, 4, MoeScheme::kMemoryEfficient);
    const MoeGrads ref_grads = moe_backward(ref.stash, params, ggy);

    std::vector<PipelineSharedCache> caches(
        n_dev, PipelineSharedCache(shards.full_param_elements()));
    DistOptions opt;
    opt.blk = 4;
    const DistRunResult dc =
        run_data_centric(xs, shards, caches, routings, gys, devices, opt);
    worst = std::max(worst, max_abs_diff(dc.y, ref.y) / (1.0 + max_abs(ref.y)));
    worst = std::max(worst, grads_delta(dc.grads, ref_grads));

    const DistRunResult mc =
        run_model_centric(xs, shards, routings, gys, devices, opt);
    worst = std::max(worst, max_abs_diff(mc.y, ref.y) / (1.0 + max_abs(ref.y)));
    worst = std::max(worst, grads_delta(mc.grads, ref_grads));
  }
  const double s = t.seconds();
  report(8, "distributed equivalence, 1-4 devices, uneven shards",
         worst <= 1e-10 && s < 30.0,
         fmt("max scaled delta %.3e <= 1e-10, %.1fs < 30s", worst, s));
}

void criterion_9_allocation() {
  const struct {
    double t0, t1, r0, r1;
  } cases[] = {{4.58, 3.06, 0.40, 0.60},
               {3.20, 3.18, 0.50, 0.50},
               {3.28, 9.42, 0.74, 0.26}};
  double worst_dev = 0.0;
  for (const auto& c : cases) {
    const std::vector<double> r = capacity_proportions({c.t0, c.t1});
    worst_dev = std::max({worst_dev, std::abs(r[0] - c.r0), std::abs(r[1] - c.r1)});
  }

  bool rounding_ok = true;
  Rng rng(20240609);
  for (int iter = 0; iter < 1000; ++iter) {
    const std::size_t devices = 1 + static_cast<std::size_t>(rng.below(8));
    std::vector<double> lat(devices);
    for (double& t : lat) t = 0.05 + 12.0 * rng.uniform01();
    const auto total = static_cast<std::int64_t>(rng.below(4096));
    const AllocationPlan plan = (iter % 2 == 0)
                                    ? allocate_batches(lat, total)
                                    : allocate_hidden(lat, total);
    std::int64_t sum = 0;
    for (std::size_t i = 0; i < devices; ++i) {
      sum += plan.shares[i];
      rounding_ok = rounding_ok &&
                    std::abs(static_cast<double>(plan.shares[i]) - plan.ideal[i]) < 1.0;
    }
    rounding_ok = rounding_ok && sum == total;
  }
  report(9, "heterogeneous allocation proportions and rounding",
         worst_dev <= 0.005 && rounding_ok,
         fmt("max proportion deviation %.4f <= 0.005, 1000 rounding cases",
             worst_dev));
}

void criterion_10_crossover() {
  const LayerDims dims{8, 64, 256, 64, 2};
  std::vector<DeviceSpec> devices = {{0, 1e9, 1e8, 1e-5}, {1, 1e9, 1e8, 1e-5}};
  const std::vector<std::size_t> workloads = {16,   64,   256,   1024,
                                              4096, 8192, 16384, 32768};
  const CrossoverTable table = crossover_probe(devices, dims, workloads, {});
  const bool small_prefers_mc = table.rows.front().model_centric_seconds <
                                table.rows.front().data_centric_seconds;
  const bool large_prefers_dc = table.rows.back().data_centric_seconds <
                                table.rows.back().model_centric_seconds;
  const bool ok = small_prefers_mc && large_prefers_dc &&
                  table.unique_crossover && table.crossover_workload.has_value();
  report(10, "cost-model crossover between data- and model-centric", ok,
         ok ? "unique flip at workload " +
                  std::to_string(*table.crossover_workload)
            : "no unique preference flip");
}

}  // namespace

int main() {
  Timer total;
  criterion_1_operator_oracle();
  criterion_2_layer_oracle();
  criterion_3_gradients();
  criterion_4_fused();
  criterion_5_memory_scheme();
  criterion_6_zero_redundancy();
  criterion_7_reindex();
  criterion_8_distributed();
  criterion_9_allocation();
  criterion_10_crossover();
  std::printf("%d/10 criteria passed in %.1fs\n", 10 - failures,
              total.seconds());
  return failures == 0 ? 0 : 1;
}
