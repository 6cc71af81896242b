#include "commands.hpp"

#include <chrono>
#include <fstream>
#include <iostream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "moekit/dist_sim.hpp"
#include "moekit/es_ops.hpp"
#include "moekit/gemm_oracle.hpp"
#include "moekit/hetero_alloc.hpp"
#include "moekit/moe_layer.hpp"
#include "moekit/random.hpp"
#include "verifylib/verify_suites.hpp"

namespace moekit::cli {

namespace {

using nlohmann::json;

void emit(const std::string& text, const std::string& out_path) {
  if (out_path.empty()) {
    std::cout << text << '\n';
    return;
  }
  std::ofstream os(out_path, std::ios::trunc);
  if (!os) throw UsageError(out_path + ": cannot open output file");
  os << text << '\n';
}

double elapsed_us(const std::chrono::steady_clock::time_point& start) {
  return std::chrono::duration<double, std::micro>(
             std::chrono::steady_clock::now() - start)
      .count();
}

}  // namespace

void CommonOptions::validate() const {
  if (n == 0 || experts == 0 || topk == 0 || d_in == 0 || hidden == 0 ||
      d_out == 0 || blk == 0) {
    throw UsageError("all dimensions must be positive");
  }
  if (topk > experts) {
    throw UsageError("--topk must not exceed --experts");
  }
  if (format != "json" && format != "csv") {
    throw UsageError("--format must be json or csv");
  }
  if (capacity_factor <= 0.0) {
    throw UsageError("--capacity-factor must be > 0");
  }
  moe_scheme_from_name(scheme);
  activation_from_name(activation);
}

int run_verify(const VerifyOptions& opt) {
  opt.common.validate();
  verify::SuiteConfig cfg;
  cfg.instances = opt.instances;
  cfg.max_n = opt.common.n;
  cfg.max_experts = opt.common.experts;
  cfg.max_k = opt.common.topk;
  cfg.max_dim = std::max({opt.common.d_in, opt.common.hidden, opt.common.d_out});
  if (opt.blk_given) cfg.blks = {opt.common.blk};
  cfg.seed = opt.common.seed;
  cfg.inject_fault = opt.inject_fault;

  const std::vector<verify::SuiteResult> suites = verify::run_all_suites(cfg);
  bool all_pass = true;
  for (const auto& s : suites) all_pass = all_pass && s.pass;

  if (opt.common.format == "csv") {
    std::ostringstream os;
    os << "suite,instances,max_error,tolerance,pass\n";
    for (const auto& s : suites) {
      os << s.name << ',' << s.instances << ',' << s.max_error << ','
         << s.tolerance << ',' << (s.pass ? "true" : "false") << '\n';
    }
    emit(os.str(), opt.common.out_path);
  } else {
    json j;
    j["suites"] = json::array();
    for (const auto& s : suites) {
      j["suites"].push_back({{"name", s.name},
                             {"instances", s.instances},
                             {"max_error", s.max_error},
                             {"tolerance", s.tolerance},
                             {"pass", s.pass}});
    }
    j["pass"] = all_pass;
    j["seed"] = cfg.seed;
    emit(j.dump(2), opt.common.out_path);
  }
  return all_pass ? kExitOk : kExitVerifyFail;
}

int run_gradcheck(const GradcheckOptions& opt) {
  opt.common.validate();
  verify::GradcheckConfig cfg;
  cfg.n = opt.common.n;
  cfg.experts = opt.common.experts;
  cfg.k = opt.common.topk;
  cfg.d_in = opt.common.d_in;
  cfg.hidden = opt.common.hidden;
  cfg.d_out = opt.common.d_out;
  cfg.blk = opt.common.blk;
  cfg.activation = activation_from_name(opt.common.activation);
  cfg.seed = opt.common.seed;

  const verify::GradcheckResult res = verify::run_gradcheck(cfg);
  const double tolerance = 1e-6;
  const bool pass = res.worst() <= tolerance;

  if (opt.common.format == "csv") {
    std::ostringstream os;
    os << "tensor,max_rel_error\n";
    os << "gw1," << res.max_rel_gw1 << "\ngb1," << res.max_rel_gb1
       << "\ngw2," << res.max_rel_gw2 << "\ngb2," << res.max_rel_gb2
       << "\ngx," << res.max_rel_gx << '\n';
    os << "kink_flags," << res.kink_flags << '\n';
    emit(os.str(), opt.common.out_path);
  } else {
    json j;
    j["max_rel_error"] = {{"gw1", res.max_rel_gw1}, {"gb1", res.max_rel_gb1},
                          {"gw2", res.max_rel_gw2}, {"gb2", res.max_rel_gb2},
                          {"gx", res.max_rel_gx}};
    j["worst"] = res.worst();
    j["tolerance"] = tolerance;
    j["kink_flags"] = res.kink_flags;
    j["param_count"] = res.param_count;
    j["pass"] = pass;
    emit(j.dump(2), opt.common.out_path);
  }
  return pass ? kExitOk : kExitVerifyFail;
}

namespace {

struct BenchRow {
  std::size_t k;
  RedundancyReport redundancy;
  double mem_naive, mem_efficient;
  std::uint64_t macs_counted;
  double wall_esmm_us, wall_ess_us, wall_estmm_us, wall_esfk_us;
  double wall_forward_us, wall_backward_us;
};

}  // namespace

int run_bench(const BenchOptions& opt) {
  opt.common.validate();
  const CommonOptions& c = opt.common;
  const ActivationKind activation = activation_from_name(c.activation);
  const MoeScheme scheme = moe_scheme_from_name(c.scheme);

  std::vector<BenchRow> rows;
  for (std::size_t k = 1; k <= c.topk; ++k) {
    Rng rng(c.seed);
    RoutingChoice routing;
    if (!opt.routing_csv.empty()) {
      routing = read_routing_csv(opt.routing_csv);
      if (routing.k < k) break;
      routing.assignments.resize(k);
      routing.k = k;
    } else {
      routing = synthesize_routing(c.n, c.experts, k,
                                   RoutingDistribution::parse(opt.distribution),
                                   c.seed);
    }
    const MoeLayerParams params = make_random_params(
        routing.n_experts, c.d_in, c.hidden, c.d_out, activation, rng);
    const Matrix2D x = random_matrix(routing.n_tokens, c.d_in, rng);
    const ReIndex rx = build_reindex(routing.assignments[0],
                                     routing.n_experts, c.blk);

    BenchRow row{};
    row.k = k;
    row.redundancy = count_redundancy(routing, c.d_in, c.hidden, c.d_out,
                                      c.capacity_factor);
    row.mem_naive = estimate_activation_memory(
        routing.n_tokens, k, static_cast<double>(c.hidden) / c.d_in,
        MoeScheme::kNaive);
    row.mem_efficient = estimate_activation_memory(
        routing.n_tokens, k, static_cast<double>(c.hidden) / c.d_in,
        MoeScheme::kMemoryEfficient);

    auto t0 = std::chrono::steady_clock::now();
    const Matrix2D y1 = esmm(x, params.w1, &params.b1, rx);
    row.wall_esmm_us = elapsed_us(t0);

    t0 = std::chrono::steady_clock::now();
    const Matrix2D sums = ess(y1, rx);
    row.wall_ess_us = elapsed_us(t0);
    (void)sums;

    t0 = std::chrono::steady_clock::now();
    const Tensor3D outer = estmm(x, y1, rx);
    row.wall_estmm_us = elapsed_us(t0);
    (void)outer;

    const Tensor3D w1_t = transpose_experts(params.w1);
    t0 = std::chrono::steady_clock::now();
    const EsfkResult fused = esfk(x, y1, w1_t, rx);
    row.wall_esfk_us = elapsed_us(t0);
    (void)fused;

    OpStats fwd_stats;
    EsOptions es;
    es.stats = &fwd_stats;
    t0 = std::chrono::steady_clock::now();
    const MoeForwardResult fw =
        moe_forward(x, params, routing, c.blk, scheme, es);
    row.wall_forward_us = elapsed_us(t0);
    row.macs_counted = fwd_stats.macs;

    Matrix2D g_y(routing.n_tokens, c.d_out);
    for (double& v : g_y.data()) v = 1.0;
    t0 = std::chrono::steady_clock::now();
    const MoeGrads grads = moe_backward(fw.stash, params, g_y, false);
    row.wall_backward_us = elapsed_us(t0);
    (void)grads;

    rows.push_back(row);
  }

  if (opt.common.format == "json") {
    json j;
    j["rows"] = json::array();
    for (const BenchRow& r : rows) {
      j["rows"].push_back(
          {{"n", c.n},
           {"experts", c.experts},
           {"topk", r.k},
           {"din", c.d_in},
           {"hidden", c.hidden},
           {"dout", c.d_out},
           {"blk", c.blk},
           {"distribution", opt.distribution},
           {"capacity_factor", c.capacity_factor},
           {"seed", c.seed},
           {"macs_expert_specific", r.redundancy.token_macs_expert_specific},
           {"macs_counted", r.macs_counted},
           {"macs_oracle", r.redundancy.token_macs_oracle},
           {"capacity_per_expert", r.redundancy.capacity_per_expert},
           {"padded_rows", r.redundancy.padded_rows},
           {"dropped_tokens", r.redundancy.dropped_tokens},
           {"mem_units_naive", r.mem_naive},
           {"mem_units_efficient", r.mem_efficient},
           {"wall_esmm_us", r.wall_esmm_us},
           {"wall_ess_us", r.wall_ess_us},
           {"wall_estmm_us", r.wall_estmm_us},
           {"wall_esfk_us", r.wall_esfk_us},
           {"wall_forward_us", r.wall_forward_us},
           {"wall_backward_us", r.wall_backward_us}});
    }
    emit(j.dump(2), opt.common.out_path);
  } else {
    std::ostringstream os;
    os << "n,experts,topk,din,hidden,dout,blk,distribution,capacity_factor,"
          "seed,macs_expert_specific,macs_counted,macs_oracle,"
          "capacity_per_expert,padded_rows,dropped_tokens,mem_units_naive,"
          "mem_units_efficient,wall_esmm_us,wall_ess_us,wall_estmm_us,"
          "wall_esfk_us,wall_forward_us,wall_backward_us\n";
    for (const BenchRow& r : rows) {
      os << c.n << ',' << c.experts << ',' << r.k << ',' << c.d_in << ','
         << c.hidden << ',' << c.d_out << ',' << c.blk << ','
         << opt.distribution << ',' << c.capacity_factor << ',' << c.seed
         << ',' << r.redundancy.token_macs_expert_specific << ','
         << r.macs_counted << ',' << r.redundancy.token_macs_oracle << ','
         << r.redundancy.capacity_per_expert << ','
         << r.redundancy.padded_rows << ',' << r.redundancy.dropped_tokens
         << ',' << r.mem_naive << ',' << r.mem_efficient << ','
         << r.wall_esmm_us << ',' << r.wall_ess_us << ',' << r.wall_estmm_us
         << ',' << r.wall_esfk_us << ',' << r.wall_forward_us << ','
         << r.wall_backward_us << '\n';
    }
    emit(os.str(), opt.common.out_path);
  }
  return kExitOk;
}

namespace {

SimScenario scenario_from_options(const SimulateOptions& opt) {
  if (!opt.common.config_path.empty()) {
    return load_scenario(opt.common.config_path);
  }
  SimScenario s;
  for (std::size_t d = 0; d < opt.devices; ++d) {
    s.devices.push_back(DeviceSpec{static_cast<int>(d), 1e9, 1e8, 1e-4});
  }
  s.n = opt.common.n;
  s.experts = opt.common.experts;
  s.k = opt.common.topk;
  s.d_in = opt.common.d_in;
  s.hidden = opt.common.hidden;
  s.d_out = opt.common.d_out;
  s.blk = opt.common.blk;
  s.seed = opt.common.seed;
  s.mode = opt.mode;
  s.moe_scheme = moe_scheme_from_name(opt.common.scheme);
  s.activation = activation_from_name(opt.common.activation);
  s.use_fused = opt.use_fused;
  s.non_moe_seconds = opt.non_moe_seconds;
  s.n_layers = opt.n_layers;
  return s;
}

std::vector<std::size_t> resolve_shares(const std::vector<std::size_t>& given,
                                        const std::vector<double>& latencies,
                                        std::size_t total, std::size_t parts,
                                        AllocationKind kind) {
  if (!given.empty()) {
    if (given.size() != parts) {
      throw UsageError("share list length must equal the device count");
    }
    std::size_t sum = 0;
    for (std::size_t s : given) sum += s;
    if (sum != total) throw UsageError("shares must sum to the total");
    return given;
  }
  if (!latencies.empty()) {
    if (latencies.size() != parts) {
      throw UsageError("device_latencies length must equal the device count");
    }
    const AllocationPlan plan =
        kind == AllocationKind::kBatch
            ? allocate_batches(latencies, static_cast<std::int64_t>(total))
            : allocate_hidden(latencies, static_cast<std::int64_t>(total));
    return std::vector<std::size_t>(plan.shares.begin(), plan.shares.end());
  }
  std::vector<std::size_t> out(parts, total / parts);
  for (std::size_t i = 0; i < total % parts; ++i) ++out[i];
  return out;
}

struct SplitInstance {
  std::vector<Matrix2D> x;
  std::vector<RoutingChoice> routing;
  std::vector<Matrix2D> gy;
  Matrix2D global_x;
  RoutingChoice global_routing;
  Matrix2D global_gy;
};

SplitInstance split_instance(const SimScenario& s,
                             const std::vector<std::size_t>& batch_shares) {
  Rng rng(s.seed);
  SplitInstance inst;
  inst.global_routing = synthesize_routing(
      s.n, s.experts, s.k, RoutingDistribution::parse(s.distribution), s.seed);
  inst.global_x = random_matrix(s.n, s.d_in, rng);
  inst.global_gy = random_matrix(s.n, s.d_out, rng);

  std::size_t at = 0;
  for (std::size_t share : batch_shares) {
    Matrix2D x(share, s.d_in), gy(share, s.d_out);
    RoutingChoice r;
    r.n_tokens = share;
    r.n_experts = s.experts;
    r.k = s.k;
    r.assignments.assign(s.k, std::vector<std::int32_t>(share));
    for (std::size_t t = 0; t < share; ++t) {
      for (std::size_t j = 0; j < s.d_in; ++j) {
        x.at(t, j) = inst.global_x.at(at + t, j);
      }
      for (std::size_t j = 0; j < s.d_out; ++j) {
        gy.at(t, j) = inst.global_gy.at(at + t, j);
      }
      for (std::size_t i = 0; i < s.k; ++i) {
        r.assignments[i][t] = inst.global_routing.assignments[i][at + t];
      }
    }
    at += share;
    inst.x.push_back(std::move(x));
    inst.routing.push_back(std::move(r));
    inst.gy.push_back(std::move(gy));
  }
  return inst;
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

std::string sim_report_csv(const SimReport& r) {
  std::ostringstream os;
  os << "key,value\n";
  os << "scheme," << r.scheme << '\n';
  os << "n_devices," << r.n_devices << '\n';
  os << "n_layers," << r.n_layers << '\n';
  os << "comm_seconds," << r.comm_seconds << '\n';
  os << "overlap_savings," << r.overlap_savings << '\n';
  os << "makespan," << r.makespan << '\n';
  os << "makespan_no_overlap," << r.makespan_no_overlap << '\n';
  os << "equivalence_delta_forward," << r.equivalence_delta_forward << '\n';
  os << "equivalence_delta_grads," << r.equivalence_delta_grads << '\n';
  return os.str();
}

}  // namespace

int run_simulate(const SimulateOptions& opt) {
  if (opt.common.config_path.empty()) {
    opt.common.validate();
  } else if (opt.common.format != "json" && opt.common.format != "csv") {
    throw UsageError("--format must be json or csv");
  }
  SimScenario s = scenario_from_options(opt);
  if (s.devices.empty()) throw UsageError("simulate: no devices configured");
  if (s.k > s.experts) throw UsageError("simulate: topk exceeds experts");

  DistOptions dist;
  dist.blk = s.blk;
  dist.moe_scheme = s.moe_scheme;
  dist.use_fused = s.use_fused;
  dist.non_moe_seconds = s.non_moe_seconds;
  dist.n_layers = s.n_layers;
  dist.expected_global_batch = s.n;

  if (s.mode == "crossover") {
    std::vector<std::size_t> workloads = s.workloads;
    if (workloads.empty()) {
      workloads = {64, 128, 256, 512, 1024, 2048, 4096, 8192};
    }
    LayerDims dims{s.experts, s.d_in, s.hidden, s.d_out, s.k};
    const CrossoverTable table =
        crossover_probe(s.devices, dims, workloads, dist);
    if (opt.common.format == "csv") {
      std::ostringstream os;
      os << "workload,data_centric_seconds,model_centric_seconds\n";
      for (const CrossoverRow& r : table.rows) {
        os << r.workload << ',' << r.data_centric_seconds << ','
           << r.model_centric_seconds << '\n';
      }
      emit(os.str(), opt.common.out_path);
    } else {
      emit(json::parse(table.to_json()).dump(2), opt.common.out_path);
    }
    return kExitOk;
  }

  const std::vector<std::size_t> batch_shares =
      resolve_shares(s.batch_shares, s.device_latencies, s.n,
                     s.devices.size(), AllocationKind::kBatch);
  const std::vector<std::size_t> hidden_shares =
      resolve_shares(s.hidden_shares, s.device_latencies, s.hidden,
                     s.devices.size(), AllocationKind::kHidden);
  for (std::size_t h : hidden_shares) {
    if (h == 0) throw UsageError("simulate: zero hidden share");
  }

  Rng prng(s.seed + 17);
  MoeLayerParams params = make_random_params(s.experts, s.d_in, s.hidden,
                                             s.d_out, s.activation, prng);
  const ShardedParams shards = shard_params(params, hidden_shares);
  const SplitInstance inst = split_instance(s, batch_shares);

  DistRunResult run;
  if (s.mode == "data_centric") {
    std::vector<PipelineSharedCache> caches(
        s.devices.size(), PipelineSharedCache(shards.full_param_elements()));
    run = run_data_centric(inst.x, shards, caches, inst.routing, inst.gy,
                           s.devices, dist);
  } else if (s.mode == "model_centric") {
    run = run_model_centric(inst.x, shards, inst.routing, inst.gy, s.devices,
                            dist);
  } else {
    throw UsageError("simulate: unknown mode " + s.mode);
  }

  // Single-device reference for the equivalence deltas.
  const MoeForwardResult ref = moe_forward(
      inst.global_x, params, inst.global_routing, s.blk, s.moe_scheme);
  const MoeGrads ref_grads =
      moe_backward(ref.stash, params, inst.global_gy, s.use_fused);
  run.report.equivalence_delta_forward =
      max_abs_diff(run.y, ref.y) / (1.0 + max_abs(ref.y));
  run.report.equivalence_delta_grads = grads_delta(run.grads, ref_grads);

  if (opt.common.format == "csv") {
    emit(sim_report_csv(run.report), opt.common.out_path);
  } else {
    emit(json::parse(run.report.to_json()).dump(2), opt.common.out_path);
  }
  return kExitOk;
}

int run_probe(const ProbeOptions& opt) {
  const double elapsed =
      probe_capacity_seconds(opt.iterations, opt.matrix_size, opt.seed);
  json j;
  j["device"] = opt.device_id;
  j["elapsed_s"] = elapsed;
  j["iterations"] = opt.iterations;
  j["matrix_size"] = opt.matrix_size;
  emit(j.dump(2), opt.out_path);
  return kExitOk;
}

int run_allocate(const AllocateOptions& opt) {
  std::vector<double> latencies = opt.latencies;
  std::int64_t total = opt.total;
  std::string kind = opt.kind;
  if (!opt.config_path.empty()) {
    std::ifstream is(opt.config_path);
    if (!is) throw UsageError(opt.config_path + ": cannot open config");
    json j;
    try {
      is >> j;
    } catch (const json::exception& e) {
      throw UsageError(opt.config_path + ": invalid JSON: " + e.what());
    }
    if (j.contains("latencies")) {
      latencies = j["latencies"].get<std::vector<double>>();
    }
    total = j.value("total", total);
    kind = j.value("kind", kind);
  }
  if (latencies.empty()) throw UsageError("allocate: no latencies given");
  if (total <= 0) throw UsageError("allocate: --total must be positive");
  if (kind != "batch" && kind != "hidden") {
    throw UsageError("allocate: kind must be batch or hidden");
  }

  const AllocationPlan plan =
      kind == "batch" ? allocate_batches(latencies, total)
                      : allocate_hidden(latencies, total);
  const std::vector<double> proportions = capacity_proportions(latencies);

  if (opt.format == "csv") {
    std::ostringstream os;
    os << "device,latency_s,proportion,ideal,share\n";
    for (std::size_t i = 0; i < plan.shares.size(); ++i) {
      os << i << ',' << latencies[i] << ',' << proportions[i] << ','
         << plan.ideal[i] << ',' << plan.shares[i] << '\n';
    }
    emit(os.str(), opt.out_path);
  } else {
    json j = json::parse(plan.to_json());
    j["proportions"] = proportions;
    j["latencies"] = latencies;
    emit(j.dump(2), opt.out_path);
  }
  return kExitOk;
}

}  // namespace moekit::cli
