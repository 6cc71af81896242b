#include <iostream>

#include <CLI11.hpp>

#include "commands.hpp"

namespace cli = moekit::cli;

namespace {

void add_common_dims(CLI::App* cmd, cli::CommonOptions& c) {
  cmd->add_option("--n", c.n, "Token count (or instance-size bound)");
  cmd->add_option("--experts", c.experts, "Number of global experts");
  cmd->add_option("--topk", c.topk, "Routing choices per token");
  cmd->add_option("--din", c.d_in, "FFN input size");
  cmd->add_option("--hidden", c.hidden, "FFN hidden size");
  cmd->add_option("--dout", c.d_out, "FFN output size");
  cmd->add_option("--seed", c.seed, "RNG seed");
  cmd->add_option("--scheme", c.scheme, "naive | memory_efficient");
  cmd->add_option("--activation", c.activation, "relu | gelu | identity");
  cmd->add_option("--capacity-factor", c.capacity_factor,
                  "Per-expert capacity factor for the conventional path");
  cmd->add_option("--config", c.config_path, "JSON config file");
  cmd->add_option("--out", c.out_path, "Output path (default: stdout)");
  cmd->add_option("--format", c.format, "json | csv");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Zero-redundancy MoE computation kit"};
  app.require_subcommand(1);

  cli::VerifyOptions verify_opt;
  CLI::App* verify = app.add_subcommand(
      "verify", "Run operator-oracle, scheme, fused and re-index suites");
  add_common_dims(verify, verify_opt.common);
  CLI::Option* blk_opt =
      verify->add_option("--blk", verify_opt.common.blk, "Tile size");
  verify->add_option("--instances", verify_opt.instances,
                     "Random instances per suite");
  verify->add_flag("--inject-fault", verify_opt.inject_fault,
                   "Test-only: corrupt one operator result");

  cli::GradcheckOptions grad_opt;
  CLI::App* gradcheck = app.add_subcommand(
      "gradcheck", "Central finite differences vs analytic gradients");
  add_common_dims(gradcheck, grad_opt.common);
  gradcheck->add_option("--blk", grad_opt.common.blk, "Tile size");

  cli::BenchOptions bench_opt;
  CLI::App* bench = app.add_subcommand(
      "bench", "Deterministic work/memory counts plus informational timings");
  add_common_dims(bench, bench_opt.common);
  bench->add_option("--blk", bench_opt.common.blk, "Tile size");
  bench->add_option("--distribution", bench_opt.distribution,
                    "uniform | zipf:<s> | fixed:<e> | balanced");
  bench->add_option("--routing-csv", bench_opt.routing_csv,
                    "Routing fixture CSV (token_index,choice_index,expert_id)");
  bench_opt.common.format = "csv";

  cli::SimulateOptions sim_opt;
  CLI::App* simulate = app.add_subcommand(
      "simulate", "Multi-device data-/model-centric runs and crossover sweep");
  add_common_dims(simulate, sim_opt.common);
  simulate->add_option("--blk", sim_opt.common.blk, "Tile size");
  simulate->add_option("--mode", sim_opt.mode,
                       "data_centric | model_centric | crossover");
  simulate->add_option("--devices", sim_opt.devices, "Simulated device count");
  simulate->add_option("--non-moe-seconds", sim_opt.non_moe_seconds,
                       "Overlappable non-MoE stage duration");
  simulate->add_option("--layers", sim_opt.n_layers,
                       "Pipeline depth (accounting only)");
  simulate->add_flag("--fused", sim_opt.use_fused, "Use the fused backward");

  cli::ProbeOptions probe_opt;
  CLI::App* probe = app.add_subcommand(
      "probe", "Measure this machine's proxy-task latency");
  probe->add_option("--device-id", probe_opt.device_id, "Reported device id");
  probe->add_option("--iterations", probe_opt.iterations,
                    "Matrix multiplications to run");
  probe->add_option("--size", probe_opt.matrix_size, "Matrix size");
  probe->add_option("--seed", probe_opt.seed, "RNG seed");
  probe->add_option("--out", probe_opt.out_path, "Output path");

  cli::AllocateOptions alloc_opt;
  CLI::App* allocate = app.add_subcommand(
      "allocate", "Latency-proportional workload shares with exact totals");
  allocate->add_option("--latencies", alloc_opt.latencies,
                       "Per-device proxy latencies (seconds)")
      ->delimiter(',');
  allocate->add_option("--total", alloc_opt.total,
                       "Global batch size or hidden size to divide");
  allocate->add_option("--kind", alloc_opt.kind, "batch | hidden");
  allocate->add_option("--config", alloc_opt.config_path, "JSON config file");
  allocate->add_option("--out", alloc_opt.out_path, "Output path");
  allocate->add_option("--format", alloc_opt.format, "json | csv");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? cli::kExitOk : cli::kExitUsage;
  }

  try {
    verify_opt.blk_given = blk_opt->count() > 0;
    if (verify->parsed()) return cli::run_verify(verify_opt);
    if (gradcheck->parsed()) return cli::run_gradcheck(grad_opt);
    if (bench->parsed()) return cli::run_bench(bench_opt);
    if (simulate->parsed()) return cli::run_simulate(sim_opt);
    if (probe->parsed()) return cli::run_probe(probe_opt);
    if (allocate->parsed()) return cli::run_allocate(alloc_opt);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return cli::kExitUsage;
  }
  return cli::kExitUsage;
}
