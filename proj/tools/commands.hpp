#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace moekit::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitVerifyFail = 1;
inline constexpr int kExitUsage = 2;

/// Invalid flag combinations and unreadable configs; mapped to exit code 2.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CommonOptions {
  std::size_t n = 64;
  std::size_t experts = 8;
  std::size_t topk = 2;
  std::size_t d_in = 16;
  std::size_t hidden = 32;
  std::size_t d_out = 16;
  std::size_t blk = 8;
  std::uint64_t seed = 1;
  std::string scheme = "memory_efficient";
  std::string activation = "gelu";
  double capacity_factor = 1.0;
  std::string config_path;
  std::string out_path;
  std::string format = "json";  // json | csv

  void validate() const;
};

struct VerifyOptions {
  CommonOptions common;
  std::size_t instances = 200;
  bool inject_fault = false;
  bool blk_given = false;
};

struct GradcheckOptions {
  GradcheckOptions() {
    common.n = 6;
    common.experts = 4;
    common.topk = 2;
    common.d_in = 4;
    common.hidden = 6;
    common.d_out = 4;
    common.blk = 4;
    common.seed = 7;
  }
  CommonOptions common;
};

struct BenchOptions {
  CommonOptions common;
  std::string distribution = "uniform";
  std::string routing_csv;  // optional fixture overriding synthesis
};

struct SimulateOptions {
  CommonOptions common;
  std::string mode = "data_centric";  // data_centric | model_centric | crossover
  std::size_t devices = 2;
  double non_moe_seconds = 0.0;
  std::size_t n_layers = 1;
  bool use_fused = false;
};

struct ProbeOptions {
  int device_id = 0;
  std::size_t iterations = 8;
  std::size_t matrix_size = 192;
  std::uint64_t seed = 1;
  std::string out_path;
};

struct AllocateOptions {
  std::vector<double> latencies;
  std::int64_t total = 0;
  std::string kind = "batch";  // batch | hidden
  std::string config_path;
  std::string out_path;
  std::string format = "json";
};

int run_verify(const VerifyOptions& opt);
int run_gradcheck(const GradcheckOptions& opt);
int run_bench(const BenchOptions& opt);
int run_simulate(const SimulateOptions& opt);
int run_probe(const ProbeOptions& opt);
int run_allocate(const AllocateOptions& opt);

}  // namespace moekit::cli
