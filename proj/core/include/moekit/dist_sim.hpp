#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "moekit/moe_layer.hpp"
#include "moekit/routing.hpp"
#include "moekit/tensor.hpp"

namespace moekit {

struct DeviceSpec {
  int id = 0;
  double compute_rate = 1.0;    // ops per second
  double link_bandwidth = 1.0;  // values per second
  double link_latency = 0.0;    // seconds per collective

  void validate() const;
};

/// Per-device slice of one MoE layer along the hidden dimension.
struct ParamShard {
  Tensor3D w1;  // E x D_i x h_d
  Matrix2D b1;  // E x h_d
  Tensor3D w2;  // E x h_d x D_o
  std::size_t hidden_offset = 0;

  std::size_t elements() const { return w1.size() + b1.size() + w2.size(); }
};

struct ShardedParams {
  std::vector<ParamShard> shards;
  Matrix2D b2;  // not sharded; owned by rank 0
  ActivationKind activation = ActivationKind::kGelu;
  std::size_t experts = 0;
  std::size_t d_in = 0;
  std::size_t hidden = 0;
  std::size_t d_out = 0;
  std::vector<std::size_t> hidden_sizes;

  std::size_t n_devices() const { return shards.size(); }
  std::size_t full_param_elements() const;
  /// Resident elements on device d (its slice, plus b2 on its owner).
  std::size_t shard_elements(std::size_t d) const;
};

/// Slices along hidden; sum(hidden_alloc) must equal the layer hidden size.
/// unshard_params(shard_params(p, a)) == p exactly.
ShardedParams shard_params(const MoeLayerParams& p,
                           const std::vector<std::size_t>& hidden_alloc);
MoeLayerParams unshard_params(const ShardedParams& s);

class CacheError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One full-layer parameter buffer per device, refilled by all-gather at
/// each pipeline stage.  At most one layer's parameters are resident.
class PipelineSharedCache {
 public:
  explicit PipelineSharedCache(std::size_t capacity_elements)
      : capacity_(capacity_elements) {}

  /// Replaces the resident layer.  Throws CacheError when the parameters
  /// exceed the cache capacity.
  void fill(int layer_id, MoeLayerParams params);
  void clear();

  bool filled() const { return filled_; }
  int layer() const { return layer_; }
  const MoeLayerParams& params() const;
  std::size_t capacity_elements() const { return capacity_; }

 private:
  std::size_t capacity_ = 0;
  bool filled_ = false;
  int layer_ = -1;
  MoeLayerParams params_;
};

// --- synchronous collectives (deterministic ascending-rank reduction) ---

Matrix2D all_gather_rows(const std::vector<Matrix2D>& per_rank);
Matrix2D all_reduce_sum(const std::vector<Matrix2D>& per_rank);
Tensor3D all_reduce_sum(const std::vector<Tensor3D>& per_rank);
std::vector<double> all_reduce_sum(const std::vector<std::vector<double>>& per_rank);

/// latency + volume / min-bandwidth; zero for a single device.
double collective_seconds(std::size_t volume_elements,
                          const std::vector<DeviceSpec>& devices);

struct CollectiveEvent {
  std::string label;
  std::size_t volume = 0;
  double seconds = 0.0;
};

struct SimReport {
  std::string scheme;
  std::size_t n_devices = 1;
  std::size_t n_layers = 1;
  std::vector<double> device_compute_seconds;
  std::vector<CollectiveEvent> collectives;
  double comm_seconds = 0.0;
  double overlap_savings = 0.0;
  double makespan = 0.0;
  double makespan_no_overlap = 0.0;
  std::vector<std::size_t> param_elements_per_device;
  std::vector<std::size_t> activation_elements_per_device;
  std::size_t retain_all_layers_param_elements = 0;
  // Deltas versus a single-device reference run; negative until filled in.
  double equivalence_delta_forward = -1.0;
  double equivalence_delta_grads = -1.0;

  std::string to_json() const;
};

struct DistOptions {
  std::size_t blk = 8;
  MoeScheme moe_scheme = MoeScheme::kMemoryEfficient;
  bool use_fused = false;
  double non_moe_seconds = 0.0;  // overlappable stage per pipeline step
  std::size_t n_layers = 1;      // pipeline depth, accounting only
  std::optional<std::size_t> expected_global_batch;
};

struct DistRunResult {
  Matrix2D y;      // global output, rank-concatenated token order
  MoeGrads grads;  // full parameter gradients and global gx
  SimReport report;
};

/// Data-centric step: parameter shards are all-gathered into each device's
/// pipeline-shared cache (overlappable with the non-MoE stage), every device
/// runs the full layer on its local batch, and parameter gradients are
/// all-reduce-summed.
DistRunResult run_data_centric(const std::vector<Matrix2D>& local_x,
                               const ShardedParams& shards,
                               std::vector<PipelineSharedCache>& caches,
                               const std::vector<RoutingChoice>& local_routing,
                               const std::vector<Matrix2D>& local_gy,
                               const std::vector<DeviceSpec>& devices,
                               const DistOptions& opt = {});

/// Model-centric step: tokens are all-gathered so every device sees the
/// global batch, each device computes on its hidden slice, and partial
/// outputs (forward) / partial input gradients (backward) are
/// all-reduce-summed.  b2 is applied once, by rank 0.
DistRunResult run_model_centric(const std::vector<Matrix2D>& local_x,
                                const ShardedParams& shards,
                                const std::vector<RoutingChoice>& local_routing,
                                const std::vector<Matrix2D>& local_gy,
                                const std::vector<DeviceSpec>& devices,
                                const DistOptions& opt = {});

struct LayerDims {
  std::size_t experts = 8;
  std::size_t d_in = 16;
  std::size_t hidden = 64;
  std::size_t d_out = 16;
  std::size_t k = 1;
};

struct CrossoverRow {
  std::size_t workload = 0;
  double data_centric_seconds = 0.0;
  double model_centric_seconds = 0.0;
};

struct CrossoverTable {
  std::vector<CrossoverRow> rows;
  /// First workload at which the data-centric schedule is no slower.
  std::optional<std::size_t> crossover_workload;
  bool unique_crossover = false;

  std::string to_json() const;
};

/// Cost-model sweep over growing token workloads at fixed parameter volume.
CrossoverTable crossover_probe(const std::vector<DeviceSpec>& devices,
                               const LayerDims& dims,
                               const std::vector<std::size_t>& workloads,
                               const DistOptions& opt = {});

/// Cost-model makespans used by both run_* reports and crossover_probe.
double estimate_data_centric_seconds(const std::vector<DeviceSpec>& devices,
                                     const LayerDims& dims,
                                     const std::vector<std::size_t>& local_batches,
                                     const DistOptions& opt);
double estimate_model_centric_seconds(const std::vector<DeviceSpec>& devices,
                                      const LayerDims& dims,
                                      const std::vector<std::size_t>& hidden_sizes,
                                      std::size_t global_batch,
                                      const DistOptions& opt);

struct SimScenario {
  std::vector<DeviceSpec> devices;
  std::size_t n = 64;
  std::size_t experts = 8;
  std::size_t k = 2;
  std::size_t d_in = 16;
  std::size_t hidden = 32;
  std::size_t d_out = 16;
  std::size_t blk = 8;
  std::uint64_t seed = 1;
  std::string mode = "data_centric";  // data_centric | model_centric | crossover
  MoeScheme moe_scheme = MoeScheme::kMemoryEfficient;
  ActivationKind activation = ActivationKind::kGelu;
  std::string distribution = "uniform";
  bool use_fused = false;
  double non_moe_seconds = 0.0;
  std::size_t n_layers = 1;
  std::vector<std::size_t> workloads;
  std::vector<std::size_t> batch_shares;
  std::vector<std::size_t> hidden_shares;
  std::vector<double> device_latencies;  // optional, feeds the allocator
};

SimScenario load_scenario(const std::string& path);

}  // namespace moekit
