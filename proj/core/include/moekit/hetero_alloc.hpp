#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace moekit {

struct DeviceProfile {
  int id = 0;
  double proxy_latency_s = 1.0;
  std::string label;
};

enum class AllocationKind { kBatch, kHidden };

/// Integer workload shares with their pre-rounding ideals.  Invariants:
/// sum(shares) == total and |shares[i] - ideal[i]| < 1 for all i.
struct AllocationPlan {
  AllocationKind kind = AllocationKind::kBatch;
  std::vector<std::int64_t> shares;
  std::int64_t total = 0;
  std::vector<double> ideal;

  std::string to_json() const;
  std::string to_csv() const;
};

/// Wall time of a for loop of `iterations` dense matrix multiplications at
/// size x size, with seeded contents.  Timing is environment-dependent; this
/// is a measurement utility, not a deterministic function.
double probe_capacity_seconds(std::size_t iterations, std::size_t matrix_size,
                              std::uint64_t seed);

/// R_i = (1/t_i) / sum_j (1/t_j); proportions sum to 1.
std::vector<double> capacity_proportions(const std::vector<double>& latencies);

AllocationPlan allocate_batches(const std::vector<double>& latencies,
                                std::int64_t b_global);
AllocationPlan allocate_hidden(const std::vector<double>& latencies,
                               std::int64_t hidden_total);

/// Largest-remainder rounding: floors everything, then hands the remaining
/// units to the largest fractional parts (ties to the lower index).
/// Requires sum(ideal) == total within 1e-9 and ideal >= 0.
std::vector<std::int64_t> round_preserving_sum(const std::vector<double>& ideal,
                                               std::int64_t total);

}  // namespace moekit
