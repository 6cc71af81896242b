#include "moekit/hetero_alloc.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "moekit/random.hpp"
#include "moekit/tensor.hpp"

namespace moekit {

std::string AllocationPlan::to_json() const {
  nlohmann::json j;
  j["kind"] = kind == AllocationKind::kBatch ? "batch" : "hidden";
  j["total"] = total;
  j["shares"] = shares;
  j["ideal"] = ideal;
  return j.dump();
}

std::string AllocationPlan::to_csv() const {
  std::ostringstream os;
  os << "device,ideal,share\n";
  for (std::size_t i = 0; i < shares.size(); ++i) {
    os << i << ',' << ideal[i] << ',' << shares[i] << '\n';
  }
  return os.str();
}

double probe_capacity_seconds(std::size_t iterations, std::size_t matrix_size,
                              std::uint64_t seed) {
  if (matrix_size == 0) {
    throw std::invalid_argument("probe_capacity: matrix size must be >= 1");
  }
  Rng rng(seed);
  volatile double sink = 0.0;
  const auto start = std::chrono::steady_clock::now();
  for (std::size_t it = 0; it < iterations; ++it) {
    const Matrix2D a = random_matrix(matrix_size, matrix_size, rng);
    const Matrix2D b = random_matrix(matrix_size, matrix_size, rng);
    Matrix2D y(matrix_size, matrix_size);
    for (std::size_t i = 0; i < matrix_size; ++i) {
      for (std::size_t c = 0; c < matrix_size; ++c) {
        const double av = a.at(i, c);
        const double* brow = b.row(c);
        double* yrow = y.row(i);
        for (std::size_t j = 0; j < matrix_size; ++j) yrow[j] += av * brow[j];
      }
    }
    sink = sink + y.at(0, 0);
  }
  const auto end = std::chrono::steady_clock::now();
  (void)sink;
  return std::chrono::duration<double>(end - start).count();
}

std::vector<double> capacity_proportions(const std::vector<double>& latencies) {
  if (latencies.empty()) {
    throw std::invalid_argument("capacity_proportions: no devices");
  }
  double inv_sum = 0.0;
  for (double t : latencies) {
    if (!(t > 0.0)) {
      throw std::invalid_argument("capacity_proportions: latency must be > 0");
    }
    inv_sum += 1.0 / t;
  }
  std::vector<double> r(latencies.size());
  for (std::size_t i = 0; i < latencies.size(); ++i) {
    r[i] = (1.0 / latencies[i]) / inv_sum;
  }
  return r;
}

std::vector<std::int64_t> round_preserving_sum(const std::vector<double>& ideal,
                                               std::int64_t total) {
  double sum = 0.0;
  for (double v : ideal) {
    if (v < 0.0) {
      throw std::invalid_argument("round_preserving_sum: negative ideal share");
    }
    sum += v;
  }
  if (std::abs(sum - static_cast<double>(total)) > 1e-9 * (1.0 + std::abs(sum))) {
    throw std::invalid_argument(
        "round_preserving_sum: ideals do not sum to total");
  }

  std::vector<std::int64_t> shares(ideal.size());
  std::vector<double> frac(ideal.size());
  std::int64_t assigned = 0;
  for (std::size_t i = 0; i < ideal.size(); ++i) {
    shares[i] = static_cast<std::int64_t>(std::floor(ideal[i]));
    frac[i] = ideal[i] - static_cast<double>(shares[i]);
    assigned += shares[i];
  }

  std::vector<std::size_t> order(ideal.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return frac[a] > frac[b];  // ties keep lower index first
  });

  std::int64_t remaining = total - assigned;
  for (std::size_t i = 0; remaining > 0 && i < order.size(); ++i) {
    ++shares[order[i]];
    --remaining;
  }
  if (remaining != 0) {
    // Can only happen from float drift in the ideals; take units back from
    // the smallest fractional parts.
    for (auto it = order.rbegin(); remaining < 0 && it != order.rend(); ++it) {
      if (shares[*it] > 0) {
        --shares[*it];
        ++remaining;
      }
    }
  }
  return shares;
}

namespace {

AllocationPlan allocate(const std::vector<double>& latencies,
                        std::int64_t total, AllocationKind kind) {
  if (total < 0) {
    throw std::invalid_argument("allocate: total must be >= 0");
  }
  const std::vector<double> r = capacity_proportions(latencies);
  AllocationPlan plan;
  plan.kind = kind;
  plan.total = total;
  plan.ideal.resize(r.size());
  for (std::size_t i = 0; i < r.size(); ++i) {
    plan.ideal[i] = r[i] * static_cast<double>(total);
  }
  plan.shares = round_preserving_sum(plan.ideal, total);
  return plan;
}

}  // namespace

AllocationPlan allocate_batches(const std::vector<double>& latencies,
                                std::int64_t b_global) {
  return allocate(latencies, b_global, AllocationKind::kBatch);
}

AllocationPlan allocate_hidden(const std::vector<double>& latencies,
                               std::int64_t hidden_total) {
  return allocate(latencies, hidden_total, AllocationKind::kHidden);
}

}  // namespace moekit
