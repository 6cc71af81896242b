#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "moekit/moe_layer.hpp"
#include "moekit/routing.hpp"
#include "moekit/tensor.hpp"

namespace moekit::verify {

// --- brute-force references, written per token / per expert, independent of
// --- the tiled operator path.

Matrix2D dense_esmm_ref(const Matrix2D& x, const Tensor3D& w,
                        const Matrix2D* bias,
                        const std::vector<std::int32_t>& assignment);
Matrix2D group_sum_ref(const Matrix2D& x,
                       const std::vector<std::int32_t>& assignment,
                       std::size_t n_experts);
Tensor3D transposed_matmul_ref(const Matrix2D& x1, const Matrix2D& x2,
                               const std::vector<std::int32_t>& assignment,
                               std::size_t n_experts);

struct SuiteConfig {
  std::size_t instances = 200;
  std::size_t max_n = 64;
  std::size_t max_experts = 8;
  std::size_t max_k = 4;
  std::size_t max_dim = 32;
  std::vector<std::size_t> blks = {2, 4, 8};
  std::uint64_t seed = 12345;
  bool inject_fault = false;  // test-only: corrupts one esmm result
};

struct SuiteResult {
  std::string name;
  std::size_t instances = 0;
  double max_error = 0.0;
  double tolerance = 0.0;
  bool pass = false;
};

/// esmm / ess / estmm versus the brute-force references;
/// scaled absolute error <= 1e-12 * (1 + max |value|).
SuiteResult run_operator_oracle_suite(const SuiteConfig& cfg);

/// naive versus memory_efficient forward, 1e-12 relative.
SuiteResult run_scheme_equivalence_suite(const SuiteConfig& cfg);

/// use_fused on/off backward, bit-identical in deterministic mode.
SuiteResult run_fused_equivalence_suite(const SuiteConfig& cfg);

/// Re-index type invariants over random assignments; max_error counts
/// violations (tolerance 0).
SuiteResult run_reindex_property_suite(const SuiteConfig& cfg);

/// moe_forward/moe_backward versus the dispatch-combine oracle at unbounded
/// capacity, 1e-10 scaled.
SuiteResult run_layer_oracle_suite(const SuiteConfig& cfg);

std::vector<SuiteResult> run_all_suites(const SuiteConfig& cfg);

// --- central finite differences against moe_backward -----------------------

struct GradcheckConfig {
  std::size_t n = 6;
  std::size_t experts = 4;
  std::size_t k = 2;
  std::size_t d_in = 4;
  std::size_t hidden = 6;
  std::size_t d_out = 4;
  std::size_t blk = 4;
  ActivationKind activation = ActivationKind::kGelu;
  std::uint64_t seed = 7;
};

struct GradcheckResult {
  double max_rel_gw1 = 0.0;
  double max_rel_gb1 = 0.0;
  double max_rel_gw2 = 0.0;
  double max_rel_gb2 = 0.0;
  double max_rel_gx = 0.0;
  std::size_t kink_flags = 0;  // |pre-activation| < 1e-4 under ReLU
  std::size_t param_count = 0;

  double worst() const;
};

/// Loss is the sum of all output entries; step 1e-6 * (1 + |theta|);
/// relative error |a - f| / max(1, |a|, |f|).  ReLU instances are re-seeded
/// (seed, seed+1, ...) until no pre-activation sits within 1e-4 of the kink;
/// any that remain are counted in kink_flags.
GradcheckResult run_gradcheck(const GradcheckConfig& cfg);

}  // namespace moekit::verify
