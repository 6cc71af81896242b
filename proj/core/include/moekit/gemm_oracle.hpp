#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "moekit/moe_layer.hpp"
#include "moekit/routing.hpp"
#include "moekit/tensor.hpp"

namespace moekit {

/// Tokens regrouped per expert for one routing choice.  With a finite
/// capacity every expert batch has exactly `capacity` rows: overflow tokens
/// are dropped (lowest indices kept), shortfall rows are zero padding.
struct DispatchedBatch {
  std::vector<Matrix2D> expert_tokens;
  /// Per expert, per row: source token index, or -1 for a padding row.
  std::vector<std::vector<std::int64_t>> origin;
  std::vector<std::int64_t> dropped;
  std::size_t n_tokens = 0;
  std::optional<std::size_t> capacity;

  std::size_t total_rows() const;
  std::size_t padded_rows() const;
};

DispatchedBatch dispatch(const Matrix2D& x,
                         const std::vector<std::int32_t>& assignment,
                         std::size_t n_experts,
                         std::optional<std::size_t> capacity = std::nullopt);

/// Scatters per-expert output rows back to their origin tokens, accumulating
/// into an N x D_o batch.  Dropped tokens receive zero contribution.
Matrix2D combine(const DispatchedBatch& d,
                 const std::vector<Matrix2D>& expert_outputs,
                 std::size_t d_out);

struct OracleChoiceStash {
  DispatchedBatch batch;
  std::vector<Matrix2D> y1;  // per expert, pre-activation
  std::vector<Matrix2D> y2;  // per expert, activated
};

struct OracleStash {
  Matrix2D x;
  std::vector<OracleChoiceStash> choices;
};

struct OracleForwardResult {
  Matrix2D y;
  OracleStash stash;
};

/// Conventional dispatch -> per-expert dense GEMM -> combine formulation.
/// At unbounded capacity this is the defining reference for moe_forward.
OracleForwardResult oracle_forward(const Matrix2D& x, const MoeLayerParams& p,
                                   const RoutingChoice& r,
                                   std::optional<std::size_t> capacity =
                                       std::nullopt);

MoeGrads oracle_backward(const OracleStash& stash, const MoeLayerParams& p,
                         const Matrix2D& g_y);

/// Work and padding accounting for the conventional formulation versus the
/// expert-specific one.
struct RedundancyReport {
  std::uint64_t token_macs_expert_specific = 0;
  std::uint64_t token_macs_oracle = 0;
  std::uint64_t padded_rows = 0;
  std::uint64_t dropped_tokens = 0;
  std::size_t capacity_per_expert = 0;

  std::string to_json() const;
};

/// Buckets all k*N (token, choice) pairs into E buffers with per-expert
/// capacity ceil(capacity_factor * k * N / E); each expert computes a full
/// capacity-row batch, so padding rows cost real work and overflow drops
/// tokens.  The expert-specific count is k*N*(D_i*H + H*D_o) regardless of
/// skew.
RedundancyReport count_redundancy(const RoutingChoice& r, std::size_t d_in,
                                  std::size_t hidden, std::size_t d_out,
                                  double capacity_factor);

}  // namespace moekit
