#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "moekit/tensor.hpp"

namespace moekit {

/// Per-token expert assignments for top-k routing: k vectors of length
/// n_tokens, and for each token the k assigned experts are distinct.
struct RoutingChoice {
  std::size_t n_tokens = 0;
  std::size_t n_experts = 0;
  std::size_t k = 0;
  std::vector<std::vector<std::int32_t>> assignments;

  void validate() const;
};

/// Token indices grouped by expert and padded with -1 so every expert
/// segment length is a multiple of blk.
///
/// idx[0] = 0, idx[E] = v.size(), idx nondecreasing; non-negative entries of
/// v are a permutation of 0..n_tokens-1 and appear in ascending order within
/// each segment.
struct ReIndex {
  std::vector<std::int64_t> v;
  std::vector<std::int64_t> idx;
  std::size_t blk = 1;
  std::size_t n_tokens = 0;

  std::size_t num_experts() const { return idx.empty() ? 0 : idx.size() - 1; }
  std::size_t padded_len() const { return v.size(); }
  std::size_t padding() const { return v.size() - n_tokens; }
};

/// Groups token indices per expert with ascending in-segment order and pads
/// each segment up to the next multiple of blk with -1.
ReIndex build_reindex(const std::vector<std::int32_t>& assignment,
                      std::size_t n_experts, std::size_t blk);

/// One ReIndex per routing choice.
std::vector<ReIndex> build_reindex_all(const RoutingChoice& r, std::size_t blk);

struct RoutingDistribution {
  enum class Kind { kUniform, kZipf, kFixedExpert, kBalanced };

  Kind kind = Kind::kUniform;
  double zipf_s = 1.0;
  std::size_t expert = 0;

  static RoutingDistribution uniform() { return {Kind::kUniform, 1.0, 0}; }
  static RoutingDistribution zipf(double s) { return {Kind::kZipf, s, 0}; }
  static RoutingDistribution fixed_expert(std::size_t e) {
    return {Kind::kFixedExpert, 1.0, e};
  }
  static RoutingDistribution balanced() { return {Kind::kBalanced, 1.0, 0}; }

  /// "uniform" | "zipf:<s>" | "fixed:<expert>" | "balanced"
  static RoutingDistribution parse(std::string_view text);
  std::string to_string() const;
};

/// Deterministic synthetic routing; per-token experts are drawn without
/// replacement.  Throws if k > n_experts.
RoutingChoice synthesize_routing(std::size_t n_tokens, std::size_t n_experts,
                                 std::size_t k,
                                 const RoutingDistribution& dist,
                                 std::uint64_t seed);

// CSV fixture format: header line then token_index,choice_index,expert_id.
std::string routing_to_csv(const RoutingChoice& r);
RoutingChoice routing_from_csv(const std::string& text);
void write_routing_csv(const std::string& path, const RoutingChoice& r);
RoutingChoice read_routing_csv(const std::string& path);

}  // namespace moekit
