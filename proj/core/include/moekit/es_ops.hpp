#pragma once

#include <cstdint>
#include <optional>

#include "moekit/routing.hpp"
#include "moekit/tensor.hpp"

namespace moekit {

/// Write stores each routed token's result exactly once; Accumulate adds it
/// into an existing destination (the memory-efficient top-k scheme).
enum class EsOutputMode { kWrite, kAccumulate };

/// Token-granular work counters.  Padding slots are skipped and contribute
/// nothing, so `macs` counts only real-token multiply-accumulates.
struct OpStats {
  std::uint64_t macs = 0;
  std::uint64_t adds = 0;
  std::uint64_t padding_slots = 0;

  std::uint64_t total_ops() const { return macs + adds; }
  void reset() { *this = OpStats{}; }
};

/// Execution knobs shared by all operators.
///
/// Tiles run in ascending order by default; that order is the deterministic
/// reference for bit-level comparisons.  Setting tile_shuffle_seed permutes
/// the tile work list, standing in for concurrent tile scheduling: outputs
/// must agree with the ascending order within 1e-12 relative.
struct EsOptions {
  std::optional<std::uint64_t> tile_shuffle_seed;
  OpStats* stats = nullptr;
};

/// y[t] = x[t] . W[e(t)] + b[e(t)] for every routed token t, processed one
/// blk-sized re-index tile at a time.  bias may be null.
Matrix2D esmm(const Matrix2D& x, const Tensor3D& weights, const Matrix2D* bias,
              const ReIndex& rx, const EsOptions& opt = {});

/// Mode-dispatched variant targeting an existing N x D2 destination.
/// Accumulate requires dest; each routed token's row is added exactly once.
void esmm(const Matrix2D& x, const Tensor3D& weights, const Matrix2D* bias,
          const ReIndex& rx, EsOutputMode mode, Matrix2D* dest,
          const EsOptions& opt = {});

/// out[e] = sum of rows routed to expert e; empty experts give zero rows.
Matrix2D ess(const Matrix2D& x, const ReIndex& rx, const EsOptions& opt = {});

/// out[e] = sum over tokens routed to e of outer(x1[t], x2[t]).
Tensor3D estmm(const Matrix2D& x1, const Matrix2D& x2, const ReIndex& rx,
               const EsOptions& opt = {});

struct EsfkResult {
  Matrix2D grad_x;  // esmm(g, w_t, null)
  Matrix2D grad_b;  // ess(g)
  Tensor3D grad_w;  // estmm(x, g)
};

/// Fused backward for one MLP: the three operators' tile decompositions run
/// as a single combined work list.  In deterministic mode the result is
/// bit-identical to calling esmm/ess/estmm separately.
EsfkResult esfk(const Matrix2D& x, const Matrix2D& g, const Tensor3D& w_t,
                const ReIndex& rx, const EsOptions& opt = {});

}  // namespace moekit
