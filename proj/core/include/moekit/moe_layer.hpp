#pragma once

#include "moekit/es_ops.hpp"
#include "moekit/random.hpp"
#include "moekit/routing.hpp"
#include "moekit/tensor.hpp"

namespace moekit {

/// Naive materializes one output batch per routing choice and sums them;
/// MemoryEfficient accumulates each choice's second-MLP result directly
/// into the output buffer.
enum class MoeScheme { kNaive, kMemoryEfficient };

MoeScheme moe_scheme_from_name(std::string_view name);
std::string_view moe_scheme_name(MoeScheme scheme);

/// One MoE FFN: two per-expert MLPs with an elementwise activation between.
/// w1: E x D_i x H, b1: E x H, w2: E x H x D_o, b2: E x D_o.
struct MoeLayerParams {
  Tensor3D w1;
  Matrix2D b1;
  Tensor3D w2;
  Matrix2D b2;
  ActivationKind activation = ActivationKind::kGelu;

  std::size_t experts() const { return w1.dim0(); }
  std::size_t d_in() const { return w1.dim1(); }
  std::size_t hidden() const { return w1.dim2(); }
  std::size_t d_out() const { return w2.dim2(); }
  std::size_t param_elements() const {
    return w1.size() + b1.size() + w2.size() + b2.size();
  }
  void validate() const;
};

/// Everything backward needs without recomputation: input, per-choice
/// pre-activations and activations, and per-choice re-index vectors.
struct ForwardStash {
  Matrix2D x;
  std::vector<Matrix2D> y1;
  std::vector<Matrix2D> y2;
  std::vector<ReIndex> reindex;
  MoeScheme scheme = MoeScheme::kMemoryEfficient;
  std::size_t blk = 8;
};

struct MoeGrads {
  Tensor3D gw1;
  Matrix2D gb1;
  Tensor3D gw2;
  Matrix2D gb2;
  Matrix2D gx;
};

struct MoeForwardResult {
  Matrix2D y;
  ForwardStash stash;
};

/// y = sum over choices i of ESMM(F(ESMM(x, W1, b1, R_i)), W2, b2, R_i).
/// Choices contribute in ascending order; both schemes agree within 1e-12
/// relative (bitwise in deterministic mode).
MoeForwardResult moe_forward(const Matrix2D& x, const MoeLayerParams& p,
                             const RoutingChoice& r, std::size_t blk,
                             MoeScheme scheme, const EsOptions& opt = {});

/// Gradients of all four parameter tensors and the input for an upstream
/// gradient g_y.  With use_fused each MLP's three gradients run through
/// esfk; deterministic-mode results are bit-identical either way.
MoeGrads moe_backward(const ForwardStash& stash, const MoeLayerParams& p,
                      const Matrix2D& g_y, bool use_fused = false,
                      const EsOptions& opt = {});

/// Activation memory in token units (input/output token = 1 unit, hidden
/// token = hidden_ratio units):
///   naive     = k*hidden_ratio*N + k*N + N
///   efficient = k*hidden_ratio*N + N
double estimate_activation_memory(std::size_t n_tokens, std::size_t k,
                                  double hidden_ratio, MoeScheme scheme);
inline double estimate_activation_memory(std::size_t n_tokens, std::size_t k,
                                         MoeScheme scheme) {
  return estimate_activation_memory(n_tokens, k, 4.0, scheme);
}

MoeLayerParams make_random_params(std::size_t experts, std::size_t d_in,
                                  std::size_t hidden, std::size_t d_out,
                                  ActivationKind activation, Rng& rng,
                                  double scale = 0.5);

}  // namespace moekit
