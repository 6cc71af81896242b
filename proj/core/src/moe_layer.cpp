#include "moekit/moe_layer.hpp"

#include <stdexcept>

namespace moekit {

MoeScheme moe_scheme_from_name(std::string_view name) {
  if (name == "naive") return MoeScheme::kNaive;
  if (name == "memory_efficient") return MoeScheme::kMemoryEfficient;
  throw std::invalid_argument("unknown scheme: " + std::string(name));
}

std::string_view moe_scheme_name(MoeScheme scheme) {
  return scheme == MoeScheme::kNaive ? "naive" : "memory_efficient";
}

void MoeLayerParams::validate() const {
  const std::size_t e = w1.dim0();
  if (b1.rows() != e || w2.dim0() != e || b2.rows() != e) {
    throw ShapeError("MoeLayerParams: expert counts disagree");
  }
  if (b1.cols() != w1.dim2() || w2.dim1() != w1.dim2()) {
    throw ShapeError("MoeLayerParams: hidden sizes disagree");
  }
  if (b2.cols() != w2.dim2()) {
    throw ShapeError("MoeLayerParams: b2 cols != W2 output dim");
  }
}

MoeForwardResult moe_forward(const Matrix2D& x, const MoeLayerParams& p,
                             const RoutingChoice& r, std::size_t blk,
                             MoeScheme scheme, const EsOptions& opt) {
  p.validate();
  r.validate();
  if (x.rows() != r.n_tokens) {
    throw ShapeError("moe_forward: x rows != routed token count");
  }
  if (x.cols() != p.d_in()) {
    throw ShapeError("moe_forward: x cols != layer input size");
  }
  if (r.n_experts != p.experts()) {
    throw ShapeError("moe_forward: routing expert count != layer experts");
  }

  MoeForwardResult res;
  res.stash.x = x;
  res.stash.scheme = scheme;
  res.stash.blk = blk;
  res.stash.reindex = build_reindex_all(r, blk);
  res.stash.y1.reserve(r.k);
  res.stash.y2.reserve(r.k);

  res.y = Matrix2D(x.rows(), p.d_out());
  for (std::size_t i = 0; i < r.k; ++i) {
    const ReIndex& rx = res.stash.reindex[i];
    res.stash.y1.push_back(esmm(x, p.w1, &p.b1, rx, opt));
    res.stash.y2.push_back(activation_apply(p.activation, res.stash.y1[i]));
    if (scheme == MoeScheme::kNaive) {
      Matrix2D out_i = esmm(res.stash.y2[i], p.w2, &p.b2, rx, opt);
      add_inplace(res.y, out_i);
    } else {
      esmm(res.stash.y2[i], p.w2, &p.b2, rx, EsOutputMode::kAccumulate, &res.y,
           opt);
    }
  }
  return res;
}

MoeGrads moe_backward(const ForwardStash& stash, const MoeLayerParams& p,
                      const Matrix2D& g_y, bool use_fused,
                      const EsOptions& opt) {
  p.validate();
  const std::size_t k = stash.reindex.size();
  if (stash.y1.size() != k || stash.y2.size() != k) {
    throw ShapeError("moe_backward: stash is incomplete");
  }
  if (g_y.rows() != stash.x.rows() || g_y.cols() != p.d_out()) {
    throw ShapeError("moe_backward: g_y shape must be N x D_o");
  }
  if (stash.x.cols() != p.d_in() ||
      (k > 0 && stash.y1[0].cols() != p.hidden())) {
    throw ShapeError("moe_backward: stash does not match params");
  }

  MoeGrads g{Tensor3D(p.experts(), p.d_in(), p.hidden()),
             Matrix2D(p.experts(), p.hidden()),
             Tensor3D(p.experts(), p.hidden(), p.d_out()),
             Matrix2D(p.experts(), p.d_out()),
             Matrix2D(stash.x.rows(), p.d_in())};

  const Tensor3D w2_t = transpose_experts(p.w2);
  const Tensor3D w1_t = transpose_experts(p.w1);

  for (std::size_t i = 0; i < k; ++i) {
    const ReIndex& rx = stash.reindex[i];
    Matrix2D g_y2;
    if (use_fused) {
      EsfkResult second = esfk(stash.y2[i], g_y, w2_t, rx, opt);
      g_y2 = std::move(second.grad_x);
      add_inplace(g.gb2, second.grad_b);
      add_inplace(g.gw2, second.grad_w);
    } else {
      add_inplace(g.gb2, ess(g_y, rx, opt));
      add_inplace(g.gw2, estmm(stash.y2[i], g_y, rx, opt));
      g_y2 = esmm(g_y, w2_t, nullptr, rx, opt);
    }

    const Matrix2D g_y1 = activation_grad(p.activation, stash.y1[i], g_y2);

    if (use_fused) {
      EsfkResult first = esfk(stash.x, g_y1, w1_t, rx, opt);
      add_inplace(g.gb1, first.grad_b);
      add_inplace(g.gw1, first.grad_w);
      add_inplace(g.gx, first.grad_x);
    } else {
      add_inplace(g.gb1, ess(g_y1, rx, opt));
      add_inplace(g.gw1, estmm(stash.x, g_y1, rx, opt));
      esmm(g_y1, w1_t, nullptr, rx, EsOutputMode::kAccumulate, &g.gx, opt);
    }
  }
  return g;
}

double estimate_activation_memory(std::size_t n_tokens, std::size_t k,
                                  double hidden_ratio, MoeScheme scheme) {
  if (n_tokens == 0) return 0.0;
  const double n = static_cast<double>(n_tokens);
  const double kd = static_cast<double>(k);
  const double hidden = kd * hidden_ratio * n;
  if (scheme == MoeScheme::kNaive) {
    return hidden + kd * n + n;
  }
  return hidden + n;
}

MoeLayerParams make_random_params(std::size_t experts, std::size_t d_in,
                                  std::size_t hidden, std::size_t d_out,
                                  ActivationKind activation, Rng& rng,
                                  double scale) {
  MoeLayerParams p;
  p.w1 = random_tensor(experts, d_in, hidden, rng, scale);
  p.b1 = random_matrix(experts, hidden, rng, scale);
  p.w2 = random_tensor(experts, hidden, d_out, rng, scale);
  p.b2 = random_matrix(experts, d_out, rng, scale);
  p.activation = activation;
  return p;
}

}  // namespace moekit
