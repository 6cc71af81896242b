#include "verify_suites.hpp"

#include <algorithm>
#include <cmath>

#include "moekit/es_ops.hpp"
#include "moekit/gemm_oracle.hpp"
#include "moekit/random.hpp"

namespace moekit::verify {

Matrix2D dense_esmm_ref(const Matrix2D& x, const Tensor3D& w,
                        const Matrix2D* bias,
                        const std::vector<std::int32_t>& assignment) {
  Matrix2D out(x.rows(), w.dim2());
  for (std::size_t t = 0; t < x.rows(); ++t) {
    const auto e = static_cast<std::size_t>(assignment[t]);
    for (std::size_t j = 0; j < w.dim2(); ++j) {
      double acc = bias ? bias->at(e, j) : 0.0;
      for (std::size_t c = 0; c < x.cols(); ++c) {
        acc += x.at(t, c) * w.at(e, c, j);
      }
      out.at(t, j) = acc;
    }
  }
  return out;
}

Matrix2D group_sum_ref(const Matrix2D& x,
                       const std::vector<std::int32_t>& assignment,
                       std::size_t n_experts) {
  Matrix2D out(n_experts, x.cols());
  for (std::size_t t = 0; t < x.rows(); ++t) {
    const auto e = static_cast<std::size_t>(assignment[t]);
    for (std::size_t j = 0; j < x.cols(); ++j) out.at(e, j) += x.at(t, j);
  }
  return out;
}

Tensor3D transposed_matmul_ref(const Matrix2D& x1, const Matrix2D& x2,
                               const std::vector<std::int32_t>& assignment,
                               std::size_t n_experts) {
  Tensor3D out(n_experts, x1.cols(), x2.cols());
  for (std::size_t t = 0; t < x1.rows(); ++t) {
    const auto e = static_cast<std::size_t>(assignment[t]);
    for (std::size_t i = 0; i < x1.cols(); ++i) {
      for (std::size_t j = 0; j < x2.cols(); ++j) {
        out.at(e, i, j) += x1.at(t, i) * x2.at(t, j);
      }
    }
  }
  return out;
}

namespace {

struct Instance {
  std::size_t n, experts, k, d_in, hidden, d_out, blk;
  RoutingChoice routing;
  MoeLayerParams params;
  Matrix2D x;
};

std::size_t dim_between(Rng& rng, std::size_t lo, std::size_t hi) {
  return lo + static_cast<std::size_t>(rng.below(hi - lo + 1));
}

Instance make_instance(const SuiteConfig& cfg, Rng& rng,
                       ActivationKind activation) {
  Instance in;
  in.n = dim_between(rng, 1, cfg.max_n);
  in.experts = dim_between(rng, 1, cfg.max_experts);
  in.k = dim_between(rng, 1, std::min(cfg.max_k, in.experts));
  in.d_in = dim_between(rng, 1, cfg.max_dim);
  in.hidden = dim_between(rng, 1, cfg.max_dim);
  in.d_out = dim_between(rng, 1, cfg.max_dim);
  in.blk = cfg.blks[static_cast<std::size_t>(rng.below(cfg.blks.size()))];
  in.routing = synthesize_routing(in.n, in.experts, in.k,
                                  RoutingDistribution::uniform(),
                                  rng.next_u64());
  in.params = make_random_params(in.experts, in.d_in, in.hidden, in.d_out,
                                 activation, rng);
  in.x = random_matrix(in.n, in.d_in, rng);
  return in;
}

double scaled_error(double max_diff, double scale) {
  return max_diff / (1.0 + scale);
}

}  // namespace

SuiteResult run_operator_oracle_suite(const SuiteConfig& cfg) {
  SuiteResult res{"operator_oracle", cfg.instances, 0.0, 1e-12, false};
  Rng rng(cfg.seed);
  for (std::size_t it = 0; it < cfg.instances; ++it) {
    const Instance in = make_instance(cfg, rng, ActivationKind::kIdentity);
    const auto& assignment = in.routing.assignments[0];
    const ReIndex rx = build_reindex(assignment, in.experts, in.blk);

    Matrix2D got_mm = esmm(in.x, in.params.w1, &in.params.b1, rx);
    if (cfg.inject_fault && it == 0 && got_mm.size() > 0) {
      got_mm.data()[0] += 1e-3;
    }
    const Matrix2D want_mm =
        dense_esmm_ref(in.x, in.params.w1, &in.params.b1, assignment);
    res.max_error = std::max(
        res.max_error,
        scaled_error(max_abs_diff(got_mm, want_mm), max_abs(want_mm)));

    const Matrix2D got_ss = ess(in.x, rx);
    const Matrix2D want_ss = group_sum_ref(in.x, assignment, in.experts);
    res.max_error = std::max(
        res.max_error,
        scaled_error(max_abs_diff(got_ss, want_ss), max_abs(want_ss)));

    const Tensor3D got_tm = estmm(in.x, got_mm, rx);
    const Tensor3D want_tm =
        transposed_matmul_ref(in.x, got_mm, assignment, in.experts);
    res.max_error = std::max(
        res.max_error,
        scaled_error(max_abs_diff(got_tm, want_tm), max_abs(want_tm)));
  }
  res.pass = res.max_error <= res.tolerance;
  return res;
}

SuiteResult run_scheme_equivalence_suite(const SuiteConfig& cfg) {
  SuiteResult res{"scheme_equivalence", cfg.instances, 0.0, 1e-12, false};
  Rng rng(cfg.seed + 1);
  for (std::size_t it = 0; it < cfg.instances; ++it) {
    const Instance in = make_instance(cfg, rng, ActivationKind::kGelu);
    const Matrix2D y_naive =
        moe_forward(in.x, in.params, in.routing, in.blk, MoeScheme::kNaive).y;
    const Matrix2D y_eff = moe_forward(in.x, in.params, in.routing, in.blk,
                                       MoeScheme::kMemoryEfficient).y;
    res.max_error = std::max(
        res.max_error,
        scaled_error(max_abs_diff(y_naive, y_eff), max_abs(y_naive)));
  }
  res.pass = res.max_error <= res.tolerance;
  return res;
}

SuiteResult run_fused_equivalence_suite(const SuiteConfig& cfg) {
  SuiteResult res{"fused_equivalence", cfg.instances, 0.0, 0.0, false};
  Rng rng(cfg.seed + 2);
  for (std::size_t it = 0; it < cfg.instances; ++it) {
    const Instance in = make_instance(cfg, rng, ActivationKind::kGelu);
    const MoeForwardResult fw = moe_forward(in.x, in.params, in.routing,
                                            in.blk, MoeScheme::kMemoryEfficient);
    const Matrix2D g_y = random_matrix(in.n, in.d_out, rng);
    const MoeGrads plain = moe_backward(fw.stash, in.params, g_y, false);
    const MoeGrads fused = moe_backward(fw.stash, in.params, g_y, true);
    res.max_error = std::max({res.max_error,
                              max_abs_diff(plain.gw1, fused.gw1),
                              max_abs_diff(plain.gb1, fused.gb1),
                              max_abs_diff(plain.gw2, fused.gw2),
                              max_abs_diff(plain.gb2, fused.gb2),
                              max_abs_diff(plain.gx, fused.gx)});
  }
  res.pass = res.max_error <= res.tolerance;
  return res;
}

SuiteResult run_reindex_property_suite(const SuiteConfig& cfg) {
  SuiteResult res{"reindex_properties", cfg.instances, 0.0, 0.0, false};
  Rng rng(cfg.seed + 3);
  std::size_t violations = 0;
  for (std::size_t it = 0; it < cfg.instances; ++it) {
    const std::size_t n = dim_between(rng, 1, cfg.max_n);
    const std::size_t experts = dim_between(rng, 1, cfg.max_experts);
    const std::size_t blk =
        cfg.blks[static_cast<std::size_t>(rng.below(cfg.blks.size()))];
    std::vector<std::int32_t> assignment(n);
    std::vector<std::size_t> count(experts, 0);
    for (auto& a : assignment) {
      a = static_cast<std::int32_t>(rng.below(experts));
      ++count[static_cast<std::size_t>(a)];
    }
    const ReIndex rx = build_reindex(assignment, experts, blk);

    if (rx.idx.front() != 0 ||
        rx.idx.back() != static_cast<std::int64_t>(rx.v.size())) {
      ++violations;
    }
    std::vector<bool> seen(n, false);
    std::size_t non_padding = 0;
    for (std::size_t e = 0; e < experts; ++e) {
      const auto seg = static_cast<std::size_t>(rx.idx[e + 1] - rx.idx[e]);
      if (rx.idx[e + 1] < rx.idx[e] || seg % blk != 0) ++violations;
      if (seg != blk * ((count[e] + blk - 1) / blk)) ++violations;
      std::int64_t prev = -1;
      for (auto p = rx.idx[e]; p < rx.idx[e + 1]; ++p) {
        const std::int64_t t = rx.v[static_cast<std::size_t>(p)];
        if (t < 0) continue;
        ++non_padding;
        if (static_cast<std::size_t>(t) >= n ||
            seen[static_cast<std::size_t>(t)]) {
          ++violations;
        } else {
          seen[static_cast<std::size_t>(t)] = true;
        }
        if (assignment[static_cast<std::size_t>(t)] !=
            static_cast<std::int32_t>(e)) {
          ++violations;
        }
        if (t <= prev) ++violations;  // ascending in-segment order
        prev = t;
      }
    }
    if (non_padding != n) ++violations;
    if (rx.v.size() - n > experts * (blk - 1)) ++violations;
  }
  res.max_error = static_cast<double>(violations);
  res.pass = violations == 0;
  return res;
}

SuiteResult run_layer_oracle_suite(const SuiteConfig& cfg) {
  SuiteResult res{"layer_oracle", cfg.instances, 0.0, 1e-10, false};
  Rng rng(cfg.seed + 4);
  for (std::size_t it = 0; it < cfg.instances; ++it) {
    const Instance in = make_instance(cfg, rng, ActivationKind::kGelu);
    const MoeForwardResult fw = moe_forward(in.x, in.params, in.routing,
                                            in.blk, MoeScheme::kMemoryEfficient);
    const OracleForwardResult ow = oracle_forward(in.x, in.params, in.routing);
    double err = scaled_error(max_abs_diff(fw.y, ow.y), max_abs(ow.y));

    const Matrix2D g_y = random_matrix(in.n, in.d_out, rng);
    const MoeGrads got = moe_backward(fw.stash, in.params, g_y, false);
    const MoeGrads want = oracle_backward(ow.stash, in.params, g_y);
    err = std::max(err, scaled_error(max_abs_diff(got.gw1, want.gw1),
                                     max_abs(want.gw1)));
    err = std::max(err, scaled_error(max_abs_diff(got.gb1, want.gb1),
                                     max_abs(want.gb1)));
    err = std::max(err, scaled_error(max_abs_diff(got.gw2, want.gw2),
                                     max_abs(want.gw2)));
    err = std::max(err, scaled_error(max_abs_diff(got.gb2, want.gb2),
                                     max_abs(want.gb2)));
    err = std::max(err, scaled_error(max_abs_diff(got.gx, want.gx),
                                     max_abs(want.gx)));
    res.max_error = std::max(res.max_error, err);
  }
  res.pass = res.max_error <= res.tolerance;
  return res;
}

std::vector<SuiteResult> run_all_suites(const SuiteConfig& cfg) {
  return {run_operator_oracle_suite(cfg), run_scheme_equivalence_suite(cfg),
          run_fused_equivalence_suite(cfg), run_reindex_property_suite(cfg),
          run_layer_oracle_suite(cfg)};
}

double GradcheckResult::worst() const {
  return std::max({max_rel_gw1, max_rel_gb1, max_rel_gw2, max_rel_gb2,
                   max_rel_gx});
}

namespace {

double loss_of(const Matrix2D& x, const MoeLayerParams& p,
               const RoutingChoice& r, std::size_t blk) {
  const Matrix2D y =
      moe_forward(x, p, r, blk, MoeScheme::kMemoryEfficient).y;
  double sum = 0.0;
  for (double v : y.data()) sum += v;
  return sum;
}

double rel_err(double analytic, double numeric) {
  return std::abs(analytic - numeric) /
         std::max({1.0, std::abs(analytic), std::abs(numeric)});
}

// Central differences over one flat parameter buffer.
double fd_worst(std::vector<double>& theta, const std::vector<double>& analytic,
                const std::function<double()>& loss) {
  double worst = 0.0;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double saved = theta[i];
    const double h = 1e-6 * (1.0 + std::abs(saved));
    theta[i] = saved + h;
    const double up = loss();
    theta[i] = saved - h;
    const double down = loss();
    theta[i] = saved;
    worst = std::max(worst, rel_err(analytic[i], (up - down) / (2.0 * h)));
  }
  return worst;
}

std::size_t count_kinks(const ForwardStash& stash, ActivationKind activation) {
  if (activation != ActivationKind::kRelu) return 0;
  std::size_t flags = 0;
  for (const Matrix2D& y1 : stash.y1) {
    for (double v : y1.data()) {
      if (std::abs(v) < 1e-4) ++flags;
    }
  }
  return flags;
}

}  // namespace

GradcheckResult run_gradcheck(const GradcheckConfig& cfg) {
  GradcheckResult res;

  Matrix2D x;
  MoeLayerParams params;
  RoutingChoice routing;
  // Input-shift heuristic: re-seed until no ReLU pre-activation is near the
  // kink (at most 10 attempts; leftovers are reported).
  for (std::uint64_t attempt = 0; attempt < 10; ++attempt) {
    Rng rng(cfg.seed + attempt);
    routing = synthesize_routing(cfg.n, cfg.experts, cfg.k,
                                 RoutingDistribution::uniform(),
                                 rng.next_u64());
    params = make_random_params(cfg.experts, cfg.d_in, cfg.hidden, cfg.d_out,
                                cfg.activation, rng);
    x = random_matrix(cfg.n, cfg.d_in, rng);
    const MoeForwardResult fw =
        moe_forward(x, params, routing, cfg.blk, MoeScheme::kMemoryEfficient);
    res.kink_flags = count_kinks(fw.stash, cfg.activation);
    if (res.kink_flags == 0) break;
  }
  res.param_count = params.param_elements();

  const MoeForwardResult fw =
      moe_forward(x, params, routing, cfg.blk, MoeScheme::kMemoryEfficient);
  Matrix2D g_y(fw.y.rows(), fw.y.cols());
  for (double& v : g_y.data()) v = 1.0;
  const MoeGrads grads = moe_backward(fw.stash, params, g_y, false);

  const auto loss = [&]() { return loss_of(x, params, routing, cfg.blk); };
  res.max_rel_gw1 = fd_worst(params.w1.data(), grads.gw1.data(), loss);
  res.max_rel_gb1 = fd_worst(params.b1.data(), grads.gb1.data(), loss);
  res.max_rel_gw2 = fd_worst(params.w2.data(), grads.gw2.data(), loss);
  res.max_rel_gb2 = fd_worst(params.b2.data(), grads.gb2.data(), loss);
  res.max_rel_gx = fd_worst(x.data(), grads.gx.data(), loss);
  return res;
}

}  // namespace moekit::verify
