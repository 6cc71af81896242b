#include "moekit/gemm_oracle.hpp"

#include <cmath>

#include <nlohmann/json.hpp>

namespace moekit {

namespace {

// Classic i-j-k dense products, independent of the tiled operator path.
Matrix2D dense_matmul(const Matrix2D& a, const Matrix2D& b) {
  if (a.cols() != b.rows()) throw ShapeError("dense_matmul: inner dims differ");
  Matrix2D out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double acc = 0.0;
      for (std::size_t c = 0; c < a.cols(); ++c) {
        acc += a.at(i, c) * b.at(c, j);
      }
      out.at(i, j) = acc;
    }
  }
  return out;
}

Matrix2D expert_weight(const Tensor3D& w, std::size_t e) {
  Matrix2D out(w.dim1(), w.dim2());
  for (std::size_t i = 0; i < w.dim1(); ++i) {
    for (std::size_t j = 0; j < w.dim2(); ++j) out.at(i, j) = w.at(e, i, j);
  }
  return out;
}

Matrix2D transpose(const Matrix2D& m) {
  Matrix2D out(m.cols(), m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t j = 0; j < m.cols(); ++j) out.at(j, i) = m.at(i, j);
  }
  return out;
}

void add_row_bias(Matrix2D& m, const Matrix2D& bias, std::size_t e) {
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t j = 0; j < m.cols(); ++j) m.at(i, j) += bias.at(e, j);
  }
}

Matrix2D column_sums(const Matrix2D& m) {
  Matrix2D out(1, m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t j = 0; j < m.cols(); ++j) out.at(0, j) += m.at(i, j);
  }
  return out;
}

}  // namespace

std::size_t DispatchedBatch::total_rows() const {
  std::size_t rows = 0;
  for (const auto& m : expert_tokens) rows += m.rows();
  return rows;
}

std::size_t DispatchedBatch::padded_rows() const {
  std::size_t pads = 0;
  for (const auto& o : origin) {
    for (std::int64_t t : o) {
      if (t < 0) ++pads;
    }
  }
  return pads;
}

DispatchedBatch dispatch(const Matrix2D& x,
                         const std::vector<std::int32_t>& assignment,
                         std::size_t n_experts,
                         std::optional<std::size_t> capacity) {
  if (x.rows() != assignment.size()) {
    throw ShapeError("dispatch: assignment length != token count");
  }
  DispatchedBatch d;
  d.n_tokens = x.rows();
  d.capacity = capacity;

  std::vector<std::vector<std::int64_t>> kept(n_experts);
  for (std::size_t t = 0; t < assignment.size(); ++t) {
    const std::int32_t e = assignment[t];
    if (e < 0 || static_cast<std::size_t>(e) >= n_experts) {
      throw std::invalid_argument("dispatch: expert id out of range");
    }
    auto& rows = kept[static_cast<std::size_t>(e)];
    if (capacity && rows.size() >= *capacity) {
      // Keep-lowest-indices drop policy.
      d.dropped.push_back(static_cast<std::int64_t>(t));
    } else {
      rows.push_back(static_cast<std::int64_t>(t));
    }
  }

  d.expert_tokens.reserve(n_experts);
  d.origin.reserve(n_experts);
  for (std::size_t e = 0; e < n_experts; ++e) {
    const std::size_t rows = capacity ? *capacity : kept[e].size();
    Matrix2D m(rows, x.cols());
    std::vector<std::int64_t> origin(rows, -1);
    for (std::size_t i = 0; i < kept[e].size(); ++i) {
      origin[i] = kept[e][i];
      const auto t = static_cast<std::size_t>(kept[e][i]);
      for (std::size_t j = 0; j < x.cols(); ++j) m.at(i, j) = x.at(t, j);
    }
    d.expert_tokens.push_back(std::move(m));
    d.origin.push_back(std::move(origin));
  }
  return d;
}

Matrix2D combine(const DispatchedBatch& d,
                 const std::vector<Matrix2D>& expert_outputs,
                 std::size_t d_out) {
  if (expert_outputs.size() != d.origin.size()) {
    throw ShapeError("combine: expert output count != dispatched experts");
  }
  Matrix2D out(d.n_tokens, d_out);
  for (std::size_t e = 0; e < expert_outputs.size(); ++e) {
    const Matrix2D& y = expert_outputs[e];
    if (y.rows() != d.origin[e].size() || y.cols() != d_out) {
      throw ShapeError("combine: output rows do not match origin map");
    }
    for (std::size_t i = 0; i < y.rows(); ++i) {
      const std::int64_t t = d.origin[e][i];
      if (t < 0) continue;
      for (std::size_t j = 0; j < d_out; ++j) {
        out.at(static_cast<std::size_t>(t), j) += y.at(i, j);
      }
    }
  }
  return out;
}

OracleForwardResult oracle_forward(const Matrix2D& x, const MoeLayerParams& p,
                                   const RoutingChoice& r,
                                   std::optional<std::size_t> capacity) {
  p.validate();
  r.validate();
  if (x.cols() != p.d_in() || x.rows() != r.n_tokens ||
      r.n_experts != p.experts()) {
    throw ShapeError("oracle_forward: shapes inconsistent");
  }

  OracleForwardResult res;
  res.stash.x = x;
  res.y = Matrix2D(x.rows(), p.d_out());
  for (std::size_t i = 0; i < r.k; ++i) {
    OracleChoiceStash cs;
    cs.batch = dispatch(x, r.assignments[i], p.experts(), capacity);
    std::vector<Matrix2D> outputs;
    outputs.reserve(p.experts());
    for (std::size_t e = 0; e < p.experts(); ++e) {
      Matrix2D y1 = dense_matmul(cs.batch.expert_tokens[e], expert_weight(p.w1, e));
      add_row_bias(y1, p.b1, e);
      Matrix2D y2 = activation_apply(p.activation, y1);
      Matrix2D out = dense_matmul(y2, expert_weight(p.w2, e));
      add_row_bias(out, p.b2, e);
      cs.y1.push_back(std::move(y1));
      cs.y2.push_back(std::move(y2));
      outputs.push_back(std::move(out));
    }
    add_inplace(res.y, combine(cs.batch, outputs, p.d_out()));
    res.stash.choices.push_back(std::move(cs));
  }
  return res;
}

MoeGrads oracle_backward(const OracleStash& stash, const MoeLayerParams& p,
                         const Matrix2D& g_y) {
  p.validate();
  if (g_y.rows() != stash.x.rows() || g_y.cols() != p.d_out()) {
    throw ShapeError("oracle_backward: g_y shape must be N x D_o");
  }

  MoeGrads g{Tensor3D(p.experts(), p.d_in(), p.hidden()),
             Matrix2D(p.experts(), p.hidden()),
             Tensor3D(p.experts(), p.hidden(), p.d_out()),
             Matrix2D(p.experts(), p.d_out()),
             Matrix2D(stash.x.rows(), p.d_in())};

  for (const OracleChoiceStash& cs : stash.choices) {
    for (std::size_t e = 0; e < p.experts(); ++e) {
      const auto& origin = cs.batch.origin[e];
      // Upstream gradient rows for this expert; padding rows stay zero
      // because combine discarded their outputs.
      Matrix2D g_out(origin.size(), p.d_out());
      for (std::size_t i = 0; i < origin.size(); ++i) {
        if (origin[i] < 0) continue;
        const auto t = static_cast<std::size_t>(origin[i]);
        for (std::size_t j = 0; j < p.d_out(); ++j) {
          g_out.at(i, j) = g_y.at(t, j);
        }
      }

      const Matrix2D gb2_e = column_sums(g_out);
      for (std::size_t j = 0; j < p.d_out(); ++j) {
        g.gb2.at(e, j) += gb2_e.at(0, j);
      }
      const Matrix2D gw2_e = dense_matmul(transpose(cs.y2[e]), g_out);
      for (std::size_t i = 0; i < p.hidden(); ++i) {
        for (std::size_t j = 0; j < p.d_out(); ++j) {
          g.gw2.at(e, i, j) += gw2_e.at(i, j);
        }
      }

      const Matrix2D g_y2 = dense_matmul(g_out, transpose(expert_weight(p.w2, e)));
      const Matrix2D g_y1 = activation_grad(p.activation, cs.y1[e], g_y2);

      const Matrix2D gb1_e = column_sums(g_y1);
      for (std::size_t j = 0; j < p.hidden(); ++j) {
        g.gb1.at(e, j) += gb1_e.at(0, j);
      }
      const Matrix2D gw1_e =
          dense_matmul(transpose(cs.batch.expert_tokens[e]), g_y1);
      for (std::size_t i = 0; i < p.d_in(); ++i) {
        for (std::size_t j = 0; j < p.hidden(); ++j) {
          g.gw1.at(e, i, j) += gw1_e.at(i, j);
        }
      }

      const Matrix2D g_x_e = dense_matmul(g_y1, transpose(expert_weight(p.w1, e)));
      for (std::size_t i = 0; i < origin.size(); ++i) {
        if (origin[i] < 0) continue;
        const auto t = static_cast<std::size_t>(origin[i]);
        for (std::size_t j = 0; j < p.d_in(); ++j) {
          g.gx.at(t, j) += g_x_e.at(i, j);
        }
      }
    }
  }
  return g;
}

std::string RedundancyReport::to_json() const {
  nlohmann::json j;
  j["token_macs_expert_specific"] = token_macs_expert_specific;
  j["token_macs_oracle"] = token_macs_oracle;
  j["padded_rows"] = padded_rows;
  j["dropped_tokens"] = dropped_tokens;
  j["capacity_per_expert"] = capacity_per_expert;
  return j.dump();
}

RedundancyReport count_redundancy(const RoutingChoice& r, std::size_t d_in,
                                  std::size_t hidden, std::size_t d_out,
                                  double capacity_factor) {
  r.validate();
  if (capacity_factor <= 0.0) {
    throw std::invalid_argument("count_redundancy: capacity_factor must be > 0");
  }
  const std::uint64_t macs_per_row =
      static_cast<std::uint64_t>(d_in) * hidden +
      static_cast<std::uint64_t>(hidden) * d_out;

  RedundancyReport rep;
  rep.token_macs_expert_specific =
      static_cast<std::uint64_t>(r.k) * r.n_tokens * macs_per_row;

  const double ideal_rows = capacity_factor * static_cast<double>(r.k) *
                            static_cast<double>(r.n_tokens) /
                            static_cast<double>(r.n_experts);
  const auto capacity = static_cast<std::size_t>(std::ceil(ideal_rows));
  rep.capacity_per_expert = capacity;

  // All k*N (token, choice) pairs compete for the same per-expert buffers.
  std::vector<std::uint64_t> load(r.n_experts, 0);
  for (const auto& a : r.assignments) {
    for (std::int32_t e : a) ++load[static_cast<std::size_t>(e)];
  }
  for (std::size_t e = 0; e < r.n_experts; ++e) {
    const std::uint64_t kept = std::min<std::uint64_t>(load[e], capacity);
    rep.padded_rows += capacity - kept;
    rep.dropped_tokens += load[e] - kept;
  }
  rep.token_macs_oracle = static_cast<std::uint64_t>(r.n_experts) * capacity *
                          macs_per_row;
  return rep;
}

}  // namespace moekit
