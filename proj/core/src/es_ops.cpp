#include "moekit/es_ops.hpp"

#include <algorithm>
#include <functional>

#include "moekit/random.hpp"

namespace moekit {

namespace {

void check_reindex(const ReIndex& rx) {
  if (rx.idx.size() < 2 || rx.idx.front() != 0 ||
      rx.idx.back() != static_cast<std::int64_t>(rx.v.size())) {
    throw ShapeError("es-ops: malformed re-index vector");
  }
}

// A tile is one blk-slot span of an expert segment.
struct Tile {
  std::size_t expert;
  std::size_t begin;  // offset into rx.v
};

std::vector<Tile> tiles_of(const ReIndex& rx) {
  std::vector<Tile> tiles;
  const std::size_t n_experts = rx.num_experts();
  for (std::size_t e = 0; e < n_experts; ++e) {
    for (auto p = rx.idx[e]; p < rx.idx[e + 1];
         p += static_cast<std::int64_t>(rx.blk)) {
      tiles.push_back({e, static_cast<std::size_t>(p)});
    }
  }
  return tiles;
}

void maybe_shuffle(std::vector<std::size_t>& order,
                   const std::optional<std::uint64_t>& seed) {
  if (!seed) return;
  Rng rng(*seed);
  for (std::size_t i = order.size(); i > 1; --i) {
    std::swap(order[i - 1], order[static_cast<std::size_t>(rng.below(i))]);
  }
}

// One esmm tile: rows for tokens v[begin..begin+blk), all owned by `expert`.
void esmm_tile(const Matrix2D& x, const Tensor3D& w, const Matrix2D* bias,
               const ReIndex& rx, const Tile& tile, EsOutputMode mode,
               Matrix2D& dest, std::vector<double>& scratch, OpStats* stats) {
  const std::size_t d1 = w.dim1();
  const std::size_t d2 = w.dim2();
  std::size_t real = 0;
  for (std::size_t s = 0; s < rx.blk; ++s) {
    const std::int64_t token = rx.v[tile.begin + s];
    if (token < 0) {
      if (stats) ++stats->padding_slots;
      continue;
    }
    ++real;
    const auto t = static_cast<std::size_t>(token);
    if (bias) {
      const double* b = bias->row(tile.expert);
      for (std::size_t j = 0; j < d2; ++j) scratch[j] = b[j];
    } else {
      std::fill(scratch.begin(), scratch.end(), 0.0);
    }
    const double* xrow = x.row(t);
    for (std::size_t c = 0; c < d1; ++c) {
      const double xv = xrow[c];
      const double* wrow = w.row(tile.expert, c);
      for (std::size_t j = 0; j < d2; ++j) scratch[j] += xv * wrow[j];
    }
    double* out = dest.row(t);
    if (mode == EsOutputMode::kWrite) {
      for (std::size_t j = 0; j < d2; ++j) out[j] = scratch[j];
    } else {
      for (std::size_t j = 0; j < d2; ++j) out[j] += scratch[j];
    }
  }
  if (stats) stats->macs += static_cast<std::uint64_t>(real) * d1 * d2;
}

// One ess tile: tile tokens accumulate straight into out[expert].  Direct
// accumulation keeps the per-element addition order a function of the token
// order alone, so enlarging blk (more padding) never changes any output.
void ess_tile(const Matrix2D& x, const ReIndex& rx, const Tile& tile,
              Matrix2D& out, OpStats* stats) {
  const std::size_t d = x.cols();
  double* orow = out.row(tile.expert);
  std::size_t real = 0;
  for (std::size_t s = 0; s < rx.blk; ++s) {
    const std::int64_t token = rx.v[tile.begin + s];
    if (token < 0) {
      if (stats) ++stats->padding_slots;
      continue;
    }
    ++real;
    const double* xrow = x.row(static_cast<std::size_t>(token));
    for (std::size_t j = 0; j < d; ++j) orow[j] += xrow[j];
  }
  if (stats) stats->adds += static_cast<std::uint64_t>(real) * d;
}

// One estmm tile: per-token outer products accumulate straight into the
// expert slice, in token order for the same blk-independence.
void estmm_tile(const Matrix2D& x1, const Matrix2D& x2, const ReIndex& rx,
                const Tile& tile, Tensor3D& out, OpStats* stats) {
  const std::size_t d1 = x1.cols();
  const std::size_t d2 = x2.cols();
  std::size_t real = 0;
  for (std::size_t s = 0; s < rx.blk; ++s) {
    const std::int64_t token = rx.v[tile.begin + s];
    if (token < 0) {
      if (stats) ++stats->padding_slots;
      continue;
    }
    ++real;
    const auto t = static_cast<std::size_t>(token);
    const double* a = x1.row(t);
    const double* b = x2.row(t);
    for (std::size_t i = 0; i < d1; ++i) {
      double* orow = out.row(tile.expert, i);
      const double av = a[i];
      for (std::size_t j = 0; j < d2; ++j) orow[j] += av * b[j];
    }
  }
  if (stats) stats->macs += static_cast<std::uint64_t>(real) * d1 * d2;
}

void run_tasks(std::size_t count, const std::optional<std::uint64_t>& seed,
               const std::function<void(std::size_t)>& run) {
  std::vector<std::size_t> order(count);
  for (std::size_t i = 0; i < count; ++i) order[i] = i;
  maybe_shuffle(order, seed);
  for (std::size_t i : order) run(i);
}

}  // namespace

void esmm(const Matrix2D& x, const Tensor3D& weights, const Matrix2D* bias,
          const ReIndex& rx, EsOutputMode mode, Matrix2D* dest,
          const EsOptions& opt) {
  check_reindex(rx);
  if (x.rows() != rx.n_tokens) {
    throw ShapeError("esmm: token count does not match re-index vector");
  }
  if (weights.dim0() != rx.num_experts()) {
    throw ShapeError("esmm: expert count mismatch between weights and rx");
  }
  if (x.cols() != weights.dim1()) {
    throw ShapeError("esmm: x cols != weights dim1");
  }
  if (bias && (bias->rows() != weights.dim0() || bias->cols() != weights.dim2())) {
    throw ShapeError("esmm: bias shape must be E x D2");
  }
  if (!dest) {
    throw std::invalid_argument(
        mode == EsOutputMode::kAccumulate
            ? "esmm: Accumulate mode requires a destination"
            : "esmm: destination is null");
  }
  if (dest->rows() != x.rows() || dest->cols() != weights.dim2()) {
    throw ShapeError("esmm: destination shape must be N x D2");
  }

  const std::vector<Tile> tiles = tiles_of(rx);
  std::vector<double> scratch(weights.dim2());
  run_tasks(tiles.size(), opt.tile_shuffle_seed, [&](std::size_t i) {
    esmm_tile(x, weights, bias, rx, tiles[i], mode, *dest, scratch, opt.stats);
  });
}

Matrix2D esmm(const Matrix2D& x, const Tensor3D& weights, const Matrix2D* bias,
              const ReIndex& rx, const EsOptions& opt) {
  Matrix2D out(x.rows(), weights.dim2());
  esmm(x, weights, bias, rx, EsOutputMode::kWrite, &out, opt);
  return out;
}

Matrix2D ess(const Matrix2D& x, const ReIndex& rx, const EsOptions& opt) {
  check_reindex(rx);
  if (x.rows() != rx.n_tokens) {
    throw ShapeError("ess: token count does not match re-index vector");
  }
  Matrix2D out(rx.num_experts(), x.cols());
  const std::vector<Tile> tiles = tiles_of(rx);
  run_tasks(tiles.size(), opt.tile_shuffle_seed, [&](std::size_t i) {
    ess_tile(x, rx, tiles[i], out, opt.stats);
  });
  return out;
}

Tensor3D estmm(const Matrix2D& x1, const Matrix2D& x2, const ReIndex& rx,
               const EsOptions& opt) {
  check_reindex(rx);
  if (x1.rows() != x2.rows()) {
    throw ShapeError("estmm: x1 and x2 token counts differ");
  }
  if (x1.rows() != rx.n_tokens) {
    throw ShapeError("estmm: token count does not match re-index vector");
  }
  Tensor3D out(rx.num_experts(), x1.cols(), x2.cols());
  const std::vector<Tile> tiles = tiles_of(rx);
  run_tasks(tiles.size(), opt.tile_shuffle_seed, [&](std::size_t i) {
    estmm_tile(x1, x2, rx, tiles[i], out, opt.stats);
  });
  return out;
}

EsfkResult esfk(const Matrix2D& x, const Matrix2D& g, const Tensor3D& w_t,
                const ReIndex& rx, const EsOptions& opt) {
  check_reindex(rx);
  if (x.rows() != g.rows()) {
    throw ShapeError("esfk: x and g token counts differ");
  }
  if (x.rows() != rx.n_tokens) {
    throw ShapeError("esfk: token count does not match re-index vector");
  }
  if (w_t.dim0() != rx.num_experts() || w_t.dim1() != g.cols()) {
    throw ShapeError("esfk: w_t must be E x D2 x D1 for g of width D2");
  }

  EsfkResult r{Matrix2D(x.rows(), w_t.dim2()), Matrix2D(rx.num_experts(), g.cols()),
               Tensor3D(rx.num_experts(), x.cols(), g.cols())};

  // Combined work list: the three operators' tile decompositions
  // concatenated, each keeping its standalone in-op order.
  const std::vector<Tile> tiles = tiles_of(rx);
  const std::size_t per_op = tiles.size();
  std::vector<double> scratch_mm(w_t.dim2());
  run_tasks(3 * per_op, opt.tile_shuffle_seed, [&](std::size_t i) {
    const Tile& tile = tiles[i % per_op];
    switch (i / per_op) {
      case 0:
        esmm_tile(g, w_t, nullptr, rx, tile, EsOutputMode::kWrite, r.grad_x,
                  scratch_mm, opt.stats);
        break;
      case 1:
        ess_tile(g, rx, tile, r.grad_b, opt.stats);
        break;
      default:
        estmm_tile(x, g, rx, tile, r.grad_w, opt.stats);
        break;
    }
  });
  return r;
}

}  // namespace moekit
