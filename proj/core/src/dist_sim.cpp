#include "moekit/dist_sim.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

#include "moekit/es_ops.hpp"

namespace moekit {

void DeviceSpec::validate() const {
  if (!(compute_rate > 0.0) || !(link_bandwidth > 0.0) || link_latency < 0.0) {
    throw std::invalid_argument("DeviceSpec: rates must be positive");
  }
}

std::size_t ShardedParams::full_param_elements() const {
  return experts * (d_in * hidden + hidden + hidden * d_out + d_out);
}

std::size_t ShardedParams::shard_elements(std::size_t d) const {
  std::size_t n = shards[d].elements();
  if (d == 0) n += b2.size();
  return n;
}

ShardedParams shard_params(const MoeLayerParams& p,
                           const std::vector<std::size_t>& hidden_alloc) {
  p.validate();
  if (hidden_alloc.empty()) {
    throw std::invalid_argument("shard_params: need at least one device");
  }
  const std::size_t total =
      std::accumulate(hidden_alloc.begin(), hidden_alloc.end(), std::size_t{0});
  if (total != p.hidden()) {
    throw std::invalid_argument(
        "shard_params: hidden allocation does not sum to the hidden size");
  }
  for (std::size_t h : hidden_alloc) {
    if (h == 0) {
      throw std::invalid_argument("shard_params: hidden shares must be > 0");
    }
  }

  ShardedParams s;
  s.b2 = p.b2;
  s.activation = p.activation;
  s.experts = p.experts();
  s.d_in = p.d_in();
  s.hidden = p.hidden();
  s.d_out = p.d_out();
  s.hidden_sizes = hidden_alloc;

  std::size_t offset = 0;
  for (std::size_t h : hidden_alloc) {
    ParamShard shard;
    shard.hidden_offset = offset;
    shard.w1 = Tensor3D(p.experts(), p.d_in(), h);
    shard.b1 = Matrix2D(p.experts(), h);
    shard.w2 = Tensor3D(p.experts(), h, p.d_out());
    for (std::size_t e = 0; e < p.experts(); ++e) {
      for (std::size_t c = 0; c < h; ++c) {
        for (std::size_t i = 0; i < p.d_in(); ++i) {
          shard.w1.at(e, i, c) = p.w1.at(e, i, offset + c);
        }
        shard.b1.at(e, c) = p.b1.at(e, offset + c);
        for (std::size_t j = 0; j < p.d_out(); ++j) {
          shard.w2.at(e, c, j) = p.w2.at(e, offset + c, j);
        }
      }
    }
    offset += h;
    s.shards.push_back(std::move(shard));
  }
  return s;
}

MoeLayerParams unshard_params(const ShardedParams& s) {
  MoeLayerParams p;
  p.w1 = Tensor3D(s.experts, s.d_in, s.hidden);
  p.b1 = Matrix2D(s.experts, s.hidden);
  p.w2 = Tensor3D(s.experts, s.hidden, s.d_out);
  p.b2 = s.b2;
  p.activation = s.activation;
  for (const ParamShard& shard : s.shards) {
    const std::size_t h = shard.b1.cols();
    for (std::size_t e = 0; e < s.experts; ++e) {
      for (std::size_t c = 0; c < h; ++c) {
        for (std::size_t i = 0; i < s.d_in; ++i) {
          p.w1.at(e, i, shard.hidden_offset + c) = shard.w1.at(e, i, c);
        }
        p.b1.at(e, shard.hidden_offset + c) = shard.b1.at(e, c);
        for (std::size_t j = 0; j < s.d_out; ++j) {
          p.w2.at(e, shard.hidden_offset + c, j) = shard.w2.at(e, c, j);
        }
      }
    }
  }
  return p;
}

void PipelineSharedCache::fill(int layer_id, MoeLayerParams params) {
  const std::size_t n = params.param_elements();
  if (n > capacity_) {
    throw CacheError("pipeline-shared cache: layer parameters (" +
                     std::to_string(n) + " elements) exceed cache capacity (" +
                     std::to_string(capacity_) + ")");
  }
  params_ = std::move(params);
  layer_ = layer_id;
  filled_ = true;
}

void PipelineSharedCache::clear() {
  params_ = MoeLayerParams{};
  layer_ = -1;
  filled_ = false;
}

const MoeLayerParams& PipelineSharedCache::params() const {
  if (!filled_) throw CacheError("pipeline-shared cache: read before fill");
  return params_;
}

Matrix2D all_gather_rows(const std::vector<Matrix2D>& per_rank) {
  if (per_rank.empty()) throw ShapeError("all_gather_rows: no ranks");
  const std::size_t cols = per_rank.front().cols();
  std::size_t rows = 0;
  for (const Matrix2D& m : per_rank) {
    if (m.cols() != cols) {
      throw ShapeError("all_gather_rows: column counts differ across ranks");
    }
    rows += m.rows();
  }
  Matrix2D out(rows, cols);
  std::size_t at = 0;
  for (const Matrix2D& m : per_rank) {
    std::copy(m.data().begin(), m.data().end(), out.data().begin() +
              static_cast<std::ptrdiff_t>(at));
    at += m.size();
  }
  return out;
}

Matrix2D all_reduce_sum(const std::vector<Matrix2D>& per_rank) {
  if (per_rank.empty()) throw ShapeError("all_reduce_sum: no ranks");
  Matrix2D out = per_rank.front();
  for (std::size_t r = 1; r < per_rank.size(); ++r) {
    add_inplace(out, per_rank[r]);
  }
  return out;
}

Tensor3D all_reduce_sum(const std::vector<Tensor3D>& per_rank) {
  if (per_rank.empty()) throw ShapeError("all_reduce_sum: no ranks");
  Tensor3D out = per_rank.front();
  for (std::size_t r = 1; r < per_rank.size(); ++r) {
    add_inplace(out, per_rank[r]);
  }
  return out;
}

std::vector<double> all_reduce_sum(
    const std::vector<std::vector<double>>& per_rank) {
  if (per_rank.empty()) throw ShapeError("all_reduce_sum: no ranks");
  std::vector<double> out = per_rank.front();
  for (std::size_t r = 1; r < per_rank.size(); ++r) {
    if (per_rank[r].size() != out.size()) {
      throw ShapeError("all_reduce_sum: sizes differ across ranks");
    }
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += per_rank[r][i];
  }
  return out;
}

double collective_seconds(std::size_t volume_elements,
                          const std::vector<DeviceSpec>& devices) {
  if (devices.size() <= 1) return 0.0;
  double max_latency = 0.0;
  double min_bandwidth = devices.front().link_bandwidth;
  for (const DeviceSpec& d : devices) {
    max_latency = std::max(max_latency, d.link_latency);
    min_bandwidth = std::min(min_bandwidth, d.link_bandwidth);
  }
  return max_latency + static_cast<double>(volume_elements) / min_bandwidth;
}

namespace {

// Deterministic sequential-turn timeline with rendezvous collectives; keeps
// a parallel no-overlap accounting for the overlap-savings figure.
class Timeline {
 public:
  explicit Timeline(std::size_t n_devices)
      : clock_(n_devices, 0.0),
        clock_no_overlap_(n_devices, 0.0),
        compute_(n_devices, 0.0) {}

  void compute(std::size_t d, double seconds) {
    clock_[d] += seconds;
    clock_no_overlap_[d] += seconds;
    compute_[d] += seconds;
  }

  void compute_all(double seconds) {
    for (std::size_t d = 0; d < clock_.size(); ++d) compute(d, seconds);
  }

  void collective(const std::string& label, std::size_t volume,
                  double seconds) {
    events.push_back({label, volume, seconds});
    const double start = *std::max_element(clock_.begin(), clock_.end());
    std::fill(clock_.begin(), clock_.end(), start + seconds);
    const double start_no =
        *std::max_element(clock_no_overlap_.begin(), clock_no_overlap_.end());
    std::fill(clock_no_overlap_.begin(), clock_no_overlap_.end(),
              start_no + seconds);
  }

  /// A collective that runs concurrently with `overlap_seconds` of per-device
  /// compute; the no-overlap accounting serializes the two.
  void overlapped_collective(const std::string& label, std::size_t volume,
                             double seconds, double overlap_seconds) {
    events.push_back({label, volume, seconds});
    const double start = *std::max_element(clock_.begin(), clock_.end());
    const double done = start + seconds;
    for (std::size_t d = 0; d < clock_.size(); ++d) {
      clock_[d] = std::max(clock_[d] + overlap_seconds, done);
      compute_[d] += overlap_seconds;
    }
    double start_no = 0.0;
    for (std::size_t d = 0; d < clock_no_overlap_.size(); ++d) {
      clock_no_overlap_[d] += overlap_seconds;
      start_no = std::max(start_no, clock_no_overlap_[d]);
    }
    std::fill(clock_no_overlap_.begin(), clock_no_overlap_.end(),
              start_no + seconds);
  }

  double makespan() const {
    return *std::max_element(clock_.begin(), clock_.end());
  }
  double makespan_no_overlap() const {
    return *std::max_element(clock_no_overlap_.begin(),
                             clock_no_overlap_.end());
  }
  const std::vector<double>& compute_totals() const { return compute_; }

  std::vector<CollectiveEvent> events;

 private:
  std::vector<double> clock_;
  std::vector<double> clock_no_overlap_;
  std::vector<double> compute_;
};

struct LayerWork {
  std::uint64_t forward_ops;
  std::uint64_t backward_ops;
};

// Matches exactly what OpStats counts for one device: esmm/estmm MACs plus
// ess accumulations.  n = tokens this device computes, h = hidden columns it
// owns.  owns_b2 adds the owner-only gb2 summation.
LayerWork layer_work(std::size_t n, std::size_t k, std::size_t d_in,
                     std::size_t h, std::size_t d_out, bool owns_b2) {
  const auto nk = static_cast<std::uint64_t>(n) * k;
  const std::uint64_t fwd = nk * (d_in * h + h * d_out);
  std::uint64_t bwd = nk * (2 * (d_in * h + h * d_out) + h);
  bwd += owns_b2 ? nk * d_out : 0;
  return {fwd, bwd};
}

void finalize_report(SimReport& report, const Timeline& tl) {
  report.device_compute_seconds = tl.compute_totals();
  report.collectives = tl.events;
  report.comm_seconds = 0.0;
  for (const CollectiveEvent& e : tl.events) report.comm_seconds += e.seconds;
  report.makespan = tl.makespan();
  report.makespan_no_overlap = tl.makespan_no_overlap();
  report.overlap_savings = report.makespan_no_overlap - report.makespan;
}

RoutingChoice concat_routing(const std::vector<RoutingChoice>& per_rank) {
  RoutingChoice global;
  global.k = per_rank.front().k;
  global.n_experts = per_rank.front().n_experts;
  for (const RoutingChoice& r : per_rank) {
    if (r.k != global.k || r.n_experts != global.n_experts) {
      throw ShapeError("concat_routing: k / expert count differ across ranks");
    }
    global.n_tokens += r.n_tokens;
  }
  global.assignments.assign(global.k, {});
  for (std::size_t i = 0; i < global.k; ++i) {
    global.assignments[i].reserve(global.n_tokens);
    for (const RoutingChoice& r : per_rank) {
      global.assignments[i].insert(global.assignments[i].end(),
                                   r.assignments[i].begin(),
                                   r.assignments[i].end());
    }
  }
  return global;
}

void check_local_inputs(const std::vector<Matrix2D>& local_x,
                        const std::vector<RoutingChoice>& local_routing,
                        const std::vector<Matrix2D>& local_gy,
                        const ShardedParams& shards,
                        const std::vector<DeviceSpec>& devices,
                        const DistOptions& opt) {
  const std::size_t n = shards.n_devices();
  if (n == 0 || local_x.size() != n || local_routing.size() != n ||
      local_gy.size() != n || devices.size() != n) {
    throw ShapeError("dist run: per-device vectors must match device count");
  }
  std::size_t global = 0;
  for (std::size_t d = 0; d < n; ++d) {
    devices[d].validate();
    if (local_x[d].rows() != local_routing[d].n_tokens ||
        local_gy[d].rows() != local_x[d].rows()) {
      throw ShapeError("dist run: batch / routing / gradient rows differ");
    }
    if (local_x[d].cols() != shards.d_in ||
        local_gy[d].cols() != shards.d_out) {
      throw ShapeError("dist run: feature widths do not match the layer");
    }
    global += local_x[d].rows();
  }
  if (opt.expected_global_batch && *opt.expected_global_batch != global) {
    throw std::invalid_argument(
        "dist run: local batch sizes do not sum to the configured global batch");
  }
}

std::size_t dc_activation_elements(std::size_t n, std::size_t k,
                                   const ShardedParams& s, MoeScheme scheme) {
  std::size_t elems = n * (s.d_in + 2 * s.d_out) + 2 * k * n * s.hidden;
  if (scheme == MoeScheme::kNaive) elems += k * n * s.d_out;
  return elems;
}

std::size_t mc_activation_elements(std::size_t n_global, std::size_t k,
                                   const ShardedParams& s, std::size_t h_d) {
  return n_global * (s.d_in + 2 * s.d_out) + 2 * k * n_global * h_d;
}

}  // namespace

DistRunResult run_data_centric(const std::vector<Matrix2D>& local_x,
                               const ShardedParams& shards,
                               std::vector<PipelineSharedCache>& caches,
                               const std::vector<RoutingChoice>& local_routing,
                               const std::vector<Matrix2D>& local_gy,
                               const std::vector<DeviceSpec>& devices,
                               const DistOptions& opt) {
  check_local_inputs(local_x, local_routing, local_gy, shards, devices, opt);
  const std::size_t n_dev = shards.n_devices();
  if (caches.size() != n_dev) {
    throw ShapeError("run_data_centric: one cache per device required");
  }

  // The all-gather of parameter shards: every cache ends up holding the
  // whole layer.
  MoeLayerParams full = unshard_params(shards);
  for (std::size_t d = 0; d < n_dev; ++d) caches[d].fill(0, full);

  std::vector<Matrix2D> local_y(n_dev);
  std::vector<MoeGrads> local_grads;
  std::vector<OpStats> fwd_stats(n_dev), bwd_stats(n_dev);
  for (std::size_t d = 0; d < n_dev; ++d) {
    EsOptions es;
    es.stats = &fwd_stats[d];
    MoeForwardResult fw = moe_forward(local_x[d], caches[d].params(),
                                      local_routing[d], opt.blk,
                                      opt.moe_scheme, es);
    local_y[d] = std::move(fw.y);
    es.stats = &bwd_stats[d];
    local_grads.push_back(moe_backward(fw.stash, caches[d].params(),
                                       local_gy[d], opt.use_fused, es));
  }

  DistRunResult res;
  res.y = all_gather_rows(local_y);

  std::vector<Tensor3D> gw1, gw2;
  std::vector<Matrix2D> gb1, gb2, gx;
  for (MoeGrads& g : local_grads) {
    gw1.push_back(std::move(g.gw1));
    gb1.push_back(std::move(g.gb1));
    gw2.push_back(std::move(g.gw2));
    gb2.push_back(std::move(g.gb2));
    gx.push_back(std::move(g.gx));
  }
  res.grads = MoeGrads{all_reduce_sum(gw1), all_reduce_sum(gb1),
                       all_reduce_sum(gw2), all_reduce_sum(gb2),
                       all_gather_rows(gx)};

  // Timeline: per forward layer, the parameter gather overlaps the non-MoE
  // stage; backward re-gathers every layer except the one still cached.
  Timeline tl(n_dev);
  const std::size_t volume = shards.full_param_elements();
  const double gather_s = collective_seconds(volume, devices);
  auto layer_seconds = [&](std::size_t d, bool backward) {
    const OpStats& st = backward ? bwd_stats[d] : fwd_stats[d];
    return static_cast<double>(st.total_ops()) / devices[d].compute_rate;
  };
  for (std::size_t l = 0; l < opt.n_layers; ++l) {
    for (std::size_t d = 0; d < n_dev; ++d) {
      caches[d].fill(static_cast<int>(l), full);
    }
    tl.overlapped_collective("param_gather_fwd_layer" + std::to_string(l),
                             volume, gather_s, opt.non_moe_seconds);
    for (std::size_t d = 0; d < n_dev; ++d) tl.compute(d, layer_seconds(d, false));
  }
  for (std::size_t li = 0; li < opt.n_layers; ++li) {
    const std::size_t l = opt.n_layers - 1 - li;
    if (li == 0) {
      // Cache still holds the last forward layer; no re-gather.
      tl.compute_all(opt.non_moe_seconds);
    } else {
      for (std::size_t d = 0; d < n_dev; ++d) {
        caches[d].fill(static_cast<int>(l), full);
      }
      tl.overlapped_collective("param_gather_bwd_layer" + std::to_string(l),
                               volume, gather_s, opt.non_moe_seconds);
    }
    for (std::size_t d = 0; d < n_dev; ++d) tl.compute(d, layer_seconds(d, true));
    tl.collective("grad_reduce_layer" + std::to_string(l), volume,
                  collective_seconds(volume, devices));
  }

  res.report.scheme = "data_centric";
  res.report.n_devices = n_dev;
  res.report.n_layers = opt.n_layers;
  finalize_report(res.report, tl);
  for (std::size_t d = 0; d < n_dev; ++d) {
    res.report.param_elements_per_device.push_back(
        shards.shard_elements(d) + caches[d].capacity_elements());
    res.report.activation_elements_per_device.push_back(dc_activation_elements(
        local_x[d].rows(), local_routing[d].k, shards, opt.moe_scheme));
  }
  std::size_t worst_shard = 0;
  for (std::size_t d = 0; d < n_dev; ++d) {
    worst_shard = std::max(worst_shard, shards.shard_elements(d));
  }
  res.report.retain_all_layers_param_elements =
      worst_shard + opt.n_layers * shards.full_param_elements();
  return res;
}

DistRunResult run_model_centric(const std::vector<Matrix2D>& local_x,
                                const ShardedParams& shards,
                                const std::vector<RoutingChoice>& local_routing,
                                const std::vector<Matrix2D>& local_gy,
                                const std::vector<DeviceSpec>& devices,
                                const DistOptions& opt) {
  check_local_inputs(local_x, local_routing, local_gy, shards, devices, opt);
  const std::size_t n_dev = shards.n_devices();

  const Matrix2D x = all_gather_rows(local_x);
  const Matrix2D g_y = all_gather_rows(local_gy);
  const RoutingChoice routing = concat_routing(local_routing);
  routing.validate();
  const std::vector<ReIndex> reindex = build_reindex_all(routing, opt.blk);
  const std::size_t n_global = x.rows();
  const std::size_t k = routing.k;

  std::vector<OpStats> fwd_stats(n_dev), bwd_stats(n_dev);

  // Forward: every device computes the global batch on its hidden slice;
  // partial outputs are all-reduce-summed.  Rank 0 contributes b2 once per
  // choice, matching the single-device bias accounting.
  std::vector<std::vector<Matrix2D>> y1(n_dev), y2(n_dev);
  std::vector<Matrix2D> partial_y(n_dev);
  for (std::size_t d = 0; d < n_dev; ++d) {
    EsOptions es;
    es.stats = &fwd_stats[d];
    partial_y[d] = Matrix2D(n_global, shards.d_out);
    for (std::size_t i = 0; i < k; ++i) {
      Matrix2D pre = esmm(x, shards.shards[d].w1, &shards.shards[d].b1,
                          reindex[i], es);
      Matrix2D act = activation_apply(shards.activation, pre);
      esmm(act, shards.shards[d].w2, d == 0 ? &shards.b2 : nullptr, reindex[i],
           EsOutputMode::kAccumulate, &partial_y[d], es);
      y1[d].push_back(std::move(pre));
      y2[d].push_back(std::move(act));
    }
  }

  DistRunResult res;
  res.y = all_reduce_sum(partial_y);

  // Backward: slice gradients stay local; gb2 is computed by its owner;
  // partial input gradients are all-reduce-summed.
  std::vector<Tensor3D> gw1_parts, gw2_parts;
  std::vector<Matrix2D> gb1_parts, gx_parts;
  Matrix2D gb2(shards.experts, shards.d_out);
  for (std::size_t d = 0; d < n_dev; ++d) {
    EsOptions es;
    es.stats = &bwd_stats[d];
    const ParamShard& shard = shards.shards[d];
    const std::size_t h_d = shard.b1.cols();
    const Tensor3D w2_t = transpose_experts(shard.w2);
    const Tensor3D w1_t = transpose_experts(shard.w1);
    Tensor3D gw1_d(shards.experts, shards.d_in, h_d);
    Matrix2D gb1_d(shards.experts, h_d);
    Tensor3D gw2_d(shards.experts, h_d, shards.d_out);
    Matrix2D gx_d(n_global, shards.d_in);
    for (std::size_t i = 0; i < k; ++i) {
      Matrix2D g_y2;
      if (opt.use_fused) {
        // esfk recomputes ess(g_y) on every slice; only the owner's copy
        // lands in gb2.
        EsfkResult second = esfk(y2[d][i], g_y, w2_t, reindex[i], es);
        g_y2 = std::move(second.grad_x);
        add_inplace(gw2_d, second.grad_w);
        if (d == 0) add_inplace(gb2, second.grad_b);
      } else {
        if (d == 0) add_inplace(gb2, ess(g_y, reindex[i], es));
        add_inplace(gw2_d, estmm(y2[d][i], g_y, reindex[i], es));
        g_y2 = esmm(g_y, w2_t, nullptr, reindex[i], es);
      }
      const Matrix2D g_y1 = activation_grad(shards.activation, y1[d][i], g_y2);
      add_inplace(gb1_d, ess(g_y1, reindex[i], es));
      add_inplace(gw1_d, estmm(x, g_y1, reindex[i], es));
      esmm(g_y1, w1_t, nullptr, reindex[i], EsOutputMode::kAccumulate, &gx_d,
           es);
    }
    gw1_parts.push_back(std::move(gw1_d));
    gb1_parts.push_back(std::move(gb1_d));
    gw2_parts.push_back(std::move(gw2_d));
    gx_parts.push_back(std::move(gx_d));
  }

  // Reassemble full gradients from the hidden slices.
  MoeGrads grads{Tensor3D(shards.experts, shards.d_in, shards.hidden),
                 Matrix2D(shards.experts, shards.hidden),
                 Tensor3D(shards.experts, shards.hidden, shards.d_out),
                 std::move(gb2), all_reduce_sum(gx_parts)};
  for (std::size_t d = 0; d < n_dev; ++d) {
    const std::size_t off = shards.shards[d].hidden_offset;
    const std::size_t h_d = shards.hidden_sizes[d];
    for (std::size_t e = 0; e < shards.experts; ++e) {
      for (std::size_t c = 0; c < h_d; ++c) {
        for (std::size_t i = 0; i < shards.d_in; ++i) {
          grads.gw1.at(e, i, off + c) = gw1_parts[d].at(e, i, c);
        }
        grads.gb1.at(e, off + c) = gb1_parts[d].at(e, c);
        for (std::size_t j = 0; j < shards.d_out; ++j) {
          grads.gw2.at(e, off + c, j) = gw2_parts[d].at(e, c, j);
        }
      }
    }
  }
  res.grads = std::move(grads);

  Timeline tl(n_dev);
  auto seconds_of = [&](std::size_t d, const OpStats& st) {
    return static_cast<double>(st.total_ops()) / devices[d].compute_rate;
  };
  for (std::size_t l = 0; l < opt.n_layers; ++l) {
    tl.compute_all(opt.non_moe_seconds);
    tl.collective("token_gather_layer" + std::to_string(l),
                  n_global * shards.d_in,
                  collective_seconds(n_global * shards.d_in, devices));
    for (std::size_t d = 0; d < n_dev; ++d) tl.compute(d, seconds_of(d, fwd_stats[d]));
    tl.collective("output_reduce_layer" + std::to_string(l),
                  n_global * shards.d_out,
                  collective_seconds(n_global * shards.d_out, devices));
  }
  for (std::size_t li = 0; li < opt.n_layers; ++li) {
    const std::size_t l = opt.n_layers - 1 - li;
    tl.compute_all(opt.non_moe_seconds);
    tl.collective("grad_gather_layer" + std::to_string(l),
                  n_global * shards.d_out,
                  collective_seconds(n_global * shards.d_out, devices));
    for (std::size_t d = 0; d < n_dev; ++d) tl.compute(d, seconds_of(d, bwd_stats[d]));
    tl.collective("input_grad_reduce_layer" + std::to_string(l),
                  n_global * shards.d_in,
                  collective_seconds(n_global * shards.d_in, devices));
  }

  res.report.scheme = "model_centric";
  res.report.n_devices = n_dev;
  res.report.n_layers = opt.n_layers;
  finalize_report(res.report, tl);
  for (std::size_t d = 0; d < n_dev; ++d) {
    res.report.param_elements_per_device.push_back(shards.shard_elements(d));
    res.report.activation_elements_per_device.push_back(
        mc_activation_elements(n_global, k, shards, shards.hidden_sizes[d]));
  }
  std::size_t worst_shard = 0;
  for (std::size_t d = 0; d < n_dev; ++d) {
    worst_shard = std::max(worst_shard, shards.shard_elements(d));
  }
  res.report.retain_all_layers_param_elements = worst_shard;
  return res;
}

double estimate_data_centric_seconds(const std::vector<DeviceSpec>& devices,
                                     const LayerDims& dims,
                                     const std::vector<std::size_t>& local_batches,
                                     const DistOptions& opt) {
  const std::size_t n_dev = devices.size();
  if (local_batches.size() != n_dev) {
    throw ShapeError("estimate_data_centric_seconds: batch split size");
  }
  const std::size_t volume =
      dims.experts * (dims.d_in * dims.hidden + dims.hidden +
                      dims.hidden * dims.d_out + dims.d_out);
  Timeline tl(n_dev);
  const double gather_s = collective_seconds(volume, devices);
  for (std::size_t l = 0; l < opt.n_layers; ++l) {
    tl.overlapped_collective("param_gather", volume, gather_s,
                             opt.non_moe_seconds);
    for (std::size_t d = 0; d < n_dev; ++d) {
      const LayerWork w = layer_work(local_batches[d], dims.k, dims.d_in,
                                     dims.hidden, dims.d_out, true);
      tl.compute(d, static_cast<double>(w.forward_ops) / devices[d].compute_rate);
    }
  }
  for (std::size_t li = 0; li < opt.n_layers; ++li) {
    if (li == 0) {
      tl.compute_all(opt.non_moe_seconds);
    } else {
      tl.overlapped_collective("param_gather_bwd", volume, gather_s,
                               opt.non_moe_seconds);
    }
    for (std::size_t d = 0; d < n_dev; ++d) {
      const LayerWork w = layer_work(local_batches[d], dims.k, dims.d_in,
                                     dims.hidden, dims.d_out, true);
      tl.compute(d, static_cast<double>(w.backward_ops) / devices[d].compute_rate);
    }
    tl.collective("grad_reduce", volume, collective_seconds(volume, devices));
  }
  return tl.makespan();
}

double estimate_model_centric_seconds(const std::vector<DeviceSpec>& devices,
                                      const LayerDims& dims,
                                      const std::vector<std::size_t>& hidden_sizes,
                                      std::size_t global_batch,
                                      const DistOptions& opt) {
  const std::size_t n_dev = devices.size();
  if (hidden_sizes.size() != n_dev) {
    throw ShapeError("estimate_model_centric_seconds: hidden split size");
  }
  Timeline tl(n_dev);
  for (std::size_t l = 0; l < opt.n_layers; ++l) {
    tl.compute_all(opt.non_moe_seconds);
    tl.collective("token_gather", global_batch * dims.d_in,
                  collective_seconds(global_batch * dims.d_in, devices));
    for (std::size_t d = 0; d < n_dev; ++d) {
      const LayerWork w = layer_work(global_batch, dims.k, dims.d_in,
                                     hidden_sizes[d], dims.d_out, d == 0);
      tl.compute(d, static_cast<double>(w.forward_ops) / devices[d].compute_rate);
    }
    tl.collective("output_reduce", global_batch * dims.d_out,
                  collective_seconds(global_batch * dims.d_out, devices));
  }
  for (std::size_t li = 0; li < opt.n_layers; ++li) {
    tl.compute_all(opt.non_moe_seconds);
    tl.collective("grad_gather", global_batch * dims.d_out,
                  collective_seconds(global_batch * dims.d_out, devices));
    for (std::size_t d = 0; d < n_dev; ++d) {
      const LayerWork w = layer_work(global_batch, dims.k, dims.d_in,
                                     hidden_sizes[d], dims.d_out, d == 0);
      tl.compute(d, static_cast<double>(w.backward_ops) / devices[d].compute_rate);
    }
    tl.collective("input_grad_reduce", global_batch * dims.d_in,
                  collective_seconds(global_batch * dims.d_in, devices));
  }
  return tl.makespan();
}

namespace {

std::vector<std::size_t> even_split(std::size_t total, std::size_t parts) {
  std::vector<std::size_t> out(parts, total / parts);
  for (std::size_t i = 0; i < total % parts; ++i) ++out[i];
  return out;
}

}  // namespace

CrossoverTable crossover_probe(const std::vector<DeviceSpec>& devices,
                               const LayerDims& dims,
                               const std::vector<std::size_t>& workloads,
                               const DistOptions& opt) {
  if (devices.empty()) throw std::invalid_argument("crossover_probe: no devices");
  for (std::size_t i = 1; i < workloads.size(); ++i) {
    if (workloads[i] <= workloads[i - 1]) {
      throw std::invalid_argument("crossover_probe: workloads must increase");
    }
  }
  CrossoverTable table;
  const std::vector<std::size_t> hidden_split =
      even_split(dims.hidden, devices.size());
  int sign_changes = 0;
  int last_sign = 0;
  for (std::size_t n : workloads) {
    CrossoverRow row;
    row.workload = n;
    row.data_centric_seconds = estimate_data_centric_seconds(
        devices, dims, even_split(n, devices.size()), opt);
    row.model_centric_seconds =
        estimate_model_centric_seconds(devices, dims, hidden_split, n, opt);
    const int sign = row.data_centric_seconds <= row.model_centric_seconds ? 1 : -1;
    if (sign > 0 && !table.crossover_workload) {
      table.crossover_workload = n;
    }
    if (last_sign != 0 && sign != last_sign) ++sign_changes;
    last_sign = sign;
    table.rows.push_back(row);
  }
  table.unique_crossover = sign_changes == 1 && table.crossover_workload &&
                           table.rows.front().data_centric_seconds >
                               table.rows.front().model_centric_seconds;
  return table;
}

std::string SimReport::to_json() const {
  nlohmann::json j;
  j["scheme"] = scheme;
  j["n_devices"] = n_devices;
  j["n_layers"] = n_layers;
  j["device_compute_seconds"] = device_compute_seconds;
  nlohmann::json evs = nlohmann::json::array();
  for (const CollectiveEvent& e : collectives) {
    evs.push_back({{"label", e.label}, {"volume", e.volume}, {"seconds", e.seconds}});
  }
  j["collectives"] = evs;
  j["comm_seconds"] = comm_seconds;
  j["overlap_savings"] = overlap_savings;
  j["makespan"] = makespan;
  j["makespan_no_overlap"] = makespan_no_overlap;
  j["param_elements_per_device"] = param_elements_per_device;
  j["activation_elements_per_device"] = activation_elements_per_device;
  j["retain_all_layers_param_elements"] = retain_all_layers_param_elements;
  j["equivalence_delta_forward"] = equivalence_delta_forward;
  j["equivalence_delta_grads"] = equivalence_delta_grads;
  return j.dump();
}

std::string CrossoverTable::to_json() const {
  nlohmann::json j;
  nlohmann::json rows_j = nlohmann::json::array();
  for (const CrossoverRow& r : rows) {
    rows_j.push_back({{"workload", r.workload},
                      {"data_centric_seconds", r.data_centric_seconds},
                      {"model_centric_seconds", r.model_centric_seconds}});
  }
  j["rows"] = rows_j;
  if (crossover_workload) {
    j["crossover_workload"] = *crossover_workload;
  } else {
    j["crossover_workload"] = nullptr;
  }
  j["unique_crossover"] = unique_crossover;
  return j.dump();
}

SimScenario load_scenario(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error(path + ": cannot open scenario file");
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(path + ": invalid JSON: " + e.what());
  }

  SimScenario s;
  for (const auto& dj : j.at("devices")) {
    DeviceSpec d;
    d.id = dj.value("id", static_cast<int>(s.devices.size()));
    d.compute_rate = dj.value("compute_rate", 1e9);
    d.link_bandwidth = dj.value("link_bandwidth", 1e8);
    d.link_latency = dj.value("link_latency", 0.0);
    d.validate();
    s.devices.push_back(d);
  }
  s.n = j.value("n", s.n);
  s.experts = j.value("experts", s.experts);
  s.k = j.value("topk", s.k);
  s.d_in = j.value("din", s.d_in);
  s.hidden = j.value("hidden", s.hidden);
  s.d_out = j.value("dout", s.d_out);
  s.blk = j.value("blk", s.blk);
  s.seed = j.value("seed", s.seed);
  s.mode = j.value("mode", s.mode);
  if (j.contains("moe_scheme")) {
    s.moe_scheme = moe_scheme_from_name(j["moe_scheme"].get<std::string>());
  }
  if (j.contains("activation")) {
    s.activation = activation_from_name(j["activation"].get<std::string>());
  }
  s.distribution = j.value("distribution", s.distribution);
  s.use_fused = j.value("use_fused", s.use_fused);
  s.non_moe_seconds = j.value("non_moe_seconds", s.non_moe_seconds);
  s.n_layers = j.value("n_layers", s.n_layers);
  if (j.contains("workloads")) {
    s.workloads = j["workloads"].get<std::vector<std::size_t>>();
  }
  if (j.contains("batch_shares")) {
    s.batch_shares = j["batch_shares"].get<std::vector<std::size_t>>();
  }
  if (j.contains("hidden_shares")) {
    s.hidden_shares = j["hidden_shares"].get<std::vector<std::size_t>>();
  }
  if (j.contains("device_latencies")) {
    s.device_latencies = j["device_latencies"].get<std::vector<double>>();
  }
  return s;
}

}  // namespace moekit
