#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <condition_variable>
#include <cstdint>
#include <exception>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <thread>
#include <vector>

#include "gridgnn/comm.hpp"
#include "gridgnn/dataset.hpp"
#include "gridgnn/metrics.hpp"
#include "gridgnn/pmm.hpp"
#include "gridgnn/rng.hpp"
#include "gridgnn/sampling.hpp"
#include "gridgnn/shardsample.hpp"
#include "gridgnn/tensor.hpp"

namespace gridgnn {

struct ModelConfig {
  int layers = 2;
  index_t d_in = 0;
  index_t d_h = 64;
  index_t d_out = 0;
  double dropout_rate = 0.1;
  bool use_rmsnorm = true;
  bool use_dropout = true;
  bool use_residual = true;

  void validate() const {
    if (layers < 1) throw std::invalid_argument("ModelConfig: layers must be >= 1");
    if (d_in < 1 || d_h < 1 || d_out < 1)
      throw std::invalid_argument("ModelConfig: dims must be >= 1");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0))
      throw std::invalid_argument("ModelConfig: dropout rate must be in [0, 1)");
  }
};

enum class Optimizer { kSgd, kAdam };

struct TrainConfig {
  DeviceGrid grid;
  index_t batch = 0;
  int epochs = 1;
  std::uint64_t seed = 0;
  Precision precision = Precision::kFp32;
  bool prefetch = false;
  Optimizer optimizer = Optimizer::kAdam;
  double lr = 1e-3;
  double rmsnorm_eps = 1e-6;
  CommConfig comm;
};

template <class Real>
struct Param {
  ShardedTensor<Real> w;
  ShardedTensor<Real> g;
  std::vector<Real> m, v;  // Adam moments, lazily sized with the shard
};

/// Per-feature scale vector of one RMSNorm, sharded along the column axis of
/// the tensor it normalizes and replicated along that tensor's row axis.
template <class Real>
struct VecParam {
  Axis row_axis = Axis::X;
  Axis col_axis = Axis::Y;
  index_t d = 0;
  index_t c0 = 0, c1 = 0;
  std::vector<Real> w, g, m, v;
};

template <class Real>
struct ParamView {
  Real* w;
  Real* g;
  Real* m;
  Real* v;
  std::size_t n;
};

template <class Real>
struct ModelState {
  ModelConfig cfg;
  DeviceGrid grid;
  Coord4 coord{0, 0, 0, 0};
  Param<Real> win;
  std::vector<Param<Real>> wl;        // one per layer
  std::vector<VecParam<Real>> gamma;  // one per layer when rmsnorm is on
  Param<Real> wout;
  std::int64_t opt_step = 0;

  void zero_grads() {
    auto zero = [](auto& vec) { std::fill(vec.begin(), vec.end(), Real{0}); };
    zero(win.g.local.v);
    for (auto& p : wl) zero(p.g.local.v);
    for (auto& gm : gamma) zero(gm.g);
    zero(wout.g.local.v);
  }
};

template <class Real>
std::vector<ParamView<Real>> param_views(ModelState<Real>& st) {
  std::vector<ParamView<Real>> out;
  auto add = [&out](Param<Real>& p) {
    const std::size_t n = p.w.local.v.size();
    if (p.m.size() != n) {
      p.m.assign(n, Real{0});
      p.v.assign(n, Real{0});
    }
    out.push_back({p.w.local.v.data(), p.g.local.v.data(), p.m.data(), p.v.data(), n});
  };
  add(st.win);
  for (std::size_t l = 0; l < st.wl.size(); ++l) {
    add(st.wl[l]);
    if (l < st.gamma.size()) {
      auto& gm = st.gamma[l];
      const std::size_t n = gm.w.size();
      if (gm.m.size() != n) {
        gm.m.assign(n, Real{0});
        gm.v.assign(n, Real{0});
      }
      out.push_back({gm.w.data(), gm.g.data(), gm.m.data(), gm.v.data(), n});
    }
  }
  add(st.wout);
  return out;
}

namespace detail {

/// Weights are drawn per global element from a stateless hash so every grid
/// slices the same global matrix; uniform in ±sqrt(6/(fan_in+fan_out)).
template <class Real>
void fill_weight_shard(ShardedTensor<Real>& t, std::uint64_t key) {
  const double lim = std::sqrt(6.0 / static_cast<double>(t.g_rows + t.g_cols));
  for (index_t i = 0; i < t.local_rows(); ++i)
    for (index_t j = 0; j < t.local_cols(); ++j)
      t.local.at(i, j) = static_cast<Real>(
          (2.0 * rng::element_unit(key, static_cast<std::uint64_t>(t.r0 + i),
                                   static_cast<std::uint64_t>(t.c0 + j)) -
           1.0) *
          lim);
}

template <class Real>
Param<Real> make_param(const DeviceGrid& grid, const Coord4& coord, Layout layout,
                       index_t rows, index_t cols, std::uint64_t key) {
  Param<Real> p;
  p.w = make_sharded<Real>(grid, coord, layout, rows, cols,
                           block_partition(rows, grid.dim(layout.row)),
                           block_partition(cols, grid.dim(layout.col)));
  fill_weight_shard(p.w, key);
  p.g = p.w;
  std::fill(p.g.local.v.begin(), p.g.local.v.end(), Real{0});
  return p;
}

inline std::uint64_t dropout_key(std::uint64_t seed, int dp_group,
                                 std::uint64_t global_step, int layer) {
  return rng::hash_combine(
      rng::hash_combine(rng::hash_combine(rng::hash_combine(seed, 0xd509),
                                          static_cast<std::uint64_t>(dp_group)),
                        global_step),
      static_cast<std::uint64_t>(layer));
}

}  // namespace detail

template <class Real>
ModelState<Real> init_state(const DeviceGrid& grid, const Coord4& coord,
                            const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ModelState<Real> st;
  st.cfg = cfg;
  st.grid = grid;
  st.coord = coord;
  st.win = detail::make_param<Real>(grid, coord, weight_layout_for(kInputFeatureLayout),
                                    cfg.d_in, cfg.d_h, rng::hash_combine(seed, 101));
  for (int l = 1; l <= cfg.layers; ++l) {
    st.wl.push_back(detail::make_param<Real>(
        grid, coord, weight_layout(l), cfg.d_h, cfg.d_h,
        rng::hash_combine(seed, 200 + static_cast<std::uint64_t>(l))));
    if (cfg.use_rmsnorm) {
      const Layout out = feature_layout(l + 1);
      VecParam<Real> gm;
      gm.row_axis = out.row;
      gm.col_axis = out.col;
      gm.d = cfg.d_h;
      const auto off = block_partition(cfg.d_h, grid.dim(out.col));
      const int cc = coord[static_cast<std::size_t>(static_cast<int>(out.col))];
      gm.c0 = off[static_cast<std::size_t>(cc)];
      gm.c1 = off[static_cast<std::size_t>(cc + 1)];
      gm.w.assign(static_cast<std::size_t>(gm.c1 - gm.c0), Real{1});
      gm.g.assign(gm.w.size(), Real{0});
      st.gamma.push_back(std::move(gm));
    }
  }
  st.wout = detail::make_param<Real>(grid, coord,
                                     weight_layout_for(feature_layout(cfg.layers + 1)),
                                     cfg.d_h, cfg.d_out, rng::hash_combine(seed, 102));
  return st;
}

/// Per-rank immutable run inputs: full-graph adjacency shards for the planes
/// the rotation schedule touches, plus the persistent remap table.
struct RankContext {
  std::vector<CsrShard> full_shards;  // index p holds the plane of layer p+1
  RemapTable remap{1};
};

inline RankContext make_rank_context(const DeviceGrid& grid, const Coord4& coord,
                                     const Dataset& ds, int layers) {
  RankContext ctx;
  ctx.remap = RemapTable(ds.n);
  const int planes = layers < 3 ? layers : 3;
  for (int p = 0; p < planes; ++p) {
    const Layout lay = adjacency_layout(p + 1);
    const auto roff = block_partition(ds.n, grid.dim(lay.row));
    const auto coff = block_partition(ds.n, grid.dim(lay.col));
    const int cr = coord[static_cast<std::size_t>(static_cast<int>(lay.row))];
    const int cc = coord[static_cast<std::size_t>(static_cast<int>(lay.col))];
    ctx.full_shards.push_back(make_csr_shard(
        ds.adjacency, roff[static_cast<std::size_t>(cr)],
        roff[static_cast<std::size_t>(cr + 1)], coff[static_cast<std::size_t>(cc)],
        coff[static_cast<std::size_t>(cc + 1)]));
  }
  return ctx;
}

/// One rank's shards of one mini-batch: adjacency blocks per rotation plane
/// (with transposes), the input feature block, and the full label slice.
template <class Real>
struct StepBatch {
  SampleSet sample;
  std::array<std::vector<index_t>, kNumAxes> batch_off;  // by axis, D unused
  std::vector<ShardedSparse> a;
  std::vector<ShardedSparse> a_t;
  ShardedTensor<Real> x_in;
  std::vector<std::int32_t> labels;
};

/// Builds the rank-local batch for one step; pure given (ctx shards, dataset,
/// b, seed, step) and entirely communication-free.
template <class Real>
StepBatch<Real> build_step_batch(const DeviceGrid& grid, const Coord4& coord,
                                 RankContext& ctx, const Dataset& ds, index_t b,
                                 std::uint64_t group_seed, std::uint64_t step,
                                 RankStats* stats = nullptr) {
  StepBatch<Real> sb;
  sb.sample = sample_vertices(ds.n, b, group_seed, step);
  for (int a = 1; a < kNumAxes; ++a)
    sb.batch_off[static_cast<std::size_t>(a)] = sample_partition(
        sb.sample, block_partition(ds.n, grid.dim(static_cast<Axis>(a))));

  for (std::size_t p = 0; p < ctx.full_shards.size(); ++p) {
    const Layout lay = adjacency_layout(static_cast<int>(p) + 1);
    auto mbs = build_local_minibatch(ctx.full_shards[p], ds, b, group_seed, step,
                                     ctx.remap);
    if (stats) {
      stats->sampled_nnz_extracted += mbs.nnz_extracted;
      stats->sampled_nnz_kept += mbs.nnz_kept;
    }
    ShardedSparse s;
    s.layout = lay;
    s.g_rows = s.g_cols = b;
    s.row_off = sb.batch_off[static_cast<std::size_t>(static_cast<int>(lay.row))];
    s.col_off = sb.batch_off[static_cast<std::size_t>(static_cast<int>(lay.col))];
    s.r0 = mbs.row_lo;
    s.r1 = mbs.row_lo + static_cast<index_t>(mbs.s_r.size());
    s.c0 = mbs.col_lo;
    s.c1 = mbs.col_lo + static_cast<index_t>(mbs.s_c.size());
    ShardedSparse t;
    t.layout = {lay.col, lay.row};
    t.g_rows = t.g_cols = b;
    t.row_off = s.col_off;
    t.col_off = s.row_off;
    t.r0 = s.c0;
    t.r1 = s.c1;
    t.c0 = s.r0;
    t.c1 = s.r1;
    t.local = std::move(mbs.a_t_loc);
    s.local = std::move(mbs.a_loc);
    sb.a.push_back(std::move(s));
    sb.a_t.push_back(std::move(t));
  }

  sb.x_in = make_sharded<Real>(grid, coord, kInputFeatureLayout, b, ds.d_in,
                               sb.batch_off[static_cast<std::size_t>(
                                   static_cast<int>(kInputFeatureLayout.row))],
                               block_partition(ds.d_in,
                                               grid.dim(kInputFeatureLayout.col)));
  for (index_t i = 0; i < sb.x_in.local_rows(); ++i) {
    const index_t v = sb.sample.vertices[static_cast<std::size_t>(sb.x_in.r0 + i)];
    for (index_t j = 0; j < sb.x_in.local_cols(); ++j)
      sb.x_in.local.at(i, j) = static_cast<Real>(
          ds.features[static_cast<std::size_t>(v * ds.d_in + sb.x_in.c0 + j)]);
  }
  sb.labels.resize(static_cast<std::size_t>(b));
  for (index_t i = 0; i < b; ++i)
    sb.labels[static_cast<std::size_t>(i)] =
        ds.labels[static_cast<std::size_t>(sb.sample.vertices[static_cast<std::size_t>(i)])];
  return sb;
}

template <class Real>
struct LayerCache {
  ShardedTensor<Real> hagg;
  ShardedTensor<Real> xw;  // GEMM output, input of the normalization
  std::vector<Real> rms;
  Dense<Real> scale;
};

template <class Real>
struct ForwardCache {
  std::vector<ShardedTensor<Real>> xs;  // xs[l] is the input of layer l+1; xs[0]=F
  std::vector<LayerCache<Real>> layers;
  ShardedTensor<Real> logits;
};

namespace detail {

template <class Real>
std::vector<index_t> feature_off(const DeviceGrid& grid, index_t d, Axis axis) {
  return block_partition(d, grid.dim(axis));
}

}  // namespace detail

template <class Real>
ForwardCache<Real> forward(RankComm& rc, const ModelState<Real>& st,
                           const StepBatch<Real>& batch, Precision prec, bool training,
                           std::uint64_t run_seed, std::uint64_t global_step,
                           double rmsnorm_eps) {
  const auto& cfg = st.cfg;
  const DeviceGrid& grid = rc.grid();
  const int dp = grid.dp_group(rc.rank());
  ForwardCache<Real> cache;

  cache.xs.push_back(contract(rc, batch.x_in, st.win.w, prec));
  for (int l = 1; l <= cfg.layers; ++l) {
    const std::size_t p = static_cast<std::size_t>((l - 1) % 3);
    LayerCache<Real> lc;
    lc.hagg = spmm(rc, batch.a[p], cache.xs.back(), prec);
    lc.xw = contract(rc, lc.hagg, st.wl[static_cast<std::size_t>(l - 1)].w, prec);
    ShardedTensor<Real> xn = lc.xw;
    if (cfg.use_rmsnorm) {
      const auto& gm = st.gamma[static_cast<std::size_t>(l - 1)];
      auto r = parallel_rmsnorm_fwd(rc, lc.xw, std::span<const Real>(gm.w),
                                    static_cast<Real>(rmsnorm_eps));
      lc.rms = std::move(r.rms);
      xn = std::move(r.y);
    }
    std::optional<ShardedTensor<Real>> res;
    if (cfg.use_residual) {
      const Layout out = feature_layout(l + 1);
      res = reshard(rc, cache.xs.back(), out,
                    batch.batch_off[static_cast<std::size_t>(static_cast<int>(out.row))],
                    detail::feature_off<Real>(grid, cfg.d_h, out.col));
    }
    const double rate = cfg.use_dropout ? cfg.dropout_rate : 0.0;
    auto fe = fused_elementwise_fwd(xn, res ? &*res : nullptr, rate,
                                    detail::dropout_key(run_seed, dp, global_step, l),
                                    training);
    lc.scale = std::move(fe.scale);
    cache.layers.push_back(std::move(lc));
    cache.xs.push_back(std::move(fe.out));
  }
  cache.logits = contract(rc, cache.xs.back(), st.wout.w, prec);
  return cache;
}

template <class Real>
void backward(RankComm& rc, ModelState<Real>& st, const ForwardCache<Real>& cache,
              const StepBatch<Real>& batch, const ShardedTensor<Real>& dlogits,
              Precision prec) {
  const auto& cfg = st.cfg;
  const DeviceGrid& grid = rc.grid();
  if (cache.layers.size() != static_cast<std::size_t>(cfg.layers))
    throw CommContract("backward: cache does not match the model");
  st.zero_grads();

  st.wout.g = contract(rc, transposed(cache.xs.back()), dlogits, prec);
  ShardedTensor<Real> dxh = contract(rc, dlogits, transposed(st.wout.w), prec);

  for (int l = cfg.layers; l >= 1; --l) {
    const auto& lc = cache.layers[static_cast<std::size_t>(l - 1)];
    auto dxn = fused_elementwise_bwd(dxh, lc.scale);
    std::optional<ShardedTensor<Real>> dres;
    if (cfg.use_residual) {
      const Layout in = feature_layout(l);
      dres = reshard(rc, dxh, in,
                     batch.batch_off[static_cast<std::size_t>(static_cast<int>(in.row))],
                     detail::feature_off<Real>(grid, cfg.d_h, in.col));
    }
    ShardedTensor<Real> dxw = dxn;
    if (cfg.use_rmsnorm) {
      auto& gm = st.gamma[static_cast<std::size_t>(l - 1)];
      auto g = parallel_rmsnorm_bwd(rc, lc.xw, std::span<const Real>(gm.w), lc.rms, dxn);
      dxw = std::move(g.dx);
      gm.g = std::move(g.dgamma);
    }
    auto& wp = st.wl[static_cast<std::size_t>(l - 1)];
    wp.g = contract(rc, transposed(lc.hagg), dxw, prec);
    auto dhagg = contract(rc, dxw, transposed(wp.w), prec);
    dxh = spmm(rc, batch.a_t[static_cast<std::size_t>((l - 1) % 3)], dhagg, prec);
    if (dres) {
      if (!(dres->layout == dxh.layout && dres->r0 == dxh.r0 && dres->c0 == dxh.c0))
        throw CommContract("backward: residual gradient layout mismatch");
      for (std::size_t k = 0; k < dxh.local.v.size(); ++k)
        dxh.local.v[k] += dres->local.v[k];
    }
  }
  st.win.g = contract(rc, transposed(batch.x_in), dxh, prec);
}

/// Averages gradients across the data-parallel axis; always full precision.
template <class Real>
void dp_sync(RankComm& rc, ModelState<Real>& st) {
  PhaseScope ps(rc, Phase::kDpSync);
  const int gd = rc.grid().dim(Axis::D);
  const Real inv = Real{1} / static_cast<Real>(gd);
  for (auto& pv : param_views(st)) {
    rc.all_reduce(Axis::D, std::span<Real>(pv.g, pv.n));
    if (gd > 1)
      for (std::size_t k = 0; k < pv.n; ++k) pv.g[k] *= inv;
  }
}

template <class Real>
void optimizer_step(ModelState<Real>& st, Optimizer opt, double lr) {
  st.opt_step += 1;
  if (opt == Optimizer::kSgd) {
    for (auto& pv : param_views(st))
      for (std::size_t k = 0; k < pv.n; ++k)
        pv.w[k] -= static_cast<Real>(lr) * pv.g[k];
    return;
  }
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(st.opt_step));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(st.opt_step));
  for (auto& pv : param_views(st))
    for (std::size_t k = 0; k < pv.n; ++k) {
      const double g = static_cast<double>(pv.g[k]);
      const double m = b1 * static_cast<double>(pv.m[k]) + (1.0 - b1) * g;
      const double v = b2 * static_cast<double>(pv.v[k]) + (1.0 - b2) * g * g;
      pv.m[k] = static_cast<Real>(m);
      pv.v[k] = static_cast<Real>(v);
      pv.w[k] -= static_cast<Real>(lr * (m / bc1) / (std::sqrt(v / bc2) + eps));
    }
}

/// forward + loss + backward on one batch; gradients are left un-synced.
template <class Real>
Real train_step(RankComm& rc, ModelState<Real>& st, const StepBatch<Real>& batch,
                Precision prec, std::uint64_t run_seed, std::uint64_t global_step,
                double rmsnorm_eps = 1e-6) {
  Real loss;
  ShardedTensor<Real> dlogits;
  ForwardCache<Real> cache;
  {
    PhaseScope ps(rc, Phase::kForward);
    cache = forward(rc, st, batch, prec, true, run_seed, global_step, rmsnorm_eps);
    auto ce = parallel_cross_entropy(rc, cache.logits, batch.labels);
    loss = ce.loss;
    dlogits = std::move(ce.grad_logits);
  }
  {
    PhaseScope ps(rc, Phase::kBackward);
    backward(rc, st, cache, batch, dlogits, prec);
  }
  return loss;
}

struct EvalCounts {
  std::array<std::uint64_t, 3> correct{};  // train, val, test
  std::array<std::uint64_t, 3> total{};

  double accuracy(SplitTag s) const {
    const auto i = static_cast<std::size_t>(static_cast<int>(s));
    return total[i] == 0 ? 0.0
                         : static_cast<double>(correct[i]) / static_cast<double>(total[i]);
  }
};

/// One distributed forward over all N vertices with dropout off, then argmax
/// accuracy per split (ties resolve to the lowest class id).
template <class Real>
EvalCounts evaluate_full_graph(RankComm& rc, const ModelState<Real>& st,
                               const StepBatch<Real>& eval_batch, const Dataset& ds,
                               Precision prec, double rmsnorm_eps = 1e-6) {
  auto cache = forward(rc, st, eval_batch, prec, false, 0, 0, rmsnorm_eps);
  const auto& lg = cache.logits;
  const index_t m = lg.local_rows();
  std::vector<Real> bv(static_cast<std::size_t>(m), std::numeric_limits<Real>::lowest());
  std::vector<index_t> bi(static_cast<std::size_t>(m), lg.g_cols);
  for (index_t i = 0; i < m; ++i)
    for (index_t j = 0; j < lg.local_cols(); ++j)
      if (lg.local.at(i, j) > bv[static_cast<std::size_t>(i)]) {
        bv[static_cast<std::size_t>(i)] = lg.local.at(i, j);
        bi[static_cast<std::size_t>(i)] = lg.c0 + j;
      }
  auto vparts = rc.all_gather(lg.layout.col, std::span<const Real>(bv));
  auto iparts = rc.all_gather(lg.layout.col, std::span<const index_t>(bi));
  EvalCounts counts;
  for (index_t i = 0; i < m; ++i) {
    Real best = std::numeric_limits<Real>::lowest();
    index_t pred = lg.g_cols;
    for (std::size_t p = 0; p < vparts.size(); ++p) {
      const Real v = vparts[p][static_cast<std::size_t>(i)];
      if (v > best) {
        best = v;
        pred = iparts[p][static_cast<std::size_t>(i)];
      }
    }
    const index_t vertex =
        eval_batch.sample.vertices[static_cast<std::size_t>(lg.r0 + i)];
    const auto tag = ds.split[static_cast<std::size_t>(vertex)];
    if (tag == SplitTag::kUnused) continue;
    const auto s = static_cast<std::size_t>(static_cast<int>(tag));
    counts.total[s] += 1;
    if (pred == static_cast<index_t>(ds.labels[static_cast<std::size_t>(vertex)]))
      counts.correct[s] += 1;
  }
  std::array<std::uint64_t, 6> buf{counts.correct[0], counts.correct[1],
                                   counts.correct[2], counts.total[0],
                                   counts.total[1],   counts.total[2]};
  rc.all_reduce(lg.layout.row, std::span<std::uint64_t>(buf));
  counts.correct = {buf[0], buf[1], buf[2]};
  counts.total = {buf[3], buf[4], buf[5]};
  return counts;
}

inline index_t steps_per_epoch(index_t n, index_t b, int gd) {
  const index_t per = b * static_cast<index_t>(gd);
  return (n + per - 1) / per;
}

TrainReport train_run_fp32(const Dataset& ds, const ModelConfig& mcfg,
                           const TrainConfig& tcfg);
TrainReport train_run_fp64(const Dataset& ds, const ModelConfig& mcfg,
                           const TrainConfig& tcfg);

/// Serial oracle: the same math on the degenerate 1x1x1x1 grid, where every
/// collective is the identity.
TrainReport reference_train(const Dataset& ds, const ModelConfig& mcfg,
                            TrainConfig tcfg);

namespace detail {

template <class Real>
class PrefetchQueue {
 public:
  void push(StepBatch<Real>&& b) {
    std::unique_lock lk(m_);
    cv_.wait(lk, [&] { return !slot_.has_value(); });
    slot_ = std::move(b);
    cv_.notify_all();
  }
  StepBatch<Real> pop(WorkerSlots& slots) {
    slots.release();
    std::unique_lock lk(m_);
    cv_.wait(lk, [&] { return slot_.has_value(); });
    StepBatch<Real> b = std::move(*slot_);
    slot_.reset();
    cv_.notify_all();
    lk.unlock();
    slots.acquire();
    return b;
  }

 private:
  std::mutex m_;
  std::condition_variable cv_;
  std::optional<StepBatch<Real>> slot_;
};

}  // namespace detail

/// Full multi-epoch training run on the configured grid: one worker thread
/// per virtual rank, optional per-rank prefetch worker, per-epoch full-graph
/// evaluation. Metrics come from rank 0 (DP group 0).
template <class Real>
TrainReport train_run(const Dataset& ds, const ModelConfig& mcfg,
                      const TrainConfig& tcfg) {
  mcfg.validate();
  if (tcfg.batch < 2 || tcfg.batch > ds.n)
    throw std::invalid_argument("train_run: batch size must be in [2, N]");
  if (tcfg.epochs < 1) throw std::invalid_argument("train_run: epochs must be >= 1");
  if (mcfg.d_in != ds.d_in || mcfg.d_out < ds.n_classes)
    throw std::invalid_argument("train_run: model dims do not match the dataset");

  const DeviceGrid& grid = tcfg.grid;
  Communicator comm(grid, tcfg.comm);
  const index_t S = steps_per_epoch(ds.n, tcfg.batch, grid.dim(Axis::D));
  const std::int64_t total_steps = static_cast<std::int64_t>(S) * tcfg.epochs;

  TrainReport report;
  report.step_losses.resize(static_cast<std::size_t>(total_steps), 0.0);
  report.epochs.resize(static_cast<std::size_t>(tcfg.epochs));
  CommStats prev_snapshot;

  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(grid.total()));
  const auto run_start = std::chrono::steady_clock::now();

  auto worker = [&](int rank) {
    using clock = std::chrono::steady_clock;
    auto ms_since = [](clock::time_point t0) {
      return std::chrono::duration<double, std::milli>(clock::now() - t0).count();
    };
    RankComm rc(comm, rank);
    comm.slots().acquire();
    const Coord4 coord = rc.coord();
    const int dp = grid.dp_group(rank);
    const std::uint64_t group_seed =
        rng::hash_combine(tcfg.seed, static_cast<std::uint64_t>(dp));
    const bool writer = rank == 0;

    RankContext ctx = make_rank_context(grid, coord, ds, mcfg.layers);
    const auto eval_batch = build_step_batch<Real>(grid, coord, ctx, ds, ds.n,
                                                   tcfg.seed, 0, nullptr);
    auto st = init_state<Real>(grid, coord, mcfg, tcfg.seed);

    detail::PrefetchQueue<Real> queue;
    std::thread producer;
    if (tcfg.prefetch)
      producer = std::thread([&] {
        for (std::int64_t t = 0; t < total_steps; ++t) {
          comm.slots().acquire();
          auto b = build_step_batch<Real>(grid, coord, ctx, ds, tcfg.batch, group_seed,
                                          static_cast<std::uint64_t>(t), &rc.stats());
          comm.slots().release();
          queue.push(std::move(b));
        }
      });

    std::int64_t gstep = 0;
    for (int epoch = 0; epoch < tcfg.epochs; ++epoch) {
      double t_sample = 0, t_fwd = 0, t_bwd = 0, t_dp = 0;
      double loss_sum = 0;
      for (index_t s = 0; s < S; ++s, ++gstep) {
        auto t0 = clock::now();
        StepBatch<Real> batch;
        {
          PhaseScope ps(rc, Phase::kSampling);
          batch = tcfg.prefetch
                      ? queue.pop(comm.slots())
                      : build_step_batch<Real>(grid, coord, ctx, ds, tcfg.batch,
                                               group_seed,
                                               static_cast<std::uint64_t>(gstep),
                                               &rc.stats());
        }
        t_sample += ms_since(t0);

        t0 = clock::now();
        ForwardCache<Real> cache;
        ShardedTensor<Real> dlogits;
        Real loss;
        {
          PhaseScope ps(rc, Phase::kForward);
          cache = forward(rc, st, batch, tcfg.precision, true, tcfg.seed,
                          static_cast<std::uint64_t>(gstep), tcfg.rmsnorm_eps);
          auto ce = parallel_cross_entropy(rc, cache.logits, batch.labels);
          loss = ce.loss;
          dlogits = std::move(ce.grad_logits);
        }
        t_fwd += ms_since(t0);

        t0 = clock::now();
        {
          PhaseScope ps(rc, Phase::kBackward);
          backward(rc, st, cache, batch, dlogits, tcfg.precision);
        }
        t_bwd += ms_since(t0);

        t0 = clock::now();
        dp_sync(rc, st);
        t_dp += ms_since(t0);

        optimizer_step(st, tcfg.optimizer, tcfg.lr);
        if (writer) {
          report.step_losses[static_cast<std::size_t>(gstep)] =
              static_cast<double>(loss);
          loss_sum += static_cast<double>(loss);
        }
      }

      const auto counts =
          evaluate_full_graph(rc, st, eval_batch, ds, tcfg.precision, tcfg.rmsnorm_eps);
      rc.barrier();
      if (writer) {
        auto& row = report.epochs[static_cast<std::size_t>(epoch)];
        row.epoch = epoch + 1;
        row.step = gstep;
        row.loss = loss_sum / static_cast<double>(S);
        row.train_acc = counts.accuracy(SplitTag::kTrain);
        row.val_acc = counts.accuracy(SplitTag::kVal);
        row.test_acc = counts.accuracy(SplitTag::kTest);
        row.t_sample_ms = t_sample;
        row.t_fwd_ms = t_fwd;
        row.t_bwd_ms = t_bwd;
        row.t_dpsync_ms = t_dp;
        const auto snap = comm.snapshot();
        auto delta = [&](Axis a) {
          return snap.bytes_on(a) - prev_snapshot.bytes_on(a);
        };
        row.bytes_x = delta(Axis::X);
        row.bytes_y = delta(Axis::Y);
        row.bytes_z = delta(Axis::Z);
        row.bytes_d = delta(Axis::D);
        prev_snapshot = snap;
      }
      rc.barrier();
    }
    if (producer.joinable()) producer.join();
    comm.slots().release();
  };

  std::vector<std::thread> threads;
  for (int r = 0; r < grid.total(); ++r)
    threads.emplace_back([&, r] {
      try {
        worker(r);
      } catch (...) {
        errors[static_cast<std::size_t>(r)] = std::current_exception();
      }
    });
  for (auto& t : threads) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);

  report.comm_total = comm.snapshot();
  for (int r = 0; r < grid.total(); ++r) {
    report.sampled_nnz_extracted += comm.rank_stats(r).sampled_nnz_extracted;
    report.sampled_nnz_kept += comm.rank_stats(r).sampled_nnz_kept;
  }
  report.wall_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() -
                                                run_start)
          .count();
  return report;
}

/// Maximum relative error of the analytic gradient against central finite
/// differences over every parameter element. Dropout must be disabled so the
/// loss is a deterministic function of the weights.
template <class Real>
double finite_difference_check(const Dataset& ds, const ModelConfig& mcfg, index_t b,
                               std::uint64_t seed, double h = 1e-5) {
  if (mcfg.use_dropout && mcfg.dropout_rate > 0.0)
    throw std::invalid_argument("finite_difference_check: disable dropout first");
  DeviceGrid grid(1, 1, 1, 1);
  Communicator comm(grid);
  RankComm rc(comm, 0);
  RankContext ctx = make_rank_context(grid, rc.coord(), ds, mcfg.layers);
  const auto batch =
      build_step_batch<Real>(grid, rc.coord(), ctx, ds, b, seed, 0, nullptr);
  auto st = init_state<Real>(grid, rc.coord(), mcfg, seed);

  auto loss_of = [&](ModelState<Real>& s) {
    auto cache = forward(rc, s, batch, Precision::kFp32, true, seed, 0, 1e-6);
    return parallel_cross_entropy(rc, cache.logits, batch.labels).loss;
  };
  (void)train_step(rc, st, batch, Precision::kFp32, seed, 0);

  double max_rel = 0.0;
  for (auto& pv : param_views(st))
    for (std::size_t k = 0; k < pv.n; ++k) {
      const Real w0 = pv.w[k];
      pv.w[k] = w0 + static_cast<Real>(h);
      const double lp = static_cast<double>(loss_of(st));
      pv.w[k] = w0 - static_cast<Real>(h);
      const double lm = static_cast<double>(loss_of(st));
      pv.w[k] = w0;
      const double fd = (lp - lm) / (2.0 * h);
      const double an = static_cast<double>(pv.g[k]);
      const double denom = std::max({std::abs(fd), std::abs(an), 1e-8});
      max_rel = std::max(max_rel, std::abs(fd - an) / denom);
    }
  return max_rel;
}

}  // namespace gridgnn
