#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <thread>
#include <vector>

#include "gridgnn/pmm.hpp"
#include "gridgnn/shardsample.hpp"

using namespace gridgnn;

namespace {

template <class Body>
void run_ranks(Communicator& comm, Body&& body) {
  std::vector<std::thread> threads;
  for (int r = 0; r < comm.grid().total(); ++r)
    threads.emplace_back([&, r] {
      RankComm rc(comm, r);
      body(rc);
    });
  for (auto& t : threads) t.join();
}

template <class Real>
Dense<Real> random_dense(index_t rows, index_t cols, std::uint64_t seed) {
  Dense<Real> d(rows, cols);
  rng::Stream s(seed);
  for (auto& v : d.v) v = static_cast<Real>(2.0 * s.next_unit() - 1.0);
  return d;
}

template <class Real>
Dense<Real> dense_matmul(const Dense<Real>& a, const Dense<Real>& b) {
  Dense<Real> c(a.rows, b.cols);
  for (index_t i = 0; i < a.rows; ++i)
    for (index_t k = 0; k < a.cols; ++k)
      for (index_t j = 0; j < b.cols; ++j) c.at(i, j) += a.at(i, k) * b.at(k, j);
  return c;
}

/// Local CSR block of a global sparse matrix for the given layout and rank.
ShardedSparse sparse_shard(const DeviceGrid& grid, const Coord4& coord, Layout layout,
                           const CsrMatrix& global, const std::vector<index_t>& row_off,
                           const std::vector<index_t>& col_off) {
  ShardedSparse s;
  s.layout = layout;
  s.g_rows = global.n_rows;
  s.g_cols = global.n_cols;
  s.row_off = row_off;
  s.col_off = col_off;
  const int cr = coord[static_cast<std::size_t>(static_cast<int>(layout.row))];
  const int cc = coord[static_cast<std::size_t>(static_cast<int>(layout.col))];
  s.r0 = row_off[static_cast<std::size_t>(cr)];
  s.r1 = row_off[static_cast<std::size_t>(cr + 1)];
  s.c0 = col_off[static_cast<std::size_t>(cc)];
  s.c1 = col_off[static_cast<std::size_t>(cc + 1)];
  std::vector<index_t> ri, ci;
  std::vector<double> v;
  for (index_t i = s.r0; i < s.r1; ++i)
    for (index_t e = global.row_ptr[i]; e < global.row_ptr[i + 1]; ++e) {
      const index_t j = global.col_idx[static_cast<std::size_t>(e)];
      if (j < s.c0 || j >= s.c1) continue;
      ri.push_back(i - s.r0);
      ci.push_back(j - s.c0);
      v.push_back(global.values[static_cast<std::size_t>(e)]);
    }
  s.local = csr_from_triples(s.r1 - s.r0, s.c1 - s.c0, ri, ci, v);
  return s;
}

}  // namespace

TEST_CASE("layout algebra") {
  CHECK(third_axis({Axis::X, Axis::Y}) == Axis::Z);
  CHECK(third_axis({Axis::Y, Axis::X}) == Axis::Z);
  CHECK(third_axis({Axis::Z, Axis::X}) == Axis::Y);
  CHECK(plane_of({Axis::X, Axis::Y}) == Plane::XY);
  CHECK(plane_of({Axis::Z, Axis::X}) == Plane::ZX);
  CHECK(plane_of({Axis::Y, Axis::Z}) == Plane::YZ);
  CHECK_THROWS_AS(third_axis({Axis::X, Axis::X}), std::invalid_argument);
  CHECK_THROWS_AS(third_axis({Axis::D, Axis::X}), std::invalid_argument);
}

TEST_CASE("layer rotation") {
  CHECK(rotation_plane(1) == Plane::ZX);
  CHECK(rotation_plane(2) == Plane::YZ);
  CHECK(rotation_plane(3) == Plane::XY);
  CHECK(rotation_plane(4) == Plane::ZX);
  const Plane want[7] = {Plane::ZX, Plane::YZ, Plane::XY,
                         Plane::ZX, Plane::YZ, Plane::XY, Plane::ZX};
  for (int l = 1; l <= 7; ++l) CHECK(rotation_plane(l) == want[l - 1]);
  for (int l = 1; l <= 9; ++l) {
    CHECK(adjacency_layout(l + 3) == adjacency_layout(l));
    // the adjacency contraction axis matches the incoming feature row axis
    CHECK(adjacency_layout(l).col == feature_layout(l).row);
    // the weight contracts the aggregated features and lands on the layout
    // that feeds the next layer
    const Layout hagg = hagg_layout(l);
    const Layout w = weight_layout(l);
    CHECK(w.row == hagg.col);
    CHECK(Layout{hagg.row, w.col} == feature_layout(l + 1));
  }
  // input projection feeds layer 1
  CHECK(kInputFeatureLayout.col == Axis::Z);
  const Layout w_in = weight_layout_for(kInputFeatureLayout);
  CHECK(w_in == Layout{Axis::Z, Axis::Y});
  CHECK(Layout{kInputFeatureLayout.row, w_in.col} == feature_layout(1));
}

TEST_CASE("contract on a degenerate grid is the dense product") {
  DeviceGrid grid(1, 1, 1, 1);
  Communicator comm(grid);
  const auto a = random_dense<double>(5, 4, 1);
  const auto b = random_dense<double>(4, 3, 2);
  const auto want = dense_matmul(a, b);
  run_ranks(comm, [&](RankComm& rc) {
    auto at = shard_from_global(grid, rc.coord(), {Axis::X, Axis::Y}, a,
                                block_partition(5, 1), block_partition(4, 1));
    auto bt = shard_from_global(grid, rc.coord(), {Axis::Y, Axis::Z}, b,
                                block_partition(4, 1), block_partition(3, 1));
    auto c = contract(rc, at, bt);
    CHECK(c.local == want);
  });
  CHECK(comm.snapshot().total_bytes() == 0);
}

TEST_CASE("contract: two-way inner split matches the dense oracle") {
  // A=[[1,2],[3,4]] column-split, F=[[1],[2]] row-split; the partial products
  // [[1],[3]] and [[4],[8]] all-reduce to [[5],[11]].
  DeviceGrid grid(1, 2, 1, 1);
  Communicator comm(grid);
  Dense<double> a(2, 2);
  a.v = {1, 2, 3, 4};
  Dense<double> f(2, 1);
  f.v = {1, 2};
  std::vector<Dense<double>> got(2);
  run_ranks(comm, [&](RankComm& rc) {
    auto at = shard_from_global(grid, rc.coord(), {Axis::Z, Axis::X}, a,
                                block_partition(2, 1), block_partition(2, 2));
    CHECK(at.local_cols() == 1);
    auto ft = shard_from_global(grid, rc.coord(), {Axis::X, Axis::Y}, f,
                                block_partition(2, 2), block_partition(1, 1));
    auto c = contract(rc, at, ft);
    got[static_cast<std::size_t>(rc.rank())] = c.local;
  });
  CHECK(got[0].v == std::vector<double>{5, 11});
  CHECK(got[1].v == got[0].v);
  // one all-reduce of two doubles per member in a 2-group
  CHECK(comm.snapshot().bytes_on(Axis::X) == 16);
}

TEST_CASE("contract: mismatched inner partition is a contract violation") {
  DeviceGrid grid(1, 1, 1, 1);
  Communicator comm(grid);
  const auto a = random_dense<double>(3, 4, 3);
  const auto b = random_dense<double>(5, 2, 4);
  run_ranks(comm, [&](RankComm& rc) {
    auto at = shard_from_global(grid, rc.coord(), {Axis::X, Axis::Y}, a,
                                block_partition(3, 1), block_partition(4, 1));
    auto bt = shard_from_global(grid, rc.coord(), {Axis::Y, Axis::Z}, b,
                                block_partition(5, 1), block_partition(2, 1));
    CHECK_THROWS_AS(contract(rc, at, bt), CommContract);
  });
}

TEST_CASE("contract equals serial on every PMM grid up to 2x2x2") {
  const auto a = random_dense<float>(13, 9, 11);
  const auto b = random_dense<float>(9, 7, 12);
  const auto want = dense_matmul(a, b);
  for (int gx : {1, 2})
    for (int gy : {1, 2})
      for (int gz : {1, 2}) {
        DeviceGrid grid(1, gx, gy, gz);
        Communicator comm(grid);
        std::vector<ShardedTensor<float>> out(static_cast<std::size_t>(grid.total()));
        run_ranks(comm, [&](RankComm& rc) {
          auto at = shard_from_global(grid, rc.coord(), {Axis::Z, Axis::X}, a,
                                      block_partition(13, gz), block_partition(9, gx));
          auto bt = shard_from_global(grid, rc.coord(), {Axis::X, Axis::Y}, b,
                                      block_partition(9, gx), block_partition(7, gy));
          out[static_cast<std::size_t>(rc.rank())] = contract(rc, at, bt);
        });
        const auto got = assemble_tiles(grid, out);
        for (std::size_t k = 0; k < want.v.size(); ++k)
          CHECK(got.v[k] == doctest::Approx(want.v[k]).epsilon(1e-5));
      }
}

TEST_CASE("spmm") {
  auto ds = generate_synthetic(24, 4.0, 3, 2, 9);
  const auto& a = ds.adjacency;
  const auto f = random_dense<double>(24, 6, 21);
  Dense<double> want(24, 6);
  for (index_t i = 0; i < 24; ++i)
    for (index_t e = a.row_ptr[i]; e < a.row_ptr[i + 1]; ++e)
      for (index_t j = 0; j < 6; ++j)
        want.at(i, j) += a.values[static_cast<std::size_t>(e)] *
                         f.at(a.col_idx[static_cast<std::size_t>(e)], j);

  SUBCASE("identity adjacency re-lays out the features") {
    std::vector<index_t> ii(24), vv_i(24);
    std::vector<double> ones(24, 1.0);
    for (index_t i = 0; i < 24; ++i) ii[static_cast<std::size_t>(i)] = i;
    auto eye = csr_from_triples(24, 24, ii, ii, ones);
    DeviceGrid grid(1, 2, 1, 2);
    Communicator comm(grid);
    std::vector<ShardedTensor<double>> out(static_cast<std::size_t>(grid.total()));
    run_ranks(comm, [&](RankComm& rc) {
      auto sp = sparse_shard(grid, rc.coord(), {Axis::Z, Axis::X}, eye,
                             block_partition(24, 2), block_partition(24, 2));
      auto ft = shard_from_global(grid, rc.coord(), {Axis::X, Axis::Y}, f,
                                  block_partition(24, 2), block_partition(6, 1));
      out[static_cast<std::size_t>(rc.rank())] = spmm(rc, sp, ft);
    });
    CHECK(out[0].layout == Layout{Axis::Z, Axis::Y});
    CHECK(assemble_tiles(grid, out) == f);
  }
  SUBCASE("matches the dense aggregation oracle on grids up to 2x2x2") {
    for (int gx : {1, 2})
      for (int gz : {1, 2}) {
        DeviceGrid grid(1, gx, 2, gz);
        Communicator comm(grid);
        std::vector<ShardedTensor<double>> out(static_cast<std::size_t>(grid.total()));
        run_ranks(comm, [&](RankComm& rc) {
          auto sp = sparse_shard(grid, rc.coord(), {Axis::Z, Axis::X}, a,
                                 block_partition(24, gz), block_partition(24, gx));
          auto ft = shard_from_global(grid, rc.coord(), {Axis::X, Axis::Y}, f,
                                      block_partition(24, gx), block_partition(6, 2));
          out[static_cast<std::size_t>(rc.rank())] = spmm(rc, sp, ft);
        });
        const auto got = assemble_tiles(grid, out);
        for (std::size_t k = 0; k < want.v.size(); ++k)
          CHECK(got.v[k] == doctest::Approx(want.v[k]).epsilon(1e-10));
      }
  }
}

TEST_CASE("transposed shard is the shard of the transpose") {
  DeviceGrid grid(1, 2, 3, 1);
  Communicator comm(grid);
  const auto a = random_dense<double>(7, 5, 31);
  Dense<double> at(5, 7);
  for (index_t i = 0; i < 7; ++i)
    for (index_t j = 0; j < 5; ++j) at.at(j, i) = a.at(i, j);
  run_ranks(comm, [&](RankComm& rc) {
    auto t = shard_from_global(grid, rc.coord(), {Axis::X, Axis::Y}, a,
                               block_partition(7, 2), block_partition(5, 3));
    auto tt = transposed(t);
    auto want = shard_from_global(grid, rc.coord(), {Axis::Y, Axis::X}, at,
                                  block_partition(5, 3), block_partition(7, 2));
    CHECK(tt.layout == want.layout);
    CHECK(tt.r0 == want.r0);
    CHECK(tt.c1 == want.c1);
    CHECK(tt.local == want.local);
  });
}

TEST_CASE("reshard") {
  DeviceGrid grid(1, 2, 2, 2);
  Communicator comm(grid);
  const auto a = random_dense<double>(10, 6, 41);
  SUBCASE("round trip through a different plane preserves values exactly") {
    run_ranks(comm, [&](RankComm& rc) {
      auto t = shard_from_global(grid, rc.coord(), {Axis::X, Axis::Y}, a,
                                 block_partition(10, 2), block_partition(6, 2));
      auto u = reshard(rc, t, {Axis::Z, Axis::X}, block_partition(10, 2),
                       block_partition(6, 2));
      auto want = shard_from_global(grid, rc.coord(), {Axis::Z, Axis::X}, a,
                                    block_partition(10, 2), block_partition(6, 2));
      CHECK(u.local == want.local);
      auto back = reshard(rc, u, {Axis::X, Axis::Y}, block_partition(10, 2),
                          block_partition(6, 2));
      CHECK(back.local == t.local);
    });
  }
  SUBCASE("identity reshard is communication-free") {
    run_ranks(comm, [&](RankComm& rc) {
      auto t = shard_from_global(grid, rc.coord(), {Axis::X, Axis::Y}, a,
                                 block_partition(10, 2), block_partition(6, 2));
      auto u = reshard(rc, t, {Axis::X, Axis::Y}, block_partition(10, 2),
                       block_partition(6, 2));
      CHECK(u.local == t.local);
    });
    CHECK(comm.snapshot().total_bytes() == 0);
  }
}

TEST_CASE("parallel rmsnorm forward") {
  SUBCASE("all-ones input with unit gamma") {
    DeviceGrid grid(1, 1, 1, 1);
    Communicator comm(grid);
    run_ranks(comm, [&](RankComm& rc) {
      Dense<double> x(2, 4);
      for (auto& v : x.v) v = 1.0;
      auto t = shard_from_global(grid, rc.coord(), {Axis::X, Axis::Y}, x,
                                 block_partition(2, 1), block_partition(4, 1));
      std::vector<double> gamma(4, 1.0);
      const double eps = 1e-6;
      auto r = parallel_rmsnorm_fwd(rc, t, std::span<const double>(gamma), eps);
      for (auto v : r.y.local.v)
        CHECK(v == doctest::Approx(1.0 / std::sqrt(1.0 + eps)).epsilon(1e-14));
    });
  }
  SUBCASE("row [3,4]: rms sqrt(12.5), sharded equals serial") {
    Dense<double> x(1, 2);
    x.v = {3.0, 4.0};
    std::vector<double> serial_y;
    {
      DeviceGrid grid(1, 1, 1, 1);
      Communicator comm(grid);
      run_ranks(comm, [&](RankComm& rc) {
        auto t = shard_from_global(grid, rc.coord(), {Axis::X, Axis::Y}, x,
                                   block_partition(1, 1), block_partition(2, 1));
        std::vector<double> gamma(2, 1.0);
        auto r = parallel_rmsnorm_fwd(rc, t, std::span<const double>(gamma), 0.0);
        CHECK(r.rms[0] == doctest::Approx(std::sqrt(12.5)).epsilon(1e-15));
        CHECK(r.y.local.at(0, 0) == doctest::Approx(0.848528).epsilon(1e-6));
        CHECK(r.y.local.at(0, 1) == doctest::Approx(1.131371).epsilon(1e-6));
        serial_y = r.y.local.v;
      });
    }
    DeviceGrid grid(1, 1, 2, 1);
    Communicator comm(grid);
    std::vector<ShardedTensor<double>> out(2);
    run_ranks(comm, [&](RankComm& rc) {
      auto t = shard_from_global(grid, rc.coord(), {Axis::X, Axis::Y}, x,
                                 block_partition(1, 1), block_partition(2, 2));
      std::vector<double> gamma(1, 1.0);
      auto r = parallel_rmsnorm_fwd(rc, t, std::span<const double>(gamma), 0.0);
      out[static_cast<std::size_t>(rc.rank())] = r.y;
    });
    CHECK(assemble_tiles(grid, out).v == serial_y);
  }
}

TEST_CASE("parallel rmsnorm backward matches finite differences") {
  DeviceGrid grid(1, 1, 1, 1);
  Communicator comm(grid);
  const index_t m = 3, n = 4;
  const auto x0 = random_dense<double>(m, n, 51);
  std::vector<double> gamma{0.9, 1.1, 1.3, 0.7};
  const auto dy = random_dense<double>(m, n, 52);
  const double eps = 1e-6;

  auto loss = [&](const Dense<double>& x, const std::vector<double>& g) {
    double acc = 0.0;
    Communicator c2(grid);
    std::vector<std::thread> th;
    th.emplace_back([&] {
      RankComm rc(c2, 0);
      auto t = shard_from_global(grid, rc.coord(), {Axis::X, Axis::Y}, x,
                                 block_partition(m, 1), block_partition(n, 1));
      auto r = parallel_rmsnorm_fwd(rc, t, std::span<const double>(g), eps);
      for (std::size_t k = 0; k < r.y.local.v.size(); ++k) acc += dy.v[k] * r.y.local.v[k];
    });
    th[0].join();
    return acc;
  };

  Dense<double> dx_got;
  std::vector<double> dg_got;
  run_ranks(comm, [&](RankComm& rc) {
    auto t = shard_from_global(grid, rc.coord(), {Axis::X, Axis::Y}, x0,
                               block_partition(m, 1), block_partition(n, 1));
    auto fwd = parallel_rmsnorm_fwd(rc, t, std::span<const double>(gamma), eps);
    auto dyt = shard_from_global(grid, rc.coord(), {Axis::X, Axis::Y}, dy,
                                 block_partition(m, 1), block_partition(n, 1));
    auto g = parallel_rmsnorm_bwd(rc, t, std::span<const double>(gamma), fwd.rms, dyt);
    dx_got = g.dx.local;
    dg_got = g.dgamma;
  });
  const double h = 1e-6;
  for (index_t i = 0; i < m; ++i)
    for (index_t j = 0; j < n; ++j) {
      auto xp = x0, xm = x0;
      xp.at(i, j) += h;
      xm.at(i, j) -= h;
      const double fd = (loss(xp, gamma) - loss(xm, gamma)) / (2 * h);
      CHECK(dx_got.at(i, j) == doctest::Approx(fd).epsilon(1e-5));
    }
  for (index_t j = 0; j < n; ++j) {
    auto gp = gamma, gm = gamma;
    gp[static_cast<std::size_t>(j)] += h;
    gm[static_cast<std::size_t>(j)] -= h;
    const double fd = (loss(x0, gp) - loss(x0, gm)) / (2 * h);
    CHECK(dg_got[static_cast<std::size_t>(j)] == doctest::Approx(fd).epsilon(1e-5));
  }
}

TEST_CASE("fused elementwise") {
  DeviceGrid grid(1, 1, 1, 1);
  Coord4 origin{0, 0, 0, 0};
  SUBCASE("zero dropout reduces to relu plus residual") {
    Dense<double> x(2, 2), hp(2, 2);
    x.v = {-1.0, 2.0, 0.0, -3.0};
    hp.v = {10.0, 20.0, 30.0, 40.0};
    auto xt = shard_from_global(grid, origin, {Axis::X, Axis::Y}, x,
                                block_partition(2, 1), block_partition(2, 1));
    auto ht = shard_from_global(grid, origin, {Axis::X, Axis::Y}, hp,
                                block_partition(2, 1), block_partition(2, 1));
    auto r = fused_elementwise_fwd(xt, &ht, 0.0, 7, true);
    CHECK(r.out.local.v == std::vector<double>{10.0, 22.0, 30.0, 40.0});
  }
  SUBCASE("non-positive input with zero residual gives zero") {
    Dense<double> x(2, 2);
    x.v = {-1.0, 0.0, -5.0, -0.5};
    auto xt = shard_from_global(grid, origin, {Axis::X, Axis::Y}, x,
                                block_partition(2, 1), block_partition(2, 1));
    auto r = fused_elementwise_fwd(xt, nullptr, 0.5, 7, true);
    for (auto v : r.out.local.v) CHECK(v == 0.0);
  }
  SUBCASE("eval mode ignores dropout") {
    Dense<double> x(1, 1);
    x.v = {1.0};
    auto xt = shard_from_global(grid, origin, {Axis::X, Axis::Y}, x,
                                block_partition(1, 1), block_partition(1, 1));
    auto r = fused_elementwise_fwd(xt, nullptr, 0.9, 7, false);
    CHECK(r.out.local.v[0] == 1.0);
  }
  SUBCASE("inverted dropout is mean-preserving (Monte Carlo)") {
    Dense<double> x(1, 1);
    x.v = {1.0};
    auto xt = shard_from_global(grid, origin, {Axis::X, Axis::Y}, x,
                                block_partition(1, 1), block_partition(1, 1));
    double acc = 0.0;
    const int trials = 100000;
    for (int t = 0; t < trials; ++t) {
      auto r = fused_elementwise_fwd(xt, nullptr, 0.5, static_cast<std::uint64_t>(t), true);
      acc += r.out.local.v[0];
    }
    CHECK(acc / trials == doctest::Approx(1.0).epsilon(0.01));
  }
  SUBCASE("backward replays the cached scale") {
    Dense<double> x(2, 3);
    x.v = {1.0, -1.0, 2.0, -2.0, 3.0, 0.5};
    auto xt = shard_from_global(grid, origin, {Axis::X, Axis::Y}, x,
                                block_partition(2, 1), block_partition(3, 1));
    auto r = fused_elementwise_fwd(xt, nullptr, 0.3, 99, true);
    auto dy = shard_from_global(grid, origin, {Axis::X, Axis::Y},
                                random_dense<double>(2, 3, 61), block_partition(2, 1),
                                block_partition(3, 1));
    auto dx = fused_elementwise_bwd(dy, r.scale);
    for (index_t i = 0; i < 2; ++i)
      for (index_t j = 0; j < 3; ++j)
        CHECK(dx.local.at(i, j) == dy.local.at(i, j) * r.scale.at(i, j));
  }
  SUBCASE("invalid rate") {
    Dense<double> x(1, 1);
    x.v = {1.0};
    auto xt = shard_from_global(grid, origin, {Axis::X, Axis::Y}, x,
                                block_partition(1, 1), block_partition(1, 1));
    CHECK_THROWS_AS(fused_elementwise_fwd(xt, nullptr, 1.0, 7, true),
                    std::invalid_argument);
    CHECK_THROWS_AS(fused_elementwise_fwd(xt, nullptr, -0.1, 7, true),
                    std::invalid_argument);
  }
}

TEST_CASE("parallel cross entropy") {
  SUBCASE("symmetric two-class case") {
    DeviceGrid grid(1, 1, 1, 1);
    Communicator comm(grid);
    run_ranks(comm, [&](RankComm& rc) {
      Dense<double> o(1, 2);
      auto t = shard_from_global(grid, rc.coord(), {Axis::X, Axis::Y}, o,
                                 block_partition(1, 1), block_partition(2, 1));
      auto r = parallel_cross_entropy(rc, t, {0});
      CHECK(r.loss == doctest::Approx(std::log(2.0)).epsilon(1e-12));
      CHECK(r.grad_logits.local.v[0] == doctest::Approx(-0.5).epsilon(1e-12));
      CHECK(r.grad_logits.local.v[1] == doctest::Approx(0.5).epsilon(1e-12));
    });
  }
  SUBCASE("large-margin one-hot logits drive the loss to zero") {
    DeviceGrid grid(1, 1, 1, 1);
    Communicator comm(grid);
    run_ranks(comm, [&](RankComm& rc) {
      Dense<double> o(2, 3);
      o.at(0, 1) = 50.0;
      o.at(1, 2) = 50.0;
      auto t = shard_from_global(grid, rc.coord(), {Axis::X, Axis::Y}, o,
                                 block_partition(2, 1), block_partition(3, 1));
      auto r = parallel_cross_entropy(rc, t, {1, 2});
      CHECK(r.loss < 1e-12);
    });
  }
  SUBCASE("class split over two ranks equals the serial computation") {
    const auto o = random_dense<double>(6, 4, 71);
    const std::vector<std::int32_t> labels{0, 3, 2, 1, 3, 0};
    double serial_loss = 0.0;
    Dense<double> serial_grad;
    {
      DeviceGrid grid(1, 1, 1, 1);
      Communicator comm(grid);
      run_ranks(comm, [&](RankComm& rc) {
        auto t = shard_from_global(grid, rc.coord(), {Axis::X, Axis::Y}, o,
                                   block_partition(6, 1), block_partition(4, 1));
        auto r = parallel_cross_entropy(rc, t, labels);
        serial_loss = r.loss;
        serial_grad = r.grad_logits.local;
      });
    }
    DeviceGrid grid(1, 1, 2, 1);
    Communicator comm(grid);
    std::vector<ShardedTensor<double>> grads(2);
    std::vector<double> losses(2);
    run_ranks(comm, [&](RankComm& rc) {
      auto t = shard_from_global(grid, rc.coord(), {Axis::X, Axis::Y}, o,
                                 block_partition(6, 1), block_partition(4, 2));
      auto r = parallel_cross_entropy(rc, t, labels);
      losses[static_cast<std::size_t>(rc.rank())] = r.loss;
      grads[static_cast<std::size_t>(rc.rank())] = r.grad_logits;
    });
    CHECK(losses[0] == doctest::Approx(serial_loss).epsilon(1e-6));
    CHECK(losses[1] == losses[0]);
    const auto g = assemble_tiles(grid, grads);
    for (std::size_t k = 0; k < g.v.size(); ++k)
      CHECK(g.v[k] == doctest::Approx(serial_grad.v[k]).epsilon(1e-10));
  }
  SUBCASE("gradient matches finite differences") {
    DeviceGrid grid(1, 1, 1, 1);
    const auto o0 = random_dense<double>(3, 4, 81);
    const std::vector<std::int32_t> labels{2, 0, 3};
    auto loss_of = [&](const Dense<double>& o) {
      double l = 0.0;
      Communicator comm(grid);
      std::thread th([&] {
        RankComm rc(comm, 0);
        auto t = shard_from_global(grid, rc.coord(), {Axis::X, Axis::Y}, o,
                                   block_partition(3, 1), block_partition(4, 1));
        l = parallel_cross_entropy(rc, t, labels).loss;
      });
      th.join();
      return l;
    };
    Dense<double> grad;
    {
      Communicator comm(grid);
      run_ranks(comm, [&](RankComm& rc) {
        auto t = shard_from_global(grid, rc.coord(), {Axis::X, Axis::Y}, o0,
                                   block_partition(3, 1), block_partition(4, 1));
        grad = parallel_cross_entropy(rc, t, labels).grad_logits.local;
      });
    }
    const double h = 1e-6;
    for (index_t i = 0; i < 3; ++i)
      for (index_t j = 0; j < 4; ++j) {
        auto op = o0, om = o0;
        op.at(i, j) += h;
        om.at(i, j) -= h;
        const double fd = (loss_of(op) - loss_of(om)) / (2 * h);
        CHECK(grad.at(i, j) == doctest::Approx(fd).epsilon(1e-5));
      }
  }
  SUBCASE("label out of range") {
    DeviceGrid grid(1, 1, 1, 1);
    Communicator comm(grid);
    run_ranks(comm, [&](RankComm& rc) {
      Dense<double> o(1, 2);
      auto t = shard_from_global(grid, rc.coord(), {Axis::X, Axis::Y}, o,
                                 block_partition(1, 1), block_partition(2, 1));
      CHECK_THROWS_AS(parallel_cross_entropy(rc, t, {2}), std::invalid_argument);
      CHECK_THROWS_AS(parallel_cross_entropy(rc, t, {0, 1}), std::invalid_argument);
    });
  }
}
