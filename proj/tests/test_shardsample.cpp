#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <vector>

#include "gridgnn/dataset.hpp"
#include "gridgnn/sampling.hpp"
#include "gridgnn/shardsample.hpp"

using namespace gridgnn;

namespace {

// Reassembles per-rank shards (row-block x col-block over a grid of global
// partitions) into one dense B x B matrix.
std::vector<double> assemble_dense(const std::vector<std::vector<MiniBatchShard>>& shards,
                                   index_t b) {
  std::vector<double> out(static_cast<std::size_t>(b * b), 0.0);
  for (const auto& row_of : shards) {
    for (const auto& sh : row_of) {
      const auto dense = csr_to_dense(sh.a_loc);
      const index_t nr = sh.a_loc.n_rows, nc = sh.a_loc.n_cols;
      for (index_t i = 0; i < nr; ++i)
        for (index_t j = 0; j < nc; ++j)
          out[static_cast<std::size_t>((sh.row_lo + i) * b + (sh.col_lo + j))] =
              dense[static_cast<std::size_t>(i * nc + j)];
    }
  }
  return out;
}

}  // namespace

TEST_CASE("block_partition") {
  CHECK(block_partition(10, 2) == std::vector<index_t>{0, 5, 10});
  CHECK(block_partition(10, 3) == std::vector<index_t>{0, 4, 7, 10});
  CHECK(block_partition(2, 3) == std::vector<index_t>{0, 1, 2, 2});
  CHECK(block_partition(0, 2) == std::vector<index_t>{0, 0, 0});
}

TEST_CASE("locate_ranges") {
  SampleSet s;
  s.vertices = {1, 6};
  s.batch_size = 2;
  s.graph_size = 10;
  SUBCASE("range partition") {
    auto lr0 = locate_ranges(s, 0, 5, 0, 10);
    CHECK(lr0.row_lo == 0);
    CHECK(lr0.row_hi == 1);
    auto lr1 = locate_ranges(s, 5, 10, 0, 10);
    CHECK(lr1.row_lo == 1);
    CHECK(lr1.row_hi == 2);
  }
  SUBCASE("sample outside range is empty") {
    auto lr = locate_ranges(s, 7, 9, 0, 10);
    CHECK(lr.row_lo == lr.row_hi);
  }
  SUBCASE("fully covered range") {
    SampleSet t;
    t.vertices = {2, 3, 7};
    t.batch_size = 3;
    t.graph_size = 10;
    auto lr = locate_ranges(t, 2, 8, 0, 10);
    CHECK(lr.row_lo == 0);
    CHECK(lr.row_hi == 3);
  }
}

TEST_CASE("extract_rows: prefix-sum ownership trace") {
  // Rows with nnz [2, 0, 3] -> prefix [2, 2, 5]; flat indices 0..4 must land
  // on rows 0,0,2,2,2 in column order.
  auto a = csr_from_triples(6, 6, {0, 0, 2, 2, 2}, {1, 4, 0, 2, 5},
                            {1.0, 2.0, 3.0, 4.0, 5.0});
  auto shard = make_csr_shard(a, 0, 6, 0, 6);
  SampleSet s;
  s.vertices = {0, 1, 2};
  s.batch_size = 3;
  s.graph_size = 6;
  auto lr = locate_ranges(s, 0, 6, 0, 6);
  auto t = extract_rows(shard, s, lr);
  CHECK(t.rows_g == std::vector<index_t>{0, 0, 2, 2, 2});
  CHECK(t.cols_g == std::vector<index_t>{1, 4, 0, 2, 5});
  CHECK(t.vals == std::vector<double>{1.0, 2.0, 3.0, 4.0, 5.0});

  SUBCASE("empty sample rows give empty triples") {
    SampleSet e;
    e.vertices = {5};
    e.batch_size = 1;
    e.graph_size = 6;
    auto lre = locate_ranges(e, 0, 6, 0, 6);
    auto te = extract_rows(shard, e, lre);
    CHECK(te.rows_g.empty());
  }
}

TEST_CASE("filter_and_remap") {
  SampleSet s;
  s.vertices = {1, 6};
  s.batch_size = 2;
  s.graph_size = 10;
  RemapTable remap(10);
  remap.publish(s, 4);

  Triples t;
  t.rows_g = {1};
  t.cols_g = {6};
  t.vals = {0.25};

  SUBCASE("single entry remapped to local (0,0)") {
    // rank owning rows [0,5) and columns [5,10)
    auto lr = locate_ranges(s, 0, 5, 5, 10);
    auto ct = filter_and_remap(t, s, lr, remap, 4);
    REQUIRE(ct.rows_c.size() == 1);
    CHECK(ct.rows_c[0] == 0);
    CHECK(ct.cols_c[0] == 0);
    CHECK(ct.rows_g[0] == 1);
    CHECK(ct.cols_g[0] == 6);
  }
  SUBCASE("columns outside s_c are dropped") {
    auto lr = locate_ranges(s, 0, 5, 0, 5);
    Triples t2;
    t2.rows_g = {1};
    t2.cols_g = {6};
    t2.vals = {0.25};
    auto ct = filter_and_remap(t2, s, lr, remap, 4);
    CHECK(ct.rows_c.empty());
  }
  SUBCASE("stale tags from other steps are invisible") {
    auto lr = locate_ranges(s, 0, 5, 5, 10);
    CHECK(remap.lookup(6, 4) == 1);
    CHECK(remap.lookup(6, 5) == -1);
    CHECK(remap.lookup(0, 4) == -1);
    (void)lr;
  }
}

TEST_CASE("assemble_shard") {
  SUBCASE("all-diagonal entries unchanged") {
    CompactTriples ct;
    ct.rows_c = {0, 1};
    ct.cols_c = {0, 1};
    ct.rows_g = {3, 8};
    ct.cols_g = {3, 8};
    ct.vals = {0.5, 0.25};
    auto [a, at] = assemble_shard(ct, 2, 2, 4, 10);
    CHECK(a.values == std::vector<double>{0.5, 0.25});
    CHECK(at == csr_transpose(a));
  }
  SUBCASE("b=2 n=11 multiplies off-diagonals by 10") {
    CompactTriples ct;
    ct.rows_c = {0};
    ct.cols_c = {1};
    ct.rows_g = {3};
    ct.cols_g = {8};
    ct.vals = {0.3};
    auto [a, at] = assemble_shard(ct, 1, 2, 2, 11);
    CHECK(a.values[0] == doctest::Approx(3.0).epsilon(1e-15));
    CHECK(at == csr_transpose(a));
  }
}

TEST_CASE("build_local_minibatch: 1x1 grid equals serial build") {
  auto ds = generate_synthetic(30, 5.0, 4, 3, 9);
  auto shard = make_csr_shard(ds.adjacency, 0, 30, 0, 30);
  RemapTable remap(30);
  auto local = build_local_minibatch(shard, ds, 12, 77, 3, remap);
  auto serial = build_minibatch(ds, 12, 77, 3);
  CHECK(local.a_loc == serial.adjacency);
  CHECK(local.a_t_loc == serial.adjacency_t);
  CHECK(local.x_s == serial.features);
  CHECK(local.y_s == serial.labels);
}

TEST_CASE("block-assembled shards equal the serial rescaled adjacency") {
  auto ds = generate_synthetic(10, 4.0, 2, 2, 13);
  const index_t b = 4;
  const auto rows = block_partition(10, 2);
  const auto cols = block_partition(10, 2);

  auto serial = build_minibatch(ds, b, 5, 2);
  const auto want = csr_to_dense(serial.adjacency);

  std::vector<std::vector<MiniBatchShard>> shards(2);
  std::vector<RemapTable> remaps;
  for (int i = 0; i < 4; ++i) remaps.emplace_back(10);
  for (int ri = 0; ri < 2; ++ri)
    for (int ci = 0; ci < 2; ++ci) {
      auto sh = make_csr_shard(ds.adjacency, rows[ri], rows[ri + 1], cols[ci], cols[ci + 1]);
      shards[static_cast<std::size_t>(ri)].push_back(build_local_minibatch(
          sh, ds, b, 5, 2, remaps[static_cast<std::size_t>(ri * 2 + ci)]));
    }
  const auto got = assemble_dense(shards, b);
  CHECK(got == want);

  SUBCASE("transpose shards are consistent") {
    for (const auto& row_of : shards)
      for (const auto& sh : row_of) CHECK(sh.a_t_loc == csr_transpose(sh.a_loc));
  }
}

TEST_CASE("RemapTable reuse across steps matches fresh tables") {
  auto ds = generate_synthetic(40, 6.0, 3, 2, 77);
  const auto rows = block_partition(40, 2);
  auto shard = make_csr_shard(ds.adjacency, rows[0], rows[1], 0, 40);

  RemapTable reused(40);
  for (std::uint64_t step = 0; step < 6; ++step) {
    auto with_reuse = build_local_minibatch(shard, ds, 15, 3, step, reused);
    RemapTable fresh(40);
    auto with_fresh = build_local_minibatch(shard, ds, 15, 3, step, fresh);
    CHECK(with_reuse.a_loc == with_fresh.a_loc);
    CHECK(with_reuse.a_t_loc == with_fresh.a_t_loc);
    CHECK(with_reuse.x_s == with_fresh.x_s);
  }
}

TEST_CASE("work counters: extraction touches each sampled-row nonzero once") {
  auto ds = generate_synthetic(50, 6.0, 2, 2, 3);
  auto shard = make_csr_shard(ds.adjacency, 0, 25, 0, 50);
  RemapTable remap(50);
  auto mbs = build_local_minibatch(shard, ds, 20, 9, 0, remap);

  auto s = sample_vertices(50, 20, 9, 0);
  std::uint64_t want = 0;
  for (auto v : s.vertices)
    if (v < 25)
      want += static_cast<std::uint64_t>(ds.adjacency.row_ptr[v + 1] -
                                         ds.adjacency.row_ptr[v]);
  CHECK(mbs.nnz_extracted == want);
  CHECK(mbs.nnz_kept == static_cast<std::uint64_t>(mbs.a_loc.nnz()));
}

TEST_CASE("sample_partition") {
  SampleSet s;
  s.vertices = {1, 3, 6, 8};
  s.batch_size = 4;
  s.graph_size = 10;
  CHECK(sample_partition(s, {0, 5, 10}) == std::vector<index_t>{0, 2, 4});
  CHECK(sample_partition(s, {0, 2, 4, 10}) == std::vector<index_t>{0, 1, 2, 4});
}
