// gridgnn: train / verify / sample-stats / gen front end.
//
// All options can come from a flat `key = value` config file (--config);
// command-line flags override file values. Every command is deterministic
// given its seed. GRIDGNN_THREADS caps the number of OS threads used to
// multiplex the simulated ranks (numerics are unaffected).

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "gridgnn/dataset.hpp"
#include "gridgnn/metrics.hpp"
#include "gridgnn/model.hpp"
#include "gridgnn/pmm.hpp"
#include "gridgnn/sampling.hpp"

namespace gg = gridgnn;

namespace {

struct RunConfig {
  std::string grid = "1x1x1x1";
  std::int64_t batch_size = 0;  // 0: n/4, floored at 2
  int epochs = 10;
  std::uint64_t seed = 1;
  std::string precision = "fp32";
  bool prefetch = false;
  std::string out;

  int layers = 2;
  std::int64_t d_h = 64;
  double dropout = 0.1;
  bool rmsnorm = true;
  bool residual = true;
  double lr = 1e-3;
  std::string optimizer = "adam";

  // Dataset: file paths win over the synthetic generator when given.
  std::string edges, features, labels, split;
  std::int64_t n = 256;
  double avg_degree = 8.0;
  std::int64_t d_in = 128;
  std::int64_t classes = 32;
  std::uint64_t data_seed = 7;

  // sample-stats / verify extras.
  std::int64_t draws = 100000;
  double perturb = 0.0;  // verify test hook: offsets one input feature
};

gg::DeviceGrid parse_grid(const std::string& s) {
  int dims[4];
  char extra;
  if (std::sscanf(s.c_str(), "%dx%dx%dx%d%c", &dims[0], &dims[1], &dims[2], &dims[3],
                  &extra) != 4)
    throw CLI::ValidationError("--grid", "expected GdxGxxGyxGz, e.g. 2x2x2x1: " + s);
  for (int d : dims)
    if (d < 1) throw CLI::ValidationError("--grid", "grid dims must be >= 1: " + s);
  return gg::DeviceGrid(dims[0], dims[1], dims[2], dims[3]);
}

gg::Precision parse_precision(const std::string& s) {
  if (s == "fp32") return gg::Precision::kFp32;
  if (s == "bf16comm") return gg::Precision::kBf16Roundtrip;
  throw CLI::ValidationError("--precision", "expected fp32 or bf16comm: " + s);
}

gg::Dataset load_or_generate(const RunConfig& rc) {
  if (!rc.edges.empty())
    return gg::load_dataset(rc.edges, rc.features, rc.labels, rc.split);
  return gg::generate_synthetic(static_cast<gg::index_t>(rc.n), rc.avg_degree,
                                static_cast<gg::index_t>(rc.d_in),
                                static_cast<gg::index_t>(rc.classes), rc.data_seed);
}

gg::index_t effective_batch(const RunConfig& rc, gg::index_t n) {
  auto b = static_cast<gg::index_t>(rc.batch_size);
  if (b == 0) b = n / 4;
  if (b < 2) b = 2;
  if (b > n) b = n;
  return b;
}

gg::ModelConfig model_config(const RunConfig& rc, const gg::Dataset& ds) {
  gg::ModelConfig mcfg;
  mcfg.layers = rc.layers;
  mcfg.d_in = ds.d_in;
  mcfg.d_h = static_cast<gg::index_t>(rc.d_h);
  mcfg.d_out = ds.n_classes;
  mcfg.dropout_rate = rc.dropout;
  mcfg.use_dropout = rc.dropout > 0.0;
  mcfg.use_rmsnorm = rc.rmsnorm;
  mcfg.use_residual = rc.residual;
  mcfg.validate();
  return mcfg;
}

gg::TrainConfig train_config(const RunConfig& rc, gg::index_t n) {
  gg::TrainConfig tcfg;
  tcfg.grid = parse_grid(rc.grid);
  tcfg.batch = effective_batch(rc, n);
  tcfg.epochs = rc.epochs;
  tcfg.seed = rc.seed;
  tcfg.precision = parse_precision(rc.precision);
  tcfg.prefetch = rc.prefetch;
  tcfg.optimizer = rc.optimizer == "sgd" ? gg::Optimizer::kSgd : gg::Optimizer::kAdam;
  tcfg.lr = rc.lr;
  if (const char* env = std::getenv("GRIDGNN_THREADS"))
    tcfg.comm.max_worker_threads = std::atoi(env);
  return tcfg;
}

void add_common_options(CLI::App* cmd, RunConfig& rc) {
  cmd->set_config("--config")->configurable(false);
  cmd->add_option("--grid", rc.grid, "Device grid GdxGxxGyxGz (e.g. 2x2x2x1)");
  cmd->add_option("--batch-size", rc.batch_size, "Vertices per mini-batch (0: n/4)")
      ->check(CLI::NonNegativeNumber);
  cmd->add_option("--epochs", rc.epochs, "Training epochs")->check(CLI::PositiveNumber);
  cmd->add_option("--seed", rc.seed, "Run seed");
  cmd->add_option("--precision", rc.precision, "fp32 | bf16comm");
  cmd->add_flag("--prefetch,!--no-prefetch", rc.prefetch,
                "Overlap next-batch sampling with compute");
  cmd->add_option("--out", rc.out, "Output path");

  cmd->add_option("--layers", rc.layers, "Hidden graph-conv layers")
      ->check(CLI::PositiveNumber);
  cmd->add_option("--hidden-dim", rc.d_h, "Hidden feature width")
      ->check(CLI::PositiveNumber);
  cmd->add_option("--dropout", rc.dropout, "Dropout rate in [0,1); 0 disables")
      ->check(CLI::Range(0.0, 0.999999));
  cmd->add_flag("--rmsnorm,!--no-rmsnorm", rc.rmsnorm, "Per-layer RMSNorm");
  cmd->add_flag("--residual,!--no-residual", rc.residual, "Residual connections");
  cmd->add_option("--lr", rc.lr, "Learning rate")->check(CLI::PositiveNumber);
  cmd->add_option("--optimizer", rc.optimizer, "adam | sgd")
      ->check(CLI::IsMember({"adam", "sgd"}));

  cmd->add_option("--edges", rc.edges, "Edge list file (text 'u v' lines)")
      ->check(CLI::ExistingFile);
  cmd->add_option("--features", rc.features, "Feature file (SGNF)")
      ->check(CLI::ExistingFile);
  cmd->add_option("--labels", rc.labels, "Label file (SGNL)")->check(CLI::ExistingFile);
  cmd->add_option("--split", rc.split, "Split file (SGNS)")->check(CLI::ExistingFile);
  cmd->add_option("--n", rc.n, "Synthetic graph size")->check(CLI::PositiveNumber);
  cmd->add_option("--avg-degree", rc.avg_degree, "Synthetic average degree")
      ->check(CLI::NonNegativeNumber);
  cmd->add_option("--d-in", rc.d_in, "Synthetic input feature width")
      ->check(CLI::PositiveNumber);
  cmd->add_option("--classes", rc.classes, "Synthetic class count")
      ->check(CLI::PositiveNumber);
  cmd->add_option("--data-seed", rc.data_seed, "Synthetic generator seed");
}

int cmd_train(const RunConfig& rc) {
  const gg::Dataset ds = load_or_generate(rc);
  const gg::ModelConfig mcfg = model_config(rc, ds);
  const gg::TrainConfig tcfg = train_config(rc, ds.n);

  const gg::TrainReport rep = gg::train_run_fp32(ds, mcfg, tcfg);

  const std::string out = rc.out.empty() ? "metrics.csv" : rc.out;
  gg::write_metrics_csv(out, rep);
  std::printf("wrote %s (%zu epochs)\n", out.c_str(), rep.epochs.size());
  std::printf("final: train_acc=%.4f val_acc=%.4f test_acc=%.4f loss=%.6f\n",
              rep.final_train_acc(), rep.final_val_acc(), rep.final_test_acc(),
              rep.epochs.empty() ? 0.0 : rep.epochs.back().loss);
  const auto& t = rep.comm_total;
  std::printf("comm bytes: x=%llu y=%llu z=%llu d=%llu  wall=%.1f ms\n",
              static_cast<unsigned long long>(t.bytes_on(gg::Axis::X)),
              static_cast<unsigned long long>(t.bytes_on(gg::Axis::Y)),
              static_cast<unsigned long long>(t.bytes_on(gg::Axis::Z)),
              static_cast<unsigned long long>(t.bytes_on(gg::Axis::D)),
              rep.wall_ms);
  return 0;
}

int cmd_verify(const RunConfig& rc) {
  int failures = 0;
  auto report = [&](const char* name, bool ok, const std::string& detail) {
    std::printf("%-34s %s%s%s\n", name, ok ? "PASS" : "FAIL",
                detail.empty() ? "" : "  ", detail.c_str());
    if (!ok) ++failures;
  };

  // Rotation schedule: adjacency planes cycle ZX, YZ, XY.
  {
    bool ok = true;
    const gg::Plane want[] = {gg::Plane::ZX, gg::Plane::YZ, gg::Plane::XY};
    for (int l = 1; l <= 9; ++l)
      ok = ok && gg::rotation_plane(l) == want[(l - 1) % 3];
    report("rotation schedule", ok, "");
  }

  // Sharded trainer matches the serial trainer step for step.
  {
    RunConfig small = rc;
    small.n = 48;
    small.classes = 4;
    small.d_in = 12;
    small.d_h = 8;
    small.epochs = 3;
    small.dropout = 0.0;  // masks are keyed per DP group; keep runs comparable
    gg::Dataset ds = load_or_generate(small);
    if (rc.perturb != 0.0) ds.features[0] += static_cast<float>(rc.perturb);
    const gg::ModelConfig mcfg = model_config(small, ds);
    gg::TrainConfig tcfg = train_config(small, ds.n);

    // Oracle: same DP replica count, degenerate model-parallel dims, so the
    // two runs draw identical batch sequences.
    gg::TrainConfig tref = tcfg;
    tref.grid = gg::DeviceGrid(tcfg.grid.dims[0], 1, 1, 1);
    tref.precision = gg::Precision::kFp32;
    const gg::Dataset ds_ref = load_or_generate(small);
    const gg::TrainReport ref = gg::train_run_fp32(ds_ref, mcfg, tref);
    const gg::TrainReport got = gg::train_run_fp32(ds, mcfg, tcfg);

    double max_diff = 0.0;
    bool ok = got.step_losses.size() == ref.step_losses.size();
    if (ok)
      for (std::size_t i = 0; i < ref.step_losses.size(); ++i)
        max_diff = std::max(max_diff, std::abs(got.step_losses[i] - ref.step_losses[i]));
    ok = ok && max_diff < 1e-4;
    char buf[96];
    std::snprintf(buf, sizeof buf, "grid %s, max step-loss diff %.3g", small.grid.c_str(),
                  max_diff);
    report("sharded vs serial trainer", ok, buf);
  }

  // fp64 finite-difference gradient check.
  {
    RunConfig small = rc;
    small.n = 16;
    small.classes = 3;
    small.d_in = 6;
    small.d_h = 8;
    gg::Dataset ds = load_or_generate(small);
    gg::ModelConfig mcfg = model_config(small, ds);
    mcfg.use_dropout = false;
    mcfg.dropout_rate = 0.0;
    const double max_rel =
        gg::finite_difference_check<double>(ds, mcfg, ds.n / 2, rc.seed);
    char buf[64];
    std::snprintf(buf, sizeof buf, "max relative error %.3g", max_rel);
    report("fp64 gradient check", max_rel < 1e-6, buf);
  }

  if (failures) std::printf("%d check(s) failed\n", failures);
  return failures ? 1 : 0;
}

int cmd_sample_stats(const RunConfig& rc) {
  const gg::Dataset ds = load_or_generate(rc);
  const gg::index_t n = ds.n;
  const gg::index_t b = effective_batch(rc, n);
  const auto draws = static_cast<std::uint64_t>(rc.draws);

  // Unit signal: the aggregation reduces to the (rescaled) adjacency row sum,
  // which isolates the edge-rescaling bias and keeps the oracle away from 0.
  std::vector<double> x(static_cast<std::size_t>(n), 1.0);

  // Dense full-graph aggregation oracle.
  std::vector<double> full(static_cast<std::size_t>(n), 0.0);
  for (gg::index_t r = 0; r < n; ++r)
    for (gg::index_t e = ds.adjacency.row_ptr[r]; e < ds.adjacency.row_ptr[r + 1]; ++e)
      full[static_cast<std::size_t>(r)] +=
          ds.adjacency.values[static_cast<std::size_t>(e)] *
          x[static_cast<std::size_t>(ds.adjacency.col_idx[static_cast<std::size_t>(e)])];

  std::vector<std::uint64_t> included(static_cast<std::size_t>(n), 0);
  std::vector<double> agg_sum(static_cast<std::size_t>(n), 0.0);
  for (std::uint64_t d = 0; d < draws; ++d) {
    const auto s = gg::sample_vertices(n, b, rc.seed, d);
    gg::CsrMatrix a_s = gg::rescale_edges(gg::induce_subgraph(ds.adjacency, s), b, n);
    for (gg::index_t i = 0; i < b; ++i) {
      const auto v = s.vertices[static_cast<std::size_t>(i)];
      ++included[static_cast<std::size_t>(v)];
      double h = 0.0;
      for (gg::index_t e = a_s.row_ptr[i]; e < a_s.row_ptr[i + 1]; ++e)
        h += a_s.values[static_cast<std::size_t>(e)] *
             x[static_cast<std::size_t>(
                 s.vertices[static_cast<std::size_t>(a_s.col_idx[static_cast<std::size_t>(e)])])];
      agg_sum[static_cast<std::size_t>(v)] += h;
    }
  }

  const double p = static_cast<double>(b) / static_cast<double>(n);
  double max_freq_dev = 0.0, max_bias = 0.0;
  for (gg::index_t v = 0; v < n; ++v) {
    const double freq =
        static_cast<double>(included[static_cast<std::size_t>(v)]) / static_cast<double>(draws);
    max_freq_dev = std::max(max_freq_dev, std::abs(freq - p) / p);
    if (included[static_cast<std::size_t>(v)] == 0) continue;
    const double mean = agg_sum[static_cast<std::size_t>(v)] /
                        static_cast<double>(included[static_cast<std::size_t>(v)]);
    const double denom = std::max(std::abs(full[static_cast<std::size_t>(v)]), 1e-12);
    max_bias = std::max(max_bias, std::abs(mean - full[static_cast<std::size_t>(v)]) / denom);
  }

  std::printf("n=%lld B=%lld draws=%llu\n", static_cast<long long>(n),
              static_cast<long long>(b), static_cast<unsigned long long>(draws));
  std::printf("inclusion frequency: target %.6f, max relative deviation %.4g\n", p,
              max_freq_dev);
  std::printf("aggregation bias: max relative deviation of conditional mean %.4g%s\n",
              max_bias, b == n ? " (B=N: every batch is the full graph)" : "");
  return 0;
}

int cmd_gen(const RunConfig& rc) {
  const auto n = static_cast<gg::index_t>(rc.n);
  const auto edges = gg::synthetic_edges(n, rc.avg_degree, rc.data_seed);
  const gg::Dataset ds =
      gg::generate_synthetic(n, rc.avg_degree, static_cast<gg::index_t>(rc.d_in),
                             static_cast<gg::index_t>(rc.classes), rc.data_seed);

  const std::string prefix = rc.out.empty() ? "synthetic" : rc.out;
  gg::save_edge_list(prefix + ".edges", edges);
  gg::save_features(prefix + ".sgnf", ds.n, ds.d_in, ds.features);
  gg::save_labels(prefix + ".sgnl", ds.n, ds.n_classes, ds.labels);
  gg::save_split(prefix + ".sgns", ds.split);
  std::printf("wrote %s.{edges,sgnf,sgnl,sgns}: n=%lld d_in=%lld classes=%lld\n",
              prefix.c_str(), static_cast<long long>(ds.n),
              static_cast<long long>(ds.d_in), static_cast<long long>(ds.n_classes));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Deterministic multi-axis-parallel GCN training simulator"};
  app.require_subcommand(1);

  RunConfig rc;
  CLI::App* train = app.add_subcommand("train", "Train a model and write a metrics CSV");
  add_common_options(train, rc);
  CLI::App* verify = app.add_subcommand("verify", "Run oracle and gradient checks");
  add_common_options(verify, rc);
  verify->add_option("--perturb", rc.perturb,
                     "Offset added to one input feature (check-failure hook)");
  CLI::App* stats =
      app.add_subcommand("sample-stats", "Report sampling frequency and aggregation bias");
  add_common_options(stats, rc);
  stats->add_option("--draws", rc.draws, "Monte Carlo batch draws")
      ->check(CLI::PositiveNumber);
  CLI::App* gen = app.add_subcommand("gen", "Write a synthetic dataset to disk");
  add_common_options(gen, rc);

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) return cmd_train(rc);
    if (verify->parsed()) return cmd_verify(rc);
    if (stats->parsed()) return cmd_sample_stats(rc);
    return cmd_gen(rc);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
