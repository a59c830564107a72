#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gridgnn/comm.hpp"

namespace gridgnn {

/// Per-epoch training metrics; one CSV row per entry. Timing columns are
/// wall-clock and excluded from determinism guarantees.
struct EpochMetrics {
  int epoch = 0;
  std::int64_t step = 0;  // cumulative optimizer steps at epoch end
  double loss = 0.0;      // mean step loss over the epoch, from DP group 0
  double train_acc = 0.0;
  double val_acc = 0.0;
  double test_acc = 0.0;
  double t_sample_ms = 0.0;
  double t_fwd_ms = 0.0;
  double t_bwd_ms = 0.0;
  double t_dpsync_ms = 0.0;
  std::uint64_t bytes_x = 0;  // aggregate over all ranks, this epoch
  std::uint64_t bytes_y = 0;
  std::uint64_t bytes_z = 0;
  std::uint64_t bytes_d = 0;
};

struct TrainReport {
  std::vector<EpochMetrics> epochs;
  std::vector<double> step_losses;  // per step, from DP group 0
  CommStats comm_total;
  std::uint64_t sampled_nnz_extracted = 0;
  std::uint64_t sampled_nnz_kept = 0;
  double wall_ms = 0.0;

  double final_train_acc() const { return epochs.empty() ? 0.0 : epochs.back().train_acc; }
  double final_val_acc() const { return epochs.empty() ? 0.0 : epochs.back().val_acc; }
  double final_test_acc() const { return epochs.empty() ? 0.0 : epochs.back().test_acc; }
};

/// Writes the fixed-column metrics CSV; numeric formatting is exact (%.17g)
/// so equal values produce byte-identical rows.
void write_metrics_csv(const std::string& path, const TrainReport& report);

std::string metrics_csv_string(const TrainReport& report);

}  // namespace gridgnn
