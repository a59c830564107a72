#include "gridgnn/metrics.hpp"

#include <cinttypes>
#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace gridgnn {

std::string metrics_csv_string(const TrainReport& report) {
  std::string out =
      "epoch,step,loss,train_acc,val_acc,test_acc,t_sample_ms,t_fwd_ms,t_bwd_ms,"
      "t_dpsync_ms,bytes_x,bytes_y,bytes_z,bytes_d\n";
  char buf[512];
  for (const auto& e : report.epochs) {
    std::snprintf(buf, sizeof(buf),
                  "%d,%" PRId64 ",%.17g,%.17g,%.17g,%.17g,%.3f,%.3f,%.3f,%.3f,%" PRIu64
                  ",%" PRIu64 ",%" PRIu64 ",%" PRIu64 "\n",
                  e.epoch, e.step, e.loss, e.train_acc, e.val_acc, e.test_acc,
                  e.t_sample_ms, e.t_fwd_ms, e.t_bwd_ms, e.t_dpsync_ms, e.bytes_x,
                  e.bytes_y, e.bytes_z, e.bytes_d);
    out += buf;
  }
  return out;
}

void write_metrics_csv(const std::string& path, const TrainReport& report) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open metrics file for writing: " + path);
  f << metrics_csv_string(report);
  if (!f) throw std::runtime_error("failed writing metrics file: " + path);
}

}  // namespace gridgnn
