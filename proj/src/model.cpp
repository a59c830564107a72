#include "gridgnn/model.hpp"

namespace gridgnn {

TrainReport train_run_fp32(const Dataset& ds, const ModelConfig& mcfg,
                           const TrainConfig& tcfg) {
  return train_run<float>(ds, mcfg, tcfg);
}

TrainReport train_run_fp64(const Dataset& ds, const ModelConfig& mcfg,
                           const TrainConfig& tcfg) {
  return train_run<double>(ds, mcfg, tcfg);
}

TrainReport reference_train(const Dataset& ds, const ModelConfig& mcfg,
                            TrainConfig tcfg) {
  tcfg.grid = DeviceGrid(1, 1, 1, 1);
  tcfg.precision = Precision::kFp32;
  return train_run<float>(ds, mcfg, tcfg);
}

}  // namespace gridgnn
