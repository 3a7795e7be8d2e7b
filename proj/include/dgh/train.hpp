// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "dgh/dataset.hpp"
#include "dgh/model.hpp"

namespace dgh {

struct TrainConfig {
  int epochs = 8;
  double lr = 0.1;
  double momentum = 0.9;
  int batch = 32;
  bool augment = true;     // training-time pipeline mirrors the synthesizer's
  double bn_momentum = 0.1;
  // trailing forward-only epochs that settle the EMA statistics around the
  // final weights (weights frozen, augmentation still applied)
  int stat_epochs = 2;
};

// Trains a fresh model with SGD + momentum and BN running statistics
// accumulated by EMA; the returned bundle carries frozen statistics and the
// final validation accuracy. Deterministic under seed. Divergence raises a
// training error naming the epoch.
ModelBundle train_reference_model(const std::string& arch, const LabeledDataset& train_ds,
                                  const LabeledDataset& val_ds, const TrainConfig& cfg,
                                  uint64_t seed);

void save_model(const ModelBundle& bundle, const std::string& path);
ModelBundle load_model(const std::string& path);

}  // namespace dgh
