// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <mutex>
#include <optional>
#include <vector>

#include "dgh/graph.hpp"
#include "dgh/model.hpp"

namespace dgh {

// Per-channel statistics of one feature map batch.
struct ChannelStats {
  std::vector<double> mean;
  std::vector<double> second_moment;
  std::vector<double> variance;  // second_moment - mean^2
};

// mean over all images and spatial positions per channel; variance derived
// from the second moment. Accumulation is in 64-bit.
ChannelStats batch_stats(const Tensor& feature_map);

// One batch's stored statistics across all BN layers: mean and second moment
// per layer, sized to that layer's channel count.
struct BatchStats {
  std::vector<std::vector<double>> mean;
  std::vector<std::vector<double>> m2;

  int layers() const { return static_cast<int>(mean.size()); }
};

struct GlobalStats {
  std::vector<std::vector<double>> mean;
  std::vector<std::vector<double>> var;
};

// The N-batch record table plus the derived whole-set statistics. The mean of
// batch means gives the set mean, and the mean of batch second moments minus
// the squared set mean gives the set variance; both require equal-sized
// batches.
class GlobalStatStore {
public:
  GlobalStatStore(int n_batches, int batch_size, std::vector<int> channels);

  int batches() const { return n_; }
  int batch_size() const { return k_; }

  void replace_record(int n, BatchStats rec);
  bool complete() const;
  bool stale() const { return stale_; }
  BatchStats record(int n) const;

  // sums (not averages) of mean and m2 over all records except `exclude`;
  // pass -1 to sum everything
  BatchStats sums_excluding(int exclude) const;

  // derived whole-set statistics; requires all records present. Derived
  // variances below -1e-9 emit a warning; small negatives are clamped to 0.
  GlobalStats aggregate() const;

private:
  void check_record(const BatchStats& rec) const;

  int n_ = 0;
  int k_ = 0;
  std::vector<int> channels_;
  std::vector<std::optional<BatchStats>> records_;
  mutable std::mutex mu_;
  mutable bool stale_ = true;
};

// Sum over layers of squared L2 gaps between derived statistics and targets.
double bns_loss(const GlobalStats& global, const std::vector<BnTarget>& targets);

// Runs the model over an image set (already at model input size) in batches
// and computes whole-set statistics directly in one accumulation, retaining
// only O(batch) activations. This is the non-differentiable evaluation path;
// the optimization path composes the same quantities as graph nodes.
GlobalStats full_set_stats(const ModelBundle& bundle, const std::vector<Tensor>& images,
                           int batch);

// Per-batch record computed from tap values of an evaluated workspace.
BatchStats record_from_taps(const Workspace& ws, const std::vector<int>& taps);

}  // namespace dgh
