// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "dgh/dataset.hpp"
#include "dgh/graph.hpp"

namespace dgh {

// Frozen per-channel statistics of one BN layer: mu is the running mean and
// sigma the running variance (the quantity the statistic-matching losses
// compare, stored as squared deviations).
struct BnTarget {
  int layer_index = 0;  // 1-based ordinal among BN layers
  std::vector<double> mu;
  std::vector<double> sigma;
};

struct BnLayerMeta {
  std::string prefix;
  int channels = 0;
  int gamma = -1, beta = -1, mu = -1, var = -1;  // param ids
};

// A built inference network for a fixed batch size.
struct InferNet {
  Graph g;
  int input = -1;
  int logits = -1;
  int penult = -1;           // features entering the classifier head
  std::vector<int> taps;     // BN-input feature maps, one per BN layer
};

// A built training network (batch-statistic normalization) for a fixed batch.
struct TrainNet {
  Graph g;
  int input = -1;
  int labels = -1;
  int loss = -1;
  int logits = -1;
  std::vector<int> bn_nodes;  // BnTrain node ids, ordered like bn layers
};

struct ModelBundle {
  std::string arch;
  InputSpec input_spec;
  int num_classes = 0;
  ParamStore params;
  std::vector<BnLayerMeta> bn;
  double bn_eps = 1e-5;
  double ema_momentum = 0.1;
  double val_accuracy = -1.0;
  uint64_t train_seed = 0;
  int train_epochs = 0;
  bool trained_with_augment = false;

  int bn_layer_count() const { return static_cast<int>(bn.size()); }
  InferNet infer_net(int batch) const;
  TrainNet train_net(int batch) const;
};

// Appends the inference body onto an existing graph at node `x` (any batch
// size), reusing the bundle's parameters. Lets callers compose the model with
// preprocessing and loss nodes in one differentiable graph.
struct InferBodyRefs {
  int logits = -1;
  int penult = -1;
  std::vector<int> taps;
};
InferBodyRefs append_infer_body(const ModelBundle& bundle, Graph& g, int x);

// Known architectures: "tiny-resnet" (stem + 3 residual blocks, 7 BN layers),
// "tiny-vgg" (4 conv-BN-ReLU stages with max pooling, 4 BN layers),
// "tiny-mlp" (BN-free, for negative-path tests).
std::vector<std::string> known_archs();

ModelBundle build_model(const std::string& arch, const InputSpec& spec, int num_classes,
                        uint64_t init_seed);

// Exactly the frozen statistics, ordered by layer position. Models without BN
// layers are rejected (the statistic-matching losses are undefined for them).
std::vector<BnTarget> collect_bn_targets(const ModelBundle& bundle);

// Top-1 accuracy of the float model.
double eval_accuracy(const ModelBundle& bundle, const LabeledDataset& ds, int batch = 64);

// Penultimate-layer features for each image, row per image.
Tensor penultimate_features(const ModelBundle& bundle, const Tensor& images, int batch = 64);

// Raw logits for each image.
Tensor model_outputs(const ModelBundle& bundle, const Tensor& images, int batch = 64);

}  // namespace dgh
