// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dgh/tensor.hpp"

namespace dgh {

struct InputSpec {
  int channels = 3;
  int height = 32;
  int width = 32;
  float lo = -2.0f;  // declared value range after normalization
  float hi = 2.0f;
};

struct LabeledDataset {
  Tensor images;  // N x C x H x W, normalized
  std::vector<int32_t> labels;
  int num_classes = 0;
  std::string split;

  int64_t count() const { return images.shape.empty() ? 0 : images.shape[0]; }
  Tensor image(int64_t i) const;  // 1 x C x H x W view copy
};

// Procedurally generated 10-class dataset: five shapes (disk, square,
// triangle, ring, plus) in two hue families, drawn on textured backgrounds at
// 32x32 and standardized to roughly unit scale. Deterministic under seed.
LabeledDataset make_shapes_dataset(int64_t count, uint64_t seed, const std::string& split);

constexpr int kShapesNumClasses = 10;

// Manifest + blob persistence (JSON manifest, float32/int32 little-endian)
void save_dataset(const LabeledDataset& ds, const std::string& dir, const std::string& name);
LabeledDataset load_dataset(const std::string& manifest_path);

}  // namespace dgh
