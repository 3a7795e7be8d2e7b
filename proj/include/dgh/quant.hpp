// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <string>
#include <vector>

#include "dgh/dataset.hpp"
#include "dgh/model.hpp"

namespace dgh {

enum class ThresholdMode { MinMax, PowerOfTwo };
enum class WeightGranularity { PerTensor, PerChannel };
enum class Coverage { HardwareFriendly, Academic };

struct QuantScheme {
  int weight_bits = 8;
  int act_bits = 8;
  ThresholdMode threshold_mode = ThresholdMode::MinMax;
  WeightGranularity granularity = WeightGranularity::PerChannel;
  Coverage coverage = Coverage::HardwareFriendly;

  bool enabled() const { return weight_bits != 32 || act_bits != 32; }
  void validate() const;
  // "W4A4" etc.; bits 32 disable quantization on that side
  static QuantScheme parse(const std::string& s);
  std::string str() const;
};

// Affine (or symmetric) integer grid for one tensor.
struct ActQuantInfo {
  int node = -1;
  std::string name;
  int bits = 8;
  double observed_lo = 0, observed_hi = 0;
  double threshold = 0;  // power-of-two mode
  double scale = 1;
  int zero_point = 0;
  int qmin = 0, qmax = 0;
};

struct WeightQuantInfo {
  int param = -1;
  std::string name;
  int bits = 8;
  std::vector<double> scales;  // one per output channel, or one for per-tensor
};

struct QuantParams {
  QuantScheme scheme;
  std::vector<ActQuantInfo> acts;       // ordered by node id
  std::vector<WeightQuantInfo> weights;
  std::string to_json() const;
};

// Observes activation ranges over a calibration pass and derives weight grids
// from the weights themselves. Power-of-two mode rounds symmetric thresholds
// up to the next power of two.
QuantParams calibrate(const ModelBundle& bundle, const Tensor& calib_images,
                      const QuantScheme& scheme);

// clamp to range, scale, round half away from zero, rescale
Tensor quantize_dequantize(const Tensor& t, const ActQuantInfo& p);
float fake_quant_value(float x, const ActQuantInfo& p);

// Per-channel symmetric round-to-nearest weight quantization.
Tensor quantize_weights(const Tensor& w, const WeightQuantInfo& p);

struct QuantEvalResult {
  double quant_accuracy = 0;
  double float_accuracy = 0;
};

// Fake-quantized inference under the scheme's coverage policy; reports the
// float baseline alongside. Missing parameters for a covered tensor raise a
// coverage error naming the tensor.
QuantEvalResult evaluate_quantized(const ModelBundle& bundle, const QuantParams& params,
                                   const QuantScheme& scheme, const LabeledDataset& val);

// Quantized-path logits for arbitrary images (shared machinery with accuracy
// evaluation; used by the output-distribution reports).
Tensor quantized_outputs(const ModelBundle& bundle, const QuantParams& params,
                         const QuantScheme& scheme, const Tensor& images, int batch = 64);

// The activation tensors a coverage policy quantizes, with per-tensor bits.
// Exposed for calibration, evaluation and tests.
struct CoveragePlan {
  std::vector<std::pair<int, int>> act_points;      // (node id, bits) in the batch-1 infer net
  std::map<int, int> weight_bits;                   // param id -> bits
  bool quantize_output = false;
};
CoveragePlan coverage_plan(const ModelBundle& bundle, const QuantScheme& scheme);

}  // namespace dgh
