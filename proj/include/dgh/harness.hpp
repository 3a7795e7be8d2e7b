// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <string>
#include <vector>

#include "dgh/dataset.hpp"
#include "dgh/model.hpp"
#include "dgh/quant.hpp"
#include "dgh/report.hpp"
#include "dgh/synth.hpp"
#include "dgh/train.hpp"

namespace dgh {

enum class Method { Real, Noise, PerImage, PerBatch, Dgh };
const char* method_name(Method m);
Method method_from(const std::string& s);

struct HarnessConfig {
  std::string arch = "tiny-resnet";
  std::string model_path;  // when set, loaded instead of trained
  uint64_t data_seed = 42;
  int train_count = 2560;
  int val_count = 640;
  TrainConfig train;
  SynthesisConfig synth;
  std::string scheme = "W4A4";
  std::string threshold_mode = "minmax";  // minmax | power_of_two
  std::string coverage = "hardware_friendly";  // hardware_friendly | academic
  std::vector<uint64_t> seeds = {1, 2, 3, 4, 5};
  std::vector<std::string> methods = {"real", "noise", "per_image", "per_batch", "dgh"};
  std::vector<int> sweep_ks = {1, 4, 16};
  std::string outdir = "out";
  int hist_bins = 32;
  int aug_mse_passes = 5;
  int aug_mse_sample = 1024;

  QuantScheme quant_scheme() const;
  std::string canonical_json() const;
  std::string hash() const { return config_hash_of(canonical_json()); }
  static HarnessConfig from_json_text(const std::string& text);
  static HarnessConfig load(const std::string& path);
};

// Trained model plus the datasets every experiment shares. The model is
// cached under outdir and reloaded on later runs.
struct HarnessContext {
  ModelBundle model;
  LabeledDataset train_ds;
  LabeledDataset val_ds;
};

HarnessContext prepare_context(const HarnessConfig& cfg);

// Calibration images for one baseline arm (model-input-sized stack).
// Synthesis methods run the generator with the given overrides.
Tensor make_calibration_images(Method m, const HarnessContext& ctx, uint64_t seed,
                               const SynthesisConfig& synth_cfg);

SynthesisConfig synth_for_method(Method m, const HarnessConfig& cfg);

// experiment drivers (one per CLI subcommand)
Report run_e2e(const HarnessConfig& cfg, const HarnessContext& ctx);
Report run_scope_sweep(const HarnessConfig& cfg, const HarnessContext& ctx);
Report run_ablation(const HarnessConfig& cfg, const HarnessContext& ctx);
Report run_output_hist(const HarnessConfig& cfg, const HarnessContext& ctx);
Report run_aug_mse(const HarnessConfig& cfg, const HarnessContext& ctx);
void run_embeddings_dump(const HarnessConfig& cfg, const HarnessContext& ctx);

// Runs jobs with at most DGH_THREADS workers (hardware concurrency when
// unset). Results land in submission order regardless of scheduling.
void parallel_jobs(std::vector<std::function<void()>> jobs);
int worker_count();

}  // namespace dgh
