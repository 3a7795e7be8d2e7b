// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "dgh/model.hpp"
#include "dgh/stats.hpp"

namespace dgh {

enum class AggMode { Global, PerBatch, PerImage };

const char* agg_mode_name(AggMode m);
AggMode agg_mode_from(const std::string& s);

struct SynthesisConfig {
  int iterations = 500;    // T
  int image_count = 256;   // M
  int batch_size = 32;     // K
  double lambda = 0.1;     // output-stretching weight
  double delta = -1;       // slack; <0 selects 10% of ||sigma_L||^2
  double lr = 0.05;
  double sched_factor = 0.5;
  int sched_patience = -1;  // <0 selects max(20, T/20)
  bool smooth = true;
  bool flip = true;
  bool crop = true;
  int crop_margin = -1;  // <0 scales the 224-resolution margin of 32 to the input
  AggMode mode = AggMode::Global;
  bool odsl = true;
  bool reuse_prep_draws = false;  // post-update recompute reuses the step's augmentation draws
  bool check_finite = true;

  int n_batches() const { return image_count / batch_size; }
  void validate(const InputSpec& spec) const;
  int effective_margin(const InputSpec& spec) const;
};

// The optimizable images. When cropping is enabled each raw image lives on a
// canvas larger than the model input by the crop margin.
struct ImageSet {
  int M = 0, K = 0, N = 0;
  int channels = 0, canvas_h = 0, canvas_w = 0;
  int out_h = 0, out_w = 0;
  uint64_t seed = 0;
  std::vector<Tensor> images;  // each 1 x C x canvas_h x canvas_w

  Tensor center_cropped(int i) const;
  std::vector<Tensor> all_center_cropped() const;
  Tensor stacked_center_cropped() const;  // M x C x out_h x out_w
};

ImageSet init_image_set(const SynthesisConfig& cfg, const InputSpec& spec, uint64_t seed);

void save_image_set(const ImageSet& set, const std::string& dir, const std::string& name,
                    bool also_cropped = false);
ImageSet load_image_set(const std::string& manifest_path);

// ---------------------------------------------------------------------------
// preprocessing (phi_prep): smoothing -> random horizontal flip -> random crop
// ---------------------------------------------------------------------------

struct PrepDraw {
  bool do_flip = false;
  int oy = 0, ox = 0;
};

// one draw per image; offsets are uniform over [0, margin]
PrepDraw draw_prep(Rng& rng, const SynthesisConfig& cfg, int margin);

// Tensor path, used for forward-only statistic recomputation. `pad_first`
// zero-pads images already at output size onto the margin canvas (the
// treatment of real training images).
Tensor preprocess(const Tensor& img, const PrepDraw& draw, const SynthesisConfig& cfg,
                  int out_h, int out_w, bool pad_first = false);

// Graph path with identical semantics, differentiable w.r.t. the image leaf.
int append_preprocess(Graph& g, int x, const PrepDraw& draw, const SynthesisConfig& cfg,
                      int out_h, int out_w);

// tensor helpers shared with the trainer's augmentation pipeline
Tensor smooth3_tensor(const Tensor& img);
Tensor hflip_tensor(const Tensor& img);
Tensor crop_tensor(const Tensor& img, int oy, int ox, int oh, int ow);
Tensor zero_pad_tensor(const Tensor& img, int margin);  // margin/2 on each side

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

struct RAdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct RAdamState {
  Tensor m, v;
  int64_t t = 0;
};

// Rectified Adam step; falls back to bias-corrected momentum SGD while the
// variance rectification term is intractable (rho_t <= 4). Rejects non-finite
// gradients.
void radam_step(RAdamState& state, Tensor& param, const Tensor& grad, double lr,
                const RAdamConfig& cfg = {});

struct PlateauScheduler {
  double lr;
  double factor;
  int patience;
  double rel_threshold = 1e-4;
  double best = 0;
  bool has_best = false;
  int bad = 0;

  PlateauScheduler(double lr0, double f, int p) : lr(lr0), factor(f), patience(p) {}
  void step(double metric);
};

// ---------------------------------------------------------------------------
// loss assembly
// ---------------------------------------------------------------------------

// Scalar reference for the per-image output-stretching term: negative squared
// output range plus hinge penalties keeping the last-BN statistics within
// `delta` of the targets. Emits a warning (once) for length-1 outputs, where
// the range term vanishes.
double odsl_term(const std::vector<double>& output, const std::vector<double>& mu_k,
                 const std::vector<double>& sigma_k, const BnTarget& last, double delta);

struct StepGraph {
  Graph g;
  std::vector<int> image_leaves;
  int loss = -1;       // optimized objective
  int bns = -1;        // statistic-matching component
  int odsl_mean = -1;  // mean per-image stretching term over the batch
};

// Builds the differentiable objective for one batch step. For Global mode,
// `other_sums` carries the summed records of the other N-1 batches and
// `n_batches` the total N; stats of the active batch enter as graph nodes and
// the rest as constants. `odsl_scale` multiplies the summed per-image terms
// in the optimized loss (lambda / |D_eff|).
StepGraph build_step_graph(const ModelBundle& model, const SynthesisConfig& cfg,
                           const std::vector<PrepDraw>& draws,
                           const std::vector<BnTarget>& targets, const BatchStats* other_sums,
                           int n_batches, double delta);

// ---------------------------------------------------------------------------
// Whole synthesis loop
// ---------------------------------------------------------------------------

struct LossTraceRow {
  int epoch = 0;
  int batch = 0;
  double bns = 0;
  double odsl = 0;
  double total = 0;
  double lr = 0;
};

struct LossTrace {
  std::vector<LossTraceRow> rows;
  double initial_fullset_bns = -1;
  double final_fullset_bns = -1;
  std::string to_csv() const;
};

struct GenerateResult {
  ImageSet images;
  LossTrace trace;
};

GenerateResult generate(const ModelBundle& model, const SynthesisConfig& cfg, uint64_t seed);

}  // namespace dgh
