// SPDX-License-Identifier: Apache-2.0
//
// dgh — synthesize calibration images from a BN network's frozen statistics
// and post-training-quantize it with them. Subcommands cover model training,
// image generation, quantization, evaluation and the trend experiments; all
// results land as CSV reports under --out.

#include <cstdio>
#include <filesystem>
#include <random>
#include <string>

#include <CLI11.hpp>

#include "dgh/error.hpp"
#include "dgh/harness.hpp"
#include "dgh/serialize.hpp"
#include "dgh/stats.hpp"

using namespace dgh;
namespace fs = std::filesystem;

namespace {

struct GlobalArgs {
  std::string config;
  std::string out;
  uint64_t seed = 0;
  bool seed_given = false;
  bool deterministic = false;
};

HarnessConfig load_config(const GlobalArgs& g) {
  HarnessConfig cfg = HarnessConfig::load(g.config);
  if (!g.out.empty()) cfg.outdir = g.out;
  if (g.seed_given) cfg.seeds = {g.seed};
  if (!g.seed_given && !g.deterministic && g.config.empty()) {
    // free-running invocation: draw a seed and say which one was used
    std::random_device rd;
    const uint64_t s = (static_cast<uint64_t>(rd()) << 32) ^ rd();
    cfg.seeds = {s};
    std::fprintf(stderr, "note: no --seed given, using %llu\n",
                 static_cast<unsigned long long>(s));
  }
  return cfg;
}

void save_report(const Report& rep, const HarnessConfig& cfg, const std::string& name) {
  const std::string path = (fs::path(cfg.outdir) / name).string();
  rep.save(path);
  std::printf("wrote %s (%zu rows)\n", path.c_str(), rep.rows.size());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"data generation and hardware-friendly post-training quantization toolkit"};
  app.require_subcommand(1);

  GlobalArgs g;
  app.add_option("--config", g.config, "JSON config file");
  app.add_option("--out", g.out, "output directory (overrides config)");
  auto* seed_opt = app.add_option("--seed", g.seed, "single seed to run");
  app.add_flag("--deterministic", g.deterministic,
               "fully specified RNG streams (seed defaults to the config's)");

  auto* c_train = app.add_subcommand("train", "train a reference model on the shapes dataset");
  auto* c_generate = app.add_subcommand("generate", "synthesize calibration images");
  std::string gen_method = "dgh";
  c_generate->add_option("--method", gen_method, "dgh | per_batch | per_image");
  auto* c_quantize = app.add_subcommand("quantize", "calibrate quantization parameters");
  std::string q_images;
  c_quantize->add_option("--images", q_images, "image-set manifest for calibration (default: generate)");
  auto* c_evaluate = app.add_subcommand("evaluate", "evaluate quantized accuracy per method");
  auto* c_sweep = app.add_subcommand("sweep", "aggregation-scope sweep with and without ODSL");
  auto* c_ablate = app.add_subcommand("ablate", "8-way component ablation grid");
  auto* c_hist = app.add_subcommand("hist", "model-output histograms per data source");
  auto* c_augmse = app.add_subcommand("augmse", "per-layer statistic MSE, augmented vs raw data");
  auto* c_embed = app.add_subcommand("embed", "dump penultimate-layer embeddings per source");
  auto* c_e2e = app.add_subcommand("e2e", "train/load, generate, quantize, evaluate");

  CLI11_PARSE(app, argc, argv);
  g.seed_given = seed_opt->count() > 0;

  try {
    HarnessConfig cfg = load_config(g);
    fs::create_directories(cfg.outdir);

    if (c_train->parsed()) {
      LabeledDataset train_ds = make_shapes_dataset(cfg.train_count, cfg.data_seed, "train");
      LabeledDataset val_ds = make_shapes_dataset(cfg.val_count, cfg.data_seed + 1, "val");
      ModelBundle model =
          train_reference_model(cfg.arch, train_ds, val_ds, cfg.train, cfg.data_seed + 2);
      const std::string path = (fs::path(cfg.outdir) / (cfg.arch + ".dghm")).string();
      save_model(model, path);
      std::printf("trained %s: val top-1 %.4f -> %s\n", cfg.arch.c_str(), model.val_accuracy,
                  path.c_str());
      return 0;
    }

    HarnessContext ctx = prepare_context(cfg);

    if (c_generate->parsed()) {
      const Method m = method_from(gen_method);
      if (m == Method::Real || m == Method::Noise)
        fail(ErrorKind::Config, "generate expects a synthesis method, got " + gen_method);
      SynthesisConfig s = synth_for_method(m, cfg);
      GenerateResult res = generate(ctx.model, s, cfg.seeds.front());
      save_image_set(res.images, cfg.outdir, "images_" + gen_method, /*also_cropped=*/true);
      atomic_write_file((fs::path(cfg.outdir) / ("trace_" + gen_method + ".csv")).string(),
                        res.trace.to_csv());
      std::printf("generated %d images (%s): full-set loss %.6g -> %.6g\n", s.image_count,
                  gen_method.c_str(), res.trace.initial_fullset_bns,
                  res.trace.final_fullset_bns);
      return 0;
    }

    if (c_quantize->parsed()) {
      Tensor calib;
      if (!q_images.empty()) {
        calib = load_image_set(q_images).stacked_center_cropped();
      } else {
        calib = make_calibration_images(Method::Dgh, ctx, cfg.seeds.front(),
                                        synth_for_method(Method::Dgh, cfg));
      }
      QuantParams params = calibrate(ctx.model, calib, cfg.quant_scheme());
      const std::string path = (fs::path(cfg.outdir) / "quant_params.json").string();
      atomic_write_file(path, params.to_json());
      std::printf("calibrated %zu activation grids, %zu weight grids -> %s\n",
                  params.acts.size(), params.weights.size(), path.c_str());
      return 0;
    }

    if (c_evaluate->parsed() || c_e2e->parsed()) {
      Report rep = run_e2e(cfg, ctx);
      save_report(rep, cfg, c_e2e->parsed() ? "e2e.csv" : "evaluate.csv");
      return 0;
    }
    if (c_sweep->parsed()) {
      save_report(run_scope_sweep(cfg, ctx), cfg, "scope_sweep.csv");
      return 0;
    }
    if (c_ablate->parsed()) {
      save_report(run_ablation(cfg, ctx), cfg, "ablation.csv");
      return 0;
    }
    if (c_hist->parsed()) {
      save_report(run_output_hist(cfg, ctx), cfg, "output_hist.csv");
      return 0;
    }
    if (c_augmse->parsed()) {
      save_report(run_aug_mse(cfg, ctx), cfg, "aug_mse.csv");
      return 0;
    }
    if (c_embed->parsed()) {
      run_embeddings_dump(cfg, ctx);
      std::printf("wrote embeddings under %s\n", cfg.outdir.c_str());
      return 0;
    }
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
