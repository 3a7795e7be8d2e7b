// SPDX-License-Identifier: Apache-2.0
#include "dgh/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <mutex>
#include <numeric>
#include <thread>

#include <json.hpp>

#include "dgh/error.hpp"
#include "dgh/serialize.hpp"
#include "dgh/stats.hpp"

namespace dgh {

using nlohmann::json;
namespace fs = std::filesystem;

const char* method_name(Method m) {
  switch (m) {
    case Method::Real: return "real";
    case Method::Noise: return "noise";
    case Method::PerImage: return "per_image";
    case Method::PerBatch: return "per_batch";
    case Method::Dgh: return "dgh";
  }
  return "?";
}

Method method_from(const std::string& s) {
  for (Method m : {Method::Real, Method::Noise, Method::PerImage, Method::PerBatch, Method::Dgh})
    if (s == method_name(m)) return m;
  fail(ErrorKind::Config, "unknown method: " + s);
}

// ---------------------------------------------------------------------------
// config
// ---------------------------------------------------------------------------

QuantScheme HarnessConfig::quant_scheme() const {
  QuantScheme q = QuantScheme::parse(scheme);
  if (threshold_mode == "power_of_two") q.threshold_mode = ThresholdMode::PowerOfTwo;
  else if (threshold_mode == "minmax") q.threshold_mode = ThresholdMode::MinMax;
  else fail(ErrorKind::Config, "unknown threshold mode: " + threshold_mode);
  if (coverage == "academic") q.coverage = Coverage::Academic;
  else if (coverage == "hardware_friendly") q.coverage = Coverage::HardwareFriendly;
  else fail(ErrorKind::Config, "unknown coverage: " + coverage);
  return q;
}

namespace {

json synth_to_json(const SynthesisConfig& s) {
  json j;
  j["iterations"] = s.iterations;
  j["image_count"] = s.image_count;
  j["batch_size"] = s.batch_size;
  j["lambda"] = s.lambda;
  j["delta"] = s.delta;
  j["lr"] = s.lr;
  j["sched_factor"] = s.sched_factor;
  j["sched_patience"] = s.sched_patience;
  j["smooth"] = s.smooth;
  j["flip"] = s.flip;
  j["crop"] = s.crop;
  j["crop_margin"] = s.crop_margin;
  j["mode"] = agg_mode_name(s.mode);
  j["odsl"] = s.odsl;
  j["reuse_prep_draws"] = s.reuse_prep_draws;
  return j;
}

void synth_from_json(const json& j, SynthesisConfig& s) {
  s.iterations = j.value("iterations", s.iterations);
  s.image_count = j.value("image_count", s.image_count);
  s.batch_size = j.value("batch_size", s.batch_size);
  s.lambda = j.value("lambda", s.lambda);
  s.delta = j.value("delta", s.delta);
  s.lr = j.value("lr", s.lr);
  s.sched_factor = j.value("sched_factor", s.sched_factor);
  s.sched_patience = j.value("sched_patience", s.sched_patience);
  s.smooth = j.value("smooth", s.smooth);
  s.flip = j.value("flip", s.flip);
  s.crop = j.value("crop", s.crop);
  s.crop_margin = j.value("crop_margin", s.crop_margin);
  if (j.contains("mode")) s.mode = agg_mode_from(j.at("mode").get<std::string>());
  s.odsl = j.value("odsl", s.odsl);
  s.reuse_prep_draws = j.value("reuse_prep_draws", s.reuse_prep_draws);
}

}  // namespace

std::string HarnessConfig::canonical_json() const {
  json j;
  j["arch"] = arch;
  j["model_path"] = model_path;
  j["data_seed"] = data_seed;
  j["train_count"] = train_count;
  j["val_count"] = val_count;
  j["train"] = {{"epochs", train.epochs},     {"lr", train.lr},
                {"momentum", train.momentum}, {"batch", train.batch},
                {"augment", train.augment},   {"bn_momentum", train.bn_momentum}};
  j["synth"] = synth_to_json(synth);
  j["scheme"] = scheme;
  j["threshold_mode"] = threshold_mode;
  j["coverage"] = coverage;
  j["seeds"] = seeds;
  j["methods"] = methods;
  j["sweep_ks"] = sweep_ks;
  j["hist_bins"] = hist_bins;
  j["aug_mse_passes"] = aug_mse_passes;
  j["aug_mse_sample"] = aug_mse_sample;
  return j.dump();  // nlohmann sorts keys
}

HarnessConfig HarnessConfig::from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrorKind::Config, std::string("bad config JSON: ") + e.what());
  }
  HarnessConfig c;
  c.arch = j.value("arch", c.arch);
  c.model_path = j.value("model_path", c.model_path);
  c.data_seed = j.value("data_seed", c.data_seed);
  c.train_count = j.value("train_count", c.train_count);
  c.val_count = j.value("val_count", c.val_count);
  if (j.contains("train")) {
    const auto& t = j.at("train");
    c.train.epochs = t.value("epochs", c.train.epochs);
    c.train.lr = t.value("lr", c.train.lr);
    c.train.momentum = t.value("momentum", c.train.momentum);
    c.train.batch = t.value("batch", c.train.batch);
    c.train.augment = t.value("augment", c.train.augment);
    c.train.bn_momentum = t.value("bn_momentum", c.train.bn_momentum);
  }
  if (j.contains("synth")) synth_from_json(j.at("synth"), c.synth);
  c.scheme = j.value("scheme", c.scheme);
  c.threshold_mode = j.value("threshold_mode", c.threshold_mode);
  c.coverage = j.value("coverage", c.coverage);
  if (j.contains("seeds")) c.seeds = j.at("seeds").get<std::vector<uint64_t>>();
  if (j.contains("methods")) c.methods = j.at("methods").get<std::vector<std::string>>();
  if (j.contains("sweep_ks")) c.sweep_ks = j.at("sweep_ks").get<std::vector<int>>();
  c.outdir = j.value("outdir", c.outdir);
  c.hist_bins = j.value("hist_bins", c.hist_bins);
  c.aug_mse_passes = j.value("aug_mse_passes", c.aug_mse_passes);
  c.aug_mse_sample = j.value("aug_mse_sample", c.aug_mse_sample);
  if (c.seeds.empty()) fail(ErrorKind::Config, "seeds must be non-empty");
  return c;
}

HarnessConfig HarnessConfig::load(const std::string& path) {
  if (path.empty()) return HarnessConfig();
  return from_json_text(read_file(path));
}

// ---------------------------------------------------------------------------
// shared context
// ---------------------------------------------------------------------------

HarnessContext prepare_context(const HarnessConfig& cfg) {
  HarnessContext ctx;
  ctx.train_ds = make_shapes_dataset(cfg.train_count, cfg.data_seed, "train");
  ctx.val_ds = make_shapes_dataset(cfg.val_count, cfg.data_seed + 1, "val");

  std::string path = cfg.model_path;
  if (path.empty()) path = (fs::path(cfg.outdir) / (cfg.arch + ".dghm")).string();
  if (file_exists(path)) {
    ctx.model = load_model(path);
    if (ctx.model.arch != cfg.arch)
      fail(ErrorKind::Config, "model file " + path + " holds arch '" + ctx.model.arch +
                                  "', config wants '" + cfg.arch + "'");
  } else {
    if (!cfg.model_path.empty())
      fail(ErrorKind::Io, "model file not found: " + cfg.model_path);
    ctx.model = train_reference_model(cfg.arch, ctx.train_ds, ctx.val_ds, cfg.train,
                                      cfg.data_seed + 2);
    save_model(ctx.model, path);
  }
  return ctx;
}

SynthesisConfig synth_for_method(Method m, const HarnessConfig& cfg) {
  SynthesisConfig s = cfg.synth;
  switch (m) {
    case Method::Dgh:
      s.mode = AggMode::Global;
      break;
    case Method::PerBatch:
      s.mode = AggMode::PerBatch;
      s.odsl = false;
      break;
    case Method::PerImage:
      s.mode = AggMode::PerImage;
      s.odsl = false;
      break;
    default:
      break;
  }
  return s;
}

Tensor make_calibration_images(Method m, const HarnessContext& ctx, uint64_t seed,
                               const SynthesisConfig& synth_cfg) {
  const InputSpec& spec = ctx.model.input_spec;
  const int M = synth_cfg.image_count;
  switch (m) {
    case Method::Real: {
      // uniform sample without replacement from the training split
      Rng rng = Rng(seed).fork(0x6EA1);
      std::vector<int64_t> idx(static_cast<size_t>(ctx.train_ds.count()));
      std::iota(idx.begin(), idx.end(), 0);
      rng.shuffle(idx);
      const int n = std::min<int>(M, static_cast<int>(idx.size()));
      Tensor out({n, spec.channels, spec.height, spec.width});
      const int64_t per = static_cast<int64_t>(spec.channels) * spec.height * spec.width;
      for (int i = 0; i < n; ++i)
        std::memcpy(out.ptr() + i * per,
                    ctx.train_ds.images.ptr() + idx[static_cast<size_t>(i)] * per,
                    static_cast<size_t>(per) * sizeof(float));
      return out;
    }
    case Method::Noise: {
      Rng rng = Rng(seed).fork(0x401E);
      return Tensor::randn({M, spec.channels, spec.height, spec.width}, rng);
    }
    default: {
      GenerateResult res = generate(ctx.model, synth_cfg, seed);
      return res.images.stacked_center_cropped();
    }
  }
}

// ---------------------------------------------------------------------------
// parallel jobs
// ---------------------------------------------------------------------------

int worker_count() {
  const char* env = std::getenv("DGH_THREADS");
  if (env) {
    const int n = std::atoi(env);
    if (n >= 1) return n;
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw ? static_cast<int>(hw) : 1;
}

void parallel_jobs(std::vector<std::function<void()>> jobs) {
  const int workers = std::min<int>(worker_count(), static_cast<int>(jobs.size()));
  if (workers <= 1) {
    for (auto& j : jobs) j();
    return;
  }
  std::atomic<size_t> next{0};
  std::vector<std::thread> pool;
  std::mutex err_mu;
  std::exception_ptr first_error;
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (;;) {
        const size_t i = next.fetch_add(1);
        if (i >= jobs.size()) return;
        try {
          jobs[i]();
        } catch (...) {
          std::lock_guard<std::mutex> lock(err_mu);
          if (!first_error) first_error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

// ---------------------------------------------------------------------------
// experiments
// ---------------------------------------------------------------------------

namespace {

double evaluate_arm(const HarnessContext& ctx, const QuantScheme& scheme, const Tensor& calib,
                    const LabeledDataset& val) {
  QuantParams params = calibrate(ctx.model, calib, scheme);
  return evaluate_quantized(ctx.model, params, scheme, val).quant_accuracy;
}

}  // namespace

Report run_e2e(const HarnessConfig& cfg, const HarnessContext& ctx) {
  Report rep;
  rep.config_hash = cfg.hash();
  const QuantScheme scheme = cfg.quant_scheme();
  const double float_acc = eval_accuracy(ctx.model, ctx.val_ds);

  struct Cell {
    uint64_t seed;
    std::string method;
    double acc = -1;
  };
  std::vector<Cell> cells;
  for (uint64_t seed : cfg.seeds)
    for (const auto& ms : cfg.methods) cells.push_back({seed, ms, -1});

  std::vector<std::function<void()>> jobs;
  for (auto& cell : cells)
    jobs.push_back([&ctx, &cfg, &scheme, &cell] {
      const Method m = method_from(cell.method);
      const Tensor calib = make_calibration_images(m, ctx, cell.seed, synth_for_method(m, cfg));
      cell.acc = evaluate_arm(ctx, scheme, calib, ctx.val_ds);
    });
  parallel_jobs(std::move(jobs));

  for (const auto& cell : cells) {
    rep.add("e2e", cell.seed, cell.method, scheme.str(), "top1", cell.acc);
    rep.add("e2e", cell.seed, cell.method, scheme.str(), "float_top1", float_acc);
  }
  return rep;
}

Report run_scope_sweep(const HarnessConfig& cfg, const HarnessContext& ctx) {
  Report rep;
  rep.config_hash = cfg.hash();
  const QuantScheme scheme = cfg.quant_scheme();

  struct Arm {
    uint64_t seed;
    int k;  // -1 marks the whole-set aggregation arm
    bool odsl;
    double acc = -1;
  };
  std::vector<Arm> arms;
  for (bool odsl : {true, false}) {
    for (int k : cfg.sweep_ks)
      for (uint64_t seed : cfg.seeds) {
        if (k < 1 || cfg.synth.image_count % k != 0) {
          std::fprintf(stderr, "warning: skipping K=%d (does not divide M=%d)\n", k,
                       cfg.synth.image_count);
          continue;
        }
        arms.push_back({seed, k, odsl, -1});
      }
    for (uint64_t seed : cfg.seeds) arms.push_back({seed, -1, odsl, -1});
  }

  std::vector<std::function<void()>> jobs;
  for (auto& arm : arms)
    jobs.push_back([&ctx, &cfg, &scheme, &arm] {
      SynthesisConfig s = cfg.synth;
      s.odsl = arm.odsl;
      if (arm.k < 0) {
        s.mode = AggMode::Global;
      } else {
        s.mode = AggMode::PerBatch;
        s.batch_size = arm.k;
      }
      GenerateResult res = generate(ctx.model, s, arm.seed);
      arm.acc = evaluate_arm(ctx, scheme, res.images.stacked_center_cropped(), ctx.val_ds);
    });
  parallel_jobs(std::move(jobs));

  for (const auto& arm : arms) {
    const std::string method =
        (arm.k < 0 ? std::string("global") : "k" + std::to_string(arm.k)) +
        (arm.odsl ? "_odsl1" : "_odsl0");
    rep.add("scope_sweep", arm.seed, method, scheme.str(), "top1", arm.acc);
  }
  return rep;
}

Report run_ablation(const HarnessConfig& cfg, const HarnessContext& ctx) {
  Report rep;
  rep.config_hash = cfg.hash();
  const QuantScheme scheme = cfg.quant_scheme();

  struct Arm {
    uint64_t seed;
    bool sas, ip, odsl;
    double acc = -1;
  };
  std::vector<Arm> arms;
  for (uint64_t seed : cfg.seeds)
    for (int sas = 0; sas < 2; ++sas)
      for (int ip = 0; ip < 2; ++ip)
        for (int odsl = 0; odsl < 2; ++odsl) arms.push_back({seed, !!sas, !!ip, !!odsl, -1});

  std::vector<std::function<void()>> jobs;
  for (auto& arm : arms)
    jobs.push_back([&ctx, &cfg, &arm] {
      SynthesisConfig s = cfg.synth;
      s.mode = arm.sas ? AggMode::Global : AggMode::PerBatch;
      s.smooth = arm.ip;
      s.flip = arm.ip;
      s.crop = arm.ip;
      s.odsl = arm.odsl;
      GenerateResult res = generate(ctx.model, s, arm.seed);
      arm.acc = evaluate_arm(ctx, cfg.quant_scheme(), res.images.stacked_center_cropped(),
                             ctx.val_ds);
    });
  parallel_jobs(std::move(jobs));

  for (const auto& arm : arms) {
    const std::string method = std::string("sas") + (arm.sas ? "1" : "0") + "_ip" +
                               (arm.ip ? "1" : "0") + "_odsl" + (arm.odsl ? "1" : "0");
    rep.add("ablation", arm.seed, method, scheme.str(), "top1", arm.acc);
  }
  return rep;
}

Report run_output_hist(const HarnessConfig& cfg, const HarnessContext& ctx) {
  Report rep;
  rep.config_hash = cfg.hash();
  const uint64_t seed = cfg.seeds.front();

  struct Source {
    std::string name;
    Tensor logits;
  };
  std::vector<Source> sources;

  {
    Tensor real = make_calibration_images(Method::Real, ctx, seed, cfg.synth);
    sources.push_back({"real", model_outputs(ctx.model, real)});
  }
  {
    SynthesisConfig s = cfg.synth;
    s.mode = AggMode::Global;
    s.odsl = false;
    GenerateResult res = generate(ctx.model, s, seed);
    sources.push_back({"bns_only", model_outputs(ctx.model, res.images.stacked_center_cropped())});
  }
  {
    SynthesisConfig s = cfg.synth;
    s.mode = AggMode::Global;
    s.odsl = true;
    GenerateResult res = generate(ctx.model, s, seed);
    sources.push_back({"dgh", model_outputs(ctx.model, res.images.stacked_center_cropped())});
  }

  double lo = 1e300, hi = -1e300;
  for (const auto& src : sources)
    for (int64_t i = 0; i < src.logits.numel(); ++i) {
      lo = std::min(lo, static_cast<double>(src.logits[i]));
      hi = std::max(hi, static_cast<double>(src.logits[i]));
    }
  if (hi <= lo) hi = lo + 1;
  const int bins = cfg.hist_bins;
  const double width = (hi - lo) / bins;

  for (int b = 0; b <= bins; ++b)
    rep.add("output_hist", seed, "edges", "-", "hist_edge_" + std::to_string(b), lo + b * width);

  for (const auto& src : sources) {
    const int64_t n = src.logits.shape[0], f = src.logits.shape[1];
    // each image contributes unit mass spread over its output entries, so
    // histogram mass totals the image count
    std::vector<double> mass(static_cast<size_t>(bins), 0.0);
    for (int64_t i = 0; i < n; ++i) {
      double mn = src.logits[i * f], mx = src.logits[i * f];
      for (int64_t c = 0; c < f; ++c) {
        const double v = src.logits[i * f + c];
        mn = std::min(mn, v);
        mx = std::max(mx, v);
        int b = static_cast<int>((v - lo) / width);
        b = std::clamp(b, 0, bins - 1);
        mass[static_cast<size_t>(b)] += 1.0 / static_cast<double>(f);
      }
      rep.add("output_hist", seed, src.name, "-", "img_out_min_" + std::to_string(i), mn);
      rep.add("output_hist", seed, src.name, "-", "img_out_max_" + std::to_string(i), mx);
    }
    for (int b = 0; b < bins; ++b)
      rep.add("output_hist", seed, src.name, "-", "hist_bin_" + std::to_string(b),
              mass[static_cast<size_t>(b)]);
  }
  return rep;
}

Report run_aug_mse(const HarnessConfig& cfg, const HarnessContext& ctx) {
  Report rep;
  rep.config_hash = cfg.hash();
  const std::vector<BnTarget> targets = collect_bn_targets(ctx.model);
  const int L = static_cast<int>(targets.size());
  const InputSpec& spec = ctx.model.input_spec;

  SynthesisConfig prep_cfg;
  prep_cfg.crop_margin = -1;  // the training pipeline's margin
  const int margin = prep_cfg.effective_margin(spec);

  for (bool augmented : {true, false}) {
    std::vector<double> mse(static_cast<size_t>(L), 0.0);
    for (int pass = 0; pass < cfg.aug_mse_passes; ++pass) {
      Rng rng = Rng(cfg.seeds.front()).fork(0xA6, static_cast<uint64_t>(pass), augmented ? 1 : 0);
      std::vector<int64_t> idx(static_cast<size_t>(ctx.train_ds.count()));
      std::iota(idx.begin(), idx.end(), 0);
      rng.shuffle(idx);
      const int n = std::min<int>(cfg.aug_mse_sample, static_cast<int>(idx.size()));
      std::vector<Tensor> images;
      images.reserve(static_cast<size_t>(n));
      for (int i = 0; i < n; ++i) {
        Tensor img = ctx.train_ds.image(idx[static_cast<size_t>(i)]);
        if (augmented) {
          const PrepDraw d = draw_prep(rng, prep_cfg, margin);
          img = preprocess(img, d, prep_cfg, spec.height, spec.width, /*pad_first=*/true);
        }
        images.push_back(std::move(img));
      }
      const GlobalStats stats = full_set_stats(ctx.model, images, 64);
      for (int l = 0; l < L; ++l) {
        double acc = 0;
        const auto& t = targets[static_cast<size_t>(l)];
        for (size_t c = 0; c < t.mu.size(); ++c) {
          const double dm = stats.mean[static_cast<size_t>(l)][c] - t.mu[c];
          const double dv = stats.var[static_cast<size_t>(l)][c] - t.sigma[c];
          acc += dm * dm + dv * dv;
        }
        mse[static_cast<size_t>(l)] += acc / (2.0 * static_cast<double>(t.mu.size()));
      }
    }
    for (int l = 0; l < L; ++l)
      rep.add("aug_mse", cfg.seeds.front(), augmented ? "aug" : "noaug", "-",
              "bn_mse_layer" + std::to_string(l + 1),
              mse[static_cast<size_t>(l)] / cfg.aug_mse_passes);
  }
  return rep;
}

void run_embeddings_dump(const HarnessConfig& cfg, const HarnessContext& ctx) {
  const uint64_t seed = cfg.seeds.front();
  fs::create_directories(cfg.outdir);

  auto dump = [&](const std::string& name, const Tensor& images) {
    const Tensor feats = penultimate_features(ctx.model, images);
    atomic_write_file((fs::path(cfg.outdir) / ("embed_" + name + ".f32")).string(),
                      tensor_blob(feats));
    json m;
    m["format_version"] = 1;
    m["kind"] = "embeddings";
    m["source"] = name;
    m["count"] = feats.shape[0];
    m["dim"] = feats.shape[1];
    m["file"] = "embed_" + name + ".f32";
    atomic_write_file((fs::path(cfg.outdir) / ("embed_" + name + ".json")).string(),
                      m.dump(2) + "\n");
  };

  dump("real", make_calibration_images(Method::Real, ctx, seed, cfg.synth));
  dump("noise", make_calibration_images(Method::Noise, ctx, seed, cfg.synth));
  SynthesisConfig s = cfg.synth;
  s.mode = AggMode::Global;
  GenerateResult res = generate(ctx.model, s, seed);
  dump("dgh", res.images.stacked_center_cropped());
}

}  // namespace dgh
