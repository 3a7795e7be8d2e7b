// SPDX-License-Identifier: Apache-2.0
#include "dgh/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>

#include <json.hpp>

#include "dgh/error.hpp"
#include "dgh/serialize.hpp"

namespace dgh {

using nlohmann::json;

const char* agg_mode_name(AggMode m) {
  switch (m) {
    case AggMode::Global: return "global";
    case AggMode::PerBatch: return "per_batch";
    case AggMode::PerImage: return "per_image";
  }
  return "?";
}

AggMode agg_mode_from(const std::string& s) {
  if (s == "global") return AggMode::Global;
  if (s == "per_batch") return AggMode::PerBatch;
  if (s == "per_image") return AggMode::PerImage;
  fail(ErrorKind::Config, "unknown aggregation mode: " + s);
}

namespace {
// the 224-resolution crop margin of 32, scaled to the working resolution and
// rounded to the nearest even value
int auto_margin(int h) { return 2 * static_cast<int>(std::llround(16.0 * h / 224.0)); }
}  // namespace

int SynthesisConfig::effective_margin(const InputSpec& spec) const {
  if (!crop) return 0;
  return crop_margin >= 0 ? crop_margin : auto_margin(spec.height);
}

void SynthesisConfig::validate(const InputSpec& spec) const {
  if (iterations < 0) fail(ErrorKind::Config, "iterations must be >= 0");
  if (image_count < 1) fail(ErrorKind::Config, "image_count must be >= 1");
  if (batch_size < 1) fail(ErrorKind::Config, "batch_size must be >= 1");
  if (image_count % batch_size != 0)
    fail(ErrorKind::Config, "image_count " + std::to_string(image_count) +
                                " is not divisible by batch_size " + std::to_string(batch_size));
  if (lambda < 0) fail(ErrorKind::Config, "lambda must be >= 0");
  if (lr <= 0) fail(ErrorKind::Config, "lr must be > 0");
  if (sched_factor <= 0 || sched_factor > 1) fail(ErrorKind::Config, "sched_factor must be in (0,1]");
  const int m = effective_margin(spec);
  if (m < 0 || m % 2 != 0) fail(ErrorKind::Config, "crop margin must be even and >= 0");
  if (m >= std::min(spec.height, spec.width))
    fail(ErrorKind::Config, "crop margin " + std::to_string(m) + " exceeds image size");
}

// ---------------------------------------------------------------------------
// ImageSet
// ---------------------------------------------------------------------------

Tensor ImageSet::center_cropped(int i) const {
  const int my = (canvas_h - out_h) / 2, mx = (canvas_w - out_w) / 2;
  if (canvas_h == out_h && canvas_w == out_w) return images[static_cast<size_t>(i)];
  return crop_tensor(images[static_cast<size_t>(i)], my, mx, out_h, out_w);
}

std::vector<Tensor> ImageSet::all_center_cropped() const {
  std::vector<Tensor> out;
  out.reserve(images.size());
  for (int i = 0; i < M; ++i) out.push_back(center_cropped(i));
  return out;
}

Tensor ImageSet::stacked_center_cropped() const {
  Tensor out({M, channels, out_h, out_w});
  const int64_t per = static_cast<int64_t>(channels) * out_h * out_w;
  for (int i = 0; i < M; ++i) {
    Tensor c = center_cropped(i);
    std::memcpy(out.ptr() + i * per, c.ptr(), static_cast<size_t>(per) * sizeof(float));
  }
  return out;
}

ImageSet init_image_set(const SynthesisConfig& cfg, const InputSpec& spec, uint64_t seed) {
  cfg.validate(spec);
  const int margin = cfg.effective_margin(spec);
  ImageSet set;
  set.M = cfg.image_count;
  set.K = cfg.batch_size;
  set.N = cfg.n_batches();
  set.channels = spec.channels;
  set.out_h = spec.height;
  set.out_w = spec.width;
  set.canvas_h = spec.height + margin;
  set.canvas_w = spec.width + margin;
  set.seed = seed;
  Rng rng = Rng(seed).fork(0x1217);
  set.images.reserve(static_cast<size_t>(set.M));
  for (int i = 0; i < set.M; ++i)
    set.images.push_back(Tensor::randn({1, set.channels, set.canvas_h, set.canvas_w}, rng));
  return set;
}

void save_image_set(const ImageSet& set, const std::string& dir, const std::string& name,
                    bool also_cropped) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::string blob;
  for (const auto& img : set.images) append_tensor_blob(blob, img);
  const std::string img_file = name + "_images.f32";
  atomic_write_file((fs::path(dir) / img_file).string(), blob);
  json m;
  m["format_version"] = 1;
  m["kind"] = "image_set";
  m["count"] = set.M;
  m["batch_size"] = set.K;
  m["channels"] = set.channels;
  m["height"] = set.canvas_h;
  m["width"] = set.canvas_w;
  m["out_height"] = set.out_h;
  m["out_width"] = set.out_w;
  m["seed"] = set.seed;
  m["images"] = img_file;
  if (also_cropped) {
    std::string cblob;
    for (int i = 0; i < set.M; ++i) append_tensor_blob(cblob, set.center_cropped(i));
    const std::string cfile = name + "_center_cropped.f32";
    atomic_write_file((fs::path(dir) / cfile).string(), cblob);
    m["center_cropped"] = cfile;
  }
  atomic_write_file((fs::path(dir) / (name + ".json")).string(), m.dump(2) + "\n");
}

ImageSet load_image_set(const std::string& manifest_path) {
  namespace fs = std::filesystem;
  json m;
  try {
    m = json::parse(read_file(manifest_path));
  } catch (const json::exception& e) {
    fail(ErrorKind::Io, "bad image set manifest " + manifest_path + ": " + e.what());
  }
  if (m.value("format_version", 0) != 1)
    fail(ErrorKind::Version, "image set manifest version " +
                                 std::to_string(m.value("format_version", 0)) +
                                 " unsupported (reader supports 1)");
  ImageSet set;
  set.M = m.at("count").get<int>();
  set.K = m.at("batch_size").get<int>();
  set.N = set.K > 0 ? set.M / set.K : 0;
  set.channels = m.at("channels").get<int>();
  set.canvas_h = m.at("height").get<int>();
  set.canvas_w = m.at("width").get<int>();
  set.out_h = m.at("out_height").get<int>();
  set.out_w = m.at("out_width").get<int>();
  set.seed = m.value("seed", 0ull);
  const std::string blob =
      read_file((fs::path(manifest_path).parent_path() / m.at("images").get<std::string>()).string());
  const int64_t per = static_cast<int64_t>(set.channels) * set.canvas_h * set.canvas_w;
  if (blob.size() != static_cast<size_t>(per * set.M) * sizeof(float))
    fail(ErrorKind::Checksum, "image blob size does not match manifest");
  for (int i = 0; i < set.M; ++i)
    set.images.push_back(tensor_from_blob(blob, {1, set.channels, set.canvas_h, set.canvas_w},
                                          static_cast<size_t>(i * per) * sizeof(float)));
  return set;
}

// ---------------------------------------------------------------------------
// preprocessing
// ---------------------------------------------------------------------------

Tensor smooth3_tensor(const Tensor& img) {
  const int64_t NC = img.shape[0] * img.shape[1], H = img.shape[2], W = img.shape[3];
  if (H < 2 || W < 2) fail(ErrorKind::Shape, "smoothing needs at least 2x2 images");
  static const double kk[3] = {0.25, 0.5, 0.25};
  auto reflect = [](int64_t i, int64_t n) { return i < 0 ? -i : (i >= n ? 2 * n - 2 - i : i); };
  Tensor out(img.shape);
  for (int64_t nc = 0; nc < NC; ++nc) {
    const float* xin = img.ptr() + nc * H * W;
    float* o = out.ptr() + nc * H * W;
    for (int64_t y = 0; y < H; ++y)
      for (int64_t x = 0; x < W; ++x) {
        double acc = 0;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx)
            acc += kk[dy + 1] * kk[dx + 1] * xin[reflect(y + dy, H) * W + reflect(x + dx, W)];
        o[y * W + x] = static_cast<float>(acc);
      }
  }
  return out;
}

Tensor hflip_tensor(const Tensor& img) {
  const int64_t NCH = img.shape[0] * img.shape[1] * img.shape[2], W = img.shape[3];
  Tensor out(img.shape);
  for (int64_t r = 0; r < NCH; ++r) {
    const float* xin = img.ptr() + r * W;
    float* o = out.ptr() + r * W;
    for (int64_t i = 0; i < W; ++i) o[i] = xin[W - 1 - i];
  }
  return out;
}

Tensor crop_tensor(const Tensor& img, int oy, int ox, int oh, int ow) {
  const int64_t NC = img.shape[0] * img.shape[1], H = img.shape[2], W = img.shape[3];
  if (oy < 0 || ox < 0 || oy + oh > H || ox + ow > W)
    fail(ErrorKind::Shape, "crop window exceeds input " + img.shape_str());
  Tensor out({img.shape[0], img.shape[1], oh, ow});
  for (int64_t nc = 0; nc < NC; ++nc)
    for (int64_t y = 0; y < oh; ++y)
      std::memcpy(out.ptr() + (nc * oh + y) * ow, img.ptr() + (nc * H + y + oy) * W + ox,
                  static_cast<size_t>(ow) * sizeof(float));
  return out;
}

Tensor zero_pad_tensor(const Tensor& img, int margin) {
  if (margin % 2 != 0 || margin < 0) fail(ErrorKind::Config, "pad margin must be even and >= 0");
  if (margin == 0) return img;
  const int64_t NC = img.shape[0] * img.shape[1], H = img.shape[2], W = img.shape[3];
  const int m2 = margin / 2;
  Tensor out({img.shape[0], img.shape[1], H + margin, W + margin});
  for (int64_t nc = 0; nc < NC; ++nc)
    for (int64_t y = 0; y < H; ++y)
      std::memcpy(out.ptr() + (nc * (H + margin) + y + m2) * (W + margin) + m2,
                  img.ptr() + (nc * H + y) * W, static_cast<size_t>(W) * sizeof(float));
  return out;
}

PrepDraw draw_prep(Rng& rng, const SynthesisConfig& cfg, int margin) {
  PrepDraw d;
  if (cfg.flip) d.do_flip = rng.bernoulli(0.5);
  if (cfg.crop && margin > 0) {
    d.oy = static_cast<int>(rng.uniform_int(margin + 1));
    d.ox = static_cast<int>(rng.uniform_int(margin + 1));
  }
  return d;
}

Tensor preprocess(const Tensor& img, const PrepDraw& draw, const SynthesisConfig& cfg, int out_h,
                  int out_w, bool pad_first) {
  Tensor t = img;
  if (cfg.smooth) t = smooth3_tensor(t);
  if (cfg.flip && draw.do_flip) t = hflip_tensor(t);
  if (cfg.crop) {
    if (pad_first) {
      const int margin = cfg.crop_margin >= 0 ? cfg.crop_margin : auto_margin(out_h);
      t = zero_pad_tensor(t, margin);
    }
    if (t.shape[2] != out_h || t.shape[3] != out_w) t = crop_tensor(t, draw.oy, draw.ox, out_h, out_w);
  }
  if (t.shape[2] != out_h || t.shape[3] != out_w)
    fail(ErrorKind::Shape, "preprocessed image is " + t.shape_str() + ", expected " +
                               std::to_string(out_h) + "x" + std::to_string(out_w));
  return t;
}

int append_preprocess(Graph& g, int x, const PrepDraw& draw, const SynthesisConfig& cfg, int out_h,
                      int out_w) {
  if (cfg.smooth) x = g.smooth3(x, "prep.smooth");
  if (cfg.flip && draw.do_flip) x = g.hflip(x, "prep.flip");
  if (cfg.crop && (g.shape(x)[2] != out_h || g.shape(x)[3] != out_w))
    x = g.crop(x, draw.oy, draw.ox, out_h, out_w, "prep.crop");
  if (g.shape(x)[2] != out_h || g.shape(x)[3] != out_w)
    fail(ErrorKind::Shape, "preprocess output does not reach model input size");
  return x;
}

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

void radam_step(RAdamState& state, Tensor& param, const Tensor& grad, double lr,
                const RAdamConfig& cfg) {
  if (!grad.same_shape(param)) fail(ErrorKind::Shape, "gradient shape differs from parameter");
  if (!grad.all_finite()) fail(ErrorKind::Numeric, "optimizer step rejected: non-finite gradient");
  if (state.t == 0) {
    state.m = Tensor(param.shape);
    state.v = Tensor(param.shape);
  }
  const int64_t t = ++state.t;
  const double b1 = cfg.beta1, b2 = cfg.beta2;
  const double b1t = std::pow(b1, static_cast<double>(t));
  const double b2t = std::pow(b2, static_cast<double>(t));
  const double rho_inf = 2.0 / (1.0 - b2) - 1.0;
  const double rho_t = rho_inf - 2.0 * static_cast<double>(t) * b2t / (1.0 - b2t);
  const bool rectified = rho_t > 4.0;
  double rt = 0.0;
  if (rectified)
    rt = std::sqrt(((rho_t - 4.0) * (rho_t - 2.0) * rho_inf) /
                   ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t));
  const double m_corr = 1.0 / (1.0 - b1t);
  const double v_corr = 1.0 / (1.0 - b2t);
  for (int64_t i = 0; i < param.numel(); ++i) {
    const double gi = grad[i];
    const double m = b1 * state.m[i] + (1.0 - b1) * gi;
    const double v = b2 * state.v[i] + (1.0 - b2) * gi * gi;
    state.m[i] = static_cast<float>(m);
    state.v[i] = static_cast<float>(v);
    const double mhat = m * m_corr;
    double upd;
    if (rectified)
      upd = lr * rt * mhat / (std::sqrt(v * v_corr) + cfg.eps);
    else
      upd = lr * mhat;
    param[i] = static_cast<float>(param[i] - upd);
  }
}

void PlateauScheduler::step(double metric) {
  const bool improved =
      !has_best || metric < best - rel_threshold * std::max(1.0, std::abs(best));
  if (improved) {
    best = metric;
    has_best = true;
    bad = 0;
  } else if (++bad > patience) {
    lr *= factor;
    bad = 0;
  }
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

namespace {
bool g_scalar_output_warned = false;
}

double odsl_term(const std::vector<double>& output, const std::vector<double>& mu_k,
                 const std::vector<double>& sigma_k, const BnTarget& last, double delta) {
  if (output.empty()) fail(ErrorKind::Shape, "empty output vector");
  if (output.size() == 1 && !g_scalar_output_warned) {
    std::fprintf(stderr, "warning: scalar model output; output range term is identically 0\n");
    g_scalar_output_warned = true;
  }
  double mx = output[0], mn = output[0];
  for (double v : output) {
    mx = std::max(mx, v);
    mn = std::min(mn, v);
  }
  const double range = mx - mn;
  double smu = 0, ssig = 0;
  for (size_t c = 0; c < mu_k.size(); ++c) {
    const double dm = mu_k[c] - last.mu[c];
    const double dv = sigma_k[c] - last.sigma[c];
    smu += dm * dm;
    ssig += dv * dv;
  }
  return -(range * range) + std::max(smu - delta, 0.0) + std::max(ssig - delta, 0.0);
}

namespace {

Tensor vec_to_tensor(const std::vector<double>& v) {
  Tensor t({static_cast<int64_t>(v.size())});
  for (size_t i = 0; i < v.size(); ++i) t[static_cast<int64_t>(i)] = static_cast<float>(v[i]);
  return t;
}

// sum of squared gaps between a vector node and a constant target
int sq_gap_sum(Graph& g, int vec, const std::vector<double>& target, const std::string& name) {
  int tconst = g.constant(vec_to_tensor(target), name + ".target");
  int diff = g.sub(vec, tconst, name + ".diff");
  return g.sum(g.mul(diff, diff, name + ".sq"), name + ".sumsq");
}

}  // namespace

StepGraph build_step_graph(const ModelBundle& model, const SynthesisConfig& cfg,
                           const std::vector<PrepDraw>& draws,
                           const std::vector<BnTarget>& targets, const BatchStats* other_sums,
                           int n_batches, double delta) {
  const InputSpec& spec = model.input_spec;
  const int margin = cfg.effective_margin(spec);
  const int K = static_cast<int>(draws.size());
  const int L = static_cast<int>(targets.size());
  if (cfg.mode == AggMode::Global && (other_sums == nullptr || n_batches < 1))
    fail(ErrorKind::Usage, "global mode requires the other batches' summed records");

  StepGraph sg;
  Graph& g = sg.g;
  std::vector<int> prepped;
  for (int k = 0; k < K; ++k) {
    int leaf = g.input({1, spec.channels, spec.height + margin, spec.width + margin},
                       "img" + std::to_string(k), true);
    sg.image_leaves.push_back(leaf);
    prepped.push_back(append_preprocess(g, leaf, draws[static_cast<size_t>(k)], cfg, spec.height,
                                        spec.width));
  }
  const int batch = K > 1 ? g.concat_n(prepped, "batch") : prepped[0];
  InferBodyRefs body = append_infer_body(model, g, batch);

  // statistic-matching term
  int bns = -1;
  for (int l = 0; l < L; ++l) {
    const std::string nm = "bns.l" + std::to_string(l + 1);
    const int tap = body.taps[static_cast<size_t>(l)];
    int mean_b = g.chan_mean(tap, nm + ".mean");
    int m2_b = g.chan_sqmean(tap, nm + ".m2");
    int mu_node, var_node;
    if (cfg.mode == AggMode::Global) {
      const double inv_n = 1.0 / static_cast<double>(n_batches);
      std::vector<double> cmu = other_sums->mean[static_cast<size_t>(l)];
      std::vector<double> cm2 = other_sums->m2[static_cast<size_t>(l)];
      for (auto& v : cmu) v *= inv_n;
      for (auto& v : cm2) v *= inv_n;
      mu_node = g.add(g.affine(mean_b, inv_n, 0.0, nm + ".mean_scaled"),
                      g.constant(vec_to_tensor(cmu), nm + ".others_mean"), nm + ".global_mean");
      int m2_node = g.add(g.affine(m2_b, inv_n, 0.0, nm + ".m2_scaled"),
                          g.constant(vec_to_tensor(cm2), nm + ".others_m2"), nm + ".global_m2");
      var_node = g.sub(m2_node, g.mul(mu_node, mu_node, nm + ".musq"), nm + ".global_var");
    } else {
      mu_node = mean_b;
      var_node = g.sub(m2_b, g.mul(mean_b, mean_b, nm + ".musq"), nm + ".var");
    }
    int term = g.add(sq_gap_sum(g, mu_node, targets[static_cast<size_t>(l)].mu, nm + ".mu"),
                     sq_gap_sum(g, var_node, targets[static_cast<size_t>(l)].sigma, nm + ".sigma"),
                     nm + ".term");
    bns = bns < 0 ? term : g.add(bns, term, "bns.acc" + std::to_string(l + 1));
  }
  sg.bns = bns;

  int loss = bns;
  if (cfg.odsl) {
    if (g.shape(body.logits)[1] == 1 && !g_scalar_output_warned) {
      std::fprintf(stderr, "warning: scalar model output; output range term is identically 0\n");
      g_scalar_output_warned = true;
    }
    const BnTarget& last = targets.back();
    const int last_tap = body.taps.back();
    int odsl_sum = -1;
    for (int k = 0; k < K; ++k) {
      const std::string nm = "odsl.k" + std::to_string(k);
      int out_k = K > 1 ? g.slice_n(body.logits, k, nm + ".out") : body.logits;
      int range = g.sub(g.max(out_k, nm + ".max"), g.min(out_k, nm + ".min"), nm + ".range");
      int range_term = g.affine(g.mul(range, range, nm + ".rangesq"), -1.0, 0.0, nm + ".neg");
      int fm_k = K > 1 ? g.slice_n(last_tap, k, nm + ".fm") : last_tap;
      int mu_k = g.chan_mean(fm_k, nm + ".mu");
      int m2_k = g.chan_sqmean(fm_k, nm + ".m2");
      int var_k = g.sub(m2_k, g.mul(mu_k, mu_k, nm + ".musq"), nm + ".var");
      int h_mu = g.relu(g.affine(sq_gap_sum(g, mu_k, last.mu, nm + ".gmu"), 1.0, -delta),
                        nm + ".hinge_mu");
      int h_var = g.relu(g.affine(sq_gap_sum(g, var_k, last.sigma, nm + ".gvar"), 1.0, -delta),
                         nm + ".hinge_var");
      int term = g.add(range_term, g.add(h_mu, h_var, nm + ".hinges"), nm + ".term");
      odsl_sum = odsl_sum < 0 ? term : g.add(odsl_sum, term, "odsl.acc" + std::to_string(k));
    }
    sg.odsl_mean = g.affine(odsl_sum, 1.0 / K, 0.0, "odsl.mean");
    // Eq-8 weighting over the effective set: the whole set in global mode,
    // the batch otherwise; terms of images outside this batch are constants
    // with zero gradient and are kept out of the optimized node.
    const double denom = cfg.mode == AggMode::Global
                             ? static_cast<double>(n_batches) * static_cast<double>(K)
                             : static_cast<double>(K);
    loss = g.add(bns, g.affine(odsl_sum, cfg.lambda / denom, 0.0, "odsl.weighted"), "total");
  }
  sg.loss = loss;
  return sg;
}

// ---------------------------------------------------------------------------
// generate (the full optimization loop)
// ---------------------------------------------------------------------------

std::string LossTrace::to_csv() const {
  std::string out = "epoch,batch,bns,odsl,total,lr\r\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%d,%d,%.9g,%.9g,%.9g,%.9g\r\n", r.epoch, r.batch, r.bns,
                  r.odsl, r.total, r.lr);
    out += buf;
  }
  return out;
}

GenerateResult generate(const ModelBundle& model, const SynthesisConfig& cfg, uint64_t seed) {
  cfg.validate(model.input_spec);
  const std::vector<BnTarget> targets = collect_bn_targets(model);
  const InputSpec& spec = model.input_spec;
  const int margin = cfg.effective_margin(spec);
  const int K = cfg.batch_size, N = cfg.n_batches(), T = cfg.iterations;

  double delta = cfg.delta;
  if (delta < 0) {
    double ss = 0;
    for (double v : targets.back().sigma) ss += v * v;
    delta = 0.1 * ss;
  }

  Rng root(seed);
  GenerateResult res;
  res.images = init_image_set(cfg, spec, seed);
  ImageSet& set = res.images;

  std::vector<int> channels;
  for (const auto& t : targets) channels.push_back(static_cast<int>(t.mu.size()));
  GlobalStatStore store(N, K, channels);

  InferNet knet = model.infer_net(K);
  const int64_t per_img = static_cast<int64_t>(spec.channels) * spec.height * spec.width;

  auto recompute_record = [&](int n, Rng prep_rng) {
    Tensor in({K, spec.channels, spec.height, spec.width});
    for (int k = 0; k < K; ++k) {
      const PrepDraw d = draw_prep(prep_rng, cfg, margin);
      Tensor p = preprocess(set.images[static_cast<size_t>(n * K + k)], d, cfg, spec.height,
                            spec.width, false);
      std::memcpy(in.ptr() + k * per_img, p.ptr(), static_cast<size_t>(per_img) * sizeof(float));
    }
    Workspace ws(true);
    ws.check_finite = cfg.check_finite;
    Bindings<float> bind = {{knet.input, &in}};
    forward(knet.g, model.params, bind, ws, knet.taps);
    store.replace_record(n, record_from_taps(ws, knet.taps));
  };

  // initial statistic fill
  for (int n = 0; n < N; ++n) recompute_record(n, root.fork(0xF111, static_cast<uint64_t>(n)));
  res.trace.initial_fullset_bns =
      bns_loss(full_set_stats(model, set.all_center_cropped(), K), targets);

  std::vector<RAdamState> opt(static_cast<size_t>(set.M));
  const int patience = cfg.sched_patience > 0 ? cfg.sched_patience : std::max(20, T / 20);
  PlateauScheduler sched(cfg.lr, cfg.sched_factor, patience);

  for (int t = 1; t <= T; ++t) {
    double epoch_total = 0;
    for (int n = 0; n < N; ++n) {
      try {
        Rng step_rng = root.fork(0x57E9, static_cast<uint64_t>(t), static_cast<uint64_t>(n));
        std::vector<PrepDraw> draws(static_cast<size_t>(K));
        for (int k = 0; k < K; ++k) draws[static_cast<size_t>(k)] = draw_prep(step_rng, cfg, margin);

        double bns_val = 0, odsl_val = 0, total_val = 0;
        if (cfg.mode == AggMode::PerImage) {
          for (int k = 0; k < K; ++k) {
            const int idx = n * K + k;
            StepGraph sg = build_step_graph(model, cfg, {draws[static_cast<size_t>(k)]}, targets,
                                            nullptr, 0, delta);
            Workspace ws(true);
            ws.check_finite = cfg.check_finite;
            Bindings<float> bind = {{sg.image_leaves[0], &set.images[static_cast<size_t>(idx)]}};
            std::vector<int> outs = {sg.loss, sg.bns};
            if (sg.odsl_mean >= 0) outs.push_back(sg.odsl_mean);
            forward(sg.g, model.params, bind, ws, outs);
            bns_val += ws.value(sg.bns)[0];
            odsl_val += sg.odsl_mean >= 0 ? ws.value(sg.odsl_mean)[0] : 0.0;
            total_val += ws.value(sg.loss)[0];
            backward(sg.g, model.params, ws, sg.loss);
            radam_step(opt[static_cast<size_t>(idx)], set.images[static_cast<size_t>(idx)],
                       ws.gradient(sg.image_leaves[0]), sched.lr);
          }
          bns_val /= K;
          odsl_val /= K;
          total_val /= K;
        } else {
          BatchStats others;
          const BatchStats* others_ptr = nullptr;
          if (cfg.mode == AggMode::Global) {
            others = store.sums_excluding(n);
            others_ptr = &others;
          }
          StepGraph sg = build_step_graph(model, cfg, draws, targets, others_ptr, N, delta);
          Workspace ws(true);
          ws.check_finite = cfg.check_finite;
          Bindings<float> bind;
          for (int k = 0; k < K; ++k)
            bind.push_back({sg.image_leaves[static_cast<size_t>(k)],
                            &set.images[static_cast<size_t>(n * K + k)]});
          std::vector<int> outs = {sg.loss, sg.bns};
          if (sg.odsl_mean >= 0) outs.push_back(sg.odsl_mean);
          forward(sg.g, model.params, bind, ws, outs);
          bns_val = ws.value(sg.bns)[0];
          odsl_val = sg.odsl_mean >= 0 ? ws.value(sg.odsl_mean)[0] : 0.0;
          total_val = ws.value(sg.loss)[0];
          backward(sg.g, model.params, ws, sg.loss);
          for (int k = 0; k < K; ++k)
            radam_step(opt[static_cast<size_t>(n * K + k)], set.images[static_cast<size_t>(n * K + k)],
                       ws.gradient(sg.image_leaves[static_cast<size_t>(k)]), sched.lr);
        }

        // post-update recompute with fresh draws (or the step's, when pinned)
        Rng post_rng = cfg.reuse_prep_draws
                           ? root.fork(0x57E9, static_cast<uint64_t>(t), static_cast<uint64_t>(n))
                           : root.fork(0xAF7E, static_cast<uint64_t>(t), static_cast<uint64_t>(n));
        recompute_record(n, post_rng);

        res.trace.rows.push_back({t, n, bns_val, odsl_val, total_val, sched.lr});
        epoch_total += total_val;
      } catch (const Error& e) {
        if (e.kind() == ErrorKind::Numeric)
          fail(ErrorKind::Numeric, "aborted at iteration " + std::to_string(t) + ", batch " +
                                       std::to_string(n) + ": " + e.what());
        throw;
      }
    }
    sched.step(epoch_total / N);
  }

  res.trace.final_fullset_bns =
      bns_loss(full_set_stats(model, set.all_center_cropped(), K), targets);
  return res;
}

}  // namespace dgh
