// SPDX-License-Identifier: Apache-2.0
#include "dgh/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "dgh/error.hpp"

namespace dgh {

namespace {

// Builds either the inference or the training body of an architecture,
// creating parameters on first use. Both graph flavors share parameter slots.
struct NetCtx {
  ModelBundle* b;
  Graph* g;
  bool train = false;
  bool create = false;
  Rng* init_rng = nullptr;

  int get_param(const std::string& name, std::vector<int64_t> shape, double init_std,
                float fill = 0.0f, bool trainable = true) {
    int id = b->params.find(name);
    if (id >= 0) return id;
    if (!create) fail(ErrorKind::Usage, "parameter missing from store: " + name);
    Tensor t(shape, fill);
    if (init_std > 0)
      for (auto& v : t.data) v = static_cast<float>(init_rng->normal(0.0, init_std));
    return b->params.add(name, std::move(t), trainable);
  }

  int conv(int x, const std::string& name, int cin, int cout, int k, int stride, int pad,
           bool bias = false) {
    const double std = std::sqrt(2.0 / (static_cast<double>(cin) * k * k));
    int w = get_param(name + ".w", {cout, cin, k, k}, std);
    int bid = -1;
    if (bias) bid = get_param(name + ".b", {cout}, 0.0);
    int wn = g->param(b->params, w);
    int bn = bias ? g->param(b->params, bid) : -1;
    return g->conv2d(x, wn, bn, stride, pad, name);
  }

  int batch_norm(int x, const std::string& prefix, int channels) {
    int gamma = get_param(prefix + ".gamma", {channels}, 0.0, 1.0f);
    int beta = get_param(prefix + ".beta", {channels}, 0.0, 0.0f);
    int mu = get_param(prefix + ".mu", {channels}, 0.0, 0.0f, false);
    int var = get_param(prefix + ".var", {channels}, 0.0, 1.0f, false);
    if (create) {
      BnLayerMeta meta;
      meta.prefix = prefix;
      meta.channels = channels;
      meta.gamma = gamma;
      meta.beta = beta;
      meta.mu = mu;
      meta.var = var;
      b->bn.push_back(meta);
    }
    int gn = g->param(b->params, gamma);
    int bn2 = g->param(b->params, beta);
    if (train) {
      int node = g->bn_train(x, gn, bn2, b->bn_eps, prefix);
      train_bn_nodes.push_back(node);
      return node;
    }
    taps.push_back(x);
    int mn = g->param(b->params, mu);
    int vn = g->param(b->params, var);
    return g->bn_inf(x, gn, bn2, mn, vn, b->bn_eps, prefix);
  }

  int linear(int x, const std::string& name, int fin, int fout) {
    const double std = std::sqrt(1.0 / static_cast<double>(fin));
    int w = get_param(name + ".w", {fout, fin}, std);
    int bid = get_param(name + ".b", {fout}, 0.0);
    return g->linear(x, g->param(b->params, w), g->param(b->params, bid), name);
  }

  std::vector<int> taps;
  std::vector<int> train_bn_nodes;
};

struct BodyRefs {
  int logits = -1;
  int penult = -1;
};

BodyRefs tiny_resnet_body(NetCtx& ctx, int x) {
  Graph& g = *ctx.g;
  x = ctx.conv(x, "stem", ctx.b->input_spec.channels, 8, 3, 1, 1);
  x = ctx.batch_norm(x, "stem.bn", 8);
  x = g.relu(x, "stem.relu");

  struct Blk {
    const char* name;
    int cin, cout, stride;
  };
  const Blk blocks[3] = {{"b1", 8, 16, 2}, {"b2", 16, 32, 2}, {"b3", 32, 32, 1}};
  for (const auto& blk : blocks) {
    const std::string p = blk.name;
    int main = ctx.conv(x, p + ".conv1", blk.cin, blk.cout, 3, blk.stride, 1);
    main = ctx.batch_norm(main, p + ".bn1", blk.cout);
    main = g.relu(main, p + ".relu1");
    main = ctx.conv(main, p + ".conv2", blk.cout, blk.cout, 3, 1, 1);
    main = ctx.batch_norm(main, p + ".bn2", blk.cout);
    int skip = x;
    if (blk.stride != 1 || blk.cin != blk.cout)
      skip = ctx.conv(x, p + ".proj", blk.cin, blk.cout, 1, blk.stride, 0);
    x = g.add(main, skip, p + ".add");
    x = g.relu(x, p + ".relu2");
  }
  BodyRefs r;
  r.penult = g.gap(x, "gap");
  r.logits = ctx.linear(r.penult, "head", 32, ctx.b->num_classes);
  return r;
}

BodyRefs tiny_vgg_body(NetCtx& ctx, int x) {
  Graph& g = *ctx.g;
  struct Stage {
    const char* name;
    int cin, cout;
    bool pool;
  };
  const Stage stages[4] = {
      {"s1", ctx.b->input_spec.channels, 8, true}, {"s2", 8, 16, true}, {"s3", 16, 32, true}, {"s4", 32, 32, false}};
  for (const auto& st : stages) {
    const std::string p = st.name;
    x = ctx.conv(x, p + ".conv", st.cin, st.cout, 3, 1, 1);
    x = ctx.batch_norm(x, p + ".bn", st.cout);
    x = g.relu(x, p + ".relu");
    if (st.pool) x = g.max_pool(x, 2, 2, p + ".pool");
  }
  BodyRefs r;
  r.penult = g.gap(x, "gap");
  r.logits = ctx.linear(r.penult, "head", 32, ctx.b->num_classes);
  return r;
}

BodyRefs tiny_mlp_body(NetCtx& ctx, int x) {
  Graph& g = *ctx.g;
  const auto& s = ctx.b->input_spec;
  const int64_t f = static_cast<int64_t>(s.channels) * s.height * s.width;
  const int64_t n = g.shape(x)[0];
  x = g.reshape(x, {n, f}, "flatten");
  x = ctx.linear(x, "fc1", static_cast<int>(f), 32);
  x = g.relu(x, "fc1.relu");
  BodyRefs r;
  r.penult = x;
  r.logits = ctx.linear(x, "fc2", 32, ctx.b->num_classes);
  return r;
}

BodyRefs build_body(NetCtx& ctx, int x) {
  if (ctx.b->arch == "tiny-resnet") return tiny_resnet_body(ctx, x);
  if (ctx.b->arch == "tiny-vgg") return tiny_vgg_body(ctx, x);
  if (ctx.b->arch == "tiny-mlp") return tiny_mlp_body(ctx, x);
  fail(ErrorKind::Unsupported, "unknown architecture: " + ctx.b->arch);
}

}  // namespace

std::vector<std::string> known_archs() { return {"tiny-resnet", "tiny-vgg", "tiny-mlp"}; }

ModelBundle build_model(const std::string& arch, const InputSpec& spec, int num_classes,
                        uint64_t init_seed) {
  ModelBundle b;
  b.arch = arch;
  b.input_spec = spec;
  b.num_classes = num_classes;
  Rng rng(init_seed);
  Rng init = rng.fork(0x1417);

  // creation pass populates the parameter store and BN metadata
  Graph g;
  NetCtx ctx;
  ctx.b = &b;
  ctx.g = &g;
  ctx.train = false;
  ctx.create = true;
  ctx.init_rng = &init;
  int x = g.input({1, spec.channels, spec.height, spec.width}, "image");
  build_body(ctx, x);
  return b;
}

InferBodyRefs append_infer_body(const ModelBundle& bundle, Graph& g, int x) {
  NetCtx ctx;
  ctx.b = const_cast<ModelBundle*>(&bundle);
  ctx.g = &g;
  ctx.train = false;
  ctx.create = false;
  BodyRefs r = build_body(ctx, x);
  InferBodyRefs out;
  out.logits = r.logits;
  out.penult = r.penult;
  out.taps = ctx.taps;
  return out;
}

InferNet ModelBundle::infer_net(int batch) const {
  InferNet net;
  net.input = net.g.input({batch, input_spec.channels, input_spec.height, input_spec.width},
                          "image", true);
  InferBodyRefs r = append_infer_body(*this, net.g, net.input);
  net.logits = r.logits;
  net.penult = r.penult;
  net.taps = r.taps;
  return net;
}

TrainNet ModelBundle::train_net(int batch) const {
  TrainNet net;
  NetCtx ctx;
  ctx.b = const_cast<ModelBundle*>(this);
  ctx.g = &net.g;
  ctx.train = true;
  ctx.create = false;
  net.input = net.g.input({batch, input_spec.channels, input_spec.height, input_spec.width},
                          "image");
  net.labels = net.g.input({batch}, "labels");
  BodyRefs r = build_body(ctx, net.input);
  net.logits = r.logits;
  net.loss = net.g.softmax_ce(r.logits, net.labels, "ce_loss");
  net.bn_nodes = ctx.train_bn_nodes;
  return net;
}

std::vector<BnTarget> collect_bn_targets(const ModelBundle& bundle) {
  if (bundle.bn.empty())
    fail(ErrorKind::Unsupported,
         "model '" + bundle.arch + "' has no BN layers; statistic matching is undefined");
  std::vector<BnTarget> out;
  out.reserve(bundle.bn.size());
  for (size_t l = 0; l < bundle.bn.size(); ++l) {
    const auto& meta = bundle.bn[l];
    BnTarget t;
    t.layer_index = static_cast<int>(l) + 1;
    const Tensor& mu = bundle.params.values[static_cast<size_t>(meta.mu)];
    const Tensor& var = bundle.params.values[static_cast<size_t>(meta.var)];
    t.mu.assign(mu.data.begin(), mu.data.end());
    t.sigma.assign(var.data.begin(), var.data.end());
    out.push_back(std::move(t));
  }
  return out;
}

namespace {

// run the infer graph over a dataset in batches, collecting a node's value
template <typename Fn>
void batched_forward(const ModelBundle& bundle, const Tensor& images, int batch, Fn&& per_batch) {
  const int64_t total = images.shape[0];
  const int64_t C = images.shape[1], H = images.shape[2], W = images.shape[3];
  int64_t done = 0;
  while (done < total) {
    const int64_t bs = std::min<int64_t>(batch, total - done);
    InferNet net = bundle.infer_net(static_cast<int>(bs));
    Tensor in({bs, C, H, W});
    std::memcpy(in.ptr(), images.ptr() + done * C * H * W,
                static_cast<size_t>(bs * C * H * W) * sizeof(float));
    Workspace ws;
    Bindings<float> bind = {{net.input, &in}};
    forward(net.g, bundle.params, bind, ws, {net.logits, net.penult});
    per_batch(net, ws, done, bs);
    done += bs;
  }
}

}  // namespace

double eval_accuracy(const ModelBundle& bundle, const LabeledDataset& ds, int batch) {
  int64_t correct = 0;
  batched_forward(bundle, ds.images, batch,
                  [&](const InferNet& net, const Workspace& ws, int64_t off, int64_t bs) {
                    const Tensor& logits = ws.value(net.logits);
                    const int64_t C = logits.shape[1];
                    for (int64_t i = 0; i < bs; ++i) {
                      int64_t arg = 0;
                      float best = logits[i * C];
                      for (int64_t c = 1; c < C; ++c)
                        if (logits[i * C + c] > best) {
                          best = logits[i * C + c];
                          arg = c;
                        }
                      if (arg == ds.labels[static_cast<size_t>(off + i)]) ++correct;
                    }
                  });
  return static_cast<double>(correct) / static_cast<double>(ds.count());
}

Tensor penultimate_features(const ModelBundle& bundle, const Tensor& images, int batch) {
  Tensor out;
  batched_forward(bundle, images, batch,
                  [&](const InferNet& net, const Workspace& ws, int64_t off, int64_t bs) {
                    const Tensor& f = ws.value(net.penult);
                    if (out.numel() == 0) out = Tensor({images.shape[0], f.shape[1]});
                    std::memcpy(out.ptr() + off * f.shape[1], f.ptr(),
                                static_cast<size_t>(bs * f.shape[1]) * sizeof(float));
                  });
  return out;
}

Tensor model_outputs(const ModelBundle& bundle, const Tensor& images, int batch) {
  Tensor out;
  batched_forward(bundle, images, batch,
                  [&](const InferNet& net, const Workspace& ws, int64_t off, int64_t bs) {
                    const Tensor& f = ws.value(net.logits);
                    if (out.numel() == 0) out = Tensor({images.shape[0], f.shape[1]});
                    std::memcpy(out.ptr() + off * f.shape[1], f.ptr(),
                                static_cast<size_t>(bs * f.shape[1]) * sizeof(float));
                  });
  return out;
}

}  // namespace dgh
