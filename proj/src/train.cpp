// SPDX-License-Identifier: Apache-2.0
#include "dgh/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include "dgh/error.hpp"
#include "dgh/synth.hpp"

namespace dgh {

ModelBundle train_reference_model(const std::string& arch, const LabeledDataset& train_ds,
                                  const LabeledDataset& val_ds, const TrainConfig& cfg,
                                  uint64_t seed) {
  if (train_ds.num_classes < 2) fail(ErrorKind::Config, "training needs at least 2 classes");
  InputSpec spec;
  spec.channels = static_cast<int>(train_ds.images.shape[1]);
  spec.height = static_cast<int>(train_ds.images.shape[2]);
  spec.width = static_cast<int>(train_ds.images.shape[3]);

  Rng root(seed);
  ModelBundle bundle = build_model(arch, spec, train_ds.num_classes, root.fork(0x1E17).u64());
  bundle.ema_momentum = cfg.bn_momentum;
  bundle.train_seed = seed;
  bundle.train_epochs = cfg.epochs;
  bundle.trained_with_augment = cfg.augment;

  TrainNet net = bundle.train_net(cfg.batch);

  // one graph node per parameter
  std::vector<int> param_node(static_cast<size_t>(bundle.params.size()), -1);
  for (int id = 0; id < net.g.size(); ++id)
    if (net.g.node(id).op == Op::Param) param_node[static_cast<size_t>(net.g.node(id).param)] = id;

  std::vector<Tensor> velocity(static_cast<size_t>(bundle.params.size()));
  for (int p = 0; p < bundle.params.size(); ++p)
    if (bundle.params.trainable[static_cast<size_t>(p)])
      velocity[static_cast<size_t>(p)] = Tensor(bundle.params.values[static_cast<size_t>(p)].shape);

  // the augmentation pipeline is the synthesizer's preprocessing family
  SynthesisConfig prep_cfg;
  prep_cfg.smooth = cfg.augment;
  prep_cfg.flip = cfg.augment;
  prep_cfg.crop = cfg.augment;
  prep_cfg.crop_margin = -1;

  const int64_t count = train_ds.count();
  const int64_t per_img = static_cast<int64_t>(spec.channels) * spec.height * spec.width;
  const int margin = prep_cfg.effective_margin(spec);
  std::vector<int64_t> order(static_cast<size_t>(count));
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 1; epoch <= cfg.epochs + cfg.stat_epochs; ++epoch) {
    const bool stat_only = epoch > cfg.epochs;
    Rng erng = root.fork(0x50AB, static_cast<uint64_t>(epoch));
    erng.shuffle(order);
    const int64_t steps = count / cfg.batch;
    for (int64_t s = 0; s < steps; ++s) {
      Tensor in({cfg.batch, spec.channels, spec.height, spec.width});
      Tensor labels({cfg.batch});
      Rng arng = root.fork(0xA0C, static_cast<uint64_t>(epoch), static_cast<uint64_t>(s));
      for (int b = 0; b < cfg.batch; ++b) {
        const int64_t idx = order[static_cast<size_t>(s * cfg.batch + b)];
        Tensor img = train_ds.image(idx);
        if (cfg.augment) {
          const PrepDraw d = draw_prep(arng, prep_cfg, margin);
          img = preprocess(img, d, prep_cfg, spec.height, spec.width, /*pad_first=*/true);
        }
        std::memcpy(in.ptr() + b * per_img, img.ptr(), static_cast<size_t>(per_img) * sizeof(float));
        labels[b] = static_cast<float>(train_ds.labels[static_cast<size_t>(idx)]);
      }

      Workspace ws;
      Bindings<float> bind = {{net.input, &in}, {net.labels, &labels}};
      try {
        forward(net.g, bundle.params, bind, ws, {net.loss});
        backward(net.g, bundle.params, ws, net.loss, /*train_params=*/true);
      } catch (const Error& e) {
        if (e.kind() == ErrorKind::Numeric)
          fail(ErrorKind::Training,
               "training diverged at epoch " + std::to_string(epoch) + ": " + e.what());
        throw;
      }

      for (int p = 0; p < bundle.params.size(); ++p) {
        if (!bundle.params.trainable[static_cast<size_t>(p)]) continue;
        const int node = param_node[static_cast<size_t>(p)];
        if (node < 0 || !ws.has_grad[static_cast<size_t>(node)]) continue;
        const Tensor& grad = ws.gradient(node);
        Tensor& vel = velocity[static_cast<size_t>(p)];
        Tensor& val = bundle.params.values[static_cast<size_t>(p)];
        for (int64_t i = 0; i < val.numel(); ++i) {
          vel[i] = static_cast<float>(cfg.momentum * vel[i] - cfg.lr * grad[i]);
          val[i] += vel[i];
        }
      }

      // EMA of the batch statistics into the frozen running stats
      for (size_t l = 0; l < bundle.bn.size(); ++l) {
        const auto& saved = ws.bn_saved.at(net.bn_nodes[l]);
        Tensor& mu = bundle.params.values[static_cast<size_t>(bundle.bn[l].mu)];
        Tensor& var = bundle.params.values[static_cast<size_t>(bundle.bn[l].var)];
        const double m = cfg.bn_momentum;
        for (int64_t c = 0; c < mu.numel(); ++c) {
          mu[c] = static_cast<float>((1.0 - m) * mu[c] + m * saved.first[static_cast<size_t>(c)]);
          var[c] = static_cast<float>((1.0 - m) * var[c] + m * saved.second[static_cast<size_t>(c)]);
        }
      }
    }
  }

  bundle.val_accuracy = eval_accuracy(bundle, val_ds);
  return bundle;
}

}  // namespace dgh
