// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <numeric>

#include "dgh/serialize.hpp"
#include "dgh/stats.hpp"
#include "dgh/synth.hpp"
#include "dgh/train.hpp"

using namespace dgh;
namespace fs = std::filesystem;

namespace {

std::string temp_dir() {
  static int counter = 0;
  fs::path p = fs::temp_directory_path() / ("dgh_zoo_" + std::to_string(++counter));
  fs::create_directories(p);
  return p.string();
}

uint64_t param_hash(const ParamStore& ps) {
  std::string blob;
  for (const auto& t : ps.values) append_tensor_blob(blob, t);
  uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : blob) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

}  // namespace

TEST_CASE("one gradient step with EMA momentum 1 freezes that batch's statistics") {
  LabeledDataset tr = make_shapes_dataset(32, 5, "train");
  LabeledDataset va = make_shapes_dataset(32, 6, "val");
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch = 32;  // single step over the whole set
  cfg.bn_momentum = 1.0;
  cfg.augment = false;
  const uint64_t seed = 7;
  ModelBundle m = train_reference_model("tiny-vgg", tr, va, cfg, seed);

  // replay the step's forward pass under the pre-update weights and compare
  // the BnTrain saved moments against the frozen targets
  Rng root(seed);
  ModelBundle fresh = build_model("tiny-vgg", m.input_spec, tr.num_classes, root.fork(0x1E17).u64());
  std::vector<int64_t> order(32);
  std::iota(order.begin(), order.end(), 0);
  Rng erng = root.fork(0x50AB, 1);
  erng.shuffle(order);

  const auto& spec = m.input_spec;
  const int64_t per = static_cast<int64_t>(spec.channels) * spec.height * spec.width;
  Tensor in({32, spec.channels, spec.height, spec.width});
  Tensor labels({32});
  for (int b = 0; b < 32; ++b) {
    Tensor img = tr.image(order[static_cast<size_t>(b)]);
    std::memcpy(in.ptr() + b * per, img.ptr(), static_cast<size_t>(per) * sizeof(float));
    labels[b] = static_cast<float>(tr.labels[static_cast<size_t>(order[static_cast<size_t>(b)])]);
  }
  TrainNet net = fresh.train_net(32);
  Workspace ws;
  forward(net.g, fresh.params, {{net.input, &in}, {net.labels, &labels}}, ws, {net.loss});

  for (size_t l = 0; l < m.bn.size(); ++l) {
    const auto& saved = ws.bn_saved.at(net.bn_nodes[l]);
    const Tensor& mu = m.params.values[static_cast<size_t>(m.bn[l].mu)];
    const Tensor& var = m.params.values[static_cast<size_t>(m.bn[l].var)];
    for (int64_t c = 0; c < mu.numel(); ++c) {
      CHECK(mu[c] == saved.first[static_cast<size_t>(c)]);
      CHECK(var[c] == saved.second[static_cast<size_t>(c)]);
    }
  }
}

TEST_CASE("toy training reaches well above chance accuracy") {
  LabeledDataset tr = make_shapes_dataset(1920, 42, "train");
  LabeledDataset va = make_shapes_dataset(480, 43, "val");
  TrainConfig cfg;
  cfg.epochs = 6;
  cfg.lr = 0.1;
  ModelBundle m = train_reference_model("tiny-resnet", tr, va, cfg, 44);
  INFO("val accuracy ", m.val_accuracy);
  CHECK(m.val_accuracy > 0.8);
}

TEST_CASE("fixed seed reproduces a bit-identical bundle") {
  LabeledDataset tr = make_shapes_dataset(128, 42, "train");
  LabeledDataset va = make_shapes_dataset(64, 43, "val");
  TrainConfig cfg;
  cfg.epochs = 1;
  ModelBundle a = train_reference_model("tiny-resnet", tr, va, cfg, 9);
  ModelBundle b = train_reference_model("tiny-resnet", tr, va, cfg, 9);
  CHECK(param_hash(a.params) == param_hash(b.params));
  ModelBundle c = train_reference_model("tiny-resnet", tr, va, cfg, 10);
  CHECK(param_hash(a.params) != param_hash(c.params));
}

TEST_CASE("save/load roundtrip is bit-exact") {
  LabeledDataset tr = make_shapes_dataset(64, 1, "train");
  LabeledDataset va = make_shapes_dataset(32, 2, "val");
  TrainConfig cfg;
  cfg.epochs = 1;
  ModelBundle m = train_reference_model("tiny-vgg", tr, va, cfg, 3);
  const std::string path = temp_dir() + "/model.dghm";
  save_model(m, path);
  ModelBundle r = load_model(path);
  CHECK(r.arch == m.arch);
  CHECK(param_hash(r.params) == param_hash(m.params));
  CHECK(r.bn_eps == m.bn_eps);
  CHECK(r.ema_momentum == m.ema_momentum);
  CHECK(r.val_accuracy == m.val_accuracy);
  CHECK(r.bn.size() == m.bn.size());
}

TEST_CASE("truncated model file raises a checksum error, not a crash") {
  LabeledDataset tr = make_shapes_dataset(32, 1, "train");
  LabeledDataset va = make_shapes_dataset(32, 2, "val");
  TrainConfig cfg;
  cfg.epochs = 1;
  ModelBundle m = train_reference_model("tiny-mlp", tr, va, cfg, 3);
  const std::string dir = temp_dir();
  const std::string path = dir + "/model.dghm";
  save_model(m, path);
  const std::string raw = read_file(path);
  atomic_write_file(dir + "/trunc.dghm", raw.substr(0, raw.size() / 2));
  try {
    load_model(dir + "/trunc.dghm");
    FAIL("expected checksum error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Checksum);
  }
  // single corrupted byte in the blob region
  std::string bad = raw;
  bad[bad.size() / 2] = static_cast<char>(bad[bad.size() / 2] ^ 0x5A);
  atomic_write_file(dir + "/bad.dghm", bad);
  try {
    load_model(dir + "/bad.dghm");
    FAIL("expected checksum error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Checksum);
  }
}

TEST_CASE("future format version raises a version error naming both versions") {
  LabeledDataset tr = make_shapes_dataset(32, 1, "train");
  LabeledDataset va = make_shapes_dataset(32, 2, "val");
  TrainConfig cfg;
  cfg.epochs = 1;
  ModelBundle m = train_reference_model("tiny-mlp", tr, va, cfg, 3);
  const std::string dir = temp_dir();
  save_model(m, dir + "/model.dghm");
  std::string raw = read_file(dir + "/model.dghm");
  const size_t at = raw.find("\"format_version\":1");
  REQUIRE(at != std::string::npos);
  raw.replace(at, 18, "\"format_version\":3");
  // refresh the trailing checksum so only the version differs
  const uint32_t crc = crc32(reinterpret_cast<const uint8_t*>(raw.data()), raw.size() - 4);
  raw[raw.size() - 4] = static_cast<char>(crc & 0xFF);
  raw[raw.size() - 3] = static_cast<char>((crc >> 8) & 0xFF);
  raw[raw.size() - 2] = static_cast<char>((crc >> 16) & 0xFF);
  raw[raw.size() - 1] = static_cast<char>((crc >> 24) & 0xFF);
  atomic_write_file(dir + "/future.dghm", raw);
  try {
    load_model(dir + "/future.dghm");
    FAIL("expected version error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Version);
    const std::string msg = e.what();
    CHECK(msg.find("3") != std::string::npos);
    CHECK(msg.find("1") != std::string::npos);
  }
}

TEST_CASE("collect_bn_targets returns ordered frozen statistics") {
  InputSpec spec;
  ModelBundle m = build_model("tiny-resnet", spec, 10, 1);
  auto targets = collect_bn_targets(m);
  REQUIRE(targets.size() == 7);  // stem + 3 blocks x 2
  for (size_t l = 0; l < targets.size(); ++l) {
    CHECK(targets[l].layer_index == static_cast<int>(l) + 1);
    CHECK(targets[l].mu.size() == static_cast<size_t>(m.bn[l].channels));
    CHECK(targets[l].sigma.size() == static_cast<size_t>(m.bn[l].channels));
    for (double v : targets[l].sigma) CHECK(v >= 0.0);
  }
  ModelBundle vgg = build_model("tiny-vgg", spec, 10, 1);
  auto vt = collect_bn_targets(vgg);
  CHECK(vt.size() == 4);
  CHECK(vt[1].mu.size() == 16);
  CHECK(vt[1].sigma.size() == 16);
}

TEST_CASE("models with zero BN layers are rejected for statistic matching") {
  InputSpec spec;
  ModelBundle m = build_model("tiny-mlp", spec, 10, 1);
  CHECK(m.bn_layer_count() == 0);
  try {
    collect_bn_targets(m);
    FAIL("expected unsupported-model error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Unsupported);
  }
}

TEST_CASE("BN layer count matches the graph's BN node count") {
  InputSpec spec;
  for (const std::string arch : {"tiny-resnet", "tiny-vgg"}) {
    ModelBundle m = build_model(arch, spec, 10, 1);
    InferNet net = m.infer_net(2);
    int bn_nodes = 0;
    for (int id = 0; id < net.g.size(); ++id)
      if (net.g.node(id).op == Op::BnInf) ++bn_nodes;
    CHECK(bn_nodes == m.bn_layer_count());
    CHECK(net.taps.size() == static_cast<size_t>(m.bn_layer_count()));
  }
}

TEST_CASE("graph node ids are stable across batch sizes") {
  InputSpec spec;
  ModelBundle m = build_model("tiny-resnet", spec, 10, 1);
  InferNet a = m.infer_net(1);
  InferNet b = m.infer_net(16);
  REQUIRE(a.g.size() == b.g.size());
  CHECK(a.logits == b.logits);
  CHECK(a.taps == b.taps);
  for (int id = 0; id < a.g.size(); ++id) CHECK(a.g.node(id).op == b.g.node(id).op);
}

TEST_CASE("trained targets track the augmented training distribution within tolerance") {
  LabeledDataset tr = make_shapes_dataset(1280, 42, "train");
  LabeledDataset va = make_shapes_dataset(256, 43, "val");
  TrainConfig cfg;
  cfg.epochs = 5;
  cfg.lr = 0.1;
  ModelBundle m = train_reference_model("tiny-resnet", tr, va, cfg, 44);
  auto targets = collect_bn_targets(m);

  // recompute empirical statistics over a fresh augmented pass
  SynthesisConfig prep;
  const InputSpec& spec = m.input_spec;
  const int margin = prep.effective_margin(spec);
  Rng rng(99);
  std::vector<Tensor> images;
  for (int64_t i = 0; i < tr.count(); ++i) {
    const PrepDraw d = draw_prep(rng, prep, margin);
    images.push_back(preprocess(tr.image(i), d, prep, spec.height, spec.width, true));
  }
  GlobalStats stats = full_set_stats(m, images, 64);

  // EMA tolerance: per-layer relative L2 gap within 5%
  for (size_t l = 0; l < targets.size(); ++l) {
    double gap_mu = 0, norm_mu = 0, gap_var = 0, norm_var = 0;
    for (size_t c = 0; c < targets[l].mu.size(); ++c) {
      gap_mu += std::pow(stats.mean[l][c] - targets[l].mu[c], 2);
      norm_mu += std::pow(stats.mean[l][c], 2);
      gap_var += std::pow(stats.var[l][c] - targets[l].sigma[c], 2);
      norm_var += std::pow(stats.var[l][c], 2);
    }
    INFO("layer ", l + 1, " mu rel ", std::sqrt(gap_mu / std::max(norm_mu, 1e-12)), " var rel ",
         std::sqrt(gap_var / std::max(norm_var, 1e-12)));
    CHECK(std::sqrt(gap_mu / std::max(norm_mu, 1e-12)) < 0.05);
    CHECK(std::sqrt(gap_var / std::max(norm_var, 1e-12)) < 0.05);
  }
}

TEST_CASE("dataset manifests roundtrip") {
  LabeledDataset ds = make_shapes_dataset(48, 11, "train");
  const std::string dir = temp_dir();
  save_dataset(ds, dir, "train");
  LabeledDataset r = load_dataset(dir + "/train.json");
  CHECK(r.images.data == ds.images.data);
  CHECK(r.labels == ds.labels);
  CHECK(r.num_classes == ds.num_classes);
  CHECK(r.split == "train");
}

TEST_CASE("shapes dataset is deterministic and within its declared range") {
  LabeledDataset a = make_shapes_dataset(256, 5, "train");
  LabeledDataset b = make_shapes_dataset(256, 5, "train");
  CHECK(a.images.data == b.images.data);
  CHECK(a.labels == b.labels);
  std::vector<int> counts(10, 0);
  for (int32_t l : a.labels) counts[static_cast<size_t>(l)]++;
  for (int c : counts) CHECK(c > 8);  // rough balance out of 25.6 expected
  for (float v : a.images.data) {
    CHECK(v >= -2.0f);
    CHECK(v <= 2.0f);
  }
}
