// SPDX-License-Identifier: Apache-2.0
#include "dgh/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>

#include <json.hpp>

#include "dgh/error.hpp"
#include "dgh/serialize.hpp"

namespace dgh {

using nlohmann::json;

Tensor LabeledDataset::image(int64_t i) const {
  const int64_t C = images.shape[1], H = images.shape[2], W = images.shape[3];
  Tensor out({1, C, H, W});
  std::memcpy(out.ptr(), images.ptr() + i * C * H * W,
              static_cast<size_t>(C * H * W) * sizeof(float));
  return out;
}

namespace {

struct Rgb {
  double r, g, b;
};

Rgb hsv_to_rgb(double h, double s, double v) {
  h = h - std::floor(h);
  const double c = v * s;
  const double hp = h * 6.0;
  const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  if (hp < 1) r = c, g = x;
  else if (hp < 2) r = x, g = c;
  else if (hp < 3) g = c, b = x;
  else if (hp < 4) g = x, b = c;
  else if (hp < 5) r = x, b = c;
  else r = c, b = x;
  const double m = v - c;
  return {r + m, g + m, b + m};
}

// signed distance (pixels) to the shape boundary; negative inside
double shape_sdf(int shape, double px, double py, double r, double rot) {
  const double ca = std::cos(-rot), sa = std::sin(-rot);
  const double x = ca * px - sa * py;
  const double y = sa * px + ca * py;
  switch (shape) {
    case 0:  // disk
      return std::hypot(x, y) - r;
    case 1:  // square
      return std::max(std::abs(x), std::abs(y)) - r * 0.85;
    case 2: {  // equilateral triangle (circumradius r), apex up
      double d = -1e9;
      for (int i = 0; i < 3; ++i) {
        const double a = 1.57079632679 + 2.0943951023931953 * i;  // 90 + i*120 deg
        // edge normal points outward, opposite the vertex
        const double nx = -std::cos(a), ny = std::sin(a);
        d = std::max(d, nx * x + ny * y - r * 0.5);
      }
      return d;
    }
    case 3:  // ring
      return std::abs(std::hypot(x, y) - r * 0.72) - r * 0.3;
    case 4: {  // plus
      const double band = r * 0.38;
      const double d1 = std::max(std::abs(x) - r, std::abs(y) - band);
      const double d2 = std::max(std::abs(x) - band, std::abs(y) - r);
      return std::min(d1, d2);
    }
  }
  return 1e9;
}

}  // namespace

LabeledDataset make_shapes_dataset(int64_t count, uint64_t seed, const std::string& split) {
  const int H = 32, W = 32, C = 3;
  LabeledDataset ds;
  ds.images = Tensor({count, C, H, W});
  ds.labels.resize(static_cast<size_t>(count));
  ds.num_classes = kShapesNumClasses;
  ds.split = split;

  Rng root(seed);
  for (int64_t i = 0; i < count; ++i) {
    Rng rng = root.fork(static_cast<uint64_t>(i), 0x5A);
    const int label = static_cast<int>(rng.uniform_int(kShapesNumClasses));
    const int shape = label % 5;
    const int family = label / 5;  // 0: warm hues, 1: cool hues
    const double hue = family == 0 ? rng.uniform(0.0, 0.16) : rng.uniform(0.5, 0.66);
    const Rgb fg = hsv_to_rgb(hue, rng.uniform(0.65, 1.0), rng.uniform(0.7, 1.0));
    const double bg_v = rng.uniform(0.15, 0.6);
    const Rgb bg = hsv_to_rgb(rng.uniform(), rng.uniform(0.0, 0.2), bg_v);
    const double cx = W / 2.0 + rng.uniform(-4.0, 4.0);
    const double cy = H / 2.0 + rng.uniform(-4.0, 4.0);
    const double r = rng.uniform(7.0, 11.0);
    const double rot = rng.uniform(-0.3, 0.3);

    for (int y = 0; y < H; ++y) {
      for (int x = 0; x < W; ++x) {
        const double d = shape_sdf(shape, x + 0.5 - cx, y + 0.5 - cy, r, rot);
        const double alpha = std::clamp(0.5 - d, 0.0, 1.0);
        const double noise = rng.normal(0.0, 0.025);
        double px[3] = {bg.r * (1 - alpha) + fg.r * alpha + noise,
                        bg.g * (1 - alpha) + fg.g * alpha + noise,
                        bg.b * (1 - alpha) + fg.b * alpha + noise};
        for (int c = 0; c < 3; ++c) {
          const double v = std::clamp(px[c], 0.0, 1.0);
          ds.images.at(i, c, y, x) = static_cast<float>((v - 0.5) / 0.25);
        }
      }
    }
    ds.labels[static_cast<size_t>(i)] = label;
  }
  return ds;
}

void save_dataset(const LabeledDataset& ds, const std::string& dir, const std::string& name) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const std::string img_file = name + "_images.f32";
  const std::string lab_file = name + "_labels.i32";
  atomic_write_file((fs::path(dir) / img_file).string(), tensor_blob(ds.images));
  atomic_write_file((fs::path(dir) / lab_file).string(), labels_blob(ds.labels));
  json m;
  m["format_version"] = 1;
  m["kind"] = "labeled_dataset";
  m["split"] = ds.split;
  m["count"] = ds.images.shape[0];
  m["channels"] = ds.images.shape[1];
  m["height"] = ds.images.shape[2];
  m["width"] = ds.images.shape[3];
  m["num_classes"] = ds.num_classes;
  m["images"] = img_file;
  m["labels"] = lab_file;
  atomic_write_file((fs::path(dir) / (name + ".json")).string(), m.dump(2) + "\n");
}

LabeledDataset load_dataset(const std::string& manifest_path) {
  namespace fs = std::filesystem;
  json m;
  try {
    m = json::parse(read_file(manifest_path));
  } catch (const json::exception& e) {
    fail(ErrorKind::Io, "bad dataset manifest " + manifest_path + ": " + e.what());
  }
  if (m.value("format_version", 0) != 1)
    fail(ErrorKind::Version, "dataset manifest version " +
                                 std::to_string(m.value("format_version", 0)) +
                                 " unsupported (reader supports 1)");
  const fs::path dir = fs::path(manifest_path).parent_path();
  LabeledDataset ds;
  ds.split = m.value("split", "");
  ds.num_classes = m.at("num_classes").get<int>();
  std::vector<int64_t> shape = {m.at("count").get<int64_t>(), m.at("channels").get<int64_t>(),
                                m.at("height").get<int64_t>(), m.at("width").get<int64_t>()};
  const std::string img_blob = read_file((dir / m.at("images").get<std::string>()).string());
  ds.images = tensor_from_blob(img_blob, shape);
  const std::string lab_blob = read_file((dir / m.at("labels").get<std::string>()).string());
  ds.labels = labels_from_blob(lab_blob);
  if (static_cast<int64_t>(ds.labels.size()) != shape[0])
    fail(ErrorKind::Checksum, "label count does not match image count");
  for (int32_t l : ds.labels)
    if (l < 0 || l >= ds.num_classes) fail(ErrorKind::Checksum, "label out of declared range");
  return ds;
}

}  // namespace dgh
