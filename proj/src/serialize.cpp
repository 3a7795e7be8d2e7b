// SPDX-License-Identifier: Apache-2.0
#include "dgh/serialize.hpp"

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "dgh/error.hpp"

namespace dgh {

uint32_t crc32(const uint8_t* data, size_t len, uint32_t seed) {
  static uint32_t table[256];
  static bool init = false;
  if (!init) {
    for (uint32_t i = 0; i < 256; ++i) {
      uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      table[i] = c;
    }
    init = true;
  }
  uint32_t c = seed ^ 0xFFFFFFFFu;
  for (size_t i = 0; i < len; ++i) c = table[(c ^ data[i]) & 0xFF] ^ (c >> 8);
  return c ^ 0xFFFFFFFFu;
}

void atomic_write_file(const std::string& path, const std::string& contents) {
  namespace fs = std::filesystem;
  fs::path target(path);
  if (target.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(target.parent_path(), ec);
  }
  fs::path tmp = target;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) fail(ErrorKind::Io, "cannot open for write: " + tmp.string());
    os.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!os) fail(ErrorKind::Io, "write failed: " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, target, ec);
  if (ec) fail(ErrorKind::Io, "rename failed: " + target.string() + ": " + ec.message());
}

std::string read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorKind::Io, "cannot open: " + path);
  std::string out((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return out;
}

bool file_exists(const std::string& path) { return std::filesystem::exists(path); }

std::string tensor_blob(const Tensor& t) {
  std::string out;
  append_tensor_blob(out, t);
  return out;
}

void append_tensor_blob(std::string& out, const Tensor& t) {
  // float32 little-endian; this toolkit targets little-endian hosts
  static_assert(sizeof(float) == 4);
  const size_t n = t.data.size() * sizeof(float);
  const size_t pos = out.size();
  out.resize(pos + n);
  std::memcpy(out.data() + pos, t.data.data(), n);
}

Tensor tensor_from_blob(const std::string& blob, std::vector<int64_t> shape, size_t offset) {
  Tensor t(shape);
  const size_t n = t.data.size() * sizeof(float);
  if (offset + n > blob.size())
    fail(ErrorKind::Checksum, "tensor blob shorter than declared shape");
  std::memcpy(t.data.data(), blob.data() + offset, n);
  return t;
}

std::string labels_blob(const std::vector<int32_t>& labels) {
  std::string out(labels.size() * sizeof(int32_t), '\0');
  std::memcpy(out.data(), labels.data(), out.size());
  return out;
}

std::vector<int32_t> labels_from_blob(const std::string& blob) {
  if (blob.size() % sizeof(int32_t) != 0)
    fail(ErrorKind::Checksum, "label blob size not a multiple of 4");
  std::vector<int32_t> out(blob.size() / sizeof(int32_t));
  std::memcpy(out.data(), blob.data(), blob.size());
  return out;
}

}  // namespace dgh

// ---------------------------------------------------------------------------
// model container: magic, u32 header length, JSON header, float32 blobs in
// header-declared order, trailing CRC32 over everything before it
// ---------------------------------------------------------------------------

#include <json.hpp>

#include "dgh/train.hpp"

namespace dgh {

namespace {

constexpr char kMagic[4] = {'D', 'G', 'H', 'M'};
constexpr int kModelFormatVersion = 1;

void put_u32(std::string& out, uint32_t v) {
  out.push_back(static_cast<char>(v & 0xFF));
  out.push_back(static_cast<char>((v >> 8) & 0xFF));
  out.push_back(static_cast<char>((v >> 16) & 0xFF));
  out.push_back(static_cast<char>((v >> 24) & 0xFF));
}

uint32_t get_u32(const std::string& s, size_t at) {
  return static_cast<uint32_t>(static_cast<uint8_t>(s[at])) |
         (static_cast<uint32_t>(static_cast<uint8_t>(s[at + 1])) << 8) |
         (static_cast<uint32_t>(static_cast<uint8_t>(s[at + 2])) << 16) |
         (static_cast<uint32_t>(static_cast<uint8_t>(s[at + 3])) << 24);
}

}  // namespace

void save_model(const ModelBundle& bundle, const std::string& path) {
  using nlohmann::json;
  json h;
  h["format_version"] = kModelFormatVersion;
  h["arch"] = bundle.arch;
  h["num_classes"] = bundle.num_classes;
  h["bn_eps"] = bundle.bn_eps;
  h["ema_momentum"] = bundle.ema_momentum;
  h["val_accuracy"] = bundle.val_accuracy;
  h["train_seed"] = bundle.train_seed;
  h["train_epochs"] = bundle.train_epochs;
  h["trained_with_augment"] = bundle.trained_with_augment;
  h["input_spec"] = {{"channels", bundle.input_spec.channels},
                     {"height", bundle.input_spec.height},
                     {"width", bundle.input_spec.width},
                     {"lo", bundle.input_spec.lo},
                     {"hi", bundle.input_spec.hi}};
  json params = json::array();
  uint64_t offset = 0;
  for (int p = 0; p < bundle.params.size(); ++p) {
    const Tensor& t = bundle.params.values[static_cast<size_t>(p)];
    json e;
    e["name"] = bundle.params.names[static_cast<size_t>(p)];
    e["shape"] = t.shape;
    e["trainable"] = static_cast<bool>(bundle.params.trainable[static_cast<size_t>(p)]);
    e["offset"] = offset;
    e["nbytes"] = t.data.size() * sizeof(float);
    offset += t.data.size() * sizeof(float);
    params.push_back(e);
  }
  h["params"] = params;
  json bn = json::array();
  for (const auto& meta : bundle.bn)
    bn.push_back({{"prefix", meta.prefix}, {"channels", meta.channels}});
  h["bn_layers"] = bn;

  const std::string header = h.dump();
  std::string out(kMagic, 4);
  put_u32(out, static_cast<uint32_t>(header.size()));
  out += header;
  for (const auto& t : bundle.params.values) append_tensor_blob(out, t);
  const uint32_t crc = crc32(reinterpret_cast<const uint8_t*>(out.data()), out.size());
  put_u32(out, crc);
  atomic_write_file(path, out);
}

ModelBundle load_model(const std::string& path) {
  using nlohmann::json;
  const std::string raw = read_file(path);
  if (raw.size() < 12 || std::memcmp(raw.data(), kMagic, 4) != 0)
    fail(ErrorKind::Checksum, "not a model file (bad magic or truncated): " + path);
  const uint32_t stored_crc = get_u32(raw, raw.size() - 4);
  const uint32_t actual_crc =
      crc32(reinterpret_cast<const uint8_t*>(raw.data()), raw.size() - 4);
  if (stored_crc != actual_crc)
    fail(ErrorKind::Checksum, "checksum mismatch (corrupt or truncated file): " + path);
  const uint32_t hlen = get_u32(raw, 4);
  if (8 + static_cast<size_t>(hlen) + 4 > raw.size())
    fail(ErrorKind::Checksum, "declared header exceeds file size: " + path);
  json h;
  try {
    h = json::parse(raw.substr(8, hlen));
  } catch (const json::exception& e) {
    fail(ErrorKind::Checksum, std::string("bad model header: ") + e.what());
  }
  const int ver = h.value("format_version", -1);
  if (ver != kModelFormatVersion)
    fail(ErrorKind::Version, "model format version " + std::to_string(ver) +
                                 " not supported (reader supports " +
                                 std::to_string(kModelFormatVersion) + ")");

  InputSpec spec;
  spec.channels = h.at("input_spec").at("channels").get<int>();
  spec.height = h.at("input_spec").at("height").get<int>();
  spec.width = h.at("input_spec").at("width").get<int>();
  spec.lo = h.at("input_spec").at("lo").get<float>();
  spec.hi = h.at("input_spec").at("hi").get<float>();

  ModelBundle b = build_model(h.at("arch").get<std::string>(), spec,
                              h.at("num_classes").get<int>(), /*init_seed=*/0);
  b.bn_eps = h.at("bn_eps").get<double>();
  b.ema_momentum = h.at("ema_momentum").get<double>();
  b.val_accuracy = h.value("val_accuracy", -1.0);
  b.train_seed = h.value("train_seed", 0ull);
  b.train_epochs = h.value("train_epochs", 0);
  b.trained_with_augment = h.value("trained_with_augment", false);

  const size_t blob_base = 8 + hlen;
  for (const auto& e : h.at("params")) {
    const std::string name = e.at("name").get<std::string>();
    const int p = b.params.find(name);
    if (p < 0) fail(ErrorKind::Checksum, "file parameter not in architecture: " + name);
    std::vector<int64_t> shape = e.at("shape").get<std::vector<int64_t>>();
    Tensor& dst = b.params.values[static_cast<size_t>(p)];
    if (shape != dst.shape)
      fail(ErrorKind::Checksum, "parameter shape mismatch for " + name);
    const size_t off = blob_base + e.at("offset").get<size_t>();
    dst = tensor_from_blob(raw, shape, off);
  }
  return b;
}

}  // namespace dgh
