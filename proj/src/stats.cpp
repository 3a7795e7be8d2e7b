// SPDX-License-Identifier: Apache-2.0
#include "dgh/stats.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>

#include "dgh/error.hpp"

namespace dgh {

ChannelStats batch_stats(const Tensor& feature_map) {
  if (feature_map.rank() != 4 || feature_map.shape[0] < 1)
    fail(ErrorKind::Shape, "batch_stats expects a non-empty NCHW feature map");
  const int64_t N = feature_map.shape[0], C = feature_map.shape[1];
  const int64_t HW = feature_map.shape[2] * feature_map.shape[3];
  if (HW < 1) fail(ErrorKind::Shape, "batch_stats expects spatial size >= 1");
  ChannelStats out;
  out.mean.assign(static_cast<size_t>(C), 0.0);
  out.second_moment.assign(static_cast<size_t>(C), 0.0);
  out.variance.assign(static_cast<size_t>(C), 0.0);
  for (int64_t n = 0; n < N; ++n) {
    for (int64_t c = 0; c < C; ++c) {
      const float* row = feature_map.ptr() + (n * C + c) * HW;
      double s1 = 0, s2 = 0;
      for (int64_t i = 0; i < HW; ++i) {
        const double v = row[i];
        s1 += v;
        s2 += v * v;
      }
      out.mean[static_cast<size_t>(c)] += s1;
      out.second_moment[static_cast<size_t>(c)] += s2;
    }
  }
  const double inv = 1.0 / static_cast<double>(N * HW);
  for (int64_t c = 0; c < C; ++c) {
    auto& m = out.mean[static_cast<size_t>(c)];
    auto& m2 = out.second_moment[static_cast<size_t>(c)];
    m *= inv;
    m2 *= inv;
    out.variance[static_cast<size_t>(c)] = m2 - m * m;
  }
  return out;
}

GlobalStatStore::GlobalStatStore(int n_batches, int batch_size, std::vector<int> channels)
    : n_(n_batches), k_(batch_size), channels_(std::move(channels)) {
  if (n_ < 1 || k_ < 1) fail(ErrorKind::Config, "store needs at least one batch of one image");
  records_.resize(static_cast<size_t>(n_));
}

void GlobalStatStore::check_record(const BatchStats& rec) const {
  if (rec.layers() != static_cast<int>(channels_.size()))
    fail(ErrorKind::Shape, "record layer count " + std::to_string(rec.layers()) +
                               " does not match store layout " + std::to_string(channels_.size()));
  for (size_t l = 0; l < channels_.size(); ++l) {
    if (static_cast<int>(rec.mean[l].size()) != channels_[l] ||
        static_cast<int>(rec.m2[l].size()) != channels_[l])
      fail(ErrorKind::Shape, "record channel count mismatch at layer " + std::to_string(l + 1));
  }
}

void GlobalStatStore::replace_record(int n, BatchStats rec) {
  if (n < 0 || n >= n_)
    fail(ErrorKind::Usage, "batch index " + std::to_string(n) + " out of range [0," +
                               std::to_string(n_ - 1) + "]");
  check_record(rec);
  std::lock_guard<std::mutex> lock(mu_);
  records_[static_cast<size_t>(n)] = std::move(rec);
  stale_ = true;
}

bool GlobalStatStore::complete() const {
  std::lock_guard<std::mutex> lock(mu_);
  for (const auto& r : records_)
    if (!r) return false;
  return true;
}

BatchStats GlobalStatStore::record(int n) const {
  if (n < 0 || n >= n_) fail(ErrorKind::Usage, "batch index out of range");
  std::lock_guard<std::mutex> lock(mu_);
  if (!records_[static_cast<size_t>(n)]) fail(ErrorKind::Usage, "record not yet stored");
  return *records_[static_cast<size_t>(n)];
}

BatchStats GlobalStatStore::sums_excluding(int exclude) const {
  std::lock_guard<std::mutex> lock(mu_);
  BatchStats out;
  out.mean.resize(channels_.size());
  out.m2.resize(channels_.size());
  for (size_t l = 0; l < channels_.size(); ++l) {
    out.mean[l].assign(static_cast<size_t>(channels_[l]), 0.0);
    out.m2[l].assign(static_cast<size_t>(channels_[l]), 0.0);
  }
  for (int n = 0; n < n_; ++n) {
    if (n == exclude) continue;
    const auto& r = records_[static_cast<size_t>(n)];
    if (!r) fail(ErrorKind::Usage, "record " + std::to_string(n) + " not yet stored");
    for (size_t l = 0; l < channels_.size(); ++l)
      for (size_t c = 0; c < r->mean[l].size(); ++c) {
        out.mean[l][c] += r->mean[l][c];
        out.m2[l][c] += r->m2[l][c];
      }
  }
  return out;
}

GlobalStats GlobalStatStore::aggregate() const {
  BatchStats sums = sums_excluding(-1);
  GlobalStats g;
  g.mean.resize(channels_.size());
  g.var.resize(channels_.size());
  const double inv = 1.0 / static_cast<double>(n_);
  bool warned = false;
  for (size_t l = 0; l < channels_.size(); ++l) {
    g.mean[l].resize(static_cast<size_t>(channels_[l]));
    g.var[l].resize(static_cast<size_t>(channels_[l]));
    for (size_t c = 0; c < g.mean[l].size(); ++c) {
      const double m = sums.mean[l][c] * inv;
      double v = sums.m2[l][c] * inv - m * m;
      if (v < 0) {
        if (v < -1e-9 && !warned) {
          std::fprintf(stderr,
                       "warning: derived variance %.3e at layer %zu channel %zu clamped to 0\n", v,
                       l + 1, c);
          warned = true;
        }
        v = 0;
      }
      g.mean[l][c] = m;
      g.var[l][c] = v;
    }
  }
  std::lock_guard<std::mutex> lock(mu_);
  stale_ = false;
  return g;
}

double bns_loss(const GlobalStats& global, const std::vector<BnTarget>& targets) {
  if (global.mean.size() != targets.size())
    fail(ErrorKind::Shape, "layer count mismatch: stats " + std::to_string(global.mean.size()) +
                               " vs targets " + std::to_string(targets.size()));
  double total = 0;
  for (size_t l = 0; l < targets.size(); ++l) {
    if (global.mean[l].size() != targets[l].mu.size())
      fail(ErrorKind::Shape, "channel count mismatch at layer " + std::to_string(l + 1));
    for (size_t c = 0; c < global.mean[l].size(); ++c) {
      const double dm = global.mean[l][c] - targets[l].mu[c];
      const double dv = global.var[l][c] - targets[l].sigma[c];
      total += dm * dm + dv * dv;
    }
  }
  return total;
}

BatchStats record_from_taps(const Workspace& ws, const std::vector<int>& taps) {
  BatchStats rec;
  rec.mean.reserve(taps.size());
  rec.m2.reserve(taps.size());
  for (int tap : taps) {
    ChannelStats cs = batch_stats(ws.value(tap));
    rec.mean.push_back(std::move(cs.mean));
    rec.m2.push_back(std::move(cs.second_moment));
  }
  return rec;
}

GlobalStats full_set_stats(const ModelBundle& bundle, const std::vector<Tensor>& images,
                           int batch) {
  if (images.empty()) fail(ErrorKind::Usage, "empty image set");
  const int64_t C = images[0].shape[1], H = images[0].shape[2], W = images[0].shape[3];
  const int L = bundle.bn_layer_count();
  std::vector<std::vector<double>> s1(static_cast<size_t>(L)), s2(static_cast<size_t>(L));
  std::vector<int64_t> cnt(static_cast<size_t>(L), 0);
  for (int l = 0; l < L; ++l) {
    s1[static_cast<size_t>(l)].assign(static_cast<size_t>(bundle.bn[static_cast<size_t>(l)].channels), 0.0);
    s2[static_cast<size_t>(l)].assign(static_cast<size_t>(bundle.bn[static_cast<size_t>(l)].channels), 0.0);
  }

  size_t done = 0;
  while (done < images.size()) {
    const int bs = static_cast<int>(std::min<size_t>(static_cast<size_t>(batch), images.size() - done));
    InferNet net = bundle.infer_net(bs);
    Tensor in({bs, C, H, W});
    for (int i = 0; i < bs; ++i)
      std::memcpy(in.ptr() + static_cast<int64_t>(i) * C * H * W, images[done + static_cast<size_t>(i)].ptr(),
                  static_cast<size_t>(C * H * W) * sizeof(float));
    Workspace ws;
    Bindings<float> bind = {{net.input, &in}};
    forward(net.g, bundle.params, bind, ws, net.taps);
    for (int l = 0; l < L; ++l) {
      const Tensor& fm = ws.value(net.taps[static_cast<size_t>(l)]);
      const int64_t ch = fm.shape[1], HW = fm.shape[2] * fm.shape[3];
      for (int64_t n = 0; n < fm.shape[0]; ++n)
        for (int64_t c = 0; c < ch; ++c) {
          const float* row = fm.ptr() + (n * ch + c) * HW;
          double a1 = 0, a2 = 0;
          for (int64_t i = 0; i < HW; ++i) {
            const double v = row[i];
            a1 += v;
            a2 += v * v;
          }
          s1[static_cast<size_t>(l)][static_cast<size_t>(c)] += a1;
          s2[static_cast<size_t>(l)][static_cast<size_t>(c)] += a2;
        }
      cnt[static_cast<size_t>(l)] += fm.shape[0] * HW;
    }
    done += static_cast<size_t>(bs);
  }

  GlobalStats g;
  g.mean.resize(static_cast<size_t>(L));
  g.var.resize(static_cast<size_t>(L));
  for (int l = 0; l < L; ++l) {
    const double inv = 1.0 / static_cast<double>(cnt[static_cast<size_t>(l)]);
    g.mean[static_cast<size_t>(l)].resize(s1[static_cast<size_t>(l)].size());
    g.var[static_cast<size_t>(l)].resize(s1[static_cast<size_t>(l)].size());
    for (size_t c = 0; c < s1[static_cast<size_t>(l)].size(); ++c) {
      const double m = s1[static_cast<size_t>(l)][c] * inv;
      g.mean[static_cast<size_t>(l)][c] = m;
      g.var[static_cast<size_t>(l)][c] = std::max(0.0, s2[static_cast<size_t>(l)][c] * inv - m * m);
    }
  }
  return g;
}

}  // namespace dgh
