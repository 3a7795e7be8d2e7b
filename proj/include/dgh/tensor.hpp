// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "dgh/error.hpp"
#include "dgh/rng.hpp"

namespace dgh {

// Tracks live activation bytes held by graph workspaces. Used to demonstrate
// that a whole-set optimization step stays within a constant factor of a
// single-batch step.
struct MemTracker {
  static std::atomic<int64_t>& live() {
    static std::atomic<int64_t> v{0};
    return v;
  }
  static std::atomic<int64_t>& peak() {
    static std::atomic<int64_t> v{0};
    return v;
  }
  static void add(int64_t bytes) {
    int64_t now = live().fetch_add(bytes) + bytes;
    int64_t p = peak().load();
    while (now > p && !peak().compare_exchange_weak(p, now)) {
    }
  }
  static void sub(int64_t bytes) { live().fetch_sub(bytes); }
  static void reset_peak() { peak().store(live().load()); }
};

// Dense row-major tensor. Image data uses NCHW.
template <typename S>
struct TensorT {
  std::vector<int64_t> shape;
  std::vector<S> data;

  TensorT() = default;

  explicit TensorT(std::vector<int64_t> shp, S fill = S(0)) : shape(std::move(shp)) {
    data.assign(static_cast<size_t>(numel_of(shape)), fill);
  }

  static TensorT zeros(std::vector<int64_t> shp) { return TensorT(std::move(shp)); }

  static TensorT full(std::vector<int64_t> shp, S v) { return TensorT(std::move(shp), v); }

  static TensorT from(std::vector<int64_t> shp, std::vector<S> d) {
    TensorT t;
    t.shape = std::move(shp);
    t.data = std::move(d);
    if (t.numel() != static_cast<int64_t>(t.data.size()))
      fail(ErrorKind::Shape, "tensor data length does not match shape product");
    return t;
  }

  static TensorT randn(std::vector<int64_t> shp, Rng& rng, double mean = 0.0, double stddev = 1.0) {
    TensorT t(std::move(shp));
    for (auto& v : t.data) v = static_cast<S>(rng.normal(mean, stddev));
    return t;
  }

  static int64_t numel_of(const std::vector<int64_t>& s) {
    int64_t n = 1;
    for (int64_t d : s) {
      if (d < 0) fail(ErrorKind::Shape, "negative dimension");
      n *= d;
    }
    return n;
  }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int rank() const { return static_cast<int>(shape.size()); }
  int64_t dim(int i) const { return shape[static_cast<size_t>(i)]; }

  S* ptr() { return data.data(); }
  const S* ptr() const { return data.data(); }

  S& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
  S operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

  // NCHW accessor
  S& at(int64_t n, int64_t c, int64_t h, int64_t w) {
    return data[static_cast<size_t>(((n * shape[1] + c) * shape[2] + h) * shape[3] + w)];
  }
  S at(int64_t n, int64_t c, int64_t h, int64_t w) const {
    return data[static_cast<size_t>(((n * shape[1] + c) * shape[2] + h) * shape[3] + w)];
  }

  bool same_shape(const TensorT& o) const { return shape == o.shape; }

  bool all_finite() const {
    // x*0 is 0 for finite x and NaN for NaN/Inf, and the sum of zeros cannot
    // overflow, so one pass detects any non-finite entry; explicit lanes make
    // the reduction vectorizable under strict FP semantics
    S lanes[8] = {};
    const size_t n = data.size();
    size_t i = 0;
    for (; i + 8 <= n; i += 8)
      for (int j = 0; j < 8; ++j) lanes[j] += data[i + static_cast<size_t>(j)] * S(0);
    S acc = S(0);
    for (; i < n; ++i) acc += data[i] * S(0);
    for (int j = 0; j < 8; ++j) acc += lanes[j];
    return acc == S(0);
  }

  std::string shape_str() const {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << "]";
    return os.str();
  }

  template <typename T>
  TensorT<T> cast() const {
    TensorT<T> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<T>(data[i]);
    return out;
  }
};

using Tensor = TensorT<float>;
using TensorD = TensorT<double>;

template <typename S>
inline double max_abs_diff(const TensorT<S>& a, const TensorT<S>& b) {
  double m = 0;
  for (size_t i = 0; i < a.data.size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a.data[i]) - static_cast<double>(b.data[i])));
  return m;
}

}  // namespace dgh
