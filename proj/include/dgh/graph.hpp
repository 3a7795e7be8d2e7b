// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "dgh/tensor.hpp"

namespace dgh {

enum class Op : uint8_t {
  Input,      // external binding (leaf)
  Param,      // parameter-store slot
  Const,      // embedded constant tensor
  Conv2d,     // in: x, w[, b]; attrs stride/pad
  Linear,     // in: x (N x F), w (O x F)[, b]
  BnInf,      // in: x, gamma, beta, mu, var; frozen-statistics normalization
  BnTrain,    // in: x, gamma, beta; normalizes by batch statistics
  Relu,
  AvgPool,    // attrs k, stride
  MaxPool,    // attrs k, stride; ties go to the first maximal index
  Gap,        // global average pool NCHW -> N x C
  Add,        // elementwise, same shape
  Sub,
  Mul,
  Affine,     // alpha * x + beta (scalars)
  Reshape,
  SoftmaxCe,  // in: logits (N x C), labels (N); mean cross-entropy scalar
  ChanMean,   // NCHW -> [C], mean over N,H,W
  ChanSqMean, // NCHW -> [C], mean of squares over N,H,W
  Sum,        // -> scalar
  Max,        // -> scalar, first maximal index
  Min,        // -> scalar, first minimal index
  Smooth3,    // depthwise 3x3 binomial filter, reflect padding
  HFlip,
  Crop,       // attrs oy, ox, oh, ow
  SliceN,     // attrs idx: row idx along dim 0, keeps rank
  ConcatN,    // stack inputs along dim 0
  FakeQuant,  // clamp-scale-round-rescale on a fixed integer grid; eval-only
};

const char* op_name(Op op);

struct NodeAttrs {
  int stride = 1;
  int pad = 0;
  int k = 0;               // pool kernel
  int idx = 0;             // SliceN
  int oy = 0, ox = 0;      // Crop offsets
  int oh = 0, ow = 0;      // Crop output size
  double alpha = 1.0;      // Affine
  double beta = 0.0;       // Affine
  double eps = 1e-5;       // BatchNorm
  double qscale = 1.0;     // FakeQuant grid step
  int qzp = 0;             // FakeQuant zero point
  int qmin = 0, qmax = 0;  // FakeQuant integer grid bounds
  std::vector<int64_t> reshape;
};

template <typename S>
struct ParamStoreT {
  std::vector<TensorT<S>> values;
  std::vector<std::string> names;
  std::vector<bool> trainable;

  int add(const std::string& name, TensorT<S> v, bool is_trainable) {
    values.push_back(std::move(v));
    names.push_back(name);
    trainable.push_back(is_trainable);
    return static_cast<int>(values.size()) - 1;
  }
  int size() const { return static_cast<int>(values.size()); }
  int find(const std::string& name) const {
    for (int i = 0; i < size(); ++i)
      if (names[static_cast<size_t>(i)] == name) return i;
    return -1;
  }

  template <typename T>
  ParamStoreT<T> cast() const {
    ParamStoreT<T> out;
    for (int i = 0; i < size(); ++i)
      out.add(names[static_cast<size_t>(i)], values[static_cast<size_t>(i)].template cast<T>(),
              trainable[static_cast<size_t>(i)]);
    return out;
  }
};

using ParamStore = ParamStoreT<float>;

// Static operation DAG with fixed shapes. Nodes are appended in topological
// order; shape checking happens at build time and errors name the node.
template <typename S>
struct GraphT {
  struct Node {
    Op op = Op::Input;
    std::vector<int> in;
    NodeAttrs a;
    std::vector<int64_t> out_shape;
    std::string name;
    TensorT<S> cval;  // Const payload
    int param = -1;   // Param slot
    bool diff = false;  // leaf marked differentiable
  };

  std::vector<Node> nodes;

  int size() const { return static_cast<int>(nodes.size()); }
  const Node& node(int id) const { return nodes[static_cast<size_t>(id)]; }
  const std::vector<int64_t>& shape(int id) const { return nodes[static_cast<size_t>(id)].out_shape; }

  int input(std::vector<int64_t> shape, const std::string& name, bool differentiable = false);
  int param(const ParamStoreT<S>& store, int param_id);
  int constant(TensorT<S> v, const std::string& name = "const");
  int conv2d(int x, int w, int b, int stride, int pad, const std::string& name = "conv");
  int linear(int x, int w, int b, const std::string& name = "linear");
  int bn_inf(int x, int gamma, int beta, int mu, int var, double eps, const std::string& name = "bn");
  int bn_train(int x, int gamma, int beta, double eps, const std::string& name = "bn");
  int relu(int x, const std::string& name = "relu");
  int avg_pool(int x, int k, int stride, const std::string& name = "avgpool");
  int max_pool(int x, int k, int stride, const std::string& name = "maxpool");
  int gap(int x, const std::string& name = "gap");
  int add(int x, int y, const std::string& name = "add");
  int sub(int x, int y, const std::string& name = "sub");
  int mul(int x, int y, const std::string& name = "mul");
  int affine(int x, double alpha, double beta, const std::string& name = "affine");
  int reshape(int x, std::vector<int64_t> shape, const std::string& name = "reshape");
  int softmax_ce(int logits, int labels, const std::string& name = "ce");
  int chan_mean(int x, const std::string& name = "chan_mean");
  int chan_sqmean(int x, const std::string& name = "chan_sqmean");
  int sum(int x, const std::string& name = "sum");
  int max(int x, const std::string& name = "max");
  int min(int x, const std::string& name = "min");
  int smooth3(int x, const std::string& name = "smooth");
  int hflip(int x, const std::string& name = "hflip");
  int crop(int x, int oy, int ox, int oh, int ow, const std::string& name = "crop");
  int slice_n(int x, int idx, const std::string& name = "slice");
  int concat_n(const std::vector<int>& xs, const std::string& name = "concat");
  int fake_quant(int x, double scale, int zp, int qmin, int qmax, const std::string& name = "fq");

  template <typename T>
  GraphT<T> cast() const {
    GraphT<T> out;
    out.nodes.reserve(nodes.size());
    for (const auto& n : nodes) {
      typename GraphT<T>::Node m;
      m.op = n.op;
      m.in = n.in;
      m.a = n.a;
      m.out_shape = n.out_shape;
      m.name = n.name;
      m.cval = n.cval.template cast<T>();
      m.param = n.param;
      m.diff = n.diff;
      out.nodes.push_back(std::move(m));
    }
    return out;
  }

private:
  int push(Node n);
  const std::vector<int64_t>& in_shape(const Node& n, int i) const {
    return nodes[static_cast<size_t>(n.in[static_cast<size_t>(i)])].out_shape;
  }
};

using Graph = GraphT<float>;

// Per-evaluation state: forward values, gradients, batch-norm saved moments.
// A graph plus param store is immutable and may be shared across concurrent
// workspaces.
template <typename S>
struct WorkspaceT {
  explicit WorkspaceT(bool track_memory = false) : track(track_memory) {}
  ~WorkspaceT() { release(); }
  WorkspaceT(const WorkspaceT&) = delete;
  WorkspaceT& operator=(const WorkspaceT&) = delete;

  bool track = false;
  bool check_finite = true;
  std::vector<TensorT<S>> val;
  std::vector<TensorT<S>> grad;
  std::vector<char> has_val;
  std::vector<char> has_grad;
  // BnTrain saved batch moments, keyed by node id
  std::map<int, std::pair<std::vector<S>, std::vector<S>>> bn_saved;
  bool forward_done = false;

  const TensorT<S>& value(int id) const {
    if (id < 0 || id >= static_cast<int>(val.size()) || !has_val[static_cast<size_t>(id)])
      fail(ErrorKind::Usage, "node value not evaluated");
    return val[static_cast<size_t>(id)];
  }
  const TensorT<S>& gradient(int id) const {
    if (id < 0 || id >= static_cast<int>(grad.size()) || !has_grad[static_cast<size_t>(id)])
      fail(ErrorKind::Usage, "node gradient not available");
    return grad[static_cast<size_t>(id)];
  }
  void release();
};

using Workspace = WorkspaceT<float>;

template <typename S>
using Bindings = std::vector<std::pair<int, const TensorT<S>*>>;

// Evaluates the ancestors of `outputs` given leaf bindings. Retains
// intermediate activations for a subsequent backward pass.
template <typename S>
void forward(const GraphT<S>& g, const ParamStoreT<S>& store, const Bindings<S>& bindings,
             WorkspaceT<S>& ws, const std::vector<int>& outputs);

// Reverse pass from scalar `root`. Gradients are produced for every node on a
// path from a differentiable leaf (or trainable param when train_params) to
// the root.
template <typename S>
void backward(const GraphT<S>& g, const ParamStoreT<S>& store, WorkspaceT<S>& ws, int root,
              bool train_params = false);

}  // namespace dgh
