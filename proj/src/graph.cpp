// SPDX-License-Identifier: Apache-2.0
#include "dgh/graph.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace dgh {

const char* op_name(Op op) {
  switch (op) {
    case Op::Input: return "input";
    case Op::Param: return "param";
    case Op::Const: return "const";
    case Op::Conv2d: return "conv2d";
    case Op::Linear: return "linear";
    case Op::BnInf: return "bn_inf";
    case Op::BnTrain: return "bn_train";
    case Op::Relu: return "relu";
    case Op::AvgPool: return "avg_pool";
    case Op::MaxPool: return "max_pool";
    case Op::Gap: return "gap";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Affine: return "affine";
    case Op::Reshape: return "reshape";
    case Op::SoftmaxCe: return "softmax_ce";
    case Op::ChanMean: return "chan_mean";
    case Op::ChanSqMean: return "chan_sqmean";
    case Op::Sum: return "sum";
    case Op::Max: return "max";
    case Op::Min: return "min";
    case Op::Smooth3: return "smooth3";
    case Op::HFlip: return "hflip";
    case Op::Crop: return "crop";
    case Op::SliceN: return "slice_n";
    case Op::ConcatN: return "concat_n";
    case Op::FakeQuant: return "fake_quant";
  }
  return "?";
}

namespace {

[[noreturn]] void node_fail(ErrorKind k, const std::string& name, Op op, const std::string& msg) {
  fail(k, "node '" + name + "' (" + op_name(op) + "): " + msg);
}

int64_t pool_out(int64_t in, int k, int s) { return (in - k) / s + 1; }

inline int64_t reflect(int64_t i, int64_t n) {
  if (i < 0) return -i;
  if (i >= n) return 2 * n - 2 - i;
  return i;
}

}  // namespace

// ---------------------------------------------------------------------------
// Builders
// ---------------------------------------------------------------------------

template <typename S>
int GraphT<S>::push(Node n) {
  for (int in_id : n.in)
    if (in_id < 0 || in_id >= size())
      node_fail(ErrorKind::Usage, n.name, n.op, "input node id out of range");
  nodes.push_back(std::move(n));
  return size() - 1;
}

template <typename S>
int GraphT<S>::input(std::vector<int64_t> shape, const std::string& name, bool differentiable) {
  Node n;
  n.op = Op::Input;
  n.out_shape = std::move(shape);
  n.name = name;
  n.diff = differentiable;
  return push(std::move(n));
}

template <typename S>
int GraphT<S>::param(const ParamStoreT<S>& store, int param_id) {
  if (param_id < 0 || param_id >= store.size())
    fail(ErrorKind::Usage, "param id out of range");
  Node n;
  n.op = Op::Param;
  n.param = param_id;
  n.out_shape = store.values[static_cast<size_t>(param_id)].shape;
  n.name = store.names[static_cast<size_t>(param_id)];
  return push(std::move(n));
}

template <typename S>
int GraphT<S>::constant(TensorT<S> v, const std::string& name) {
  Node n;
  n.op = Op::Const;
  n.out_shape = v.shape;
  n.cval = std::move(v);
  n.name = name;
  return push(std::move(n));
}

template <typename S>
int GraphT<S>::conv2d(int x, int w, int b, int stride, int pad, const std::string& name) {
  Node n;
  n.op = Op::Conv2d;
  n.in = {x, w};
  if (b >= 0) n.in.push_back(b);
  n.a.stride = stride;
  n.a.pad = pad;
  n.name = name;
  const auto& xs = in_shape(n, 0);
  const auto& ws = in_shape(n, 1);
  if (xs.size() != 4 || ws.size() != 4)
    node_fail(ErrorKind::Shape, name, n.op, "expects NCHW input and OIHW weights");
  if (xs[1] != ws[1])
    node_fail(ErrorKind::Shape, name, n.op,
              "channel mismatch: input has " + std::to_string(xs[1]) + ", weights expect " +
                  std::to_string(ws[1]));
  if (b >= 0 && (in_shape(n, 2).size() != 1 || in_shape(n, 2)[0] != ws[0]))
    node_fail(ErrorKind::Shape, name, n.op, "bias length must equal output channels");
  int64_t oh = (xs[2] + 2 * pad - ws[2]) / stride + 1;
  int64_t ow = (xs[3] + 2 * pad - ws[3]) / stride + 1;
  if (oh < 1 || ow < 1) node_fail(ErrorKind::Shape, name, n.op, "kernel larger than padded input");
  n.out_shape = {xs[0], ws[0], oh, ow};
  return push(std::move(n));
}

template <typename S>
int GraphT<S>::linear(int x, int w, int b, const std::string& name) {
  Node n;
  n.op = Op::Linear;
  n.in = {x, w};
  if (b >= 0) n.in.push_back(b);
  n.name = name;
  const auto& xs = in_shape(n, 0);
  const auto& ws = in_shape(n, 1);
  if (xs.size() != 2 || ws.size() != 2)
    node_fail(ErrorKind::Shape, name, n.op, "expects N x F input and O x F weights");
  if (xs[1] != ws[1])
    node_fail(ErrorKind::Shape, name, n.op,
              "feature mismatch: input " + std::to_string(xs[1]) + " vs weights " +
                  std::to_string(ws[1]));
  if (b >= 0 && (in_shape(n, 2).size() != 1 || in_shape(n, 2)[0] != ws[0]))
    node_fail(ErrorKind::Shape, name, n.op, "bias length must equal output width");
  n.out_shape = {xs[0], ws[0]};
  return push(std::move(n));
}

template <typename S>
int GraphT<S>::bn_inf(int x, int gamma, int beta, int mu, int var, double eps, const std::string& name) {
  Node n;
  n.op = Op::BnInf;
  n.in = {x, gamma, beta, mu, var};
  n.a.eps = eps;
  n.name = name;
  const auto& xs = in_shape(n, 0);
  if (xs.size() != 4) node_fail(ErrorKind::Shape, name, n.op, "expects NCHW input");
  for (int i = 1; i <= 4; ++i)
    if (in_shape(n, i).size() != 1 || in_shape(n, i)[0] != xs[1])
      node_fail(ErrorKind::Shape, name, n.op, "per-channel vectors must have length C");
  n.out_shape = xs;
  return push(std::move(n));
}

template <typename S>
int GraphT<S>::bn_train(int x, int gamma, int beta, double eps, const std::string& name) {
  Node n;
  n.op = Op::BnTrain;
  n.in = {x, gamma, beta};
  n.a.eps = eps;
  n.name = name;
  const auto& xs = in_shape(n, 0);
  if (xs.size() != 4) node_fail(ErrorKind::Shape, name, n.op, "expects NCHW input");
  for (int i = 1; i <= 2; ++i)
    if (in_shape(n, i).size() != 1 || in_shape(n, i)[0] != xs[1])
      node_fail(ErrorKind::Shape, name, n.op, "per-channel vectors must have length C");
  n.out_shape = xs;
  return push(std::move(n));
}

template <typename S>
int GraphT<S>::relu(int x, const std::string& name) {
  Node n;
  n.op = Op::Relu;
  n.in = {x};
  n.name = name;
  n.out_shape = in_shape(n, 0);
  return push(std::move(n));
}

template <typename S>
int GraphT<S>::avg_pool(int x, int k, int stride, const std::string& name) {
  Node n;
  n.op = Op::AvgPool;
  n.in = {x};
  n.a.k = k;
  n.a.stride = stride;
  n.name = name;
  const auto& xs = in_shape(n, 0);
  if (xs.size() != 4 || xs[2] < k || xs[3] < k)
    node_fail(ErrorKind::Shape, name, n.op, "window does not fit input");
  n.out_shape = {xs[0], xs[1], pool_out(xs[2], k, stride), pool_out(xs[3], k, stride)};
  return push(std::move(n));
}

template <typename S>
int GraphT<S>::max_pool(int x, int k, int stride, const std::string& name) {
  Node n;
  n.op = Op::MaxPool;
  n.in = {x};
  n.a.k = k;
  n.a.stride = stride;
  n.name = name;
  const auto& xs = in_shape(n, 0);
  if (xs.size() != 4 || xs[2] < k || xs[3] < k)
    node_fail(ErrorKind::Shape, name, n.op, "window does not fit input");
  n.out_shape = {xs[0], xs[1], pool_out(xs[2], k, stride), pool_out(xs[3], k, stride)};
  return push(std::move(n));
}

template <typename S>
int GraphT<S>::gap(int x, const std::string& name) {
  Node n;
  n.op = Op::Gap;
  n.in = {x};
  n.name = name;
  const auto& xs = in_shape(n, 0);
  if (xs.size() != 4) node_fail(ErrorKind::Shape, name, n.op, "expects NCHW input");
  n.out_shape = {xs[0], xs[1]};
  return push(std::move(n));
}

template <typename S>
int GraphT<S>::add(int x, int y, const std::string& name) {
  Node n;
  n.op = Op::Add;
  n.in = {x, y};
  n.name = name;
  if (in_shape(n, 0) != in_shape(n, 1))
    node_fail(ErrorKind::Shape, name, n.op, "operand shapes differ");
  n.out_shape = in_shape(n, 0);
  return push(std::move(n));
}

template <typename S>
int GraphT<S>::sub(int x, int y, const std::string& name) {
  Node n;
  n.op = Op::Sub;
  n.in = {x, y};
  n.name = name;
  if (in_shape(n, 0) != in_shape(n, 1))
    node_fail(ErrorKind::Shape, name, n.op, "operand shapes differ");
  n.out_shape = in_shape(n, 0);
  return push(std::move(n));
}

template <typename S>
int GraphT<S>::mul(int x, int y, const std::string& name) {
  Node n;
  n.op = Op::Mul;
  n.in = {x, y};
  n.name = name;
  if (in_shape(n, 0) != in_shape(n, 1))
    node_fail(ErrorKind::Shape, name, n.op, "operand shapes differ");
  n.out_shape = in_shape(n, 0);
  return push(std::move(n));
}

template <typename S>
int GraphT<S>::affine(int x, double alpha, double beta, const std::string& name) {
  Node n;
  n.op = Op::Affine;
  n.in = {x};
  n.a.alpha = alpha;
  n.a.beta = beta;
  n.name = name;
  n.out_shape = in_shape(n, 0);
  return push(std::move(n));
}

template <typename S>
int GraphT<S>::reshape(int x, std::vector<int64_t> shape, const std::string& name) {
  Node n;
  n.op = Op::Reshape;
  n.in = {x};
  n.name = name;
  if (TensorT<S>::numel_of(shape) != TensorT<S>::numel_of(in_shape(n, 0)))
    node_fail(ErrorKind::Shape, name, n.op, "element count changed by reshape");
  n.a.reshape = shape;
  n.out_shape = std::move(shape);
  return push(std::move(n));
}

template <typename S>
int GraphT<S>::softmax_ce(int logits, int labels, const std::string& name) {
  Node n;
  n.op = Op::SoftmaxCe;
  n.in = {logits, labels};
  n.name = name;
  const auto& ls = in_shape(n, 0);
  if (ls.size() != 2) node_fail(ErrorKind::Shape, name, n.op, "logits must be N x C");
  if (in_shape(n, 1).size() != 1 || in_shape(n, 1)[0] != ls[0])
    node_fail(ErrorKind::Shape, name, n.op, "labels must have length N");
  n.out_shape = {1};
  return push(std::move(n));
}

template <typename S>
int GraphT<S>::chan_mean(int x, const std::string& name) {
  Node n;
  n.op = Op::ChanMean;
  n.in = {x};
  n.name = name;
  const auto& xs = in_shape(n, 0);
  if (xs.size() != 4) node_fail(ErrorKind::Shape, name, n.op, "expects NCHW input");
  n.out_shape = {xs[1]};
  return push(std::move(n));
}

template <typename S>
int GraphT<S>::chan_sqmean(int x, const std::string& name) {
  Node n;
  n.op = Op::ChanSqMean;
  n.in = {x};
  n.name = name;
  const auto& xs = in_shape(n, 0);
  if (xs.size() != 4) node_fail(ErrorKind::Shape, name, n.op, "expects NCHW input");
  n.out_shape = {xs[1]};
  return push(std::move(n));
}

template <typename S>
int GraphT<S>::sum(int x, const std::string& name) {
  Node n;
  n.op = Op::Sum;
  n.in = {x};
  n.name = name;
  n.out_shape = {1};
  return push(std::move(n));
}

template <typename S>
int GraphT<S>::max(int x, const std::string& name) {
  Node n;
  n.op = Op::Max;
  n.in = {x};
  n.name = name;
  if (TensorT<S>::numel_of(in_shape(n, 0)) < 1)
    node_fail(ErrorKind::Shape, name, n.op, "empty input");
  n.out_shape = {1};
  return push(std::move(n));
}

template <typename S>
int GraphT<S>::min(int x, const std::string& name) {
  Node n;
  n.op = Op::Min;
  n.in = {x};
  n.name = name;
  if (TensorT<S>::numel_of(in_shape(n, 0)) < 1)
    node_fail(ErrorKind::Shape, name, n.op, "empty input");
  n.out_shape = {1};
  return push(std::move(n));
}

template <typename S>
int GraphT<S>::smooth3(int x, const std::string& name) {
  Node n;
  n.op = Op::Smooth3;
  n.in = {x};
  n.name = name;
  const auto& xs = in_shape(n, 0);
  if (xs.size() != 4 || xs[2] < 2 || xs[3] < 2)
    node_fail(ErrorKind::Shape, name, n.op, "needs NCHW input at least 2x2");
  n.out_shape = xs;
  return push(std::move(n));
}

template <typename S>
int GraphT<S>::hflip(int x, const std::string& name) {
  Node n;
  n.op = Op::HFlip;
  n.in = {x};
  n.name = name;
  if (in_shape(n, 0).size() != 4) node_fail(ErrorKind::Shape, name, n.op, "expects NCHW input");
  n.out_shape = in_shape(n, 0);
  return push(std::move(n));
}

template <typename S>
int GraphT<S>::crop(int x, int oy, int ox, int oh, int ow, const std::string& name) {
  Node n;
  n.op = Op::Crop;
  n.in = {x};
  n.a.oy = oy;
  n.a.ox = ox;
  n.a.oh = oh;
  n.a.ow = ow;
  n.name = name;
  const auto& xs = in_shape(n, 0);
  if (xs.size() != 4) node_fail(ErrorKind::Shape, name, n.op, "expects NCHW input");
  if (oy < 0 || ox < 0 || oh < 1 || ow < 1 || oy + oh > xs[2] || ox + ow > xs[3])
    node_fail(ErrorKind::Shape, name, n.op, "crop window exceeds input");
  n.out_shape = {xs[0], xs[1], oh, ow};
  return push(std::move(n));
}

template <typename S>
int GraphT<S>::slice_n(int x, int idx, const std::string& name) {
  Node n;
  n.op = Op::SliceN;
  n.in = {x};
  n.a.idx = idx;
  n.name = name;
  const auto& xs = in_shape(n, 0);
  if (xs.empty() || idx < 0 || idx >= xs[0])
    node_fail(ErrorKind::Shape, name, n.op, "slice index out of range");
  n.out_shape = xs;
  n.out_shape[0] = 1;
  return push(std::move(n));
}

template <typename S>
int GraphT<S>::concat_n(const std::vector<int>& xs, const std::string& name) {
  Node n;
  n.op = Op::ConcatN;
  n.in = xs;
  n.name = name;
  if (xs.empty()) node_fail(ErrorKind::Shape, name, n.op, "no inputs");
  auto shp = in_shape(n, 0);
  int64_t total = shp[0];
  for (size_t i = 1; i < xs.size(); ++i) {
    const auto& s = in_shape(n, static_cast<int>(i));
    if (s.size() != shp.size() ||
        !std::equal(s.begin() + 1, s.end(), shp.begin() + 1))
      node_fail(ErrorKind::Shape, name, n.op, "trailing dimensions differ");
    total += s[0];
  }
  shp[0] = total;
  n.out_shape = std::move(shp);
  return push(std::move(n));
}

template <typename S>
int GraphT<S>::fake_quant(int x, double scale, int zp, int qmin, int qmax, const std::string& name) {
  Node n;
  n.op = Op::FakeQuant;
  n.in = {x};
  n.a.qscale = scale;
  n.a.qzp = zp;
  n.a.qmin = qmin;
  n.a.qmax = qmax;
  n.name = name;
  if (scale <= 0) node_fail(ErrorKind::Config, name, n.op, "scale must be positive");
  n.out_shape = in_shape(n, 0);
  return push(std::move(n));
}

// ---------------------------------------------------------------------------
// Forward kernels
// ---------------------------------------------------------------------------

namespace {

// Forward runs on a zero-padded copy of each image so the accumulation loops
// carry no boundary checks; outputs accumulate in a small register block.
template <typename S>
void conv2d_fwd(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>* b, int stride, int pad,
                TensorT<S>& out) {
  const int64_t N = x.shape[0], Ci = x.shape[1], H = x.shape[2], W = x.shape[3];
  const int64_t Co = w.shape[0], Kh = w.shape[2], Kw = w.shape[3];
  const int64_t OH = out.shape[2], OW = out.shape[3];
  const int64_t s = stride, p = pad;
  const int64_t Hp = H + 2 * p, Wp = W + 2 * p;

  thread_local std::vector<S> pad_buf;
  pad_buf.assign(static_cast<size_t>(Ci * Hp * Wp), S(0));

  constexpr int64_t BLK = 8;
  for (int64_t n = 0; n < N; ++n) {
    if (p == 0) {
      std::memcpy(pad_buf.data(), x.ptr() + n * Ci * H * W,
                  static_cast<size_t>(Ci * H * W) * sizeof(S));
    } else {
      for (int64_t ci = 0; ci < Ci; ++ci) {
        const S* src = x.ptr() + (n * Ci + ci) * H * W;
        S* dst = pad_buf.data() + ci * Hp * Wp;
        for (int64_t y = 0; y < H; ++y)
          std::memcpy(dst + (y + p) * Wp + p, src + y * W, static_cast<size_t>(W) * sizeof(S));
      }
    }
    for (int64_t co = 0; co < Co; ++co) {
      S* o = out.ptr() + ((n * Co + co) * OH) * OW;
      const S bias = b ? (*b)[co] : S(0);
      const S* wbase = w.ptr() + co * Ci * Kh * Kw;
      for (int64_t oy = 0; oy < OH; ++oy) {
        S* orow = o + oy * OW;
        int64_t ox = 0;
        for (; ox + BLK <= OW; ox += BLK) {
          S acc[BLK];
          for (int64_t j = 0; j < BLK; ++j) acc[j] = bias;
          for (int64_t ci = 0; ci < Ci; ++ci) {
            const S* xci = pad_buf.data() + ci * Hp * Wp + (oy * s) * Wp + ox * s;
            const S* wk = wbase + ci * Kh * Kw;
            for (int64_t ky = 0; ky < Kh; ++ky) {
              const S* xr = xci + ky * Wp;
              for (int64_t kx = 0; kx < Kw; ++kx) {
                const S wv = wk[ky * Kw + kx];
                const S* xk = xr + kx;
                if (s == 1) {
                  for (int64_t j = 0; j < BLK; ++j) acc[j] += wv * xk[j];
                } else {
                  for (int64_t j = 0; j < BLK; ++j) acc[j] += wv * xk[j * s];
                }
              }
            }
          }
          for (int64_t j = 0; j < BLK; ++j) orow[ox + j] = acc[j];
        }
        for (; ox < OW; ++ox) {
          S acc = bias;
          for (int64_t ci = 0; ci < Ci; ++ci) {
            const S* xci = pad_buf.data() + ci * Hp * Wp + (oy * s) * Wp + ox * s;
            const S* wk = wbase + ci * Kh * Kw;
            for (int64_t ky = 0; ky < Kh; ++ky)
              for (int64_t kx = 0; kx < Kw; ++kx) acc += wk[ky * Kw + kx] * xci[ky * Wp + kx];
          }
          orow[ox] = acc;
        }
      }
    }
  }
}

// The input gradient of a strided cross-correlation equals a stride-1
// cross-correlation of the zero-dilated output gradient with the kernel
// rotated 180 degrees and transposed in its channel axes.
template <typename S>
void conv2d_bwd_input(const TensorT<S>& w, const TensorT<S>& g, int stride, int pad,
                      TensorT<S>& dx) {
  const int64_t Co = w.shape[0], Ci = w.shape[1], Kh = w.shape[2], Kw = w.shape[3];
  const int64_t N = g.shape[0], OH = g.shape[2], OW = g.shape[3];
  const int64_t H = dx.shape[2], W = dx.shape[3];

  TensorT<S> wrot({Ci, Co, Kh, Kw});
  for (int64_t co = 0; co < Co; ++co)
    for (int64_t ci = 0; ci < Ci; ++ci)
      for (int64_t ky = 0; ky < Kh; ++ky)
        for (int64_t kx = 0; kx < Kw; ++kx)
          wrot.at(ci, co, ky, kx) = w.at(co, ci, Kh - 1 - ky, Kw - 1 - kx);

  // floor-division geometry can leave a remainder strip of input that no
  // window reaches; the dilated buffer grows by that much so the recovered
  // gradient spans the whole input (the strip itself stays zero)
  const int64_t rem_h = (H + 2 * pad - Kh) - (OH - 1) * stride;
  const int64_t rem_w = (W + 2 * pad - Kw) - (OW - 1) * stride;
  const TensorT<S>* gd = &g;
  TensorT<S> dilated;
  if (stride > 1 || rem_h > 0 || rem_w > 0) {
    dilated = TensorT<S>({N, Co, (OH - 1) * stride + 1 + rem_h, (OW - 1) * stride + 1 + rem_w});
    for (int64_t n = 0; n < N; ++n)
      for (int64_t co = 0; co < Co; ++co)
        for (int64_t oy = 0; oy < OH; ++oy)
          for (int64_t ox = 0; ox < OW; ++ox)
            dilated.at(n, co, oy * stride, ox * stride) = g.at(n, co, oy, ox);
    gd = &dilated;
  }

  const int64_t full_h = gd->shape[2] + (Kh - 1 - pad) * 2 - Kh + 1;
  const int64_t full_w = gd->shape[3] + (Kw - 1 - pad) * 2 - Kw + 1;
  TensorT<S> full({N, Ci, full_h, full_w});
  conv2d_fwd(*gd, wrot, static_cast<const TensorT<S>*>(nullptr), 1,
             static_cast<int>(Kh - 1 - pad), full);

  // floor-division output geometry can leave trailing input rows/columns
  // untouched; they receive zero gradient
  const int64_t copy_h = std::min(H, full_h), copy_w = std::min(W, full_w);
  for (int64_t n = 0; n < N; ++n)
    for (int64_t ci = 0; ci < Ci; ++ci)
      for (int64_t y = 0; y < copy_h; ++y) {
        const S* src = full.ptr() + ((n * Ci + ci) * full_h + y) * full_w;
        S* dst = dx.ptr() + ((n * Ci + ci) * H + y) * W;
        for (int64_t x2 = 0; x2 < copy_w; ++x2) dst[x2] += src[x2];
      }
}

template <typename S>
void conv2d_bwd(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>& g, int stride, int pad,
                TensorT<S>* dx, TensorT<S>* dw, TensorT<S>* db) {
  const int64_t N = x.shape[0], Ci = x.shape[1], H = x.shape[2], W = x.shape[3];
  const int64_t Co = w.shape[0], Kh = w.shape[2], Kw = w.shape[3];
  const int64_t OH = g.shape[2], OW = g.shape[3];
  const int s = stride, p = pad;

  if (dx) conv2d_bwd_input(w, g, stride, pad, *dx);

  if (!dw && !db) return;
  for (int64_t n = 0; n < N; ++n) {
    for (int64_t co = 0; co < Co; ++co) {
      const S* grow_base = g.ptr() + ((n * Co + co) * OH) * OW;
      if (db) {
        double acc = 0;
        for (int64_t i = 0; i < OH * OW; ++i) acc += static_cast<double>(grow_base[i]);
        (*db)[co] += static_cast<S>(acc);
      }
      if (!dw) continue;
      for (int64_t ci = 0; ci < Ci; ++ci) {
        const S* xin = x.ptr() + ((n * Ci + ci) * H) * W;
        S* dwk = dw->ptr() + ((co * Ci + ci) * Kh) * Kw;
        for (int64_t ky = 0; ky < Kh; ++ky) {
          for (int64_t kx = 0; kx < Kw; ++kx) {
            int64_t lo_y = p - ky, lo_x = p - kx;
            int64_t oy0 = lo_y <= 0 ? 0 : (lo_y + s - 1) / s;
            int64_t ox0 = lo_x <= 0 ? 0 : (lo_x + s - 1) / s;
            int64_t hy = H - 1 + p - ky, hx = W - 1 + p - kx;
            if (hy < 0 || hx < 0) continue;
            int64_t oy1 = std::min(OH - 1, hy / s);
            int64_t ox1 = std::min(OW - 1, hx / s);
            const int64_t len = ox1 - ox0 + 1;
            if (len <= 0) continue;
            double wacc = 0;
            for (int64_t oy = oy0; oy <= oy1; ++oy) {
              const S* grow = grow_base + oy * OW + ox0;
              const S* xrow = xin + (oy * s + ky - p) * W + (ox0 * s + kx - p);
              if (s == 1) {
                for (int64_t i = 0; i < len; ++i) wacc += static_cast<double>(grow[i]) * xrow[i];
              } else {
                for (int64_t i = 0; i < len; ++i) wacc += static_cast<double>(grow[i]) * xrow[i * s];
              }
            }
            dwk[ky * Kw + kx] += static_cast<S>(wacc);
          }
        }
      }
    }
  }
}

template <typename S>
void channel_moments(const TensorT<S>& x, std::vector<double>& mean, std::vector<double>& sqmean) {
  const int64_t N = x.shape[0], C = x.shape[1], HW = x.shape[2] * x.shape[3];
  mean.assign(static_cast<size_t>(C), 0.0);
  sqmean.assign(static_cast<size_t>(C), 0.0);
  for (int64_t n = 0; n < N; ++n) {
    for (int64_t c = 0; c < C; ++c) {
      const S* row = x.ptr() + (n * C + c) * HW;
      double s1 = 0, s2 = 0;
      for (int64_t i = 0; i < HW; ++i) {
        const double v = static_cast<double>(row[i]);
        s1 += v;
        s2 += v * v;
      }
      mean[static_cast<size_t>(c)] += s1;
      sqmean[static_cast<size_t>(c)] += s2;
    }
  }
  const double inv = 1.0 / static_cast<double>(N * HW);
  for (int64_t c = 0; c < C; ++c) {
    mean[static_cast<size_t>(c)] *= inv;
    sqmean[static_cast<size_t>(c)] *= inv;
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// forward
// ---------------------------------------------------------------------------

template <typename S>
void WorkspaceT<S>::release() {
  if (track) {
    int64_t bytes = 0;
    for (const auto& t : val) bytes += static_cast<int64_t>(t.data.size() * sizeof(S));
    for (const auto& t : grad) bytes += static_cast<int64_t>(t.data.size() * sizeof(S));
    if (bytes) MemTracker::sub(bytes);
  }
  val.clear();
  grad.clear();
  has_val.clear();
  has_grad.clear();
  bn_saved.clear();
  forward_done = false;
}

template <typename S>
void forward(const GraphT<S>& g, const ParamStoreT<S>& store, const Bindings<S>& bindings,
             WorkspaceT<S>& ws, const std::vector<int>& outputs) {
  const int n = g.size();
  ws.release();
  ws.val.assign(static_cast<size_t>(n), TensorT<S>());
  ws.grad.assign(static_cast<size_t>(n), TensorT<S>());
  ws.has_val.assign(static_cast<size_t>(n), 0);
  ws.has_grad.assign(static_cast<size_t>(n), 0);

  // restrict evaluation to ancestors of the requested outputs
  std::vector<char> needed(static_cast<size_t>(n), 0);
  {
    std::vector<int> stack(outputs);
    while (!stack.empty()) {
      int id = stack.back();
      stack.pop_back();
      if (id < 0 || id >= n) fail(ErrorKind::Usage, "output node id out of range");
      if (needed[static_cast<size_t>(id)]) continue;
      needed[static_cast<size_t>(id)] = 1;
      for (int in_id : g.node(id).in) stack.push_back(in_id);
    }
  }

  auto track_bytes = [&](const TensorT<S>& t) {
    if (ws.track) MemTracker::add(static_cast<int64_t>(t.data.size() * sizeof(S)));
  };

  for (int id = 0; id < n; ++id) {
    if (!needed[static_cast<size_t>(id)]) continue;
    const auto& nd = g.node(id);
    for (int in_id : nd.in)
      if (!ws.has_val[static_cast<size_t>(in_id)])
        node_fail(ErrorKind::Usage, nd.name, nd.op, "inputs not in topological order");
    auto& out = ws.val[static_cast<size_t>(id)];
    auto in = [&](int i) -> const TensorT<S>& {
      return ws.val[static_cast<size_t>(nd.in[static_cast<size_t>(i)])];
    };

    switch (nd.op) {
      case Op::Input: {
        const TensorT<S>* bound = nullptr;
        for (const auto& [bid, t] : bindings)
          if (bid == id) bound = t;
        if (!bound)
          node_fail(ErrorKind::Usage, nd.name, nd.op, "leaf not covered by bindings");
        if (bound->shape != nd.out_shape)
          node_fail(ErrorKind::Shape, nd.name, nd.op,
                    "bound tensor shape " + bound->shape_str() + " does not match declared");
        out = *bound;
        break;
      }
      case Op::Param:
        out = store.values[static_cast<size_t>(nd.param)];
        break;
      case Op::Const:
        out = nd.cval;
        break;
      case Op::Conv2d: {
        out = TensorT<S>(nd.out_shape);
        conv2d_fwd(in(0), in(1), nd.in.size() > 2 ? &in(2) : nullptr, nd.a.stride, nd.a.pad, out);
        break;
      }
      case Op::Linear: {
        const auto& x = in(0);
        const auto& w = in(1);
        const TensorT<S>* b = nd.in.size() > 2 ? &in(2) : nullptr;
        const int64_t N = x.shape[0], F = x.shape[1], O = w.shape[0];
        out = TensorT<S>(nd.out_shape);
        for (int64_t i = 0; i < N; ++i) {
          const S* xr = x.ptr() + i * F;
          for (int64_t o = 0; o < O; ++o) {
            const S* wr = w.ptr() + o * F;
            double acc = b ? static_cast<double>((*b)[o]) : 0.0;
            for (int64_t f = 0; f < F; ++f) acc += static_cast<double>(xr[f]) * wr[f];
            out[i * O + o] = static_cast<S>(acc);
          }
        }
        break;
      }
      case Op::BnInf: {
        const auto& x = in(0);
        const auto& gamma = in(1);
        const auto& beta = in(2);
        const auto& mu = in(3);
        const auto& var = in(4);
        const int64_t N = x.shape[0], C = x.shape[1], HW = x.shape[2] * x.shape[3];
        out = TensorT<S>(nd.out_shape);
        for (int64_t c = 0; c < C; ++c) {
          const S istd = static_cast<S>(1.0 / std::sqrt(static_cast<double>(var[c]) + nd.a.eps));
          const S a = gamma[c] * istd;
          const S b2 = beta[c] - mu[c] * a;
          for (int64_t n2 = 0; n2 < N; ++n2) {
            const S* xr = x.ptr() + (n2 * C + c) * HW;
            S* orow = out.ptr() + (n2 * C + c) * HW;
            for (int64_t i = 0; i < HW; ++i) orow[i] = a * xr[i] + b2;
          }
        }
        break;
      }
      case Op::BnTrain: {
        const auto& x = in(0);
        const auto& gamma = in(1);
        const auto& beta = in(2);
        const int64_t N = x.shape[0], C = x.shape[1], HW = x.shape[2] * x.shape[3];
        std::vector<double> mean, sqmean;
        channel_moments(x, mean, sqmean);
        auto& saved = ws.bn_saved[id];
        saved.first.resize(static_cast<size_t>(C));
        saved.second.resize(static_cast<size_t>(C));
        out = TensorT<S>(nd.out_shape);
        for (int64_t c = 0; c < C; ++c) {
          const double m = mean[static_cast<size_t>(c)];
          const double v = sqmean[static_cast<size_t>(c)] - m * m;
          saved.first[static_cast<size_t>(c)] = static_cast<S>(m);
          saved.second[static_cast<size_t>(c)] = static_cast<S>(v);
          const S istd = static_cast<S>(1.0 / std::sqrt(v + nd.a.eps));
          const S a = gamma[c] * istd;
          const S b2 = beta[c] - static_cast<S>(m) * a;
          for (int64_t n2 = 0; n2 < N; ++n2) {
            const S* xr = x.ptr() + (n2 * C + c) * HW;
            S* orow = out.ptr() + (n2 * C + c) * HW;
            for (int64_t i = 0; i < HW; ++i) orow[i] = a * xr[i] + b2;
          }
        }
        break;
      }
      case Op::Relu: {
        const auto& x = in(0);
        out = TensorT<S>(nd.out_shape);
        for (int64_t i = 0; i < x.numel(); ++i) out[i] = x[i] > S(0) ? x[i] : S(0);
        break;
      }
      case Op::AvgPool: {
        const auto& x = in(0);
        const int64_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
        const int64_t OH = nd.out_shape[2], OW = nd.out_shape[3];
        const int k = nd.a.k, s = nd.a.stride;
        const S inv = S(1) / static_cast<S>(k * k);
        out = TensorT<S>(nd.out_shape);
        for (int64_t nc = 0; nc < N * C; ++nc) {
          const S* xin = x.ptr() + nc * H * W;
          S* o = out.ptr() + nc * OH * OW;
          for (int64_t oy = 0; oy < OH; ++oy)
            for (int64_t ox = 0; ox < OW; ++ox) {
              S acc = 0;
              for (int ky = 0; ky < k; ++ky)
                for (int kx = 0; kx < k; ++kx) acc += xin[(oy * s + ky) * W + ox * s + kx];
              o[oy * OW + ox] = acc * inv;
            }
        }
        break;
      }
      case Op::MaxPool: {
        const auto& x = in(0);
        const int64_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
        const int64_t OH = nd.out_shape[2], OW = nd.out_shape[3];
        const int k = nd.a.k, s = nd.a.stride;
        out = TensorT<S>(nd.out_shape);
        for (int64_t nc = 0; nc < N * C; ++nc) {
          const S* xin = x.ptr() + nc * H * W;
          S* o = out.ptr() + nc * OH * OW;
          for (int64_t oy = 0; oy < OH; ++oy)
            for (int64_t ox = 0; ox < OW; ++ox) {
              S best = xin[(oy * s) * W + ox * s];
              for (int ky = 0; ky < k; ++ky)
                for (int kx = 0; kx < k; ++kx) {
                  const S v = xin[(oy * s + ky) * W + ox * s + kx];
                  if (v > best) best = v;
                }
              o[oy * OW + ox] = best;
            }
        }
        break;
      }
      case Op::Gap: {
        const auto& x = in(0);
        const int64_t N = x.shape[0], C = x.shape[1], HW = x.shape[2] * x.shape[3];
        out = TensorT<S>(nd.out_shape);
        for (int64_t nc = 0; nc < N * C; ++nc) {
          const S* xin = x.ptr() + nc * HW;
          double acc = 0;
          for (int64_t i = 0; i < HW; ++i) acc += static_cast<double>(xin[i]);
          out[nc] = static_cast<S>(acc / static_cast<double>(HW));
        }
        break;
      }
      case Op::Add: {
        const auto& x = in(0);
        const auto& y = in(1);
        out = TensorT<S>(nd.out_shape);
        for (int64_t i = 0; i < x.numel(); ++i) out[i] = x[i] + y[i];
        break;
      }
      case Op::Sub: {
        const auto& x = in(0);
        const auto& y = in(1);
        out = TensorT<S>(nd.out_shape);
        for (int64_t i = 0; i < x.numel(); ++i) out[i] = x[i] - y[i];
        break;
      }
      case Op::Mul: {
        const auto& x = in(0);
        const auto& y = in(1);
        out = TensorT<S>(nd.out_shape);
        for (int64_t i = 0; i < x.numel(); ++i) out[i] = x[i] * y[i];
        break;
      }
      case Op::Affine: {
        const auto& x = in(0);
        const S a = static_cast<S>(nd.a.alpha), b = static_cast<S>(nd.a.beta);
        out = TensorT<S>(nd.out_shape);
        for (int64_t i = 0; i < x.numel(); ++i) out[i] = a * x[i] + b;
        break;
      }
      case Op::Reshape: {
        out = in(0);
        out.shape = nd.out_shape;
        break;
      }
      case Op::SoftmaxCe: {
        const auto& logits = in(0);
        const auto& labels = in(1);
        const int64_t N = logits.shape[0], C = logits.shape[1];
        double total = 0;
        for (int64_t i = 0; i < N; ++i) {
          const S* row = logits.ptr() + i * C;
          double m = static_cast<double>(row[0]);
          for (int64_t c = 1; c < C; ++c) m = std::max(m, static_cast<double>(row[c]));
          double z = 0;
          for (int64_t c = 0; c < C; ++c) z += std::exp(static_cast<double>(row[c]) - m);
          const int64_t lab = static_cast<int64_t>(std::llround(static_cast<double>(labels[i])));
          if (lab < 0 || lab >= C)
            node_fail(ErrorKind::Usage, nd.name, nd.op, "label out of range");
          total += (m + std::log(z)) - static_cast<double>(row[lab]);
        }
        out = TensorT<S>({1});
        out[0] = static_cast<S>(total / static_cast<double>(N));
        break;
      }
      case Op::ChanMean:
      case Op::ChanSqMean: {
        const auto& x = in(0);
        std::vector<double> mean, sqmean;
        channel_moments(x, mean, sqmean);
        const auto& src = nd.op == Op::ChanMean ? mean : sqmean;
        out = TensorT<S>(nd.out_shape);
        for (size_t c = 0; c < src.size(); ++c) out[static_cast<int64_t>(c)] = static_cast<S>(src[c]);
        break;
      }
      case Op::Sum: {
        const auto& x = in(0);
        double acc = 0;
        for (int64_t i = 0; i < x.numel(); ++i) acc += static_cast<double>(x[i]);
        out = TensorT<S>({1});
        out[0] = static_cast<S>(acc);
        break;
      }
      case Op::Max:
      case Op::Min: {
        const auto& x = in(0);
        S best = x[0];
        if (nd.op == Op::Max) {
          for (int64_t i = 1; i < x.numel(); ++i)
            if (x[i] > best) best = x[i];
        } else {
          for (int64_t i = 1; i < x.numel(); ++i)
            if (x[i] < best) best = x[i];
        }
        out = TensorT<S>({1});
        out[0] = best;
        break;
      }
      case Op::Smooth3: {
        const auto& x = in(0);
        const int64_t NC = x.shape[0] * x.shape[1], H = x.shape[2], W = x.shape[3];
        static const double kk[3] = {0.25, 0.5, 0.25};
        out = TensorT<S>(nd.out_shape);
        for (int64_t nc = 0; nc < NC; ++nc) {
          const S* xin = x.ptr() + nc * H * W;
          S* o = out.ptr() + nc * H * W;
          for (int64_t y = 0; y < H; ++y)
            for (int64_t x2 = 0; x2 < W; ++x2) {
              double acc = 0;
              for (int dy = -1; dy <= 1; ++dy)
                for (int dx2 = -1; dx2 <= 1; ++dx2)
                  acc += kk[dy + 1] * kk[dx2 + 1] *
                         static_cast<double>(xin[reflect(y + dy, H) * W + reflect(x2 + dx2, W)]);
              o[y * W + x2] = static_cast<S>(acc);
            }
        }
        break;
      }
      case Op::HFlip: {
        const auto& x = in(0);
        const int64_t NCH = x.shape[0] * x.shape[1] * x.shape[2], W = x.shape[3];
        out = TensorT<S>(nd.out_shape);
        for (int64_t r = 0; r < NCH; ++r) {
          const S* xin = x.ptr() + r * W;
          S* o = out.ptr() + r * W;
          for (int64_t i = 0; i < W; ++i) o[i] = xin[W - 1 - i];
        }
        break;
      }
      case Op::Crop: {
        const auto& x = in(0);
        const int64_t NC = x.shape[0] * x.shape[1], H = x.shape[2], W = x.shape[3];
        const int64_t OH = nd.a.oh, OW = nd.a.ow;
        out = TensorT<S>(nd.out_shape);
        for (int64_t nc = 0; nc < NC; ++nc) {
          const S* xin = x.ptr() + nc * H * W;
          S* o = out.ptr() + nc * OH * OW;
          for (int64_t y = 0; y < OH; ++y)
            std::memcpy(o + y * OW, xin + (y + nd.a.oy) * W + nd.a.ox,
                        static_cast<size_t>(OW) * sizeof(S));
        }
        break;
      }
      case Op::SliceN: {
        const auto& x = in(0);
        const int64_t row = x.numel() / x.shape[0];
        out = TensorT<S>(nd.out_shape);
        std::memcpy(out.ptr(), x.ptr() + nd.a.idx * row, static_cast<size_t>(row) * sizeof(S));
        break;
      }
      case Op::ConcatN: {
        out = TensorT<S>(nd.out_shape);
        int64_t off = 0;
        for (size_t i = 0; i < nd.in.size(); ++i) {
          const auto& x = in(static_cast<int>(i));
          std::memcpy(out.ptr() + off, x.ptr(), x.data.size() * sizeof(S));
          off += x.numel();
        }
        break;
      }
      case Op::FakeQuant: {
        const auto& x = in(0);
        out = TensorT<S>(nd.out_shape);
        const double scale = nd.a.qscale;
        const double zp = nd.a.qzp;
        const double lo = nd.a.qmin, hi = nd.a.qmax;
        for (int64_t i = 0; i < x.numel(); ++i) {
          double q = zp + std::round(static_cast<double>(x[i]) / scale);
          q = std::min(hi, std::max(lo, q));
          out[i] = static_cast<S>((q - zp) * scale);
        }
        break;
      }
    }

    if (ws.check_finite && !out.all_finite())
      node_fail(ErrorKind::Numeric, nd.name, nd.op, "non-finite output");
    track_bytes(out);
    ws.has_val[static_cast<size_t>(id)] = 1;
  }
  ws.forward_done = true;
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

template <typename S>
void backward(const GraphT<S>& g, const ParamStoreT<S>& store, WorkspaceT<S>& ws, int root,
              bool train_params) {
  const int n = g.size();
  if (!ws.forward_done) fail(ErrorKind::Usage, "backward called before forward");
  if (root < 0 || root >= n || !ws.has_val[static_cast<size_t>(root)])
    fail(ErrorKind::Usage, "backward root was not evaluated by forward");
  if (ws.val[static_cast<size_t>(root)].numel() != 1)
    fail(ErrorKind::Usage, "backward root must be scalar");

  // which nodes need gradients
  std::vector<char> needs(static_cast<size_t>(n), 0);
  for (int id = 0; id < n; ++id) {
    if (!ws.has_val[static_cast<size_t>(id)]) continue;
    const auto& nd = g.node(id);
    if (nd.op == Op::Input && nd.diff) {
      needs[static_cast<size_t>(id)] = 1;
    } else if (nd.op == Op::Param && train_params &&
               store.trainable[static_cast<size_t>(nd.param)]) {
      needs[static_cast<size_t>(id)] = 1;
    } else {
      for (int in_id : nd.in)
        if (needs[static_cast<size_t>(in_id)]) {
          needs[static_cast<size_t>(id)] = 1;
          break;
        }
    }
  }
  if (!needs[static_cast<size_t>(root)]) {
    // no differentiable leaf feeds the root; still mark done so callers can ask
    ws.has_grad[static_cast<size_t>(root)] = 1;
    ws.grad[static_cast<size_t>(root)] = TensorT<S>({1}, S(1));
    return;
  }

  auto track_bytes = [&](const TensorT<S>& t) {
    if (ws.track) MemTracker::add(static_cast<int64_t>(t.data.size() * sizeof(S)));
  };
  auto ensure_grad = [&](int id) -> TensorT<S>& {
    auto& t = ws.grad[static_cast<size_t>(id)];
    if (!ws.has_grad[static_cast<size_t>(id)]) {
      t = TensorT<S>(g.shape(id));
      track_bytes(t);
      ws.has_grad[static_cast<size_t>(id)] = 1;
    }
    return t;
  };

  ensure_grad(root)[0] = S(1);

  for (int id = n - 1; id >= 0; --id) {
    if (!ws.has_grad[static_cast<size_t>(id)] || !needs[static_cast<size_t>(id)]) continue;
    const auto& nd = g.node(id);
    const auto& gout = ws.grad[static_cast<size_t>(id)];
    auto in_val = [&](int i) -> const TensorT<S>& {
      return ws.val[static_cast<size_t>(nd.in[static_cast<size_t>(i)])];
    };
    auto want = [&](int i) {
      return needs[static_cast<size_t>(nd.in[static_cast<size_t>(i)])];
    };
    auto grad_of = [&](int i) -> TensorT<S>& { return ensure_grad(nd.in[static_cast<size_t>(i)]); };

    switch (nd.op) {
      case Op::Input:
      case Op::Param:
      case Op::Const:
        break;
      case Op::Conv2d: {
        TensorT<S>* dx = want(0) ? &grad_of(0) : nullptr;
        TensorT<S>* dw = want(1) ? &grad_of(1) : nullptr;
        TensorT<S>* db = (nd.in.size() > 2 && want(2)) ? &grad_of(2) : nullptr;
        conv2d_bwd(in_val(0), in_val(1), gout, nd.a.stride, nd.a.pad, dx, dw, db);
        break;
      }
      case Op::Linear: {
        const auto& x = in_val(0);
        const auto& w = in_val(1);
        const int64_t N = x.shape[0], F = x.shape[1], O = w.shape[0];
        if (want(0)) {
          auto& dx = grad_of(0);
          for (int64_t i = 0; i < N; ++i) {
            const S* gr = gout.ptr() + i * O;
            S* dxr = dx.ptr() + i * F;
            for (int64_t o = 0; o < O; ++o) {
              const S gv = gr[o];
              const S* wr = w.ptr() + o * F;
              for (int64_t f = 0; f < F; ++f) dxr[f] += gv * wr[f];
            }
          }
        }
        if (want(1)) {
          auto& dw = grad_of(1);
          for (int64_t i = 0; i < N; ++i) {
            const S* gr = gout.ptr() + i * O;
            const S* xr = x.ptr() + i * F;
            for (int64_t o = 0; o < O; ++o) {
              const S gv = gr[o];
              S* dwr = dw.ptr() + o * F;
              for (int64_t f = 0; f < F; ++f) dwr[f] += gv * xr[f];
            }
          }
        }
        if (nd.in.size() > 2 && want(2)) {
          auto& db = grad_of(2);
          for (int64_t i = 0; i < N; ++i)
            for (int64_t o = 0; o < O; ++o) db[o] += gout[i * O + o];
        }
        break;
      }
      case Op::BnInf: {
        const auto& x = in_val(0);
        const auto& gamma = in_val(1);
        const auto& mu = in_val(3);
        const auto& var = in_val(4);
        const int64_t N = x.shape[0], C = x.shape[1], HW = x.shape[2] * x.shape[3];
        for (int64_t c = 0; c < C; ++c) {
          const double istd = 1.0 / std::sqrt(static_cast<double>(var[c]) + nd.a.eps);
          const S a = static_cast<S>(static_cast<double>(gamma[c]) * istd);
          double s1 = 0, s2 = 0;
          for (int64_t n2 = 0; n2 < N; ++n2) {
            const S* gr = gout.ptr() + (n2 * C + c) * HW;
            const S* xr = x.ptr() + (n2 * C + c) * HW;
            S* dxr = want(0) ? grad_of(0).ptr() + (n2 * C + c) * HW : nullptr;
            for (int64_t i = 0; i < HW; ++i) {
              if (dxr) dxr[i] += a * gr[i];
              const double gv = static_cast<double>(gr[i]);
              s1 += gv;
              s2 += gv * (static_cast<double>(xr[i]) - static_cast<double>(mu[c]));
            }
          }
          if (want(1)) grad_of(1)[c] += static_cast<S>(s2 * istd);
          if (want(2)) grad_of(2)[c] += static_cast<S>(s1);
          if (want(3)) grad_of(3)[c] += static_cast<S>(-s1 * static_cast<double>(gamma[c]) * istd);
          if (want(4))
            grad_of(4)[c] += static_cast<S>(-0.5 * s2 * static_cast<double>(gamma[c]) * istd * istd * istd);
        }
        break;
      }
      case Op::BnTrain: {
        const auto& x = in_val(0);
        const auto& gamma = in_val(1);
        const auto& saved = ws.bn_saved.at(id);
        const int64_t N = x.shape[0], C = x.shape[1], HW = x.shape[2] * x.shape[3];
        const double cnt = static_cast<double>(N * HW);
        for (int64_t c = 0; c < C; ++c) {
          const double m = static_cast<double>(saved.first[static_cast<size_t>(c)]);
          const double v = static_cast<double>(saved.second[static_cast<size_t>(c)]);
          const double istd = 1.0 / std::sqrt(v + nd.a.eps);
          double s1 = 0, s2 = 0;  // sum g, sum g*xhat
          for (int64_t n2 = 0; n2 < N; ++n2) {
            const S* gr = gout.ptr() + (n2 * C + c) * HW;
            const S* xr = x.ptr() + (n2 * C + c) * HW;
            for (int64_t i = 0; i < HW; ++i) {
              const double gv = static_cast<double>(gr[i]);
              s1 += gv;
              s2 += gv * (static_cast<double>(xr[i]) - m) * istd;
            }
          }
          if (want(1)) grad_of(1)[c] += static_cast<S>(s2);
          if (want(2)) grad_of(2)[c] += static_cast<S>(s1);
          if (want(0)) {
            const double ga = static_cast<double>(gamma[c]) * istd;
            const double mg = s1 / cnt, mgx = s2 / cnt;
            for (int64_t n2 = 0; n2 < N; ++n2) {
              const S* gr = gout.ptr() + (n2 * C + c) * HW;
              const S* xr = x.ptr() + (n2 * C + c) * HW;
              S* dxr = grad_of(0).ptr() + (n2 * C + c) * HW;
              for (int64_t i = 0; i < HW; ++i) {
                const double xhat = (static_cast<double>(xr[i]) - m) * istd;
                dxr[i] += static_cast<S>(ga * (static_cast<double>(gr[i]) - mg - xhat * mgx));
              }
            }
          }
        }
        break;
      }
      case Op::Relu: {
        if (!want(0)) break;
        const auto& x = in_val(0);
        auto& dx = grad_of(0);
        for (int64_t i = 0; i < x.numel(); ++i)
          if (x[i] > S(0)) dx[i] += gout[i];
        break;
      }
      case Op::AvgPool: {
        if (!want(0)) break;
        const auto& x = in_val(0);
        auto& dx = grad_of(0);
        const int64_t NC = x.shape[0] * x.shape[1], H = x.shape[2], W = x.shape[3];
        const int64_t OH = nd.out_shape[2], OW = nd.out_shape[3];
        const int k = nd.a.k, s = nd.a.stride;
        const S inv = S(1) / static_cast<S>(k * k);
        for (int64_t nc = 0; nc < NC; ++nc) {
          const S* gr = gout.ptr() + nc * OH * OW;
          S* dxr = dx.ptr() + nc * H * W;
          for (int64_t oy = 0; oy < OH; ++oy)
            for (int64_t ox = 0; ox < OW; ++ox) {
              const S gv = gr[oy * OW + ox] * inv;
              for (int ky = 0; ky < k; ++ky)
                for (int kx = 0; kx < k; ++kx) dxr[(oy * s + ky) * W + ox * s + kx] += gv;
            }
        }
        break;
      }
      case Op::MaxPool: {
        if (!want(0)) break;
        const auto& x = in_val(0);
        auto& dx = grad_of(0);
        const int64_t NC = x.shape[0] * x.shape[1], H = x.shape[2], W = x.shape[3];
        const int64_t OH = nd.out_shape[2], OW = nd.out_shape[3];
        const int k = nd.a.k, s = nd.a.stride;
        for (int64_t nc = 0; nc < NC; ++nc) {
          const S* xr = x.ptr() + nc * H * W;
          const S* gr = gout.ptr() + nc * OH * OW;
          S* dxr = dx.ptr() + nc * H * W;
          for (int64_t oy = 0; oy < OH; ++oy)
            for (int64_t ox = 0; ox < OW; ++ox) {
              // gradient goes to the first maximal element in scan order
              int64_t arg = (oy * s) * W + ox * s;
              S best = xr[arg];
              for (int ky = 0; ky < k; ++ky)
                for (int kx = 0; kx < k; ++kx) {
                  const int64_t at = (oy * s + ky) * W + ox * s + kx;
                  if (xr[at] > best) {
                    best = xr[at];
                    arg = at;
                  }
                }
              dxr[arg] += gr[oy * OW + ox];
            }
        }
        break;
      }
      case Op::Gap: {
        if (!want(0)) break;
        const auto& x = in_val(0);
        auto& dx = grad_of(0);
        const int64_t NC = x.shape[0] * x.shape[1], HW = x.shape[2] * x.shape[3];
        const S inv = S(1) / static_cast<S>(HW);
        for (int64_t nc = 0; nc < NC; ++nc) {
          const S gv = gout[nc] * inv;
          S* dxr = dx.ptr() + nc * HW;
          for (int64_t i = 0; i < HW; ++i) dxr[i] += gv;
        }
        break;
      }
      case Op::Add: {
        for (int i = 0; i < 2; ++i)
          if (want(i)) {
            auto& d = grad_of(i);
            for (int64_t j = 0; j < gout.numel(); ++j) d[j] += gout[j];
          }
        break;
      }
      case Op::Sub: {
        if (want(0)) {
          auto& d = grad_of(0);
          for (int64_t j = 0; j < gout.numel(); ++j) d[j] += gout[j];
        }
        if (want(1)) {
          auto& d = grad_of(1);
          for (int64_t j = 0; j < gout.numel(); ++j) d[j] -= gout[j];
        }
        break;
      }
      case Op::Mul: {
        if (want(0)) {
          const auto& y = in_val(1);
          auto& d = grad_of(0);
          for (int64_t j = 0; j < gout.numel(); ++j) d[j] += gout[j] * y[j];
        }
        if (want(1)) {
          const auto& x = in_val(0);
          auto& d = grad_of(1);
          for (int64_t j = 0; j < gout.numel(); ++j) d[j] += gout[j] * x[j];
        }
        break;
      }
      case Op::Affine: {
        if (!want(0)) break;
        auto& d = grad_of(0);
        const S a = static_cast<S>(nd.a.alpha);
        for (int64_t j = 0; j < gout.numel(); ++j) d[j] += a * gout[j];
        break;
      }
      case Op::Reshape: {
        if (!want(0)) break;
        auto& d = grad_of(0);
        for (int64_t j = 0; j < gout.numel(); ++j) d[j] += gout[j];
        break;
      }
      case Op::SoftmaxCe: {
        if (!want(0)) break;
        const auto& logits = in_val(0);
        const auto& labels = in_val(1);
        auto& d = grad_of(0);
        const int64_t N = logits.shape[0], C = logits.shape[1];
        const double gv = static_cast<double>(gout[0]) / static_cast<double>(N);
        for (int64_t i = 0; i < N; ++i) {
          const S* row = logits.ptr() + i * C;
          double m = static_cast<double>(row[0]);
          for (int64_t c = 1; c < C; ++c) m = std::max(m, static_cast<double>(row[c]));
          double z = 0;
          for (int64_t c = 0; c < C; ++c) z += std::exp(static_cast<double>(row[c]) - m);
          const int64_t lab = static_cast<int64_t>(std::llround(static_cast<double>(labels[i])));
          S* dr = d.ptr() + i * C;
          for (int64_t c = 0; c < C; ++c) {
            const double p = std::exp(static_cast<double>(row[c]) - m) / z;
            dr[c] += static_cast<S>(gv * (p - (c == lab ? 1.0 : 0.0)));
          }
        }
        break;
      }
      case Op::ChanMean: {
        if (!want(0)) break;
        const auto& x = in_val(0);
        auto& d = grad_of(0);
        const int64_t N = x.shape[0], C = x.shape[1], HW = x.shape[2] * x.shape[3];
        const S inv = S(1) / static_cast<S>(N * HW);
        for (int64_t n2 = 0; n2 < N; ++n2)
          for (int64_t c = 0; c < C; ++c) {
            const S gv = gout[c] * inv;
            S* dr = d.ptr() + (n2 * C + c) * HW;
            for (int64_t i = 0; i < HW; ++i) dr[i] += gv;
          }
        break;
      }
      case Op::ChanSqMean: {
        if (!want(0)) break;
        const auto& x = in_val(0);
        auto& d = grad_of(0);
        const int64_t N = x.shape[0], C = x.shape[1], HW = x.shape[2] * x.shape[3];
        const S inv = S(2) / static_cast<S>(N * HW);
        for (int64_t n2 = 0; n2 < N; ++n2)
          for (int64_t c = 0; c < C; ++c) {
            const S gv = gout[c] * inv;
            const S* xr = x.ptr() + (n2 * C + c) * HW;
            S* dr = d.ptr() + (n2 * C + c) * HW;
            for (int64_t i = 0; i < HW; ++i) dr[i] += gv * xr[i];
          }
        break;
      }
      case Op::Sum: {
        if (!want(0)) break;
        auto& d = grad_of(0);
        const S gv = gout[0];
        for (int64_t j = 0; j < d.numel(); ++j) d[j] += gv;
        break;
      }
      case Op::Max:
      case Op::Min: {
        if (!want(0)) break;
        const auto& x = in_val(0);
        auto& d = grad_of(0);
        int64_t arg = 0;
        S best = x[0];
        if (nd.op == Op::Max) {
          for (int64_t i = 1; i < x.numel(); ++i)
            if (x[i] > best) {
              best = x[i];
              arg = i;
            }
        } else {
          for (int64_t i = 1; i < x.numel(); ++i)
            if (x[i] < best) {
              best = x[i];
              arg = i;
            }
        }
        d[arg] += gout[0];
        break;
      }
      case Op::Smooth3: {
        if (!want(0)) break;
        auto& d = grad_of(0);
        const int64_t NC = d.shape[0] * d.shape[1], H = d.shape[2], W = d.shape[3];
        static const double kk[3] = {0.25, 0.5, 0.25};
        for (int64_t nc = 0; nc < NC; ++nc) {
          const S* gr = gout.ptr() + nc * H * W;
          S* dr = d.ptr() + nc * H * W;
          for (int64_t y = 0; y < H; ++y)
            for (int64_t x2 = 0; x2 < W; ++x2) {
              const double gv = static_cast<double>(gr[y * W + x2]);
              for (int dy = -1; dy <= 1; ++dy)
                for (int dx2 = -1; dx2 <= 1; ++dx2)
                  dr[reflect(y + dy, H) * W + reflect(x2 + dx2, W)] +=
                      static_cast<S>(kk[dy + 1] * kk[dx2 + 1] * gv);
            }
        }
        break;
      }
      case Op::HFlip: {
        if (!want(0)) break;
        auto& d = grad_of(0);
        const int64_t NCH = d.shape[0] * d.shape[1] * d.shape[2], W = d.shape[3];
        for (int64_t r = 0; r < NCH; ++r) {
          const S* gr = gout.ptr() + r * W;
          S* dr = d.ptr() + r * W;
          for (int64_t i = 0; i < W; ++i) dr[i] += gr[W - 1 - i];
        }
        break;
      }
      case Op::Crop: {
        if (!want(0)) break;
        auto& d = grad_of(0);
        const int64_t NC = d.shape[0] * d.shape[1], H = d.shape[2], W = d.shape[3];
        const int64_t OH = nd.a.oh, OW = nd.a.ow;
        for (int64_t nc = 0; nc < NC; ++nc) {
          const S* gr = gout.ptr() + nc * OH * OW;
          S* dr = d.ptr() + nc * H * W;
          for (int64_t y = 0; y < OH; ++y)
            for (int64_t x2 = 0; x2 < OW; ++x2)
              dr[(y + nd.a.oy) * W + x2 + nd.a.ox] += gr[y * OW + x2];
        }
        break;
      }
      case Op::SliceN: {
        if (!want(0)) break;
        auto& d = grad_of(0);
        const int64_t row = d.numel() / d.shape[0];
        S* dr = d.ptr() + nd.a.idx * row;
        for (int64_t i = 0; i < row; ++i) dr[i] += gout[i];
        break;
      }
      case Op::ConcatN: {
        int64_t off = 0;
        for (size_t i = 0; i < nd.in.size(); ++i) {
          const int64_t cnt = in_val(static_cast<int>(i)).numel();
          if (want(static_cast<int>(i))) {
            auto& d = grad_of(static_cast<int>(i));
            for (int64_t j = 0; j < cnt; ++j) d[j] += gout[off + j];
          }
          off += cnt;
        }
        break;
      }
      case Op::FakeQuant:
        // piecewise-constant map: derivative is zero almost everywhere
        break;
    }
  }
}

template struct GraphT<float>;
template struct GraphT<double>;
template struct WorkspaceT<float>;
template struct WorkspaceT<double>;
template void forward<float>(const GraphT<float>&, const ParamStoreT<float>&, const Bindings<float>&,
                             WorkspaceT<float>&, const std::vector<int>&);
template void forward<double>(const GraphT<double>&, const ParamStoreT<double>&,
                              const Bindings<double>&, WorkspaceT<double>&, const std::vector<int>&);
template void backward<float>(const GraphT<float>&, const ParamStoreT<float>&, WorkspaceT<float>&,
                              int, bool);
template void backward<double>(const GraphT<double>&, const ParamStoreT<double>&,
                               WorkspaceT<double>&, int, bool);

}  // namespace dgh
