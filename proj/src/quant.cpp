// SPDX-License-Identifier: Apache-2.0
#include "dgh/quant.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>
#include <set>

#include <json.hpp>

#include "dgh/error.hpp"

namespace dgh {

using nlohmann::json;

void QuantScheme::validate() const {
  auto ok = [](int b) { return b == 32 || (b >= 2 && b <= 8); };
  if (!ok(weight_bits) || !ok(act_bits))
    fail(ErrorKind::Config, "bit-widths must be in [2,8] (or 32 to disable): " + str());
}

QuantScheme QuantScheme::parse(const std::string& s) {
  QuantScheme q;
  size_t a_at = s.find('A');
  if (s.empty() || (s[0] != 'W' && s[0] != 'w') || a_at == std::string::npos)
    fail(ErrorKind::Config, "scheme must look like W4A4, got: " + s);
  try {
    q.weight_bits = std::stoi(s.substr(1, a_at - 1));
    q.act_bits = std::stoi(s.substr(a_at + 1));
  } catch (const std::exception&) {
    fail(ErrorKind::Config, "scheme must look like W4A4, got: " + s);
  }
  q.validate();
  return q;
}

std::string QuantScheme::str() const {
  return "W" + std::to_string(weight_bits) + "A" + std::to_string(act_bits);
}

// ---------------------------------------------------------------------------
// coverage
// ---------------------------------------------------------------------------

namespace {

bool is_value_op(Op op) {
  switch (op) {
    case Op::Conv2d:
    case Op::Linear:
    case Op::BnInf:
    case Op::Add:
    case Op::AvgPool:
    case Op::MaxPool:
    case Op::Gap:
    case Op::Relu:
    case Op::Input:
      return true;
    default:
      return false;
  }
}

}  // namespace

CoveragePlan coverage_plan(const ModelBundle& bundle, const QuantScheme& scheme) {
  scheme.validate();
  CoveragePlan plan;
  plan.quantize_output = scheme.coverage == Coverage::HardwareFriendly;
  InferNet net = bundle.infer_net(1);
  const Graph& g = net.g;

  // quantization points sit at fusion-group boundaries: a conv or linear
  // feeding only its BN, or anything feeding only its ReLU, is folded into
  // that consumer
  std::vector<std::vector<int>> consumers(static_cast<size_t>(g.size()));
  for (int id = 0; id < g.size(); ++id)
    for (int in_id : g.node(id).in) consumers[static_cast<size_t>(in_id)].push_back(id);

  std::vector<int> convs;  // conv/linear in topological order
  for (int id = 0; id < g.size(); ++id) {
    const Op op = g.node(id).op;
    if (op == Op::Conv2d || op == Op::Linear) convs.push_back(id);
  }

  std::vector<char> is_point(static_cast<size_t>(g.size()), 0);
  for (int id = 0; id < g.size(); ++id) {
    const auto& nd = g.node(id);
    if (!is_value_op(nd.op)) continue;
    bool absorbed = false;
    if (consumers[static_cast<size_t>(id)].size() == 1) {
      const auto& cons = g.node(consumers[static_cast<size_t>(id)][0]);
      const bool feeds_data = !cons.in.empty() && cons.in[0] == id;
      if ((nd.op == Op::Conv2d || nd.op == Op::Linear) && cons.op == Op::BnInf && feeds_data)
        absorbed = true;
      if (cons.op == Op::Relu &&
          (nd.op == Op::Conv2d || nd.op == Op::Linear || nd.op == Op::BnInf || nd.op == Op::Add))
        absorbed = true;
    }
    if (!absorbed) is_point[static_cast<size_t>(id)] = 1;
  }
  if (scheme.coverage == Coverage::Academic) is_point[static_cast<size_t>(net.logits)] = 0;

  if (scheme.act_bits != 32) {
    // academic protocol: 8 bits on the first layer's input and on the tensor
    // entering the second layer; everything else at the scheme's width
    std::set<int> pinned8;
    if (scheme.coverage == Coverage::Academic) {
      pinned8.insert(net.input);
      if (convs.size() > 1) {
        int at = g.node(convs[1]).in[0];
        while (at >= 0 && !is_point[static_cast<size_t>(at)]) {
          if (g.node(at).in.empty()) break;
          at = g.node(at).in[0];
        }
        if (at >= 0) pinned8.insert(at);
      }
    }
    for (int id = 0; id < g.size(); ++id)
      if (is_point[static_cast<size_t>(id)])
        plan.act_points.push_back({id, pinned8.count(id) ? 8 : scheme.act_bits});
  }

  if (scheme.weight_bits != 32) {
    for (size_t i = 0; i < convs.size(); ++i) {
      const int w_node = g.node(convs[i]).in[1];
      const int param = g.node(w_node).param;
      int bits = scheme.weight_bits;
      if (scheme.coverage == Coverage::Academic && (i == 0 || i + 1 == convs.size())) bits = 8;
      plan.weight_bits[param] = bits;
    }
  }
  return plan;
}

// ---------------------------------------------------------------------------
// grids
// ---------------------------------------------------------------------------

namespace {

double pow2_ceil(double t) { return std::exp2(std::ceil(std::log2(std::max(t, 1e-12)))); }

ActQuantInfo make_act_info(int node, const std::string& name, int bits, ThresholdMode mode,
                           double lo, double hi) {
  ActQuantInfo p;
  p.node = node;
  p.name = name;
  p.bits = bits;
  p.observed_lo = lo;
  p.observed_hi = hi;
  if (mode == ThresholdMode::PowerOfTwo) {
    const double t = std::max(std::abs(lo), std::abs(hi));
    p.threshold = pow2_ceil(t);
    p.scale = p.threshold / std::exp2(bits - 1);
    p.zero_point = 0;
    p.qmin = -(1 << (bits - 1));
    p.qmax = (1 << (bits - 1)) - 1;
  } else {
    // affine grid over the observed range, stretched to represent zero exactly
    double rlo = std::min(0.0, lo);
    double rhi = std::max(0.0, hi);
    if (rhi - rlo < 1e-12) rhi = rlo + 1e-12;
    const int levels = (1 << bits) - 1;
    p.scale = (rhi - rlo) / levels;
    p.zero_point = static_cast<int>(std::lround(-rlo / p.scale));
    p.qmin = 0;
    p.qmax = levels;
    p.threshold = 0;
  }
  return p;
}

}  // namespace

float fake_quant_value(float x, const ActQuantInfo& p) {
  double q = p.zero_point + std::round(static_cast<double>(x) / p.scale);
  q = std::min<double>(p.qmax, std::max<double>(p.qmin, q));
  return static_cast<float>((q - p.zero_point) * p.scale);
}

Tensor quantize_dequantize(const Tensor& t, const ActQuantInfo& p) {
  Tensor out(t.shape);
  for (int64_t i = 0; i < t.numel(); ++i) out[i] = fake_quant_value(t[i], p);
  return out;
}

Tensor quantize_weights(const Tensor& w, const WeightQuantInfo& p) {
  Tensor out(w.shape);
  const int64_t oc = w.shape[0];
  const int64_t per = w.numel() / oc;
  const double qmax = (1 << (p.bits - 1)) - 1;
  const double qmin = -qmax - 1;
  for (int64_t c = 0; c < oc; ++c) {
    const double scale =
        p.scales.size() == 1 ? p.scales[0] : p.scales[static_cast<size_t>(c)];
    for (int64_t i = 0; i < per; ++i) {
      const double v = w[c * per + i];
      double q = std::round(v / scale);
      q = std::min(qmax, std::max(qmin, q));
      out[c * per + i] = static_cast<float>(q * scale);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// calibration
// ---------------------------------------------------------------------------

QuantParams calibrate(const ModelBundle& bundle, const Tensor& calib_images,
                      const QuantScheme& scheme) {
  if (calib_images.rank() != 4 || calib_images.shape[0] < 1)
    fail(ErrorKind::Usage, "calibration needs at least one image");
  QuantParams out;
  out.scheme = scheme;
  const CoveragePlan plan = coverage_plan(bundle, scheme);

  // weight grids come from the weights themselves
  for (const auto& [param, bits] : plan.weight_bits) {
    const Tensor& w = bundle.params.values[static_cast<size_t>(param)];
    WeightQuantInfo info;
    info.param = param;
    info.name = bundle.params.names[static_cast<size_t>(param)];
    info.bits = bits;
    const int64_t oc = w.shape[0];
    const int64_t per = w.numel() / oc;
    const double denom = scheme.threshold_mode == ThresholdMode::PowerOfTwo
                             ? std::exp2(bits - 1)
                             : static_cast<double>((1 << (bits - 1)) - 1);
    auto channel_scale = [&](double maxabs) {
      if (scheme.threshold_mode == ThresholdMode::PowerOfTwo)
        return pow2_ceil(maxabs) / denom;
      return std::max(maxabs, 1e-12) / denom;
    };
    if (scheme.granularity == WeightGranularity::PerChannel) {
      for (int64_t c = 0; c < oc; ++c) {
        double maxabs = 0;
        for (int64_t i = 0; i < per; ++i)
          maxabs = std::max(maxabs, std::abs(static_cast<double>(w[c * per + i])));
        info.scales.push_back(channel_scale(maxabs));
      }
    } else {
      double maxabs = 0;
      for (int64_t i = 0; i < w.numel(); ++i)
        maxabs = std::max(maxabs, std::abs(static_cast<double>(w[i])));
      info.scales.push_back(channel_scale(maxabs));
    }
    out.weights.push_back(std::move(info));
  }

  if (plan.act_points.empty()) return out;

  // observe min/max per tracked tensor over the calibration pass
  std::map<int, std::pair<double, double>> ranges;
  const int64_t total = calib_images.shape[0];
  const int64_t C = calib_images.shape[1], H = calib_images.shape[2], W = calib_images.shape[3];
  int64_t done = 0;
  while (done < total) {
    const int bs = static_cast<int>(std::min<int64_t>(32, total - done));
    InferNet net = bundle.infer_net(bs);
    Tensor in({bs, C, H, W});
    std::memcpy(in.ptr(), calib_images.ptr() + done * C * H * W,
                static_cast<size_t>(bs * C * H * W) * sizeof(float));
    Workspace ws;
    Bindings<float> bind = {{net.input, &in}};
    std::vector<int> outs;
    for (const auto& [node, bits] : plan.act_points) outs.push_back(node);
    forward(net.g, bundle.params, bind, ws, outs);
    for (const auto& [node, bits] : plan.act_points) {
      const Tensor& v = ws.value(node);
      double lo = v[0], hi = v[0];
      for (int64_t i = 1; i < v.numel(); ++i) {
        lo = std::min(lo, static_cast<double>(v[i]));
        hi = std::max(hi, static_cast<double>(v[i]));
      }
      auto it = ranges.find(node);
      if (it == ranges.end())
        ranges[node] = {lo, hi};
      else {
        it->second.first = std::min(it->second.first, lo);
        it->second.second = std::max(it->second.second, hi);
      }
    }
    done += bs;
  }

  InferNet net = bundle.infer_net(1);
  for (const auto& [node, bits] : plan.act_points) {
    const auto& r = ranges.at(node);
    out.acts.push_back(make_act_info(node, net.g.node(node).name, bits, scheme.threshold_mode,
                                     r.first, r.second));
  }
  return out;
}

std::string QuantParams::to_json() const {
  json j;
  j["scheme"] = scheme.str();
  j["threshold_mode"] = scheme.threshold_mode == ThresholdMode::PowerOfTwo ? "power_of_two" : "minmax";
  j["coverage"] = scheme.coverage == Coverage::HardwareFriendly ? "hardware_friendly" : "academic";
  j["activations"] = json::array();
  for (const auto& a : acts) {
    json e;
    e["tensor"] = a.name;
    e["bits"] = a.bits;
    e["observed"] = {a.observed_lo, a.observed_hi};
    e["scale"] = a.scale;
    e["zero_point"] = a.zero_point;
    if (a.threshold > 0) e["threshold"] = a.threshold;
    j["activations"].push_back(e);
  }
  j["weights"] = json::array();
  for (const auto& w : weights) {
    json e;
    e["tensor"] = w.name;
    e["bits"] = w.bits;
    e["scales"] = w.scales;
    j["weights"].push_back(e);
  }
  return j.dump(2) + "\n";
}

// ---------------------------------------------------------------------------
// quantized inference
// ---------------------------------------------------------------------------

namespace {

struct QNet {
  Graph g;
  int input = -1;
  int logits = -1;
};

QNet make_quantized_net(const ModelBundle& bundle, const QuantParams& params,
                        const QuantScheme& scheme, int batch, const CoveragePlan& plan) {
  std::map<int, const ActQuantInfo*> act_by_node;
  for (const auto& a : params.acts) act_by_node[a.node] = &a;

  InferNet net = bundle.infer_net(batch);
  for (const auto& [node, bits] : plan.act_points) {
    auto it = act_by_node.find(node);
    if (it == act_by_node.end())
      fail(ErrorKind::Coverage, "no quantization parameters for covered tensor '" +
                                    net.g.node(node).name + "' (scheme " + scheme.str() + ")");
    if (it->second->bits != bits)
      fail(ErrorKind::Coverage, "parameters for tensor '" + net.g.node(node).name + "' carry " +
                                    std::to_string(it->second->bits) +
                                    " bits, coverage requires " + std::to_string(bits));
  }

  std::map<int, int> plan_bits(plan.act_points.begin(), plan.act_points.end());

  // re-emit the graph, appending a fake-quant after each covered tensor;
  // consumers are rewired to the quantized value through the id map
  QNet q;
  std::vector<int> remap(static_cast<size_t>(net.g.size()), -1);
  for (int id = 0; id < net.g.size(); ++id) {
    Graph::Node nd = net.g.node(id);
    for (auto& in_id : nd.in) in_id = remap[static_cast<size_t>(in_id)];
    q.g.nodes.push_back(std::move(nd));
    int new_id = q.g.size() - 1;
    if (id == net.input) q.input = new_id;  // bindings attach before quantization
    if (plan_bits.count(id)) {
      const ActQuantInfo& a = *act_by_node.at(id);
      new_id = q.g.fake_quant(new_id, a.scale, a.zero_point, a.qmin, a.qmax, a.name + ".fq");
    }
    remap[static_cast<size_t>(id)] = new_id;
  }
  q.logits = remap[static_cast<size_t>(net.logits)];
  return q;
}

}  // namespace

Tensor quantized_outputs(const ModelBundle& bundle, const QuantParams& params,
                         const QuantScheme& scheme, const Tensor& images, int batch) {
  scheme.validate();
  const CoveragePlan plan = coverage_plan(bundle, scheme);

  ParamStore qstore = bundle.params;
  for (const auto& w : params.weights) {
    if (plan.weight_bits.count(w.param) == 0) continue;
    qstore.values[static_cast<size_t>(w.param)] =
        quantize_weights(qstore.values[static_cast<size_t>(w.param)], w);
  }
  for (const auto& [param, bits] : plan.weight_bits) {
    const bool have = std::any_of(params.weights.begin(), params.weights.end(),
                                  [&](const auto& w) { return w.param == param; });
    if (!have)
      fail(ErrorKind::Coverage, "no quantization parameters for covered weight '" +
                                    bundle.params.names[static_cast<size_t>(param)] + "'");
  }

  const int64_t total = images.shape[0];
  const int64_t C = images.shape[1], H = images.shape[2], W = images.shape[3];
  Tensor out;
  int64_t done = 0;
  while (done < total) {
    const int bs = static_cast<int>(std::min<int64_t>(batch, total - done));
    QNet qn = make_quantized_net(bundle, params, scheme, bs, plan);
    Tensor in({bs, C, H, W});
    std::memcpy(in.ptr(), images.ptr() + done * C * H * W,
                static_cast<size_t>(bs * C * H * W) * sizeof(float));
    Workspace ws;
    Bindings<float> bind = {{qn.input, &in}};
    forward(qn.g, qstore, bind, ws, {qn.logits});
    const Tensor& logits = ws.value(qn.logits);
    if (out.numel() == 0) out = Tensor({total, logits.shape[1]});
    std::memcpy(out.ptr() + done * logits.shape[1], logits.ptr(),
                static_cast<size_t>(bs * logits.shape[1]) * sizeof(float));
    done += bs;
  }
  return out;
}

QuantEvalResult evaluate_quantized(const ModelBundle& bundle, const QuantParams& params,
                                   const QuantScheme& scheme, const LabeledDataset& val) {
  QuantEvalResult res;
  res.float_accuracy = eval_accuracy(bundle, val);
  if (!scheme.enabled()) {
    res.quant_accuracy = res.float_accuracy;
    return res;
  }
  const Tensor logits = quantized_outputs(bundle, params, scheme, val.images);
  const int64_t C = logits.shape[1];
  int64_t correct = 0;
  for (int64_t i = 0; i < val.count(); ++i) {
    int64_t arg = 0;
    float best = logits[i * C];
    for (int64_t c = 1; c < C; ++c)
      if (logits[i * C + c] > best) {
        best = logits[i * C + c];
        arg = c;
      }
    if (arg == val.labels[static_cast<size_t>(i)]) ++correct;
  }
  res.quant_accuracy = static_cast<double>(correct) / static_cast<double>(val.count());
  return res;
}

}  // namespace dgh
