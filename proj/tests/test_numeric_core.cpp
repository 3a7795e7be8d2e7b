// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "dgh/graph.hpp"

using namespace dgh;

namespace {

using GraphD = GraphT<double>;
using StoreD = ParamStoreT<double>;
using WsD = WorkspaceT<double>;

TensorD rand_tensor(std::vector<int64_t> shape, Rng& rng, double lo = -1, double hi = 1) {
  TensorD t(shape);
  for (auto& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

// keeps values away from ReLU/max kinks so the central-difference oracle is
// valid at step h
TensorD rand_tensor_off_kinks(std::vector<int64_t> shape, Rng& rng, double margin = 5e-3) {
  TensorD t(shape);
  for (auto& v : t.data) {
    double x;
    do {
      x = rng.uniform(-1, 1);
    } while (std::abs(x) < margin);
    v = x;
  }
  return t;
}

// central finite differences on the double graph against the analytic
// backward pass
void fd_check(const GraphD& g, const StoreD& store, std::vector<std::pair<int, TensorD>> leaves,
              int root, double h = 1e-3, double tol = 1e-3) {
  WsD ws;
  Bindings<double> bind;
  for (auto& [id, t] : leaves) bind.push_back({id, &t});
  forward(g, store, bind, ws, {root});
  backward(g, store, ws, root);

  for (auto& [id, t] : leaves) {
    if (!g.node(id).diff) continue;
    REQUIRE(ws.has_grad[static_cast<size_t>(id)]);
    const TensorD grad = ws.gradient(id);
    for (int64_t i = 0; i < t.numel(); ++i) {
      const double keep = t[i];
      t[i] = keep + h;
      WsD wp;
      forward(g, store, bind, wp, {root});
      const double fp = wp.value(root)[0];
      t[i] = keep - h;
      WsD wm;
      forward(g, store, bind, wm, {root});
      const double fm = wm.value(root)[0];
      t[i] = keep;
      const double fd = (fp - fm) / (2 * h);
      const double rel = std::abs(fd - grad[i]) / std::max({1.0, std::abs(fd), std::abs(grad[i])});
      INFO("leaf ", g.node(id).name, " coord ", i, " fd ", fd, " grad ", grad[i]);
      REQUIRE(rel < tol);
    }
  }
}

}  // namespace

TEST_CASE("1x1 identity conv leaves the tensor unchanged") {
  Rng rng(7);
  GraphD g;
  int x = g.input({2, 3, 5, 5}, "x");
  TensorD w({3, 3, 1, 1});
  for (int c = 0; c < 3; ++c) w.data[static_cast<size_t>(c * 3 + c)] = 1.0;
  int wn = g.constant(w, "w");
  int y = g.conv2d(x, wn, -1, 1, 0, "conv");
  TensorD xv = rand_tensor({2, 3, 5, 5}, rng);
  WsD ws;
  forward(g, StoreD{}, {{x, &xv}}, ws, {y});
  CHECK(max_abs_diff(ws.value(y), xv) == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("all-zero input through conv(no bias)+relu stays zero") {
  Rng rng(8);
  GraphD g;
  int x = g.input({1, 2, 6, 6}, "x");
  int wn = g.constant(rand_tensor({4, 2, 3, 3}, rng), "w");
  int y = g.relu(g.conv2d(x, wn, -1, 1, 1, "conv"), "relu");
  TensorD xv({1, 2, 6, 6});
  WsD ws;
  forward(g, StoreD{}, {{x, &xv}}, ws, {y});
  for (double v : ws.value(y).data) CHECK(v == 0.0);
}

TEST_CASE("2-layer conv matches a straight-line nested-loop oracle") {
  Rng rng(9);
  const int C0 = 3, C1 = 4, C2 = 2, H = 8, W = 8;
  TensorD x = rand_tensor({1, C0, H, W}, rng);
  TensorD w1 = rand_tensor({C1, C0, 3, 3}, rng);
  TensorD b1 = rand_tensor({C1}, rng);
  TensorD w2 = rand_tensor({C2, C1, 3, 3}, rng);

  GraphD g;
  int xi = g.input({1, C0, H, W}, "x");
  int c1 = g.conv2d(xi, g.constant(w1), g.constant(b1), 1, 1, "c1");
  int r1 = g.relu(c1);
  int c2 = g.conv2d(r1, g.constant(w2), -1, 1, 1, "c2");
  WsD ws;
  forward(g, StoreD{}, {{xi, &x}}, ws, {c2});
  const TensorD& got = ws.value(c2);

  // independent scalar re-implementation of the same arithmetic
  auto conv_at = [&](const TensorD& in, const TensorD& w, const double* bias, int co, int oy,
                     int ox) {
    double acc = bias ? bias[co] : 0.0;
    const int ci_n = static_cast<int>(w.shape[1]);
    for (int ci = 0; ci < ci_n; ++ci)
      for (int ky = 0; ky < 3; ++ky)
        for (int kx = 0; kx < 3; ++kx) {
          const int iy = oy + ky - 1, ix = ox + kx - 1;
          if (iy < 0 || ix < 0 || iy >= in.shape[2] || ix >= in.shape[3]) continue;
          acc += in.at(0, ci, iy, ix) * w.at(co, ci, ky, kx);
        }
    return acc;
  };
  TensorD mid({1, C1, H, W});
  for (int c = 0; c < C1; ++c)
    for (int y = 0; y < H; ++y)
      for (int xx = 0; xx < W; ++xx) {
        const double v = conv_at(x, w1, b1.ptr(), c, y, xx);
        mid.at(0, c, y, xx) = v > 0 ? v : 0;
      }
  double max_err = 0;
  for (int c = 0; c < C2; ++c)
    for (int y = 0; y < H; ++y)
      for (int xx = 0; xx < W; ++xx)
        max_err = std::max(max_err,
                           std::abs(conv_at(mid, w2, nullptr, c, y, xx) - got.at(0, c, y, xx)));
  CHECK(max_err < 1e-9);
}

TEST_CASE("gradient of sum(x) is all ones; gradient of sum(x^2)/2 is x") {
  Rng rng(10);
  GraphD g;
  int x = g.input({3, 2, 4, 4}, "x", true);
  int s = g.sum(x, "sum");
  int half_sq = g.affine(g.sum(g.mul(x, x, "xx"), "sumsq"), 0.5, 0.0, "half");
  TensorD xv = rand_tensor({3, 2, 4, 4}, rng);

  WsD ws;
  forward(g, StoreD{}, {{x, &xv}}, ws, {s});
  backward(g, StoreD{}, ws, s);
  for (double v : ws.gradient(x).data) CHECK(v == 1.0);

  WsD ws2;
  forward(g, StoreD{}, {{x, &xv}}, ws2, {half_sq});
  backward(g, StoreD{}, ws2, half_sq);
  CHECK(max_abs_diff(ws2.gradient(x), xv) < 1e-12);
}

TEST_CASE("3-layer conv+bn+relu network passes the finite-difference oracle") {
  Rng rng(11);
  GraphD g;
  int x = g.input({2, 3, 8, 8}, "x", true);
  int w1 = g.constant(rand_tensor({4, 3, 3, 3}, rng), "w1");
  int gamma = g.constant(rand_tensor({4}, rng, 0.5, 1.5), "gamma");
  int beta = g.constant(rand_tensor({4}, rng), "beta");
  int mu = g.constant(rand_tensor({4}, rng), "mu");
  int var = g.constant(rand_tensor({4}, rng, 0.5, 2.0), "var");
  int h1 = g.relu(g.bn_inf(g.conv2d(x, w1, -1, 2, 1, "c1"), gamma, beta, mu, var, 1e-5, "bn1"));
  int w2 = g.constant(rand_tensor({4, 4, 3, 3}, rng), "w2");
  int h2 = g.relu(g.conv2d(h1, w2, -1, 1, 1, "c2"), "r2");
  int w3 = g.constant(rand_tensor({2, 4, 1, 1}, rng), "w3");
  int h3 = g.conv2d(h2, w3, -1, 1, 0, "c3");
  int loss = g.sum(g.mul(h3, h3, "sq"), "loss");
  fd_check(g, StoreD{}, {{x, rand_tensor_off_kinks({2, 3, 8, 8}, rng)}}, loss);
}

TEST_CASE("finite differences agree on every op") {
  Rng rng(12);

  SUBCASE("conv2d stride and padding variants, with weight and bias gradients") {
    for (auto [stride, pad] : {std::pair{1, 0}, {1, 1}, {2, 1}}) {
      GraphD g;
      int x = g.input({2, 3, 7, 7}, "x", true);
      int w = g.input({4, 3, 3, 3}, "w", true);
      int b = g.input({4}, "b", true);
      int y = g.conv2d(x, w, b, stride, pad, "conv");
      int loss = g.sum(g.mul(y, y, "sq"), "loss");
      fd_check(g, StoreD{},
               {{x, rand_tensor({2, 3, 7, 7}, rng)},
                {w, rand_tensor({4, 3, 3, 3}, rng)},
                {b, rand_tensor({4}, rng)}},
               loss);
    }
  }

  SUBCASE("linear") {
    GraphD g;
    int x = g.input({4, 6}, "x", true);
    int w = g.input({3, 6}, "w", true);
    int b = g.input({3}, "b", true);
    int loss = g.sum(g.mul(g.linear(x, w, b), g.linear(x, w, b)), "loss");
    fd_check(g, StoreD{},
             {{x, rand_tensor({4, 6}, rng)}, {w, rand_tensor({3, 6}, rng)}, {b, rand_tensor({3}, rng)}},
             loss);
  }

  SUBCASE("batchnorm training mode with gamma/beta gradients") {
    GraphD g;
    int x = g.input({4, 3, 5, 5}, "x", true);
    int gamma = g.input({3}, "gamma", true);
    int beta = g.input({3}, "beta", true);
    int y = g.bn_train(x, gamma, beta, 1e-5, "bn");
    int loss = g.sum(g.mul(y, y), "loss");
    fd_check(g, StoreD{},
             {{x, rand_tensor({4, 3, 5, 5}, rng)},
              {gamma, rand_tensor({3}, rng, 0.5, 1.5)},
              {beta, rand_tensor({3}, rng)}},
             loss);
  }

  SUBCASE("batchnorm inference mode including mu/var gradients") {
    GraphD g;
    int x = g.input({2, 3, 4, 4}, "x", true);
    int gamma = g.input({3}, "gamma", true);
    int beta = g.input({3}, "beta", true);
    int mu = g.input({3}, "mu", true);
    int var = g.input({3}, "var", true);
    int y = g.bn_inf(x, gamma, beta, mu, var, 1e-5, "bn");
    int loss = g.sum(g.mul(y, y), "loss");
    fd_check(g, StoreD{},
             {{x, rand_tensor({2, 3, 4, 4}, rng)},
              {gamma, rand_tensor({3}, rng, 0.5, 1.5)},
              {beta, rand_tensor({3}, rng)},
              {mu, rand_tensor({3}, rng)},
              {var, rand_tensor({3}, rng, 0.5, 2.0)}},
             loss);
  }

  SUBCASE("relu, pools, gap on kink-free inputs") {
    GraphD g;
    int x = g.input({2, 3, 8, 8}, "x", true);
    int y = g.relu(x, "relu");
    int mp = g.max_pool(y, 2, 2, "maxpool");
    int ap = g.avg_pool(mp, 2, 2, "avgpool");
    int gp = g.gap(ap, "gap");
    int loss = g.sum(g.mul(gp, gp), "loss");
    fd_check(g, StoreD{}, {{x, rand_tensor_off_kinks({2, 3, 8, 8}, rng)}}, loss);
  }

  SUBCASE("elementwise add/sub/mul/affine and reshape") {
    GraphD g;
    int a = g.input({3, 4}, "a", true);
    int b = g.input({3, 4}, "b", true);
    int y = g.mul(g.add(a, b), g.sub(a, g.affine(b, 0.3, -0.2)));
    int r = g.reshape(y, {12}, "flat");
    int loss = g.sum(g.mul(r, r), "loss");
    fd_check(g, StoreD{}, {{a, rand_tensor({3, 4}, rng)}, {b, rand_tensor({3, 4}, rng)}}, loss);
  }

  SUBCASE("softmax cross-entropy") {
    GraphD g;
    int logits = g.input({5, 4}, "logits", true);
    TensorD labels({5});
    for (int i = 0; i < 5; ++i) labels[i] = i % 4;
    int lab = g.constant(labels, "labels");
    int loss = g.softmax_ce(logits, lab, "ce");
    fd_check(g, StoreD{}, {{logits, rand_tensor({5, 4}, rng)}}, loss);
  }

  SUBCASE("channel mean and second-moment reductions") {
    GraphD g;
    int x = g.input({4, 8, 6, 6}, "x", true);
    int m = g.chan_mean(x, "mean");
    int m2 = g.chan_sqmean(x, "m2");
    int var = g.sub(m2, g.mul(m, m), "var");
    int loss = g.sum(g.mul(var, g.add(m, var)), "loss");
    fd_check(g, StoreD{}, {{x, rand_tensor({4, 8, 6, 6}, rng)}}, loss);
  }

  SUBCASE("min/max reductions") {
    GraphD g;
    int x = g.input({1, 10}, "x", true);
    int range = g.sub(g.max(x, "max"), g.min(x, "min"), "range");
    int loss = g.mul(range, range, "loss");
    fd_check(g, StoreD{}, {{x, rand_tensor({1, 10}, rng)}}, loss);
  }

  SUBCASE("smoothing, flip, crop, slice, concat") {
    GraphD g;
    int a = g.input({1, 2, 6, 6}, "a", true);
    int b = g.input({1, 2, 6, 6}, "b", true);
    int pa = g.crop(g.hflip(g.smooth3(a, "sm"), "fl"), 1, 1, 4, 4, "cr");
    int pb = g.crop(g.smooth3(b), 0, 2, 4, 4);
    int cat = g.concat_n({pa, pb}, "cat");
    int row = g.slice_n(cat, 1, "row");
    int loss = g.sum(g.mul(row, g.add(row, g.slice_n(cat, 0))), "loss");
    fd_check(g, StoreD{},
             {{a, rand_tensor({1, 2, 6, 6}, rng)}, {b, rand_tensor({1, 2, 6, 6}, rng)}}, loss);
  }
}

TEST_CASE("forward is pure: identical bindings give bit-identical outputs") {
  Rng rng(13);
  Graph g;
  int x = g.input({2, 3, 8, 8}, "x");
  int w = g.constant(Tensor::randn({4, 3, 3, 3}, rng), "w");
  int y = g.relu(g.conv2d(x, w, -1, 1, 1, "conv"));
  Tensor xv = Tensor::randn({2, 3, 8, 8}, rng);
  Workspace a, b;
  forward(g, ParamStore{}, {{x, &xv}}, a, {y});
  forward(g, ParamStore{}, {{x, &xv}}, b, {y});
  REQUIRE(a.value(y).data == b.value(y).data);
}

TEST_CASE("BN inference node computes (x-mu)/sqrt(var+eps)*gamma+beta") {
  Rng rng(14);
  Graph g;
  int x = g.input({2, 3, 4, 4}, "x");
  Tensor gamma = Tensor::randn({3}, rng), beta = Tensor::randn({3}, rng);
  Tensor mu = Tensor::randn({3}, rng);
  Tensor var({3});
  for (auto& v : var.data) v = static_cast<float>(rng.uniform(0.2, 2.0));
  int y = g.bn_inf(x, g.constant(gamma), g.constant(beta), g.constant(mu), g.constant(var), 1e-5,
                   "bn");
  Tensor xv = Tensor::randn({2, 3, 4, 4}, rng);
  Workspace ws;
  forward(g, ParamStore{}, {{x, &xv}}, ws, {y});
  double max_err = 0;
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 3; ++c)
      for (int i = 0; i < 16; ++i) {
        const double xs = xv.at(n, c, i / 4, i % 4);
        const double expect =
            (xs - mu[c]) / std::sqrt(static_cast<double>(var[c]) + 1e-5) * gamma[c] + beta[c];
        max_err = std::max(max_err, std::abs(expect - ws.value(y).at(n, c, i / 4, i % 4)));
      }
  CHECK(max_err < 1e-5);
}

TEST_CASE("shape mismatch errors name the offending node") {
  Graph g;
  int x = g.input({1, 3, 8, 8}, "x");
  Tensor w = Tensor::zeros({4, 5, 3, 3});  // 5 input channels vs 3
  try {
    g.conv2d(x, g.constant(w, "w"), -1, 1, 1, "stem_conv");
    FAIL("expected shape error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Shape);
    CHECK(std::string(e.what()).find("stem_conv") != std::string::npos);
  }
}

TEST_CASE("non-finite values raise a numeric error naming the node") {
  Graph g;
  int x = g.input({1, 1, 2, 2}, "x");
  int y = g.affine(x, 1e30, 0.0, "blow_up");
  int z = g.mul(y, y, "sq");
  Tensor xv = Tensor::full({1, 1, 2, 2}, 1e10f);
  Workspace ws;
  try {
    forward(g, ParamStore{}, {{x, &xv}}, ws, {z});
    FAIL("expected numeric error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Numeric);
  }
}

TEST_CASE("backward before forward is a usage error") {
  Graph g;
  int x = g.input({1, 2}, "x", true);
  int s = g.sum(x);
  Workspace ws;
  CHECK_THROWS_AS(backward(g, ParamStore{}, ws, s), Error);
}

TEST_CASE("missing binding is a usage error naming the leaf") {
  Graph g;
  int x = g.input({1, 2}, "the_leaf", true);
  int s = g.sum(x);
  Workspace ws;
  try {
    forward(g, ParamStore{}, {}, ws, {s});
    FAIL("expected usage error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Usage);
    CHECK(std::string(e.what()).find("the_leaf") != std::string::npos);
  }
}

TEST_CASE("max reductions route gradient to the first maximal index on ties") {
  Graph g;
  int x = g.input({1, 6}, "x", true);
  int m = g.max(x, "max");
  Tensor xv = Tensor::from({1, 6}, {1.0f, 3.0f, 2.0f, 3.0f, 3.0f, 0.0f});
  Workspace ws;
  forward(g, ParamStore{}, {{x, &xv}}, ws, {m});
  backward(g, ParamStore{}, ws, m);
  const Tensor& grad = ws.gradient(x);
  CHECK(grad[1] == 1.0f);  // first of the tied maxima
  CHECK(grad[3] == 0.0f);
  CHECK(grad[4] == 0.0f);
}

TEST_CASE("max pooling ties go to the first element in scan order") {
  Graph g;
  int x = g.input({1, 1, 2, 2}, "x", true);
  int y = g.max_pool(x, 2, 2, "pool");
  int s = g.sum(y);
  Tensor xv = Tensor::full({1, 1, 2, 2}, 2.5f);
  Workspace ws;
  forward(g, ParamStore{}, {{x, &xv}}, ws, {s});
  backward(g, ParamStore{}, ws, s);
  const Tensor& grad = ws.gradient(x);
  CHECK(grad[0] == 1.0f);
  CHECK(grad[1] == 0.0f);
  CHECK(grad[2] == 0.0f);
  CHECK(grad[3] == 0.0f);
}

TEST_CASE("float backward matches the double-precision finite-difference oracle") {
  // the production float path checked against a double twin of the same graph
  Rng rng(15);
  Graph gf;
  int x = gf.input({1, 3, 6, 6}, "x", true);
  int w = gf.constant(Tensor::randn({4, 3, 3, 3}, rng), "w");
  int gamma = gf.constant(Tensor::full({4}, 1.2f), "gamma");
  int beta = gf.constant(Tensor::full({4}, -0.1f), "beta");
  int mu = gf.constant(Tensor::zeros({4}), "mu");
  int var = gf.constant(Tensor::full({4}, 1.0f), "var");
  int h = gf.relu(gf.bn_inf(gf.conv2d(x, w, -1, 1, 1, "c"), gamma, beta, mu, var, 1e-5, "bn"));
  int loss = gf.sum(gf.mul(h, h), "loss");

  Tensor xv = Tensor::randn({1, 3, 6, 6}, rng);
  Workspace ws;
  forward(gf, ParamStore{}, {{x, &xv}}, ws, {loss});
  backward(gf, ParamStore{}, ws, loss);
  const Tensor& grad_f = ws.gradient(x);

  GraphD gd = gf.cast<double>();
  TensorD xd = xv.cast<double>();
  const double hstep = 1e-3;
  WsD wd;
  Bindings<double> bind = {{x, &xd}};
  for (int64_t i = 0; i < xd.numel(); ++i) {
    const double keep = xd[i];
    xd[i] = keep + hstep;
    WsD wp;
    forward(gd, StoreD{}, bind, wp, {loss});
    const double fp = wp.value(loss)[0];
    xd[i] = keep - hstep;
    WsD wm;
    forward(gd, StoreD{}, bind, wm, {loss});
    const double fm = wm.value(loss)[0];
    xd[i] = keep;
    const double fd = (fp - fm) / (2 * hstep);
    const double rel =
        std::abs(fd - grad_f[i]) / std::max({1.0, std::abs(fd), std::abs(static_cast<double>(grad_f[i]))});
    REQUIRE(rel < 1e-3);
  }
}
