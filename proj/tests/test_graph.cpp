#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>
#include <stdexcept>

#include "mlpinn/graph.hpp"
#include "mlpinn/nets.hpp"
#include "oracles.hpp"

using namespace mlpinn;

namespace {

MlpSpec random_mlp_spec(std::mt19937_64& rng, int max_width = 64, int max_depth = 4,
                        int max_dim = 3) {
  std::uniform_int_distribution<int> dim(1, max_dim), depth(1, max_depth), width(4, max_width);
  MlpSpec s;
  s.input_dim = dim(rng);
  const int d = depth(rng);
  for (int i = 0; i < d; ++i) s.hidden.push_back(width(rng));
  return s;
}

std::vector<double> random_point(std::mt19937_64& rng, int n, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> x(n);
  for (double& v : x) v = u(rng);
  return x;
}

}  // namespace

TEST_SUITE_BEGIN("graph");

TEST_CASE("zero network evaluates to zero") {
  MlpSpec s{.input_dim = 2, .hidden = {8, 8}};
  Network net = init_network(s, 1);
  std::fill(net.params().values().begin(), net.params().values().end(), 0.0);
  CHECK(net.value(std::vector<double>{0.3, -0.7}) == 0.0);
  CHECK(net.value(std::vector<double>{5.0, 2.0}) == 0.0);
}

TEST_CASE("single affine layer by hand") {
  // u = w.x + b with w = (1,2), b = 0.5 at x = (1,1)
  GraphBuilder g;
  NodeId x0 = g.input(0), x1 = g.input(1);
  NodeId p0 = g.param(0), p1 = g.param(1), pb = g.param(2);
  NodeId u = g.add(g.add(g.mul(p0, x0), g.mul(p1, x1)), pb);
  const std::vector<double> theta{1.0, 2.0, 0.5};
  const std::vector<double> x{1.0, 1.0};
  CHECK(evaluate(g.graph(), u, x, theta) == doctest::Approx(3.5).epsilon(1e-15));
}

TEST_CASE("mlp forward matches independent reimplementation") {
  MlpSpec s{.input_dim = 2, .hidden = {32, 32, 32}};
  Network net = init_network(s, 42);
  std::mt19937_64 rng(7);
  for (int t = 0; t < 20; ++t) {
    auto x = random_point(rng, 2);
    const double got = net.value(x);
    const double want = oracle::mlp_forward(s, net.params(), x);
    CHECK(oracle::rel_err(got, want) < 1e-14);
  }
}

TEST_CASE("affine input derivatives are exact") {
  GraphBuilder g;
  NodeId x0 = g.input(0), x1 = g.input(1);
  NodeId u = g.affine_const(std::vector<NodeId>{x0, x1}, std::vector<double>{3.0, -2.0}, 0.5);
  auto ax = augment(g.graph(), u, 2, 2);
  auto b = input_derivatives(ax, std::vector<double>{0.4, 0.6}, {});
  CHECK(b.value == doctest::Approx(0.5 + 3.0 * 0.4 - 2.0 * 0.6));
  CHECK(b.grad[0] == 3.0);
  CHECK(b.grad[1] == -2.0);
  CHECK(b.laplacian == 0.0);
}

TEST_CASE("laplacian of sin(x1)sin(x2) is -2 sin sin") {
  GraphBuilder g;
  NodeId u = g.mul(g.sin(g.input(0)), g.sin(g.input(1)));
  auto ax = augment(g.graph(), u, 2, 2);
  std::mt19937_64 rng(3);
  for (int t = 0; t < 10; ++t) {
    auto x = random_point(rng, 2, -3.0, 3.0);
    auto b = input_derivatives(ax, x, {});
    const double want = -2.0 * std::sin(x[0]) * std::sin(x[1]);
    CHECK(b.laplacian == doctest::Approx(want).epsilon(1e-12));
  }
}

TEST_CASE("derivatives of all op kinds match finite differences") {
  // One expression exercising div, exp, pow, dot, tanh, cos, neg, sub.
  GraphBuilder g;
  NodeId x0 = g.input(0), x1 = g.input(1);
  NodeId q = g.div(g.exp(g.mul(g.constant(0.3), x0)), g.add(g.constant(2.0), g.tanh(x1)));
  NodeId p = g.pow(g.add(g.constant(1.7), g.sin(x0)), 2.5);
  std::vector<NodeId> a{q, p}, bb{g.cos(x1), g.neg(x0)};
  NodeId u = g.sub(g.dot(a, bb), g.mul(x0, x1));
  auto ax = augment(g.graph(), u, 2, 2);

  auto f = [&](std::span<const double> x) { return evaluate(ax.graph, ax.handles.value, x, {}); };
  std::mt19937_64 rng(11);
  for (int t = 0; t < 25; ++t) {
    auto x = random_point(rng, 2, -0.9, 0.9);
    auto b = input_derivatives(ax, x, {});
    auto fg = oracle::fd_gradient(f, x, 1e-5);
    CHECK(oracle::vec_rel_err(b.grad, fg) < 1e-7);
    const double fl = oracle::fd_laplacian(f, x, 1e-4);
    CHECK(oracle::rel_err(b.laplacian, fl) < 1e-5);
  }
}

TEST_CASE("random mlp input derivatives vs central differences") {
  std::mt19937_64 rng(2024);
  for (int t = 0; t < 30; ++t) {
    MlpSpec s = random_mlp_spec(rng);
    Network net = init_network(s, 1000 + t);
    auto f = [&](std::span<const double> x) { return net.value(x); };
    // Resample until comfortably non-degenerate.
    std::vector<double> x;
    DerivativeBundle b;
    for (int tries = 0; tries < 50; ++tries) {
      x = random_point(rng, s.input_dim);
      b = net.derivatives(x);
      double gmax = 0.0;
      for (double v : b.grad) gmax = std::max(gmax, std::abs(v));
      if (gmax > 1e-2 && std::abs(b.laplacian) > 1e-2) break;
    }
    auto fg = oracle::fd_gradient(f, x, 1e-4);
    CHECK(oracle::vec_rel_err(b.grad, fg) < 1e-5);
    const double fl = oracle::fd_laplacian(f, x, 1e-4);
    CHECK(oracle::rel_err(b.laplacian, fl) < 1e-5);
  }
}

TEST_CASE("parameter gradient: constant loss and quadratic loss") {
  GraphBuilder g;
  NodeId c = g.constant(4.2);
  auto grad = parameter_gradient(g.graph(), c, {}, std::vector<double>{1.0, 2.0}, 2);
  CHECK(grad[0] == 0.0);
  CHECK(grad[1] == 0.0);

  // loss = 0.5 * ||theta||^2  ->  grad = theta
  GraphBuilder h;
  NodeId p0 = h.param(0), p1 = h.param(1), p2 = h.param(2);
  NodeId loss = h.mul(h.constant(0.5),
                      h.add(h.add(h.mul(p0, p0), h.mul(p1, p1)), h.mul(p2, p2)));
  const std::vector<double> theta{1.5, -2.0, 0.25};
  auto g2 = parameter_gradient(h.graph(), loss, {}, theta, 3);
  for (int i = 0; i < 3; ++i) CHECK(g2[i] == doctest::Approx(theta[i]).epsilon(1e-15));
}

TEST_CASE("parameter gradient of a pinn-style loss vs finite differences") {
  // loss = mean over 8 points of |lap u(x_i) - f(x_i)|^2 for a width-8 MLP,
  // built as one graph: the network is re-emitted per point over distinct
  // input slots, sharing parameter slots.
  MlpSpec s{.input_dim = 2, .hidden = {8}};
  Network net = init_network(s, 5);
  const size_t P = net.params().size();
  std::mt19937_64 rng(17);
  std::vector<double> flat_x;
  auto fsrc = [](double a, double b) { return std::sin(3.0 * a) + b; };

  GraphBuilder g;
  NodeId loss = g.constant(0.0);
  for (int i = 0; i < 8; ++i) {
    auto pt = random_point(rng, 2);
    flat_x.insert(flat_x.end(), pt.begin(), pt.end());
    const uint32_t s0 = 2 * i, s1 = 2 * i + 1;
    std::vector<NodeId> xn{g.input(s0), g.input(s1)};
    NodeId u = net.emit(g, xn);
    std::vector<uint32_t> slots{s0, s1};
    auto h = augment_derivatives(g, u, slots, 2);
    NodeId r = g.sub(h.laplacian, g.constant(fsrc(pt[0], pt[1])));
    loss = g.add(loss, g.mul(r, r));
  }
  loss = g.mul(g.constant(1.0 / 8.0), loss);
  const Graph& lg = g.graph();

  auto got = parameter_gradient(lg, loss, flat_x, net.params().values(), P);

  auto loss_at = [&](std::span<const double> theta) {
    return evaluate(lg, loss, flat_x, theta);
  };
  std::vector<size_t> idx(P);
  for (size_t i = 0; i < P; ++i) idx[i] = i;
  auto fd = oracle::fd_param_gradient(loss_at, net.params().values(), idx, 1e-5);
  CHECK(oracle::vec_rel_err(got, fd) < 1e-4);
}

TEST_CASE("nested consistency: d(lap u)/dtheta matches finite differences") {
  MlpSpec s{.input_dim = 2, .hidden = {10, 10}};
  Network net = init_network(s, 9);
  const size_t P = net.params().size();
  std::mt19937_64 rng(23);
  auto x = random_point(rng, 2);

  GraphBuilder g;
  std::vector<NodeId> xn{g.input(0), g.input(1)};
  NodeId u = net.emit(g, xn);
  auto h = augment_derivatives(g, u, 2, 2);
  auto got = parameter_gradient(g.graph(), h.laplacian, x, net.params().values(), P);

  auto lap_at = [&](std::span<const double> theta) {
    return evaluate(g.graph(), h.laplacian, x, theta);
  };
  std::vector<size_t> idx(P);
  for (size_t i = 0; i < P; ++i) idx[i] = i;
  auto fd = oracle::fd_param_gradient(lap_at, net.params().values(), idx, 1e-5);
  CHECK(oracle::vec_rel_err(got, fd) < 1e-4);
}

TEST_CASE("per-sample gradient norms") {
  SUBCASE("residual independent of parameters gives zeros") {
    GraphBuilder g;
    NodeId r = g.mul(g.input(0), g.input(1));
    (void)g.param(0);
    std::vector<double> rows{0.5, 1.5, -2.0, 3.0};
    auto norms = per_sample_gradient_norms(g.graph(), r, rows, 2, std::vector<double>{7.0}, 1);
    CHECK(norms[0] == 0.0);
    CHECK(norms[1] == 0.0);
  }
  SUBCASE("linear in one parameter with slope 3 gives norm^2 = 9") {
    GraphBuilder g;
    NodeId r = g.mul(g.constant(3.0), g.param(0));
    std::vector<double> rows{0.0};
    Graph gr = g.take();
    gr.n_inputs = 1;
    auto norms = per_sample_gradient_norms(gr, r, rows, 1, std::vector<double>{2.0}, 1);
    CHECK(norms[0] == doctest::Approx(9.0).epsilon(1e-15));
  }
  SUBCASE("random mlp residual norms match per-sample finite differences") {
    MlpSpec s{.input_dim = 2, .hidden = {6}};
    Network net = init_network(s, 31);
    const size_t P = net.params().size();
    GraphBuilder g;
    std::vector<NodeId> xn{g.input(0), g.input(1)};
    NodeId u = net.emit(g, xn);
    auto h = augment_derivatives(g, u, 2, 2);
    NodeId r = g.sub(h.laplacian, g.mul(g.constant(2.0), u));

    std::mt19937_64 rng(4);
    std::vector<double> rows;
    const size_t n_rows = 5;
    for (size_t i = 0; i < n_rows; ++i) {
      auto p = random_point(rng, 2);
      rows.insert(rows.end(), p.begin(), p.end());
    }
    auto norms =
        per_sample_gradient_norms(g.graph(), r, rows, n_rows, net.params().values(), P);

    std::vector<size_t> idx(P);
    for (size_t i = 0; i < P; ++i) idx[i] = i;
    for (size_t i = 0; i < n_rows; ++i) {
      std::span<const double> x(rows.data() + 2 * i, 2);
      auto r_at = [&](std::span<const double> theta) {
        return evaluate(g.graph(), r, x, theta);
      };
      auto fd = oracle::fd_param_gradient(r_at, net.params().values(), idx, 1e-5);
      double want = 0.0;
      for (double v : fd) want += v * v;
      CHECK(oracle::rel_err(norms[i], want) < 1e-4);
    }
  }
}

TEST_CASE("linearity of derivatives in the network") {
  // Derivative bundle of a*u + b*v must equal the same combination of the
  // models' own bundles.
  MlpSpec su{.input_dim = 2, .hidden = {12}};
  MlpSpec sv{.input_dim = 2, .hidden = {9, 7}};
  Network nu = init_network(su, 51), nv = init_network(sv, 52);
  const double a = 1.7, bc = -0.6;
  const size_t Pu = nu.params().size();

  GraphBuilder g;
  std::vector<NodeId> xn{g.input(0), g.input(1)};
  NodeId un = nu.emit(g, xn);
  NodeId vn = nv.emit(g, xn, static_cast<uint32_t>(Pu));
  NodeId comb = g.add(g.mul(g.constant(a), un), g.mul(g.constant(bc), vn));
  auto h = augment_derivatives(g, comb, 2, 2);
  AugmentedExpr ax{g.take(), h, 2};

  std::vector<double> theta(nu.params().values().begin(), nu.params().values().end());
  theta.insert(theta.end(), nv.params().values().begin(), nv.params().values().end());

  std::mt19937_64 rng(6);
  for (int t = 0; t < 10; ++t) {
    auto x = random_point(rng, 2);
    auto bu = nu.derivatives(x);
    auto bv = nv.derivatives(x);
    auto bc2 = input_derivatives(ax, x, theta);
    CHECK(oracle::rel_err(bc2.value, a * bu.value + bc * bv.value) < 1e-12);
    CHECK(oracle::rel_err(bc2.laplacian, a * bu.laplacian + bc * bv.laplacian) < 1e-12);
    for (int k = 0; k < 2; ++k)
      CHECK(oracle::rel_err(bc2.grad[k], a * bu.grad[k] + bc * bv.grad[k]) < 1e-12);
  }
}

TEST_CASE("determinism: identical inputs give bitwise-identical outputs") {
  MlpSpec s{.input_dim = 3, .hidden = {16, 16}};
  Network net = init_network(s, 77);
  std::mt19937_64 rng(8);
  auto x = random_point(rng, 3);
  auto b1 = net.derivatives(x);
  auto b2 = net.derivatives(x);
  CHECK(b1.value == b2.value);
  CHECK(b1.laplacian == b2.laplacian);
  for (size_t k = 0; k < 3; ++k) CHECK(b1.grad[k] == b2.grad[k]);

  const size_t P = net.params().size();
  GraphBuilder g;
  std::vector<NodeId> xn{g.input(0), g.input(1), g.input(2)};
  NodeId u = net.emit(g, xn);
  auto h = augment_derivatives(g, u, 3, 2);
  auto g1 = parameter_gradient(g.graph(), h.laplacian, x, net.params().values(), P);
  auto g2 = parameter_gradient(g.graph(), h.laplacian, x, net.params().values(), P);
  CHECK(g1 == g2);
}

TEST_CASE("lane kernels match scalar kernels") {
  MlpSpec s{.input_dim = 2, .hidden = {24, 24}};
  Network net = init_network(s, 99);
  GraphBuilder g;
  std::vector<NodeId> xn{g.input(0), g.input(1)};
  NodeId u = net.emit(g, xn);
  auto h = augment_derivatives(g, u, 2, 2);
  NodeId r = g.sub(h.laplacian, g.mul(u, u));
  std::vector<NodeId> keep{r};
  std::vector<NodeId> remap;
  Graph cg = compact(g.graph(), keep, remap);
  NodeId rc = remap[r];

  std::mt19937_64 rng(12);
  const size_t P = net.params().size();
  auto params = net.params().values();

  std::vector<double> xin(2 * kLanes);
  std::vector<std::vector<double>> pts(kLanes);
  for (size_t l = 0; l < kLanes; ++l) {
    pts[l] = random_point(rng, 2);
    xin[0 * kLanes + l] = pts[l][0];
    xin[1 * kLanes + l] = pts[l][1];
  }

  std::vector<double> lbuf(cg.size() * kLanes), ladj(cg.size() * kLanes);
  std::vector<double> lgrad(P, 0.0);
  eval_lanes(cg, params, xin.data(), lbuf);
  std::vector<double> seeds(kLanes);
  for (size_t l = 0; l < kLanes; ++l) seeds[l] = 0.1 * (l + 1);
  backward_lanes(cg, params, lbuf, rc, seeds.data(), ladj, lgrad);

  std::vector<double> sbuf(cg.size()), sadj(cg.size());
  std::vector<double> sgrad(P, 0.0);
  for (size_t l = 0; l < kLanes; ++l) {
    eval(cg, params, pts[l], sbuf);
    CHECK(oracle::rel_err(lbuf[rc * kLanes + l], sbuf[rc]) < 1e-13);
    backward(cg, params, sbuf, rc, seeds[l], sadj, sgrad);
  }
  CHECK(oracle::vec_rel_err(lgrad, sgrad) < 1e-13);
}

TEST_CASE("errors: unbound parameters and dimension mismatch") {
  GraphBuilder g;
  NodeId u = g.add(g.param(3), g.input(1));
  std::vector<double> x2{1.0, 2.0}, x1{1.0}, p1{1.0}, p4{1.0, 2.0, 3.0, 4.0};
  auto unbound = [&] { (void)evaluate(g.graph(), u, x2, p1); };
  auto short_x = [&] { (void)evaluate(g.graph(), u, x1, p4); };
  CHECK_THROWS_AS(unbound(), std::invalid_argument);
  CHECK_THROWS_AS(short_x(), std::invalid_argument);
}

TEST_SUITE_END();
