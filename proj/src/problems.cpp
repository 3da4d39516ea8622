#include "mlpinn/problems.hpp"

#include <cmath>
#include <memory>
#include <numbers>
#include <random>
#include <stdexcept>

namespace mlpinn {

namespace {
constexpr double kPi = std::numbers::pi;
}

void Box::validate() const {
  if (lo.size() != hi.size() || lo.empty())
    throw std::invalid_argument("domain box: lo/hi dimension mismatch");
  for (size_t i = 0; i < lo.size(); ++i)
    if (!(lo[i] < hi[i])) throw std::invalid_argument("domain box: lo must be < hi per axis");
}

SampleSet sample(const ProblemSpec& p, size_t n_interior, size_t n_boundary_total,
                 uint64_t seed) {
  const size_t segs = p.boundary.size();
  std::vector<size_t> per(segs, segs ? n_boundary_total / segs : 0);
  for (size_t i = 0; i < (segs ? n_boundary_total % segs : 0); ++i) per[i] += 1;
  return sample(p, n_interior, per, seed);
}

SampleSet sample(const ProblemSpec& p, size_t n_interior, std::span<const size_t> per_segment,
                 uint64_t seed) {
  p.domain.validate();
  if (per_segment.size() != p.boundary.size())
    throw std::invalid_argument("sample: per-segment count size mismatch");
  const int n = p.domain.dim();
  SampleSet out;
  out.dim = n;
  out.seed = seed;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto draw_open = [&]() {
    double u = u01(rng);
    while (u == 0.0) u = u01(rng);
    return u;
  };

  out.interior.resize(n_interior * n);
  for (size_t i = 0; i < n_interior; ++i)
    for (int k = 0; k < n; ++k)
      out.interior[i * n + k] = p.domain.lo[k] + (p.domain.hi[k] - p.domain.lo[k]) * draw_open();

  out.boundary.resize(p.boundary.size());
  for (size_t s = 0; s < p.boundary.size(); ++s) {
    const BoundarySegment& seg = p.boundary[s];
    if (seg.axis < 0 || seg.axis >= n) throw std::invalid_argument("segment axis out of range");
    double measure = 1.0;
    for (int k = 0; k < n; ++k)
      if (k != seg.axis) measure *= (p.domain.hi[k] - p.domain.lo[k]);
    if (measure == 0.0 && per_segment[s] > 0)
      throw std::invalid_argument("sample: zero-measure segment with positive count");
    out.boundary[s].resize(per_segment[s] * n);
    for (size_t i = 0; i < per_segment[s]; ++i) {
      for (int k = 0; k < n; ++k) {
        double v;
        if (k == seg.axis)
          v = seg.side == 0 ? p.domain.lo[k] : p.domain.hi[k];
        else
          v = p.domain.lo[k] + (p.domain.hi[k] - p.domain.lo[k]) * u01(rng);
        out.boundary[s][i * n + k] = v;
      }
    }
  }
  return out;
}

// --- operator families --------------------------------------------------------

ResidualOperator poisson_operator() {
  ResidualOperator op;
  op.linear = true;
  op.order = 2;
  op.build = [](GraphBuilder&, const PointQuantities& q) { return q.lap; };
  op.value = [](std::span<const double>, double, std::span<const double>, double lap) {
    return lap;
  };
  return op;
}

ResidualOperator nonlinear_poisson_operator() {
  // Expanded divergence form: -(1+u^2) lap u - 2 u (grad u . grad u).
  ResidualOperator op;
  op.linear = false;
  op.order = 2;
  op.build = [](GraphBuilder& g, const PointQuantities& q) {
    NodeId a = g.add(g.constant(1.0), g.mul(q.u, q.u));
    NodeId gg = g.dot(q.grad, q.grad);
    NodeId t1 = g.mul(a, q.lap);
    NodeId t2 = g.mul(g.constant(2.0), g.mul(q.u, gg));
    return g.neg(g.add(t1, t2));
  };
  op.value = [](std::span<const double>, double u, std::span<const double> grad, double lap) {
    double gg = 0.0;
    for (double v : grad) gg += v * v;
    return -(1.0 + u * u) * lap - 2.0 * u * gg;
  };
  return op;
}

std::array<double, 2> advdiff_velocity(std::span<const double> x) {
  return {-5.0 * std::sin(6.0 * kPi * x[0]) * std::cos(6.0 * kPi * x[1]),
          5.0 * std::cos(6.0 * kPi * x[0]) * std::sin(6.0 * kPi * x[1])};
}

ResidualOperator advdiff_operator() {
  ResidualOperator op;
  op.linear = true;
  op.order = 2;
  op.build = [](GraphBuilder& g, const PointQuantities& q) {
    NodeId c6 = g.constant(6.0 * kPi);
    NodeId s0 = g.sin(g.mul(c6, q.x[0])), c0 = g.cos(g.mul(c6, q.x[0]));
    NodeId s1 = g.sin(g.mul(c6, q.x[1])), c1 = g.cos(g.mul(c6, q.x[1]));
    NodeId w0 = g.mul(g.constant(-5.0), g.mul(s0, c1));
    NodeId w1 = g.mul(g.constant(5.0), g.mul(c0, s1));
    std::vector<NodeId> w{w0, w1};
    std::vector<NodeId> gr(q.grad.begin(), q.grad.end());
    NodeId adv = g.dot(w, gr);
    return g.sub(adv, g.mul(g.constant(kAdvDiffNu), q.lap));
  };
  op.value = [](std::span<const double> x, double, std::span<const double> grad, double lap) {
    auto w = advdiff_velocity(x);
    return w[0] * grad[0] + w[1] * grad[1] - kAdvDiffNu * lap;
  };
  return op;
}

// --- manufactured construction -------------------------------------------------

namespace {

// Derivative bundle of an exact solution, shared by the closures below.
struct ExactEval {
  AugmentedExpr ax;
  DerivativeBundle at(std::span<const double> x) const {
    return input_derivatives(ax, x, {});
  }
};

std::shared_ptr<ExactEval> compile_exact(const ExactSolution& exact, int dim) {
  GraphBuilder g;
  std::vector<NodeId> x(dim);
  for (int k = 0; k < dim; ++k) x[k] = g.input(k);
  NodeId u = exact.emit(g, x);
  auto ee = std::make_shared<ExactEval>();
  ee->ax = augment(g.graph(), u, dim, 2);
  return ee;
}

}  // namespace

ProblemSpec manufactured(const ProblemSpec& family, ExactSolution exact, std::string name) {
  family.domain.validate();
  const int dim = family.domain.dim();
  auto ee = compile_exact(exact, dim);

  ProblemSpec p;
  p.name = std::move(name);
  p.domain = family.domain;
  p.residual = family.residual;
  auto op_value = family.residual.value;
  p.source = [ee, op_value](std::span<const double> x) {
    DerivativeBundle b = ee->at(x);
    return op_value(x, b.value, b.grad, b.laplacian);
  };
  for (const BoundarySegment& seg : family.boundary) {
    BoundarySegment s = seg;
    if (seg.kind == BcKind::Dirichlet) {
      s.data = [ee](std::span<const double> x) { return ee->at(x).value; };
    } else {
      const int axis = seg.axis;
      const double sign = seg.normal_sign();
      s.data = [ee, axis, sign](std::span<const double> x) {
        return sign * ee->at(x).grad[axis];
      };
    }
    p.boundary.push_back(std::move(s));
  }
  p.exact = std::move(exact);
  return p;
}

// --- registered problems --------------------------------------------------------

namespace {

std::vector<BoundarySegment> dirichlet_box(int dim, const PointFn& g) {
  std::vector<BoundarySegment> segs;
  for (int axis = 0; axis < dim; ++axis)
    for (int side = 0; side < 2; ++side)
      segs.push_back({BcKind::Dirichlet, axis, side, "boundary", g});
  return segs;
}

// sin(a x0^2 + b x1) * sin(a x1^2 + b x0)
ExactSolution chirp_product_exact(double a, double b) {
  ExactSolution e;
  e.value = [a, b](std::span<const double> x) {
    return std::sin(a * x[0] * x[0] + b * x[1]) * std::sin(a * x[1] * x[1] + b * x[0]);
  };
  e.emit = [a, b](GraphBuilder& g, std::span<const NodeId> x) {
    NodeId ca = g.constant(a), cb = g.constant(b);
    NodeId p0 = g.add(g.mul(ca, g.mul(x[0], x[0])), g.mul(cb, x[1]));
    NodeId p1 = g.add(g.mul(ca, g.mul(x[1], x[1])), g.mul(cb, x[0]));
    return g.mul(g.sin(p0), g.sin(p1));
  };
  return e;
}

ExactSolution sine_product_exact(int dim) {
  ExactSolution e;
  e.value = [dim](std::span<const double> x) {
    double v = 1.0;
    for (int k = 0; k < dim; ++k) v *= std::sin(kPi * x[k]);
    return v;
  };
  e.emit = [dim](GraphBuilder& g, std::span<const NodeId> x) {
    NodeId cpi = g.constant(kPi);
    NodeId v = g.sin(g.mul(cpi, x[0]));
    for (int k = 1; k < dim; ++k) v = g.mul(v, g.sin(g.mul(cpi, x[k])));
    return v;
  };
  return e;
}

ProblemSpec poisson_family(int dim) {
  ProblemSpec p;
  p.name = "poisson";
  p.domain = {std::vector<double>(dim, 0.0), std::vector<double>(dim, 1.0)};
  p.residual = poisson_operator();
  p.source = [](std::span<const double>) { return 0.0; };
  p.boundary = dirichlet_box(dim, [](std::span<const double>) { return 0.0; });
  return p;
}

}  // namespace

ProblemSpec poisson_2d() {
  // lap u = f with the exact solution sin(8 pi x0^2 + 4 pi x1) sin(8 pi x1^2 + 4 pi x0).
  return manufactured(poisson_family(2), chirp_product_exact(8.0 * kPi, 4.0 * kPi), "poisson2d");
}

ProblemSpec nonlinear_poisson_2d() {
  ProblemSpec p;
  p.name = "nonlinear_poisson2d";
  p.domain = {{0.0, 0.0}, {1.0, 1.0}};
  p.residual = nonlinear_poisson_operator();
  p.source = [](std::span<const double> x) {
    return 0.5 * std::exp(2.0 + 2.0 * std::sin(10.0 * kPi * x[0] * x[0] + 10.0 * kPi * x[1]));
  };
  p.boundary = dirichlet_box(2, [](std::span<const double>) { return 1.0; });
  return p;
}

ProblemSpec advection_diffusion_2d() {
  ProblemSpec p;
  p.name = "advdiff2d";
  p.domain = {{0.0, 0.0}, {1.0, 1.0}};
  p.residual = advdiff_operator();
  p.source = [](std::span<const double> x) { return std::sin(4.0 * kPi * x[1]); };
  PointFn zero = [](std::span<const double>) { return 0.0; };
  // Homogeneous Neumann on x1 in {0,1}; Dirichlet 0 at x0 = 0 and 1 at x0 = 1.
  p.boundary.push_back({BcKind::Neumann, 1, 0, "neumann", zero});
  p.boundary.push_back({BcKind::Neumann, 1, 1, "neumann", zero});
  p.boundary.push_back({BcKind::Dirichlet, 0, 0, "dirichlet", zero});
  p.boundary.push_back({BcKind::Dirichlet, 0, 1, "dirichlet",
                        [](std::span<const double>) { return 1.0; }});
  return p;
}

namespace {

ProblemSpec advdiff_family() {
  ProblemSpec p = advection_diffusion_2d();
  p.name = "advdiff";
  return p;
}

ExactSolution linear_x0_exact() {
  ExactSolution e;
  e.value = [](std::span<const double> x) { return x[0]; };
  e.emit = [](GraphBuilder& g, std::span<const NodeId> x) {
    return g.add(x[0], g.constant(0.0));
  };
  return e;
}

ExactSolution bilinear_exact() {
  ExactSolution e;
  e.value = [](std::span<const double> x) { return 1.0 + x[0] * x[1]; };
  e.emit = [](GraphBuilder& g, std::span<const NodeId> x) {
    return g.add(g.constant(1.0), g.mul(x[0], x[1]));
  };
  return e;
}

}  // namespace

ProblemSpec problem_by_name(const std::string& name) {
  if (name == "poisson2d") return poisson_2d();
  if (name == "nonlinear_poisson2d") return nonlinear_poisson_2d();
  if (name == "advdiff2d") return advection_diffusion_2d();
  if (name == "manufactured:poisson_sines")
    return manufactured(poisson_family(2), sine_product_exact(2), name);
  if (name == "manufactured:poisson_sine1d")
    return manufactured(poisson_family(1), sine_product_exact(1), name);
  if (name == "manufactured:poisson_chirp_half")
    return manufactured(poisson_family(2), chirp_product_exact(4.0 * kPi, 2.0 * kPi), name);
  if (name == "manufactured:advdiff_linear")
    return manufactured(advdiff_family(), linear_x0_exact(), name);
  if (name == "manufactured:nonlinear_bilinear") {
    ProblemSpec family = nonlinear_poisson_2d();
    return manufactured(family, bilinear_exact(), name);
  }
  throw std::invalid_argument("unknown problem '" + name + "'");
}

std::vector<std::string> registered_problem_names() {
  return {"poisson2d",
          "nonlinear_poisson2d",
          "advdiff2d",
          "manufactured:poisson_sines",
          "manufactured:poisson_sine1d",
          "manufactured:poisson_chirp_half",
          "manufactured:advdiff_linear",
          "manufactured:nonlinear_bilinear"};
}

}  // namespace mlpinn
