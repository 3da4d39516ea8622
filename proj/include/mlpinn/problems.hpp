#pragma once

#include <array>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "mlpinn/graph.hpp"

namespace mlpinn {

struct Box {
  std::vector<double> lo, hi;
  int dim() const { return static_cast<int>(lo.size()); }
  void validate() const;
};

// Graph-side quantities of a candidate solution at one point.
struct PointQuantities {
  std::span<const NodeId> x;
  NodeId u = 0;
  std::span<const NodeId> grad;
  NodeId lap = 0;
};

using PointFn = std::function<double(std::span<const double>)>;

// Interior differential operator N[u](x), available both as a graph emission
// (for loss assembly) and as a plain numeric form (for manufactured sources,
// residual shifts and cross-checks).
struct ResidualOperator {
  bool linear = false;
  int order = 2;  // highest input derivative consumed
  std::function<NodeId(GraphBuilder&, const PointQuantities&)> build;
  std::function<double(std::span<const double> x, double u, std::span<const double> grad,
                       double lap)> value;
};

enum class BcKind { Dirichlet, Neumann };

// One face of the domain box. Neumann data is for the outward normal
// derivative; on a box that is sign * d/dx_axis.
struct BoundarySegment {
  BcKind kind = BcKind::Dirichlet;
  int axis = 0;
  int side = 0;  // 0 = lo face, 1 = hi face
  std::string group;  // loss-component pooling key
  PointFn data;
  double normal_sign() const { return side == 0 ? -1.0 : 1.0; }
};

struct ExactSolution {
  PointFn value;
  std::function<NodeId(GraphBuilder&, std::span<const NodeId>)> emit;
};

struct ProblemSpec {
  std::string name;
  Box domain;
  ResidualOperator residual;
  PointFn source;  // f
  std::vector<BoundarySegment> boundary;
  std::optional<ExactSolution> exact;
};

struct SampleSet {
  int dim = 0;
  std::vector<double> interior;                // n_interior x dim, row-major
  std::vector<std::vector<double>> boundary;   // one row block per segment
  uint64_t seed = 0;
  size_t n_interior() const { return dim ? interior.size() / dim : 0; }
  size_t n_boundary(size_t seg) const { return dim ? boundary[seg].size() / dim : 0; }
};

// Uniform i.i.d. points, deterministic per seed; interior points strictly
// inside the box. A total boundary count is split evenly across segments
// (remainder to the earlier segments).
SampleSet sample(const ProblemSpec& p, size_t n_interior, size_t n_boundary_total,
                 uint64_t seed);
SampleSet sample(const ProblemSpec& p, size_t n_interior, std::span<const size_t> per_segment,
                 uint64_t seed);

// --- operator families and registered problems ------------------------------

ResidualOperator poisson_operator();            // N[u] = lap u
ResidualOperator nonlinear_poisson_operator();  // N[u] = -(1+u^2) lap u - 2 u |grad u|^2
ResidualOperator advdiff_operator();            // N[u] = w . grad u - nu lap u

// Velocity field and diffusion coefficient of the advection-diffusion
// benchmark, shared with the finite-difference reference solver.
std::array<double, 2> advdiff_velocity(std::span<const double> x);
inline constexpr double kAdvDiffNu = 0.01;

// Benchmark problems on [0,1]^2.
ProblemSpec poisson_2d();
ProblemSpec nonlinear_poisson_2d();
ProblemSpec advection_diffusion_2d();

// Rebuilds a problem from a chosen exact solution: the source becomes the
// residual operator applied to it (computed with the graph engine) and the
// boundary data its restriction (normal derivative on Neumann faces).
ProblemSpec manufactured(const ProblemSpec& family, ExactSolution exact, std::string name);

// Name registry used by the experiment config ("poisson2d",
// "nonlinear_poisson2d", "advdiff2d", "manufactured:<id>").
ProblemSpec problem_by_name(const std::string& name);
std::vector<std::string> registered_problem_names();

}  // namespace mlpinn
