#pragma once

#include <array>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mlpinn/loss.hpp"
#include "mlpinn/problems.hpp"

namespace mlpinn {

// Uniform tensor grid on a 2D box; node (i, j) sits at (x(i), y(j)).
struct Grid2D {
  int nx = 201, ny = 201;
  Box domain{{0.0, 0.0}, {1.0, 1.0}};
  double hx() const { return (domain.hi[0] - domain.lo[0]) / (nx - 1); }
  double hy() const { return (domain.hi[1] - domain.lo[1]) / (ny - 1); }
  double x(int i) const { return domain.lo[0] + i * hx(); }
  double y(int j) const { return domain.lo[1] + j * hy(); }
  size_t idx(int i, int j) const { return static_cast<size_t>(i) * ny + j; }
  size_t count() const { return static_cast<size_t>(nx) * ny; }
  bool boundary_node(int i, int j) const {
    return i == 0 || j == 0 || i == nx - 1 || j == ny - 1;
  }
  void validate() const;
};

struct GridField {
  Grid2D grid;
  std::vector<double> values;
  // Plain-text matrix, one line per x-index (row-major over j).
  void save_matrix(const std::string& path) const;
  // CSV with x1, x2, value columns.
  void save_csv(const std::string& path) const;
};

struct SolveReport {
  int iterations = 0;
  double residual = 0.0;  // final relative residual of the linear solve
  bool converged = false;
  double max_cell_peclet = 0.0;
  bool peclet_warning = false;
  std::vector<double> picard_increments;
};

using Velocity2D = std::function<std::array<double, 2>(std::span<const double>)>;

// 5-point Laplacian, Dirichlet data on all edges; conjugate gradient to
// relative residual < 1e-10. Throws on non-convergence.
GridField solve_poisson_fd(const Grid2D& grid, const PointFn& f, const PointFn& g,
                           SolveReport* report = nullptr,
                           ExecPolicy exec = ExecPolicy::BatchedParallel);

// Central-difference advection + 5-point diffusion; Dirichlet on x1 = {0,1},
// homogeneous Neumann (second-order ghost reflection) on x2 = {0,1}. BiCGStab
// to relative residual < 1e-10. A cell Peclet number above 2 is recorded as a
// warning, not an error.
GridField solve_advdiff_fd(const Grid2D& grid, const Velocity2D& w, double nu, const PointFn& f,
                           const PointFn& g_left, const PointFn& g_right,
                           SolveReport* report = nullptr,
                           ExecPolicy exec = ExecPolicy::BatchedParallel);

// -div((1+u^2) grad u) = f via Picard iteration with arithmetic face
// averaging; stops when the sup-norm increment drops below 1e-9 (cap 200).
GridField solve_nonlinear_poisson_fd(const Grid2D& grid, const PointFn& f, const PointFn& g,
                                     SolveReport* report = nullptr,
                                     ExecPolicy exec = ExecPolicy::BatchedParallel);

// Discrete relative L2 error over all grid nodes. Throws on a zero-norm
// reference.
double relative_l2_error(std::span<const double> approx, const GridField& reference);
double relative_l2_error(const PointFn& approx, const GridField& reference);

GridField sample_field(const Grid2D& grid, const PointFn& fn);
// Nodal injection onto a coarser grid whose nodes nest in the fine grid.
GridField restrict_to(const GridField& fine, const Grid2D& coarse);

}  // namespace mlpinn
