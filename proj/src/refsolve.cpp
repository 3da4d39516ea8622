#include "mlpinn/refsolve.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

namespace mlpinn {

void Grid2D::validate() const {
  domain.validate();
  if (domain.dim() != 2) throw std::invalid_argument("Grid2D: domain must be 2D");
  if (nx < 3 || ny < 3) throw std::invalid_argument("Grid2D: need at least 3 nodes per axis");
}

void GridField::save_matrix(const std::string& path) const {
  FILE* f = std::fopen(path.c_str(), "w");
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  for (int i = 0; i < grid.nx; ++i) {
    for (int j = 0; j < grid.ny; ++j)
      std::fprintf(f, j ? " %.17g" : "%.17g", values[grid.idx(i, j)]);
    std::fprintf(f, "\n");
  }
  std::fclose(f);
}

void GridField::save_csv(const std::string& path) const {
  FILE* f = std::fopen(path.c_str(), "w");
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  std::fprintf(f, "x1,x2,value\n");
  for (int i = 0; i < grid.nx; ++i)
    for (int j = 0; j < grid.ny; ++j)
      std::fprintf(f, "%.17g,%.17g,%.17g\n", grid.x(i), grid.y(j), values[grid.idx(i, j)]);
  std::fclose(f);
}

namespace {

double dot_serial(std::span<const double> a, std::span<const double> b) {
  double acc = 0.0;
  for (size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

// Unknowns of the Dirichlet solvers: interior nodes, index (i-1)*(ny-2)+(j-1).
struct InteriorMap {
  int nx, ny;
  size_t count() const { return static_cast<size_t>(nx - 2) * (ny - 2); }
  size_t at(int i, int j) const {
    return static_cast<size_t>(i - 1) * (ny - 2) + (j - 1);
  }
};

// y = A x for A = -lap_h with zero Dirichlet data.
void apply_neg_laplacian(const Grid2D& g, const InteriorMap& map, std::span<const double> x,
                         std::span<double> y, bool parallel) {
  const double cx = 1.0 / (g.hx() * g.hx());
  const double cy = 1.0 / (g.hy() * g.hy());
  const double cd = 2.0 * (cx + cy);
  const int nx = g.nx, ny = g.ny;
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (parallel)
#endif
  for (int i = 1; i <= nx - 2; ++i) {
    for (int j = 1; j <= ny - 2; ++j) {
      const double uC = x[map.at(i, j)];
      const double uW = i > 1 ? x[map.at(i - 1, j)] : 0.0;
      const double uE = i < nx - 2 ? x[map.at(i + 1, j)] : 0.0;
      const double uS = j > 1 ? x[map.at(i, j - 1)] : 0.0;
      const double uN = j < ny - 2 ? x[map.at(i, j + 1)] : 0.0;
      y[map.at(i, j)] = cd * uC - cx * (uW + uE) - cy * (uS + uN);
    }
  }
}

// Variable-coefficient flux form: y = A x for A = -div(a grad .) with zero
// Dirichlet data; `a` holds nodal coefficients on the full grid.
void apply_neg_divagrad(const Grid2D& g, const InteriorMap& map, std::span<const double> a,
                        std::span<const double> x, std::span<double> y, bool parallel) {
  const double cx = 1.0 / (g.hx() * g.hx());
  const double cy = 1.0 / (g.hy() * g.hy());
  const int nx = g.nx, ny = g.ny;
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (parallel)
#endif
  for (int i = 1; i <= nx - 2; ++i) {
    for (int j = 1; j <= ny - 2; ++j) {
      const double aC = a[g.idx(i, j)];
      const double aW = 0.5 * (aC + a[g.idx(i - 1, j)]);
      const double aE = 0.5 * (aC + a[g.idx(i + 1, j)]);
      const double aS = 0.5 * (aC + a[g.idx(i, j - 1)]);
      const double aN = 0.5 * (aC + a[g.idx(i, j + 1)]);
      const double uC = x[map.at(i, j)];
      const double uW = i > 1 ? x[map.at(i - 1, j)] : 0.0;
      const double uE = i < nx - 2 ? x[map.at(i + 1, j)] : 0.0;
      const double uS = j > 1 ? x[map.at(i, j - 1)] : 0.0;
      const double uN = j < ny - 2 ? x[map.at(i, j + 1)] : 0.0;
      y[map.at(i, j)] = cx * (aW * (uC - uW) + aE * (uC - uE)) +
                        cy * (aS * (uC - uS) + aN * (uC - uN));
    }
  }
}

using ApplyFn = std::function<void(std::span<const double>, std::span<double>)>;

// Conjugate gradient to relative residual `tol`; throws on non-convergence.
int conjugate_gradient(const ApplyFn& apply, std::span<const double> b, std::span<double> x,
                       double tol, int cap, double* out_res) {
  const size_t n = b.size();
  std::vector<double> r(b.begin(), b.end()), p(r), ap(n);
  std::fill(x.begin(), x.end(), 0.0);
  const double bnorm = std::sqrt(dot_serial(b, b));
  if (bnorm == 0.0) {
    if (out_res) *out_res = 0.0;
    return 0;
  }
  double rs = dot_serial(r, r);
  for (int k = 1; k <= cap; ++k) {
    apply(p, ap);
    const double alpha = rs / dot_serial(p, ap);
    for (size_t i = 0; i < n; ++i) x[i] += alpha * p[i];
    for (size_t i = 0; i < n; ++i) r[i] -= alpha * ap[i];
    const double rs_new = dot_serial(r, r);
    const double rel = std::sqrt(rs_new) / bnorm;
    if (rel < tol) {
      if (out_res) *out_res = rel;
      return k;
    }
    const double beta = rs_new / rs;
    for (size_t i = 0; i < n; ++i) p[i] = r[i] + beta * p[i];
    rs = rs_new;
  }
  const double rel = std::sqrt(dot_serial(r, r)) / bnorm;
  char msg[128];
  std::snprintf(msg, sizeof msg, "CG did not converge in %d iterations (residual %.3e)", cap,
                rel);
  throw std::runtime_error(msg);
}

int bicgstab(const ApplyFn& apply, std::span<const double> b, std::span<double> x, double tol,
             int cap, double* out_res) {
  const size_t n = b.size();
  std::fill(x.begin(), x.end(), 0.0);
  std::vector<double> r(b.begin(), b.end());
  std::vector<double> rhat(r), p(n, 0.0), v(n, 0.0), s(n), t(n);
  const double bnorm = std::sqrt(dot_serial(b, b));
  if (bnorm == 0.0) {
    if (out_res) *out_res = 0.0;
    return 0;
  }
  double rho = 1.0, alpha = 1.0, omega = 1.0;
  for (int k = 1; k <= cap; ++k) {
    const double rho1 = dot_serial(rhat, r);
    if (rho1 == 0.0) break;
    const double beta = (rho1 / rho) * (alpha / omega);
    for (size_t i = 0; i < n; ++i) p[i] = r[i] + beta * (p[i] - omega * v[i]);
    apply(p, v);
    alpha = rho1 / dot_serial(rhat, v);
    for (size_t i = 0; i < n; ++i) s[i] = r[i] - alpha * v[i];
    double snorm = std::sqrt(dot_serial(s, s));
    if (snorm / bnorm < tol) {
      for (size_t i = 0; i < n; ++i) x[i] += alpha * p[i];
      if (out_res) *out_res = snorm / bnorm;
      return k;
    }
    apply(s, t);
    omega = dot_serial(t, s) / dot_serial(t, t);
    for (size_t i = 0; i < n; ++i) x[i] += alpha * p[i] + omega * s[i];
    for (size_t i = 0; i < n; ++i) r[i] = s[i] - omega * t[i];
    const double rel = std::sqrt(dot_serial(r, r)) / bnorm;
    if (rel < tol) {
      if (out_res) *out_res = rel;
      return k;
    }
    if (omega == 0.0) break;
    rho = rho1;
  }
  const double rel = std::sqrt(dot_serial(r, r)) / bnorm;
  char msg[128];
  std::snprintf(msg, sizeof msg,
                "BiCGStab did not converge in %d iterations (residual %.3e)", cap, rel);
  throw std::runtime_error(msg);
}

}  // namespace

GridField solve_poisson_fd(const Grid2D& grid, const PointFn& f, const PointFn& g,
                           SolveReport* report, ExecPolicy exec) {
  grid.validate();
  const bool parallel = exec == ExecPolicy::BatchedParallel;
  const InteriorMap map{grid.nx, grid.ny};
  const double cx = 1.0 / (grid.hx() * grid.hx());
  const double cy = 1.0 / (grid.hy() * grid.hy());

  GridField out;
  out.grid = grid;
  out.values.assign(grid.count(), 0.0);
  for (int i = 0; i < grid.nx; ++i)
    for (int j = 0; j < grid.ny; ++j)
      if (grid.boundary_node(i, j)) {
        const std::array<double, 2> p{grid.x(i), grid.y(j)};
        out.values[grid.idx(i, j)] = g(p);
      }

  // lap u = f  ->  (-lap_h) u = -f + boundary terms.
  std::vector<double> b(map.count());
  for (int i = 1; i <= grid.nx - 2; ++i)
    for (int j = 1; j <= grid.ny - 2; ++j) {
      const std::array<double, 2> p{grid.x(i), grid.y(j)};
      double v = -f(p);
      if (i == 1) v += cx * out.values[grid.idx(0, j)];
      if (i == grid.nx - 2) v += cx * out.values[grid.idx(grid.nx - 1, j)];
      if (j == 1) v += cy * out.values[grid.idx(i, 0)];
      if (j == grid.ny - 2) v += cy * out.values[grid.idx(i, grid.ny - 1)];
      b[map.at(i, j)] = v;
    }

  std::vector<double> x(map.count(), 0.0);
  ApplyFn apply = [&](std::span<const double> in, std::span<double> y) {
    apply_neg_laplacian(grid, map, in, y, parallel);
  };
  double res = 0.0;
  const int cap = 20 * std::max(grid.nx, grid.ny) * std::max(grid.nx, grid.ny);
  const int iters = conjugate_gradient(apply, b, x, 1e-10, cap, &res);
  if (report) {
    report->iterations = iters;
    report->residual = res;
    report->converged = true;
  }
  for (int i = 1; i <= grid.nx - 2; ++i)
    for (int j = 1; j <= grid.ny - 2; ++j) out.values[grid.idx(i, j)] = x[map.at(i, j)];
  return out;
}

GridField solve_advdiff_fd(const Grid2D& grid, const Velocity2D& w, double nu, const PointFn& f,
                           const PointFn& g_left, const PointFn& g_right, SolveReport* report,
                           ExecPolicy exec) {
  grid.validate();
  if (nu <= 0.0) throw std::invalid_argument("solve_advdiff_fd: nu must be positive");
  const bool parallel = exec == ExecPolicy::BatchedParallel;
  const int nx = grid.nx, ny = grid.ny;
  const double hx = grid.hx(), hy = grid.hy();
  const double cx = nu / (hx * hx), cy = nu / (hy * hy);
  const double ax2 = 1.0 / (2.0 * hx), ay2 = 1.0 / (2.0 * hy);

  // Unknowns: all nodes except the Dirichlet columns i = 0 and i = nx-1.
  auto at = [ny](int i, int j) { return static_cast<size_t>(i - 1) * ny + j; };
  const size_t n_unknown = static_cast<size_t>(nx - 2) * ny;

  // Velocity samples and the cell Peclet check.
  std::vector<double> w1(grid.count()), w2(grid.count());
  double max_pe = 0.0;
  for (int i = 0; i < nx; ++i)
    for (int j = 0; j < ny; ++j) {
      const std::array<double, 2> p{grid.x(i), grid.y(j)};
      auto v = w(p);
      w1[grid.idx(i, j)] = v[0];
      w2[grid.idx(i, j)] = v[1];
      max_pe = std::max(max_pe, std::max(std::abs(v[0]) * hx, std::abs(v[1]) * hy) / nu);
    }

  std::vector<double> gl(ny), gr(ny);
  for (int j = 0; j < ny; ++j) {
    gl[j] = g_left(std::array<double, 2>{grid.x(0), grid.y(j)});
    gr[j] = g_right(std::array<double, 2>{grid.x(nx - 1), grid.y(j)});
  }

  // w . grad u - nu lap u with reflected ghosts at j = 0 and j = ny-1
  // (normal derivative zero: the y-advection term vanishes there).
  ApplyFn apply = [&](std::span<const double> u, std::span<double> y) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (parallel)
#endif
    for (int i = 1; i <= nx - 2; ++i) {
      for (int j = 0; j < ny; ++j) {
        const size_t k = at(i, j);
        const double uC = u[k];
        const double uW = i > 1 ? u[at(i - 1, j)] : 0.0;
        const double uE = i < nx - 2 ? u[at(i + 1, j)] : 0.0;
        const double uS = j > 0 ? u[at(i, j - 1)] : u[at(i, 1)];
        const double uN = j < ny - 1 ? u[at(i, j + 1)] : u[at(i, ny - 2)];
        const double v1 = w1[grid.idx(i, j)];
        const double v2 = w2[grid.idx(i, j)];
        double adv = v1 * (uE - uW) * ax2;
        if (j > 0 && j < ny - 1) adv += v2 * (uN - uS) * ay2;
        const double dif = cx * (2.0 * uC - uW - uE) + cy * (2.0 * uC - uS - uN);
        y[k] = adv + dif;
      }
    }
  };

  std::vector<double> b(n_unknown);
  for (int i = 1; i <= nx - 2; ++i)
    for (int j = 0; j < ny; ++j) {
      const std::array<double, 2> p{grid.x(i), grid.y(j)};
      double v = f(p);
      if (i == 1) {
        v += gl[j] * (w1[grid.idx(i, j)] * ax2 + cx);
      }
      if (i == nx - 2) {
        v += gr[j] * (-w1[grid.idx(i, j)] * ax2 + cx);
      }
      b[at(i, j)] = v;
    }

  std::vector<double> x(n_unknown, 0.0);
  double res = 0.0;
  const int iters = bicgstab(apply, b, x, 1e-10, 50000, &res);

  GridField out;
  out.grid = grid;
  out.values.assign(grid.count(), 0.0);
  for (int j = 0; j < ny; ++j) {
    out.values[grid.idx(0, j)] = gl[j];
    out.values[grid.idx(nx - 1, j)] = gr[j];
  }
  for (int i = 1; i <= nx - 2; ++i)
    for (int j = 0; j < ny; ++j) out.values[grid.idx(i, j)] = x[at(i, j)];
  if (report) {
    report->iterations = iters;
    report->residual = res;
    report->converged = true;
    report->max_cell_peclet = max_pe;
    report->peclet_warning = max_pe > 2.0;
  }
  return out;
}

GridField solve_nonlinear_poisson_fd(const Grid2D& grid, const PointFn& f, const PointFn& g,
                                     SolveReport* report, ExecPolicy exec) {
  grid.validate();
  const bool parallel = exec == ExecPolicy::BatchedParallel;
  const InteriorMap map{grid.nx, grid.ny};
  const double cx = 1.0 / (grid.hx() * grid.hx());
  const double cy = 1.0 / (grid.hy() * grid.hy());
  const int nx = grid.nx, ny = grid.ny;

  GridField out;
  out.grid = grid;
  out.values.assign(grid.count(), 0.0);
  double gsum = 0.0;
  int gcnt = 0;
  for (int i = 0; i < nx; ++i)
    for (int j = 0; j < ny; ++j)
      if (grid.boundary_node(i, j)) {
        const std::array<double, 2> p{grid.x(i), grid.y(j)};
        out.values[grid.idx(i, j)] = g(p);
        gsum += out.values[grid.idx(i, j)];
        gcnt += 1;
      }
  const double u0 = gcnt ? gsum / gcnt : 0.0;
  for (int i = 1; i <= nx - 2; ++i)
    for (int j = 1; j <= ny - 2; ++j) out.values[grid.idx(i, j)] = u0;

  std::vector<double> fv(map.count());
  for (int i = 1; i <= nx - 2; ++i)
    for (int j = 1; j <= ny - 2; ++j) {
      const std::array<double, 2> p{grid.x(i), grid.y(j)};
      fv[map.at(i, j)] = f(p);
    }

  std::vector<double> a(grid.count()), b(map.count()), x(map.count());
  std::vector<double> increments;
  int total_inner = 0;
  double res = 0.0;
  const int cap = 200;
  for (int pic = 1; pic <= cap; ++pic) {
    for (size_t k = 0; k < grid.count(); ++k) a[k] = 1.0 + out.values[k] * out.values[k];

    // b = f + boundary flux contributions of the frozen-coefficient operator.
    for (int i = 1; i <= nx - 2; ++i)
      for (int j = 1; j <= ny - 2; ++j) {
        double v = fv[map.at(i, j)];
        const double aC = a[grid.idx(i, j)];
        if (i == 1)
          v += cx * 0.5 * (aC + a[grid.idx(0, j)]) * out.values[grid.idx(0, j)];
        if (i == nx - 2)
          v += cx * 0.5 * (aC + a[grid.idx(nx - 1, j)]) * out.values[grid.idx(nx - 1, j)];
        if (j == 1)
          v += cy * 0.5 * (aC + a[grid.idx(i, 0)]) * out.values[grid.idx(i, 0)];
        if (j == ny - 2)
          v += cy * 0.5 * (aC + a[grid.idx(i, ny - 1)]) * out.values[grid.idx(i, ny - 1)];
        b[map.at(i, j)] = v;
      }

    ApplyFn apply = [&](std::span<const double> in, std::span<double> y) {
      apply_neg_divagrad(grid, map, a, in, y, parallel);
    };
    total_inner += conjugate_gradient(apply, b, x, 1e-12, 40 * nx * ny, &res);

    double inc = 0.0;
    for (int i = 1; i <= nx - 2; ++i)
      for (int j = 1; j <= ny - 2; ++j)
        inc = std::max(inc, std::abs(x[map.at(i, j)] - out.values[grid.idx(i, j)]));
    for (int i = 1; i <= nx - 2; ++i)
      for (int j = 1; j <= ny - 2; ++j) out.values[grid.idx(i, j)] = x[map.at(i, j)];
    increments.push_back(inc);
    if (inc < 1e-9) {
      if (report) {
        report->iterations = total_inner;
        report->residual = res;
        report->converged = true;
        report->picard_increments = std::move(increments);
      }
      return out;
    }
  }
  char msg[128];
  std::snprintf(msg, sizeof msg, "Picard stagnation after %d iterations (last increment %.3e)",
                cap, increments.back());
  throw std::runtime_error(msg);
}

double relative_l2_error(std::span<const double> approx, const GridField& reference) {
  if (approx.size() != reference.values.size())
    throw std::invalid_argument("relative_l2_error: size mismatch");
  double num = 0.0, den = 0.0;
  for (size_t k = 0; k < approx.size(); ++k) {
    const double d = approx[k] - reference.values[k];
    num += d * d;
    den += reference.values[k] * reference.values[k];
  }
  if (den == 0.0) throw std::invalid_argument("relative_l2_error: zero-norm reference");
  return std::sqrt(num) / std::sqrt(den);
}

double relative_l2_error(const PointFn& approx, const GridField& reference) {
  const Grid2D& g = reference.grid;
  std::vector<double> vals(g.count());
  for (int i = 0; i < g.nx; ++i)
    for (int j = 0; j < g.ny; ++j) {
      const std::array<double, 2> p{g.x(i), g.y(j)};
      vals[g.idx(i, j)] = approx(p);
    }
  return relative_l2_error(vals, reference);
}

GridField sample_field(const Grid2D& grid, const PointFn& fn) {
  grid.validate();
  GridField out;
  out.grid = grid;
  out.values.resize(grid.count());
  for (int i = 0; i < grid.nx; ++i)
    for (int j = 0; j < grid.ny; ++j) {
      const std::array<double, 2> p{grid.x(i), grid.y(j)};
      out.values[grid.idx(i, j)] = fn(p);
    }
  return out;
}

GridField restrict_to(const GridField& fine, const Grid2D& coarse) {
  coarse.validate();
  const Grid2D& fg = fine.grid;
  if ((fg.nx - 1) % (coarse.nx - 1) != 0 || (fg.ny - 1) % (coarse.ny - 1) != 0)
    throw std::invalid_argument("restrict_to: grids are not node-nested");
  const int sx = (fg.nx - 1) / (coarse.nx - 1);
  const int sy = (fg.ny - 1) / (coarse.ny - 1);
  GridField out;
  out.grid = coarse;
  out.values.resize(coarse.count());
  for (int i = 0; i < coarse.nx; ++i)
    for (int j = 0; j < coarse.ny; ++j)
      out.values[coarse.idx(i, j)] = fine.values[fg.idx(i * sx, j * sy)];
  return out;
}

}  // namespace mlpinn
