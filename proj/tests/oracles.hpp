#pragma once

// Test-only oracles, written independently of the graph machinery they check.

#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "mlpinn/nets.hpp"
#include "mlpinn/param_store.hpp"

namespace oracle {

// Straightforward tanh-MLP forward pass over the named weight slices,
// bypassing the expression graph entirely.
inline double mlp_forward(const mlpinn::MlpSpec& spec, const mlpinn::ParameterStore& ps,
                          std::span<const double> x) {
  std::vector<double> h(x.begin(), x.end());
  size_t in = spec.input_dim;
  for (size_t l = 0; l < spec.hidden.size(); ++l) {
    const size_t out = spec.hidden[l];
    auto w = ps.slice("layer" + std::to_string(l) + ".weight");
    auto b = ps.slice("layer" + std::to_string(l) + ".bias");
    std::vector<double> z(out);
    for (size_t r = 0; r < out; ++r) {
      double acc = b[r];
      for (size_t j = 0; j < in; ++j) acc += w[r * in + j] * h[j];
      z[r] = std::tanh(acc);
    }
    h = std::move(z);
    in = out;
  }
  auto w = ps.slice("output.weight");
  auto b = ps.slice("output.bias");
  double acc = b[0];
  for (size_t j = 0; j < in; ++j) acc += w[j] * h[j];
  return acc;
}

// Central finite differences of a scalar function of a point.
using ScalarFn = std::function<double(std::span<const double>)>;

inline std::vector<double> fd_gradient(const ScalarFn& f, std::span<const double> x, double h) {
  std::vector<double> g(x.size());
  std::vector<double> p(x.begin(), x.end());
  for (size_t k = 0; k < x.size(); ++k) {
    const double x0 = p[k];
    p[k] = x0 + h;
    const double fp = f(p);
    p[k] = x0 - h;
    const double fm = f(p);
    p[k] = x0;
    g[k] = (fp - fm) / (2.0 * h);
  }
  return g;
}

inline double fd_laplacian(const ScalarFn& f, std::span<const double> x, double h) {
  std::vector<double> p(x.begin(), x.end());
  const double f0 = f(p);
  double acc = 0.0;
  for (size_t k = 0; k < x.size(); ++k) {
    const double x0 = p[k];
    p[k] = x0 + h;
    const double fp = f(p);
    p[k] = x0 - h;
    const double fm = f(p);
    p[k] = x0;
    acc += (fp - 2.0 * f0 + fm) / (h * h);
  }
  return acc;
}

// Central FD over selected coordinates of a parameter vector.
inline std::vector<double> fd_param_gradient(const std::function<double(std::span<const double>)>& loss,
                                             std::span<const double> theta,
                                             std::span<const size_t> indices, double h) {
  std::vector<double> p(theta.begin(), theta.end());
  std::vector<double> g(indices.size());
  for (size_t i = 0; i < indices.size(); ++i) {
    const size_t k = indices[i];
    const double t0 = p[k];
    p[k] = t0 + h;
    const double fp = loss(p);
    p[k] = t0 - h;
    const double fm = loss(p);
    p[k] = t0;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

inline double rel_err(double got, double want) {
  const double denom = std::max(std::abs(want), 1e-12);
  return std::abs(got - want) / denom;
}

inline double vec_rel_err(std::span<const double> got, std::span<const double> want) {
  double num = 0.0, den = 0.0;
  for (size_t i = 0; i < got.size(); ++i) {
    num += (got[i] - want[i]) * (got[i] - want[i]);
    den += want[i] * want[i];
  }
  return std::sqrt(num) / std::max(std::sqrt(den), 1e-300);
}

}  // namespace oracle
