#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "mlpinn/param_store.hpp"

namespace mlpinn {

struct AdamConfig {
  double alpha = 1e-3;
  double beta1 = 0.95;
  double beta2 = 0.95;
  double eps = 1e-8;
  // Continuous exponential decay: lr(t) = alpha * decay_rate^(t / decay_every).
  double decay_rate = 1.0;
  int64_t decay_every = 1000;
};

struct OptimizerState {
  AdamConfig cfg;
  std::vector<double> m, v;
  int64_t step = 0;

  OptimizerState() = default;
  OptimizerState(const AdamConfig& c, size_t n) : cfg(c), m(n, 0.0), v(n, 0.0) {}
};

// Standard Adam update with bias correction. Throws std::logic_error on a
// frozen store; throws std::invalid_argument on a gradient length mismatch.
void adam_step(OptimizerState& state, ParameterStore& params, std::span<const double> grad);

// NTK-style balancing: lambda_k = (sum_j T_j) / T_k, then normalized so the
// smallest freshly-updated weight is 1. Components with T_k = 0 keep their
// previous weight.
std::vector<double> update_adaptive_weights(std::span<const double> stats,
                                            std::span<const double> previous);

}  // namespace mlpinn
