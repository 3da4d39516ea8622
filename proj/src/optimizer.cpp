#include "mlpinn/optimizer.hpp"

#include <cmath>
#include <stdexcept>

namespace mlpinn {

void adam_step(OptimizerState& s, ParameterStore& params, std::span<const double> grad) {
  if (params.frozen()) throw std::logic_error("adam_step: parameter store is frozen");
  if (grad.size() != params.size() || s.m.size() != params.size())
    throw std::invalid_argument("adam_step: gradient/state length mismatch");
  s.step += 1;
  const double t = static_cast<double>(s.step);
  double lr = s.cfg.alpha;
  if (s.cfg.decay_rate != 1.0)
    lr *= std::pow(s.cfg.decay_rate, t / static_cast<double>(s.cfg.decay_every));
  const double c1 = 1.0 - std::pow(s.cfg.beta1, t);
  const double c2 = 1.0 - std::pow(s.cfg.beta2, t);
  double* p = params.data();
  const double b1 = s.cfg.beta1, b2 = s.cfg.beta2, eps = s.cfg.eps;
  for (size_t i = 0; i < grad.size(); ++i) {
    const double g = grad[i];
    s.m[i] = b1 * s.m[i] + (1.0 - b1) * g;
    s.v[i] = b2 * s.v[i] + (1.0 - b2) * g * g;
    const double mhat = s.m[i] / c1;
    const double vhat = s.v[i] / c2;
    p[i] -= lr * mhat / (std::sqrt(vhat) + eps);
  }
}

std::vector<double> update_adaptive_weights(std::span<const double> stats,
                                            std::span<const double> previous) {
  if (stats.size() != previous.size())
    throw std::invalid_argument("update_adaptive_weights: size mismatch");
  double total = 0.0;
  for (double t : stats) total += t;
  std::vector<double> out(previous.begin(), previous.end());
  if (total <= 0.0) return out;

  double min_fresh = 0.0;
  bool any_fresh = false;
  for (size_t k = 0; k < stats.size(); ++k) {
    if (stats[k] > 0.0) {
      out[k] = total / stats[k];
      min_fresh = any_fresh ? std::min(min_fresh, out[k]) : out[k];
      any_fresh = true;
    }
  }
  if (any_fresh && min_fresh > 0.0)
    for (size_t k = 0; k < stats.size(); ++k)
      if (stats[k] > 0.0) out[k] /= min_fresh;
  return out;
}

}  // namespace mlpinn
