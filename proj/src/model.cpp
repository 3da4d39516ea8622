#include "mlpinn/model.hpp"

#include <stdexcept>

namespace mlpinn {

size_t CompositeModel::frozen_count() const {
  size_t n = 0;
  while (n < levels_.size() && levels_[n].params().frozen()) ++n;
  return n;
}

void CompositeModel::push_level(Network net) {
  if (!levels_.empty() && !levels_.back().params().frozen())
    throw std::logic_error("push_level: previous level is still active");
  levels_.push_back(std::move(net));
}

void CompositeModel::freeze_active() {
  if (levels_.empty()) throw std::logic_error("freeze_active: no levels");
  levels_.back().params().freeze();
}

double CompositeModel::predict(std::span<const double> x) const {
  double v = 0.0;
  for (const Network& n : levels_) v += n.value(x);
  return v;
}

DerivativeBundle CompositeModel::prefix_derivatives(std::span<const double> x,
                                                    size_t count) const {
  DerivativeBundle out;
  out.grad.assign(x.size(), 0.0);
  for (size_t m = 0; m < count && m < levels_.size(); ++m) {
    DerivativeBundle b = levels_[m].derivatives(x);
    out.value += b.value;
    out.laplacian += b.laplacian;
    for (size_t k = 0; k < x.size(); ++k) out.grad[k] += b.grad[k];
  }
  return out;
}

DerivativeBundle CompositeModel::predict_derivatives(std::span<const double> x) const {
  return prefix_derivatives(x, levels_.size());
}

DerivativeBundle CompositeModel::frozen_derivatives(std::span<const double> x) const {
  return prefix_derivatives(x, frozen_count());
}

}  // namespace mlpinn
