#pragma once

#include <span>
#include <vector>

#include "mlpinn/nets.hpp"

namespace mlpinn {

// Ordered sum of level networks: predictions add, training touches only the
// last (active) level, and freezing runs strictly bottom-up.
class CompositeModel {
 public:
  CompositeModel() = default;

  size_t n_levels() const { return levels_.size(); }
  Network& level(size_t i) { return levels_[i]; }
  const Network& level(size_t i) const { return levels_[i]; }
  Network& active() { return levels_.back(); }
  const Network& active() const { return levels_.back(); }

  // Number of frozen stores; always a prefix of the level list.
  size_t frozen_count() const;

  void push_level(Network net);
  void freeze_active();

  // Sum over all level outputs.
  double predict(std::span<const double> x) const;
  DerivativeBundle predict_derivatives(std::span<const double> x) const;
  // Sum over the first `count` levels (default: the frozen prefix).
  DerivativeBundle prefix_derivatives(std::span<const double> x, size_t count) const;
  DerivativeBundle frozen_derivatives(std::span<const double> x) const;

 private:
  std::vector<Network> levels_;
};

}  // namespace mlpinn
