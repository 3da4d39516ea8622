#pragma once

#include <span>
#include <string>
#include <vector>

namespace mlpinn {

struct ParamSlice {
  std::string name;
  size_t offset = 0;
  size_t size = 0;
};

// Flat trainable-parameter array with named, disjoint slices covering it.
// Freezing is enforced by the optimizer (adam_step refuses frozen stores);
// the flag itself is just state.
class ParameterStore {
 public:
  // Appends a named slice, returns its offset.
  size_t add_slice(const std::string& name, size_t size);

  size_t size() const { return values_.size(); }
  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  double* data() { return values_.data(); }
  const double* data() const { return values_.data(); }

  const std::vector<ParamSlice>& slices() const { return slices_; }
  std::span<double> slice(const std::string& name);
  std::span<const double> slice(const std::string& name) const;

  void freeze() { frozen_ = true; }
  void unfreeze() { frozen_ = false; }
  bool frozen() const { return frozen_; }

  // Throws if slices overlap or fail to cover the array.
  void validate_layout() const;

  // Text snapshot with a layout header; round-trips bit-exactly.
  void save(const std::string& path) const;
  static ParameterStore load(const std::string& path);

  bool operator==(const ParameterStore& o) const {
    return values_ == o.values_;
  }

 private:
  std::vector<double> values_;
  std::vector<ParamSlice> slices_;
  bool frozen_ = false;
};

}  // namespace mlpinn
