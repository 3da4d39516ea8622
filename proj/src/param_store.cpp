#include "mlpinn/param_store.hpp"

#include <algorithm>
#include <cinttypes>
#include <cstdio>
#include <stdexcept>

namespace mlpinn {

size_t ParameterStore::add_slice(const std::string& name, size_t size) {
  size_t offset = values_.size();
  slices_.push_back({name, offset, size});
  values_.resize(offset + size, 0.0);
  return offset;
}

std::span<double> ParameterStore::slice(const std::string& name) {
  for (const auto& s : slices_)
    if (s.name == name) return {values_.data() + s.offset, s.size};
  throw std::invalid_argument("no parameter slice named '" + name + "'");
}

std::span<const double> ParameterStore::slice(const std::string& name) const {
  for (const auto& s : slices_)
    if (s.name == name) return {values_.data() + s.offset, s.size};
  throw std::invalid_argument("no parameter slice named '" + name + "'");
}

void ParameterStore::validate_layout() const {
  std::vector<ParamSlice> sorted = slices_;
  std::sort(sorted.begin(), sorted.end(),
            [](const ParamSlice& a, const ParamSlice& b) { return a.offset < b.offset; });
  size_t at = 0;
  for (const auto& s : sorted) {
    if (s.offset != at)
      throw std::logic_error("parameter layout gap/overlap at slice '" + s.name + "'");
    at += s.size;
  }
  if (at != values_.size()) throw std::logic_error("parameter layout does not cover the array");
}

void ParameterStore::save(const std::string& path) const {
  FILE* f = std::fopen(path.c_str(), "w");
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  std::fprintf(f, "mlpinn-params v1\n");
  std::fprintf(f, "slices %zu\n", slices_.size());
  for (const auto& s : slices_) std::fprintf(f, "%s %zu %zu\n", s.name.c_str(), s.offset, s.size);
  std::fprintf(f, "values %zu\n", values_.size());
  for (double v : values_) std::fprintf(f, "%.17g\n", v);
  std::fclose(f);
}

ParameterStore ParameterStore::load(const std::string& path) {
  FILE* f = std::fopen(path.c_str(), "r");
  if (!f) throw std::runtime_error("cannot open " + path);
  ParameterStore out;
  char magic[64];
  int version = 0;
  if (std::fscanf(f, "%63s v%d\n", magic, &version) != 2 ||
      std::string(magic) != "mlpinn-params" || version != 1) {
    std::fclose(f);
    throw std::runtime_error(path + ": not a parameter snapshot");
  }
  size_t n_slices = 0;
  if (std::fscanf(f, "slices %zu\n", &n_slices) != 1) {
    std::fclose(f);
    throw std::runtime_error(path + ": bad slice header");
  }
  for (size_t i = 0; i < n_slices; ++i) {
    char name[256];
    size_t offset, size;
    if (std::fscanf(f, "%255s %zu %zu\n", name, &offset, &size) != 3) {
      std::fclose(f);
      throw std::runtime_error(path + ": bad slice entry");
    }
    out.slices_.push_back({name, offset, size});
  }
  size_t n_values = 0;
  if (std::fscanf(f, "values %zu\n", &n_values) != 1) {
    std::fclose(f);
    throw std::runtime_error(path + ": bad value header");
  }
  out.values_.resize(n_values);
  for (size_t i = 0; i < n_values; ++i) {
    if (std::fscanf(f, "%lg\n", &out.values_[i]) != 1) {
      std::fclose(f);
      throw std::runtime_error(path + ": truncated values");
    }
  }
  std::fclose(f);
  out.validate_layout();
  return out;
}

}  // namespace mlpinn
