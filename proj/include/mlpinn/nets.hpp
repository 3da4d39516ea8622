#pragma once

#include <cstdint>
#include <span>
#include <variant>
#include <vector>

#include "mlpinn/graph.hpp"
#include "mlpinn/param_store.hpp"

namespace mlpinn {

// Plain tanh MLP with a linear scalar output layer.
struct MlpSpec {
  int input_dim = 0;
  std::vector<int> hidden;
  int output_dim = 1;
};

// x -> [a .* cos(B x); a .* sin(B x)], B is m x input_dim with entries drawn
// from N(0, sigma^2) at init and fixed afterwards (not trainable).
struct FourierEmbeddingSpec {
  double sigma = 1.0;
  int num_features = 0;            // m; embedded dimension is 2m
  std::vector<double> scale;       // length m, empty = all ones
  std::vector<double> wavenumbers; // m x input_dim row-major, filled at init
};

// One or more embeddings feeding a shared feature-extractor MLP; extracted
// features are concatenated, passed through one tanh dense layer, then a
// linear output.
struct FourierNetSpec {
  int input_dim = 0;
  std::vector<FourierEmbeddingSpec> embeddings;
  std::vector<int> extractor_hidden;  // extractor input dimension is 2m
  int dense_width = 0;
  int output_dim = 1;
};

using NetworkSpec = std::variant<MlpSpec, FourierNetSpec>;

int network_input_dim(const NetworkSpec& spec);
// Trainable parameter count (wavenumber matrices excluded).
size_t parameter_count(const NetworkSpec& spec);
void validate_spec(const NetworkSpec& spec);

// Numeric embedding map; x.size() must match the wavenumber row width.
std::vector<double> embed(std::span<const double> x, const FourierEmbeddingSpec& emb);

// A network bound to its parameter store, with compiled value and
// order-2 derivative graphs over input slots [0, input_dim).
class Network {
 public:
  Network() = default;

  // Emits the network into a foreign builder over the given input nodes,
  // referencing this network's parameter slots shifted by param_offset.
  // Used by the loss assembler.
  NodeId emit(GraphBuilder& b, std::span<const NodeId> x, uint32_t param_offset = 0) const;

  double value(std::span<const double> x) const;
  DerivativeBundle derivatives(std::span<const double> x) const;

  int input_dim() const { return network_input_dim(spec_); }
  const NetworkSpec& spec() const { return spec_; }
  ParameterStore& params() { return params_; }
  const ParameterStore& params() const { return params_; }

  const Graph& value_graph() const { return value_graph_; }
  NodeId value_node() const { return value_node_; }
  const AugmentedExpr& augmented() const { return augmented_; }

  friend Network init_network(const NetworkSpec& spec, uint64_t seed);

 private:
  NetworkSpec spec_;
  ParameterStore params_;
  Graph value_graph_;
  NodeId value_node_ = 0;
  AugmentedExpr augmented_;
};

// Glorot-normal weights, zero biases, seeded wavenumber draws; identical
// seeds give bitwise-identical parameters.
Network init_network(const NetworkSpec& spec, uint64_t seed);

}  // namespace mlpinn
