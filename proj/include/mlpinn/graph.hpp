#pragma once

#include <cstdint>
#include <span>
#include <unordered_map>
#include <vector>

namespace mlpinn {

using NodeId = uint32_t;

// Scalar expression node kinds. Dot and the affine kinds take an operand
// list from the graph's operand pool; everything else is unary/binary.
enum class Op : uint8_t {
  Const,
  Input,    // slot = input coordinate / per-point data slot
  Param,    // slot = index into the bound parameter array
  Add,
  Sub,
  Mul,
  Div,
  Neg,
  Sin,
  Cos,
  Tanh,
  Exp,
  Pow,      // c = fixed real exponent
  Dot,      // sum_i pool[ops+i] * pool[ops+nops+i], nops = pair count
  AffineP,  // sum_j params[slot+j] * operand_j + params[bias]
  AffineC,  // sum_j cpool[slot+j] * operand_j + c
};

struct Node {
  Op op;
  NodeId a = 0, b = 0;   // unary/binary operands
  uint32_t ops = 0;      // operand pool offset (Dot, AffineP, AffineC)
  uint32_t nops = 0;     // operand count (pair count for Dot)
  uint32_t slot = 0;     // Input slot / Param index / weight base
  int32_t bias = -1;     // AffineP bias parameter index, -1 = none
  double c = 0.0;        // Const value / Pow exponent / AffineC offset
};

// A directed acyclic expression graph in topological order: every node's
// operands have smaller ids. Read-only once built; evaluation works on
// caller-owned buffers so graphs are shareable across threads.
struct Graph {
  std::vector<Node> nodes;
  std::vector<NodeId> pool;    // operand lists
  std::vector<double> cpool;   // AffineC coefficient rows
  uint32_t n_inputs = 0;       // one past the highest Input slot used
  uint32_t n_params = 0;       // one past the highest Param slot used

  size_t size() const { return nodes.size(); }
  // Throws std::invalid_argument on an out-of-range input slot or
  // parameter slot relative to the given bindings.
  void check_bindings(size_t input_dim, size_t param_count) const;
};

// Number of points processed together by the lane-batched kernels.
inline constexpr size_t kLanes = 8;

// Emits nodes with constant folding and common-subexpression caching for
// scalar ops. Folding keeps derivative-augmented graphs small (most seed
// derivatives are 0/1 constants).
class GraphBuilder {
 public:
  GraphBuilder() = default;
  explicit GraphBuilder(Graph base);

  NodeId constant(double v);
  NodeId input(uint32_t slot);
  NodeId param(uint32_t slot);

  NodeId add(NodeId x, NodeId y);
  NodeId sub(NodeId x, NodeId y);
  NodeId mul(NodeId x, NodeId y);
  NodeId div(NodeId x, NodeId y);
  NodeId neg(NodeId x);
  NodeId sin(NodeId x);
  NodeId cos(NodeId x);
  NodeId tanh(NodeId x);
  NodeId exp(NodeId x);
  NodeId pow(NodeId x, double exponent);

  NodeId dot(std::span<const NodeId> xs, std::span<const NodeId> ys);
  // w/b live in the parameter array: weights at [w_base, w_base+xs.size()),
  // optional bias at bias_slot.
  NodeId affine_params(std::span<const NodeId> xs, uint32_t w_base, int32_t bias_slot);
  // Fixed coefficients (not trainable), e.g. Fourier wavenumber rows.
  NodeId affine_const(std::span<const NodeId> xs, std::span<const double> coeffs, double offset);

  bool is_zero(NodeId x) const;
  bool is_const(NodeId x) const;
  double const_value(NodeId x) const;

  const Graph& graph() const { return g_; }
  Graph take() { return std::move(g_); }
  NodeId last() const { return static_cast<NodeId>(g_.nodes.size() - 1); }

 private:
  NodeId push(Node n);
  NodeId push_cse(Node n);
  Graph g_;
  std::unordered_map<uint64_t, NodeId> const_cache_;
  std::unordered_map<uint64_t, NodeId> expr_cache_;
};

// --- scalar (reference) kernels -------------------------------------------

// Evaluates every node; buf.size() >= g.size(). Inputs bound by slot.
void eval(const Graph& g, std::span<const double> params, std::span<const double> x,
          std::span<double> buf);

// Reverse sweep from `seed` with adjoint seed_value. `buf` must hold a prior
// forward evaluation. `adj` is scratch of size >= seed+1 (overwritten).
// Parameter adjoints accumulate into `grad` (not cleared here).
void backward(const Graph& g, std::span<const double> params, std::span<const double> buf,
              NodeId seed, double seed_value, std::span<double> adj, std::span<double> grad);

// --- lane-batched kernels (kLanes points at once) --------------------------
// Buffer layout is node-major: buf[node*kLanes + lane]. Input block layout is
// slot-major: xin[slot*kLanes + lane]. These are the hot kernels; the scalar
// versions above are the reference they are tested against.

void eval_lanes(const Graph& g, std::span<const double> params, const double* xin,
                std::span<double> buf);

// Seeds lane l of node `seed` with seeds[l]; accumulates the lane-summed
// parameter gradient into `grad`.
void backward_lanes(const Graph& g, std::span<const double> params, std::span<const double> buf,
                    NodeId seed, const double* seeds, std::span<double> adj,
                    std::span<double> grad);

// --- derivative augmentation ------------------------------------------------

// Node handles for u and its input derivatives after augmentation.
struct DerivHandles {
  NodeId value = 0;
  std::vector<NodeId> grad;     // d/dx_k, k < spatial_dim
  std::vector<NodeId> second;   // d2/dx_k2 (order 2 only)
  NodeId laplacian = 0;         // sum of `second` (order 2 only)
};

// Extends the graph with exact forward-mode derivatives of node `out` with
// respect to the given spatial input slots. Order 1 emits first derivatives,
// order 2 adds pure second derivatives and the Laplacian. Input slots not
// listed are treated as per-point data (zero derivative). The emitted
// quantities are ordinary graph nodes, so reverse-mode parameter
// differentiation applies to anything built on top of them.
DerivHandles augment_derivatives(GraphBuilder& b, NodeId out,
                                 std::span<const uint32_t> spatial_slots, int order);
// Convenience form: spatial slots are [0, spatial_dim).
DerivHandles augment_derivatives(GraphBuilder& b, NodeId out, int spatial_dim, int order);

// Retains only the ancestors of `keep`, remapping ids (order-preserving).
// remap[old] = new id, or kInvalidNode if dropped.
inline constexpr NodeId kInvalidNode = static_cast<NodeId>(-1);
Graph compact(const Graph& g, std::span<const NodeId> keep, std::vector<NodeId>& remap);

// --- convenience API over whole expressions --------------------------------

struct DerivativeBundle {
  double value = 0.0;
  std::vector<double> grad;
  double laplacian = 0.0;
};

// A graph paired with derivative handles for one scalar output.
struct AugmentedExpr {
  Graph graph;
  DerivHandles handles;
  int spatial_dim = 0;
};

AugmentedExpr augment(const Graph& g, NodeId out, int spatial_dim, int order);

double evaluate(const Graph& g, NodeId out, std::span<const double> x,
                std::span<const double> params);

DerivativeBundle input_derivatives(const AugmentedExpr& ax, std::span<const double> x,
                                   std::span<const double> params);
// One-shot form: augments internally. Prefer the cached AugmentedExpr form
// when calling repeatedly.
DerivativeBundle input_derivatives(const Graph& g, NodeId out, int spatial_dim,
                                   std::span<const double> x, std::span<const double> params);

// Gradient of a scalar expression with respect to all parameter slots.
std::vector<double> parameter_gradient(const Graph& g, NodeId loss, std::span<const double> x,
                                       std::span<const double> params, size_t n_params);

// One squared parameter-gradient norm per input row (rows of width
// g.n_inputs, row-major).
std::vector<double> per_sample_gradient_norms(const Graph& g, NodeId residual,
                                              std::span<const double> rows, size_t n_rows,
                                              std::span<const double> params, size_t n_params);

}  // namespace mlpinn
