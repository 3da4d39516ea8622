#include "mlpinn/graph.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <stdexcept>

namespace mlpinn {

namespace {

uint64_t mix64(uint64_t h, uint64_t v) {
  h ^= v + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
  return h;
}

uint64_t scalar_key(Op op, NodeId a, NodeId b, uint32_t slot, double c) {
  uint64_t h = static_cast<uint64_t>(op);
  h = mix64(h, a);
  h = mix64(h, b);
  h = mix64(h, slot);
  h = mix64(h, std::bit_cast<uint64_t>(c));
  return h;
}

}  // namespace

void Graph::check_bindings(size_t input_dim, size_t param_count) const {
  if (n_inputs > input_dim)
    throw std::invalid_argument("graph expects " + std::to_string(n_inputs) +
                                " input slots, got " + std::to_string(input_dim));
  if (n_params > param_count)
    throw std::invalid_argument("unbound parameter reference: graph uses slots up to " +
                                std::to_string(n_params) + ", store has " +
                                std::to_string(param_count));
}

GraphBuilder::GraphBuilder(Graph base) : g_(std::move(base)) {
  for (NodeId i = 0; i < g_.nodes.size(); ++i) {
    const Node& n = g_.nodes[i];
    if (n.op == Op::Const)
      const_cache_.emplace(std::bit_cast<uint64_t>(n.c), i);
    else if (n.op != Op::Dot && n.op != Op::AffineP && n.op != Op::AffineC)
      expr_cache_.emplace(scalar_key(n.op, n.a, n.b, n.slot, n.c), i);
  }
}

NodeId GraphBuilder::push(Node n) {
  g_.nodes.push_back(n);
  return static_cast<NodeId>(g_.nodes.size() - 1);
}

NodeId GraphBuilder::push_cse(Node n) {
  uint64_t key = scalar_key(n.op, n.a, n.b, n.slot, n.c);
  auto it = expr_cache_.find(key);
  if (it != expr_cache_.end()) {
    const Node& e = g_.nodes[it->second];
    if (e.op == n.op && e.a == n.a && e.b == n.b && e.slot == n.slot && e.c == n.c)
      return it->second;
  }
  NodeId id = push(n);
  expr_cache_.emplace(key, id);
  return id;
}

NodeId GraphBuilder::constant(double v) {
  uint64_t key = std::bit_cast<uint64_t>(v);
  auto it = const_cache_.find(key);
  if (it != const_cache_.end()) return it->second;
  NodeId id = push({.op = Op::Const, .c = v});
  const_cache_.emplace(key, id);
  return id;
}

NodeId GraphBuilder::input(uint32_t slot) {
  g_.n_inputs = std::max(g_.n_inputs, slot + 1);
  return push_cse({.op = Op::Input, .slot = slot});
}

NodeId GraphBuilder::param(uint32_t slot) {
  g_.n_params = std::max(g_.n_params, slot + 1);
  return push_cse({.op = Op::Param, .slot = slot});
}

bool GraphBuilder::is_const(NodeId x) const { return g_.nodes[x].op == Op::Const; }
bool GraphBuilder::is_zero(NodeId x) const { return is_const(x) && g_.nodes[x].c == 0.0; }
double GraphBuilder::const_value(NodeId x) const { return g_.nodes[x].c; }

NodeId GraphBuilder::add(NodeId x, NodeId y) {
  if (is_zero(x)) return y;
  if (is_zero(y)) return x;
  if (is_const(x) && is_const(y)) return constant(const_value(x) + const_value(y));
  return push_cse({.op = Op::Add, .a = x, .b = y});
}

NodeId GraphBuilder::sub(NodeId x, NodeId y) {
  if (is_zero(y)) return x;
  if (is_const(x) && is_const(y)) return constant(const_value(x) - const_value(y));
  if (is_zero(x)) return neg(y);
  return push_cse({.op = Op::Sub, .a = x, .b = y});
}

NodeId GraphBuilder::mul(NodeId x, NodeId y) {
  if (is_zero(x) || is_zero(y)) return constant(0.0);
  if (is_const(x) && const_value(x) == 1.0) return y;
  if (is_const(y) && const_value(y) == 1.0) return x;
  if (is_const(x) && is_const(y)) return constant(const_value(x) * const_value(y));
  return push_cse({.op = Op::Mul, .a = x, .b = y});
}

NodeId GraphBuilder::div(NodeId x, NodeId y) {
  if (is_const(y) && const_value(y) == 1.0) return x;
  if (is_zero(x) && !is_zero(y)) return constant(0.0);
  if (is_const(x) && is_const(y)) return constant(const_value(x) / const_value(y));
  return push_cse({.op = Op::Div, .a = x, .b = y});
}

NodeId GraphBuilder::neg(NodeId x) {
  if (is_const(x)) return constant(-const_value(x));
  return push_cse({.op = Op::Neg, .a = x});
}

NodeId GraphBuilder::sin(NodeId x) {
  if (is_const(x)) return constant(std::sin(const_value(x)));
  return push_cse({.op = Op::Sin, .a = x});
}

NodeId GraphBuilder::cos(NodeId x) {
  if (is_const(x)) return constant(std::cos(const_value(x)));
  return push_cse({.op = Op::Cos, .a = x});
}

NodeId GraphBuilder::tanh(NodeId x) {
  if (is_const(x)) return constant(std::tanh(const_value(x)));
  return push_cse({.op = Op::Tanh, .a = x});
}

NodeId GraphBuilder::exp(NodeId x) {
  if (is_const(x)) return constant(std::exp(const_value(x)));
  return push_cse({.op = Op::Exp, .a = x});
}

NodeId GraphBuilder::pow(NodeId x, double exponent) {
  if (exponent == 0.0) return constant(1.0);
  if (exponent == 1.0) return x;
  if (is_const(x)) return constant(std::pow(const_value(x), exponent));
  return push_cse({.op = Op::Pow, .a = x, .c = exponent});
}

NodeId GraphBuilder::dot(std::span<const NodeId> xs, std::span<const NodeId> ys) {
  if (xs.size() != ys.size()) throw std::invalid_argument("dot: operand count mismatch");
  if (xs.empty()) return constant(0.0);
  Node n{.op = Op::Dot, .ops = static_cast<uint32_t>(g_.pool.size()),
         .nops = static_cast<uint32_t>(xs.size())};
  g_.pool.insert(g_.pool.end(), xs.begin(), xs.end());
  g_.pool.insert(g_.pool.end(), ys.begin(), ys.end());
  return push(n);
}

NodeId GraphBuilder::affine_params(std::span<const NodeId> xs, uint32_t w_base,
                                   int32_t bias_slot) {
  uint32_t hi = w_base + static_cast<uint32_t>(xs.size());
  g_.n_params = std::max(g_.n_params, hi);
  if (bias_slot >= 0) g_.n_params = std::max(g_.n_params, static_cast<uint32_t>(bias_slot) + 1);
  bool all_zero = std::all_of(xs.begin(), xs.end(), [&](NodeId x) { return is_zero(x); });
  if (all_zero && bias_slot < 0) return constant(0.0);
  Node n{.op = Op::AffineP, .ops = static_cast<uint32_t>(g_.pool.size()),
         .nops = static_cast<uint32_t>(xs.size()), .slot = w_base, .bias = bias_slot};
  g_.pool.insert(g_.pool.end(), xs.begin(), xs.end());
  return push(n);
}

NodeId GraphBuilder::affine_const(std::span<const NodeId> xs, std::span<const double> coeffs,
                                  double offset) {
  if (xs.size() != coeffs.size()) throw std::invalid_argument("affine_const: size mismatch");
  bool all_const = std::all_of(xs.begin(), xs.end(), [&](NodeId x) { return is_const(x); });
  if (all_const) {
    double v = offset;
    for (size_t j = 0; j < xs.size(); ++j) v += coeffs[j] * const_value(xs[j]);
    return constant(v);
  }
  Node n{.op = Op::AffineC, .ops = static_cast<uint32_t>(g_.pool.size()),
         .nops = static_cast<uint32_t>(xs.size()),
         .slot = static_cast<uint32_t>(g_.cpool.size()), .c = offset};
  g_.pool.insert(g_.pool.end(), xs.begin(), xs.end());
  g_.cpool.insert(g_.cpool.end(), coeffs.begin(), coeffs.end());
  return push(n);
}

// --- scalar kernels ---------------------------------------------------------

void eval(const Graph& g, std::span<const double> params, std::span<const double> x,
          std::span<double> buf) {
  const Node* nodes = g.nodes.data();
  const NodeId* pool = g.pool.data();
  const double* cp = g.cpool.data();
  const size_t n = g.nodes.size();
  for (size_t i = 0; i < n; ++i) {
    const Node& nd = nodes[i];
    double v;
    switch (nd.op) {
      case Op::Const: v = nd.c; break;
      case Op::Input: v = x[nd.slot]; break;
      case Op::Param: v = params[nd.slot]; break;
      case Op::Add: v = buf[nd.a] + buf[nd.b]; break;
      case Op::Sub: v = buf[nd.a] - buf[nd.b]; break;
      case Op::Mul: v = buf[nd.a] * buf[nd.b]; break;
      case Op::Div: v = buf[nd.a] / buf[nd.b]; break;
      case Op::Neg: v = -buf[nd.a]; break;
      case Op::Sin: v = std::sin(buf[nd.a]); break;
      case Op::Cos: v = std::cos(buf[nd.a]); break;
      case Op::Tanh: v = std::tanh(buf[nd.a]); break;
      case Op::Exp: v = std::exp(buf[nd.a]); break;
      case Op::Pow: v = std::pow(buf[nd.a], nd.c); break;
      case Op::Dot: {
        const NodeId* o = pool + nd.ops;
        const uint32_t k = nd.nops;
        double acc = 0.0;
        for (uint32_t j = 0; j < k; ++j) acc += buf[o[j]] * buf[o[k + j]];
        v = acc;
        break;
      }
      case Op::AffineP: {
        const NodeId* o = pool + nd.ops;
        const double* w = params.data() + nd.slot;
        double acc = nd.bias >= 0 ? params[nd.bias] : 0.0;
        for (uint32_t j = 0; j < nd.nops; ++j) acc += w[j] * buf[o[j]];
        v = acc;
        break;
      }
      case Op::AffineC: {
        const NodeId* o = pool + nd.ops;
        const double* w = cp + nd.slot;
        double acc = nd.c;
        for (uint32_t j = 0; j < nd.nops; ++j) acc += w[j] * buf[o[j]];
        v = acc;
        break;
      }
    }
    buf[i] = v;
  }
}

void backward(const Graph& g, std::span<const double> params, std::span<const double> buf,
              NodeId seed, double seed_value, std::span<double> adj, std::span<double> grad) {
  const Node* nodes = g.nodes.data();
  const NodeId* pool = g.pool.data();
  const double* cp = g.cpool.data();
  std::fill(adj.begin(), adj.begin() + seed + 1, 0.0);
  adj[seed] = seed_value;
  for (size_t i = seed + 1; i-- > 0;) {
    const double u = adj[i];
    if (u == 0.0) continue;
    const Node& nd = nodes[i];
    switch (nd.op) {
      case Op::Const: case Op::Input: break;
      case Op::Param: grad[nd.slot] += u; break;
      case Op::Add: adj[nd.a] += u; adj[nd.b] += u; break;
      case Op::Sub: adj[nd.a] += u; adj[nd.b] -= u; break;
      case Op::Mul: adj[nd.a] += u * buf[nd.b]; adj[nd.b] += u * buf[nd.a]; break;
      case Op::Div: {
        const double ib = 1.0 / buf[nd.b];
        adj[nd.a] += u * ib;
        adj[nd.b] -= u * buf[i] * ib;
        break;
      }
      case Op::Neg: adj[nd.a] -= u; break;
      case Op::Sin: adj[nd.a] += u * std::cos(buf[nd.a]); break;
      case Op::Cos: adj[nd.a] -= u * std::sin(buf[nd.a]); break;
      case Op::Tanh: adj[nd.a] += u * (1.0 - buf[i] * buf[i]); break;
      case Op::Exp: adj[nd.a] += u * buf[i]; break;
      case Op::Pow: adj[nd.a] += u * nd.c * std::pow(buf[nd.a], nd.c - 1.0); break;
      case Op::Dot: {
        const NodeId* o = pool + nd.ops;
        const uint32_t k = nd.nops;
        for (uint32_t j = 0; j < k; ++j) {
          adj[o[j]] += u * buf[o[k + j]];
          adj[o[k + j]] += u * buf[o[j]];
        }
        break;
      }
      case Op::AffineP: {
        const NodeId* o = pool + nd.ops;
        const double* w = params.data() + nd.slot;
        double* gw = grad.data() + nd.slot;
        for (uint32_t j = 0; j < nd.nops; ++j) {
          adj[o[j]] += u * w[j];
          gw[j] += u * buf[o[j]];
        }
        if (nd.bias >= 0) grad[nd.bias] += u;
        break;
      }
      case Op::AffineC: {
        const NodeId* o = pool + nd.ops;
        const double* w = cp + nd.slot;
        for (uint32_t j = 0; j < nd.nops; ++j) adj[o[j]] += u * w[j];
        break;
      }
    }
  }
}

// --- lane-batched kernels ---------------------------------------------------

void eval_lanes(const Graph& g, std::span<const double> params, const double* xin,
                std::span<double> buf) {
  const Node* nodes = g.nodes.data();
  const NodeId* pool = g.pool.data();
  const double* cp = g.cpool.data();
  const size_t n = g.nodes.size();
  constexpr size_t L = kLanes;
  double* B = buf.data();
  for (size_t i = 0; i < n; ++i) {
    const Node& nd = nodes[i];
    double* out = B + i * L;
    switch (nd.op) {
      case Op::Const:
        for (size_t l = 0; l < L; ++l) out[l] = nd.c;
        break;
      case Op::Input: {
        const double* src = xin + static_cast<size_t>(nd.slot) * L;
        for (size_t l = 0; l < L; ++l) out[l] = src[l];
        break;
      }
      case Op::Param:
        for (size_t l = 0; l < L; ++l) out[l] = params[nd.slot];
        break;
      case Op::Add: {
        const double *a = B + nd.a * L, *b = B + nd.b * L;
        for (size_t l = 0; l < L; ++l) out[l] = a[l] + b[l];
        break;
      }
      case Op::Sub: {
        const double *a = B + nd.a * L, *b = B + nd.b * L;
        for (size_t l = 0; l < L; ++l) out[l] = a[l] - b[l];
        break;
      }
      case Op::Mul: {
        const double *a = B + nd.a * L, *b = B + nd.b * L;
        for (size_t l = 0; l < L; ++l) out[l] = a[l] * b[l];
        break;
      }
      case Op::Div: {
        const double *a = B + nd.a * L, *b = B + nd.b * L;
        for (size_t l = 0; l < L; ++l) out[l] = a[l] / b[l];
        break;
      }
      case Op::Neg: {
        const double* a = B + nd.a * L;
        for (size_t l = 0; l < L; ++l) out[l] = -a[l];
        break;
      }
      case Op::Sin: {
        const double* a = B + nd.a * L;
        for (size_t l = 0; l < L; ++l) out[l] = std::sin(a[l]);
        break;
      }
      case Op::Cos: {
        const double* a = B + nd.a * L;
        for (size_t l = 0; l < L; ++l) out[l] = std::cos(a[l]);
        break;
      }
      case Op::Tanh: {
        const double* a = B + nd.a * L;
        for (size_t l = 0; l < L; ++l) out[l] = std::tanh(a[l]);
        break;
      }
      case Op::Exp: {
        const double* a = B + nd.a * L;
        for (size_t l = 0; l < L; ++l) out[l] = std::exp(a[l]);
        break;
      }
      case Op::Pow: {
        const double* a = B + nd.a * L;
        for (size_t l = 0; l < L; ++l) out[l] = std::pow(a[l], nd.c);
        break;
      }
      case Op::Dot: {
        const NodeId* o = pool + nd.ops;
        const uint32_t k = nd.nops;
        double acc[L] = {};
        for (uint32_t j = 0; j < k; ++j) {
          const double *a = B + o[j] * L, *b = B + o[k + j] * L;
          for (size_t l = 0; l < L; ++l) acc[l] += a[l] * b[l];
        }
        for (size_t l = 0; l < L; ++l) out[l] = acc[l];
        break;
      }
      case Op::AffineP: {
        const NodeId* o = pool + nd.ops;
        const double* w = params.data() + nd.slot;
        const double b0 = nd.bias >= 0 ? params[nd.bias] : 0.0;
        double acc[L];
        for (size_t l = 0; l < L; ++l) acc[l] = b0;
        for (uint32_t j = 0; j < nd.nops; ++j) {
          const double wj = w[j];
          const double* xb = B + o[j] * L;
          for (size_t l = 0; l < L; ++l) acc[l] += wj * xb[l];
        }
        for (size_t l = 0; l < L; ++l) out[l] = acc[l];
        break;
      }
      case Op::AffineC: {
        const NodeId* o = pool + nd.ops;
        const double* w = cp + nd.slot;
        double acc[L];
        for (size_t l = 0; l < L; ++l) acc[l] = nd.c;
        for (uint32_t j = 0; j < nd.nops; ++j) {
          const double wj = w[j];
          const double* xb = B + o[j] * L;
          for (size_t l = 0; l < L; ++l) acc[l] += wj * xb[l];
        }
        for (size_t l = 0; l < L; ++l) out[l] = acc[l];
        break;
      }
    }
  }
}

void backward_lanes(const Graph& g, std::span<const double> params, std::span<const double> buf,
                    NodeId seed, const double* seeds, std::span<double> adj,
                    std::span<double> grad) {
  const Node* nodes = g.nodes.data();
  const NodeId* pool = g.pool.data();
  const double* cp = g.cpool.data();
  constexpr size_t L = kLanes;
  const double* B = buf.data();
  double* A = adj.data();
  std::fill(A, A + (static_cast<size_t>(seed) + 1) * L, 0.0);
  for (size_t l = 0; l < L; ++l) A[seed * L + l] = seeds[l];
  for (size_t i = seed + 1; i-- > 0;) {
    const double* u = A + i * L;
    bool live = false;
    for (size_t l = 0; l < L; ++l) live |= (u[l] != 0.0);
    if (!live) continue;
    const Node& nd = nodes[i];
    switch (nd.op) {
      case Op::Const: case Op::Input: break;
      case Op::Param: {
        double acc = 0.0;
        for (size_t l = 0; l < L; ++l) acc += u[l];
        grad[nd.slot] += acc;
        break;
      }
      case Op::Add: {
        double *a = A + nd.a * L, *b = A + nd.b * L;
        for (size_t l = 0; l < L; ++l) { a[l] += u[l]; b[l] += u[l]; }
        break;
      }
      case Op::Sub: {
        double *a = A + nd.a * L, *b = A + nd.b * L;
        for (size_t l = 0; l < L; ++l) { a[l] += u[l]; b[l] -= u[l]; }
        break;
      }
      case Op::Mul: {
        double *aa = A + nd.a * L, *ab = A + nd.b * L;
        const double *va = B + nd.a * L, *vb = B + nd.b * L;
        for (size_t l = 0; l < L; ++l) { aa[l] += u[l] * vb[l]; ab[l] += u[l] * va[l]; }
        break;
      }
      case Op::Div: {
        double *aa = A + nd.a * L, *ab = A + nd.b * L;
        const double *vb = B + nd.b * L, *vo = B + i * L;
        for (size_t l = 0; l < L; ++l) {
          const double ib = 1.0 / vb[l];
          aa[l] += u[l] * ib;
          ab[l] -= u[l] * vo[l] * ib;
        }
        break;
      }
      case Op::Neg: {
        double* a = A + nd.a * L;
        for (size_t l = 0; l < L; ++l) a[l] -= u[l];
        break;
      }
      case Op::Sin: {
        double* a = A + nd.a * L;
        const double* va = B + nd.a * L;
        for (size_t l = 0; l < L; ++l) a[l] += u[l] * std::cos(va[l]);
        break;
      }
      case Op::Cos: {
        double* a = A + nd.a * L;
        const double* va = B + nd.a * L;
        for (size_t l = 0; l < L; ++l) a[l] -= u[l] * std::sin(va[l]);
        break;
      }
      case Op::Tanh: {
        double* a = A + nd.a * L;
        const double* vo = B + i * L;
        for (size_t l = 0; l < L; ++l) a[l] += u[l] * (1.0 - vo[l] * vo[l]);
        break;
      }
      case Op::Exp: {
        double* a = A + nd.a * L;
        const double* vo = B + i * L;
        for (size_t l = 0; l < L; ++l) a[l] += u[l] * vo[l];
        break;
      }
      case Op::Pow: {
        double* a = A + nd.a * L;
        const double* va = B + nd.a * L;
        for (size_t l = 0; l < L; ++l) a[l] += u[l] * nd.c * std::pow(va[l], nd.c - 1.0);
        break;
      }
      case Op::Dot: {
        const NodeId* o = pool + nd.ops;
        const uint32_t k = nd.nops;
        for (uint32_t j = 0; j < k; ++j) {
          double *aa = A + o[j] * L, *ab = A + o[k + j] * L;
          const double *va = B + o[j] * L, *vb = B + o[k + j] * L;
          for (size_t l = 0; l < L; ++l) { aa[l] += u[l] * vb[l]; ab[l] += u[l] * va[l]; }
        }
        break;
      }
      case Op::AffineP: {
        const NodeId* o = pool + nd.ops;
        const double* w = params.data() + nd.slot;
        double* gw = grad.data() + nd.slot;
        double ul[L];
        for (size_t l = 0; l < L; ++l) ul[l] = u[l];
        for (uint32_t j = 0; j < nd.nops; ++j) {
          const double wj = w[j];
          double* ax = A + o[j] * L;
          const double* vx = B + o[j] * L;
          double acc = 0.0;
          for (size_t l = 0; l < L; ++l) {
            ax[l] += wj * ul[l];
            acc += ul[l] * vx[l];
          }
          gw[j] += acc;
        }
        if (nd.bias >= 0) {
          double acc = 0.0;
          for (size_t l = 0; l < L; ++l) acc += ul[l];
          grad[nd.bias] += acc;
        }
        break;
      }
      case Op::AffineC: {
        const NodeId* o = pool + nd.ops;
        const double* w = cp + nd.slot;
        double ul[L];
        for (size_t l = 0; l < L; ++l) ul[l] = u[l];
        for (uint32_t j = 0; j < nd.nops; ++j) {
          const double wj = w[j];
          double* ax = A + o[j] * L;
          for (size_t l = 0; l < L; ++l) ax[l] += wj * ul[l];
        }
        break;
      }
    }
  }
}

// --- derivative augmentation -------------------------------------------------

namespace {

// Ancestor mask of `out` within [0, out].
std::vector<uint8_t> ancestor_mask(const Graph& g, NodeId out) {
  std::vector<uint8_t> live(out + 1, 0);
  live[out] = 1;
  for (size_t i = out + 1; i-- > 0;) {
    if (!live[i]) continue;
    const Node& nd = g.nodes[i];
    switch (nd.op) {
      case Op::Const: case Op::Input: case Op::Param: break;
      case Op::Add: case Op::Sub: case Op::Mul: case Op::Div: case Op::Dot:
        if (nd.op == Op::Dot) {
          for (uint32_t j = 0; j < 2 * nd.nops; ++j) live[g.pool[nd.ops + j]] = 1;
        } else {
          live[nd.a] = 1;
          live[nd.b] = 1;
        }
        break;
      case Op::Neg: case Op::Sin: case Op::Cos: case Op::Tanh: case Op::Exp: case Op::Pow:
        live[nd.a] = 1;
        break;
      case Op::AffineP: case Op::AffineC:
        for (uint32_t j = 0; j < nd.nops; ++j) live[g.pool[nd.ops + j]] = 1;
        break;
    }
  }
  return live;
}

}  // namespace

DerivHandles augment_derivatives(GraphBuilder& b, NodeId out, int spatial_dim, int order) {
  std::vector<uint32_t> slots(spatial_dim > 0 ? spatial_dim : 0);
  for (int k = 0; k < spatial_dim; ++k) slots[k] = static_cast<uint32_t>(k);
  return augment_derivatives(b, out, slots, order);
}

DerivHandles augment_derivatives(GraphBuilder& b, NodeId out,
                                 std::span<const uint32_t> spatial_slots, int order) {
  if (spatial_slots.empty()) throw std::invalid_argument("augment: need >= 1 spatial slot");
  if (order < 1 || order > 2) throw std::invalid_argument("augment: order must be 1 or 2");
  const size_t n_src = static_cast<size_t>(out) + 1;
  const int n = static_cast<int>(spatial_slots.size());
  std::vector<uint8_t> live = ancestor_mask(b.graph(), out);

  const NodeId zero = b.constant(0.0);
  const NodeId one = b.constant(1.0);
  const NodeId two = b.constant(2.0);

  // d[i*n+k] / dd[i*n+k]: node computing the k-th first/second derivative of
  // source node i. Helper nodes are shared across derivative directions.
  std::vector<NodeId> d(n_src * n, zero);
  std::vector<NodeId> dd;
  if (order == 2) dd.assign(n_src * n, zero);
  std::vector<NodeId> h1(n_src, kInvalidNode), h2(n_src, kInvalidNode);

  // Helpers first so every derivative rule below can reference them.
  for (size_t i = 0; i < n_src; ++i) {
    if (!live[i]) continue;
    const Node nd = b.graph().nodes[i];
    switch (nd.op) {
      case Op::Sin: h1[i] = b.cos(nd.a); break;                    // cos(arg)
      case Op::Cos: h1[i] = b.sin(nd.a); break;                    // sin(arg)
      case Op::Tanh:
        h1[i] = b.sub(one, b.mul(i, i));                           // 1 - t^2
        if (order == 2) h2[i] = b.mul(b.mul(two, i), h1[i]);       // 2 t (1 - t^2)
        break;
      case Op::Pow:
        h1[i] = b.pow(nd.a, nd.c - 1.0);                           // a^(p-1)
        if (order == 2) h2[i] = b.pow(nd.a, nd.c - 2.0);           // a^(p-2)
        break;
      case Op::Div:
        h1[i] = b.div(one, nd.b);                                  // 1/b
        break;
      default: break;
    }
  }

  auto D = [&](NodeId i, int k) -> NodeId { return d[static_cast<size_t>(i) * n + k]; };
  auto DD = [&](NodeId i, int k) -> NodeId { return dd[static_cast<size_t>(i) * n + k]; };

  for (int k = 0; k < n; ++k) {
    for (size_t i = 0; i < n_src; ++i) {
      if (!live[i]) continue;
      const Node nd = b.graph().nodes[i];
      const NodeId ni = static_cast<NodeId>(i);
      NodeId r = zero;
      switch (nd.op) {
        case Op::Const: case Op::Param: break;
        case Op::Input:
          r = (nd.slot == spatial_slots[k]) ? one : zero;
          break;
        case Op::Add: r = b.add(D(nd.a, k), D(nd.b, k)); break;
        case Op::Sub: r = b.sub(D(nd.a, k), D(nd.b, k)); break;
        case Op::Mul:
          r = b.add(b.mul(D(nd.a, k), nd.b), b.mul(nd.a, D(nd.b, k)));
          break;
        case Op::Div:
          // (a' - u b') / b
          r = b.mul(b.sub(D(nd.a, k), b.mul(ni, D(nd.b, k))), h1[i]);
          break;
        case Op::Neg: r = b.neg(D(nd.a, k)); break;
        case Op::Sin: r = b.mul(h1[i], D(nd.a, k)); break;
        case Op::Cos: r = b.neg(b.mul(h1[i], D(nd.a, k))); break;
        case Op::Tanh: r = b.mul(h1[i], D(nd.a, k)); break;
        case Op::Exp: r = b.mul(ni, D(nd.a, k)); break;
        case Op::Pow: r = b.mul(b.mul(b.constant(nd.c), h1[i]), D(nd.a, k)); break;
        case Op::Dot: {
          const uint32_t kk = nd.nops;
          for (uint32_t j = 0; j < kk; ++j) {
            NodeId aj = b.graph().pool[nd.ops + j];
            NodeId bj = b.graph().pool[nd.ops + kk + j];
            r = b.add(r, b.add(b.mul(D(aj, k), bj), b.mul(aj, D(bj, k))));
          }
          break;
        }
        case Op::AffineP: {
          std::vector<NodeId> xs(nd.nops);
          for (uint32_t j = 0; j < nd.nops; ++j) xs[j] = D(b.graph().pool[nd.ops + j], k);
          r = b.affine_params(xs, nd.slot, -1);
          break;
        }
        case Op::AffineC: {
          std::vector<NodeId> xs(nd.nops);
          for (uint32_t j = 0; j < nd.nops; ++j) xs[j] = D(b.graph().pool[nd.ops + j], k);
          std::vector<double> cs(b.graph().cpool.begin() + nd.slot,
                                 b.graph().cpool.begin() + nd.slot + nd.nops);
          r = b.affine_const(xs, cs, 0.0);
          break;
        }
      }
      d[i * n + k] = r;
    }
  }

  if (order == 2) {
    for (int k = 0; k < n; ++k) {
      for (size_t i = 0; i < n_src; ++i) {
        if (!live[i]) continue;
        const Node nd = b.graph().nodes[i];
        const NodeId ni = static_cast<NodeId>(i);
        NodeId r = zero;
        switch (nd.op) {
          case Op::Const: case Op::Param: case Op::Input: break;
          case Op::Add: r = b.add(DD(nd.a, k), DD(nd.b, k)); break;
          case Op::Sub: r = b.sub(DD(nd.a, k), DD(nd.b, k)); break;
          case Op::Mul: {
            NodeId cross = b.mul(two, b.mul(D(nd.a, k), D(nd.b, k)));
            r = b.add(b.add(b.mul(DD(nd.a, k), nd.b), cross), b.mul(nd.a, DD(nd.b, k)));
            break;
          }
          case Op::Div: {
            // (a'' - 2 u' b' - u b'') / b
            NodeId t = b.sub(DD(nd.a, k), b.mul(two, b.mul(D(ni, k), D(nd.b, k))));
            r = b.mul(b.sub(t, b.mul(ni, DD(nd.b, k))), h1[i]);
            break;
          }
          case Op::Neg: r = b.neg(DD(nd.a, k)); break;
          case Op::Sin: {
            NodeId sq = b.mul(D(nd.a, k), D(nd.a, k));
            r = b.sub(b.mul(h1[i], DD(nd.a, k)), b.mul(ni, sq));
            break;
          }
          case Op::Cos: {
            NodeId sq = b.mul(D(nd.a, k), D(nd.a, k));
            r = b.neg(b.add(b.mul(h1[i], DD(nd.a, k)), b.mul(ni, sq)));
            break;
          }
          case Op::Tanh: {
            NodeId sq = b.mul(D(nd.a, k), D(nd.a, k));
            r = b.sub(b.mul(h1[i], DD(nd.a, k)), b.mul(h2[i], sq));
            break;
          }
          case Op::Exp: {
            NodeId sq = b.mul(D(nd.a, k), D(nd.a, k));
            r = b.mul(ni, b.add(sq, DD(nd.a, k)));
            break;
          }
          case Op::Pow: {
            NodeId sq = b.mul(D(nd.a, k), D(nd.a, k));
            NodeId t1 = b.mul(b.constant(nd.c * (nd.c - 1.0)), b.mul(h2[i], sq));
            NodeId t2 = b.mul(b.constant(nd.c), b.mul(h1[i], DD(nd.a, k)));
            r = b.add(t1, t2);
            break;
          }
          case Op::Dot: {
            const uint32_t kk = nd.nops;
            for (uint32_t j = 0; j < kk; ++j) {
              NodeId aj = b.graph().pool[nd.ops + j];
              NodeId bj = b.graph().pool[nd.ops + kk + j];
              NodeId cross = b.mul(two, b.mul(D(aj, k), D(bj, k)));
              NodeId t = b.add(b.add(b.mul(DD(aj, k), bj), cross), b.mul(aj, DD(bj, k)));
              r = b.add(r, t);
            }
            break;
          }
          case Op::AffineP: {
            std::vector<NodeId> xs(nd.nops);
            for (uint32_t j = 0; j < nd.nops; ++j) xs[j] = DD(b.graph().pool[nd.ops + j], k);
            r = b.affine_params(xs, nd.slot, -1);
            break;
          }
          case Op::AffineC: {
            std::vector<NodeId> xs(nd.nops);
            for (uint32_t j = 0; j < nd.nops; ++j) xs[j] = DD(b.graph().pool[nd.ops + j], k);
            std::vector<double> cs(b.graph().cpool.begin() + nd.slot,
                                   b.graph().cpool.begin() + nd.slot + nd.nops);
            r = b.affine_const(xs, cs, 0.0);
            break;
          }
        }
        dd[i * n + k] = r;
      }
    }
  }

  DerivHandles h;
  h.value = out;
  h.grad.resize(n);
  for (int k = 0; k < n; ++k) h.grad[k] = D(out, k);
  if (order == 2) {
    h.second.resize(n);
    NodeId lap = zero;
    for (int k = 0; k < n; ++k) {
      h.second[k] = DD(out, k);
      lap = b.add(lap, h.second[k]);
    }
    h.laplacian = lap;
  }
  return h;
}

Graph compact(const Graph& g, std::span<const NodeId> keep, std::vector<NodeId>& remap) {
  std::vector<uint8_t> live(g.nodes.size(), 0);
  for (NodeId k : keep) live[k] = 1;
  for (size_t i = g.nodes.size(); i-- > 0;) {
    if (!live[i]) continue;
    const Node& nd = g.nodes[i];
    switch (nd.op) {
      case Op::Const: case Op::Input: case Op::Param: break;
      case Op::Neg: case Op::Sin: case Op::Cos: case Op::Tanh: case Op::Exp: case Op::Pow:
        live[nd.a] = 1;
        break;
      case Op::Add: case Op::Sub: case Op::Mul: case Op::Div:
        live[nd.a] = 1;
        live[nd.b] = 1;
        break;
      case Op::Dot:
        for (uint32_t j = 0; j < 2 * nd.nops; ++j) live[g.pool[nd.ops + j]] = 1;
        break;
      case Op::AffineP: case Op::AffineC:
        for (uint32_t j = 0; j < nd.nops; ++j) live[g.pool[nd.ops + j]] = 1;
        break;
    }
  }
  Graph out;
  out.n_inputs = g.n_inputs;
  out.n_params = g.n_params;
  remap.assign(g.nodes.size(), kInvalidNode);
  for (size_t i = 0; i < g.nodes.size(); ++i) {
    if (!live[i]) continue;
    Node nd = g.nodes[i];
    switch (nd.op) {
      case Op::Const: case Op::Input: case Op::Param: break;
      case Op::Neg: case Op::Sin: case Op::Cos: case Op::Tanh: case Op::Exp: case Op::Pow:
        nd.a = remap[nd.a];
        break;
      case Op::Add: case Op::Sub: case Op::Mul: case Op::Div:
        nd.a = remap[nd.a];
        nd.b = remap[nd.b];
        break;
      case Op::Dot: {
        uint32_t off = static_cast<uint32_t>(out.pool.size());
        for (uint32_t j = 0; j < 2 * nd.nops; ++j) out.pool.push_back(remap[g.pool[nd.ops + j]]);
        nd.ops = off;
        break;
      }
      case Op::AffineP: {
        uint32_t off = static_cast<uint32_t>(out.pool.size());
        for (uint32_t j = 0; j < nd.nops; ++j) out.pool.push_back(remap[g.pool[nd.ops + j]]);
        nd.ops = off;
        break;
      }
      case Op::AffineC: {
        uint32_t off = static_cast<uint32_t>(out.pool.size());
        for (uint32_t j = 0; j < nd.nops; ++j) out.pool.push_back(remap[g.pool[nd.ops + j]]);
        nd.ops = off;
        uint32_t coff = static_cast<uint32_t>(out.cpool.size());
        out.cpool.insert(out.cpool.end(), g.cpool.begin() + nd.slot,
                         g.cpool.begin() + nd.slot + nd.nops);
        nd.slot = coff;
        break;
      }
    }
    remap[i] = static_cast<NodeId>(out.nodes.size());
    out.nodes.push_back(nd);
  }
  return out;
}

// --- convenience API ----------------------------------------------------------

AugmentedExpr augment(const Graph& g, NodeId out, int spatial_dim, int order) {
  GraphBuilder b(g);
  DerivHandles h = augment_derivatives(b, out, spatial_dim, order);
  std::vector<NodeId> keep;
  keep.push_back(h.value);
  keep.insert(keep.end(), h.grad.begin(), h.grad.end());
  keep.insert(keep.end(), h.second.begin(), h.second.end());
  if (order == 2) keep.push_back(h.laplacian);
  std::vector<NodeId> remap;
  Graph cg = compact(b.graph(), keep, remap);
  DerivHandles rh;
  rh.value = remap[h.value];
  for (NodeId x : h.grad) rh.grad.push_back(remap[x]);
  for (NodeId x : h.second) rh.second.push_back(remap[x]);
  if (order == 2) rh.laplacian = remap[h.laplacian];
  return {std::move(cg), std::move(rh), spatial_dim};
}

double evaluate(const Graph& g, NodeId out, std::span<const double> x,
                std::span<const double> params) {
  g.check_bindings(x.size(), params.size());
  std::vector<double> buf(g.size());
  eval(g, params, x, buf);
  return buf[out];
}

DerivativeBundle input_derivatives(const AugmentedExpr& ax, std::span<const double> x,
                                   std::span<const double> params) {
  ax.graph.check_bindings(x.size(), params.size());
  std::vector<double> buf(ax.graph.size());
  eval(ax.graph, params, x, buf);
  DerivativeBundle out;
  out.value = buf[ax.handles.value];
  out.grad.reserve(ax.handles.grad.size());
  for (NodeId k : ax.handles.grad) out.grad.push_back(buf[k]);
  out.laplacian = ax.handles.laplacian ? buf[ax.handles.laplacian] : 0.0;
  return out;
}

DerivativeBundle input_derivatives(const Graph& g, NodeId out, int spatial_dim,
                                   std::span<const double> x, std::span<const double> params) {
  return input_derivatives(augment(g, out, spatial_dim, 2), x, params);
}

std::vector<double> parameter_gradient(const Graph& g, NodeId loss, std::span<const double> x,
                                       std::span<const double> params, size_t n_params) {
  g.check_bindings(x.size(), params.size());
  std::vector<double> buf(g.size()), adj(g.size());
  std::vector<double> grad(n_params, 0.0);
  eval(g, params, x, buf);
  backward(g, params, buf, loss, 1.0, adj, grad);
  return grad;
}

std::vector<double> per_sample_gradient_norms(const Graph& g, NodeId residual,
                                              std::span<const double> rows, size_t n_rows,
                                              std::span<const double> params, size_t n_params) {
  const size_t w = g.n_inputs;
  std::vector<double> buf(g.size()), adj(g.size()), grad(n_params);
  std::vector<double> norms(n_rows, 0.0);
  for (size_t r = 0; r < n_rows; ++r) {
    std::fill(grad.begin(), grad.end(), 0.0);
    std::span<const double> x = rows.subspan(r * w, w);
    eval(g, params, x, buf);
    backward(g, params, buf, residual, 1.0, adj, grad);
    double acc = 0.0;
    for (double v : grad) acc += v * v;
    norms[r] = acc;
  }
  return norms;
}

}  // namespace mlpinn
