#include "mlpinn/loss.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace mlpinn {

size_t omp_workspace_count() {
#ifdef _OPENMP
  return static_cast<size_t>(omp_get_max_threads());
#else
  return 1;
#endif
}

namespace {

// Input slot layout per part kind.
//   interior, linear or level-1:    [x(dim), d]
//   interior, nonlinear correction: [x(dim), f, u_f, grad_f(dim), lap_f]
//   boundary:                       [x(dim), d]
struct InteriorLayout {
  int dim;
  bool with_frozen;
  uint32_t data() const { return dim; }
  uint32_t frozen_u() const { return dim + 1; }
  uint32_t frozen_grad(int k) const { return dim + 2 + k; }
  uint32_t frozen_lap() const { return 2 * dim + 2; }
  uint32_t width() const { return with_frozen ? 2 * dim + 3 : dim + 1; }
};

LossPart build_interior_part(const ProblemSpec& problem, const Network& active,
                             const InteriorLayout& lay) {
  GraphBuilder g;
  std::vector<NodeId> x(lay.dim);
  for (int k = 0; k < lay.dim; ++k) x[k] = g.input(k);
  NodeId v = active.emit(g, x);
  DerivHandles h = augment_derivatives(g, v, lay.dim, 2);
  NodeId data = g.input(lay.data());

  PointQuantities q;
  q.x = x;
  std::vector<NodeId> grad = h.grad;
  NodeId u = v, lap = h.laplacian;
  if (lay.with_frozen) {
    u = g.add(v, g.input(lay.frozen_u()));
    for (int k = 0; k < lay.dim; ++k) grad[k] = g.add(grad[k], g.input(lay.frozen_grad(k)));
    lap = g.add(lap, g.input(lay.frozen_lap()));
  }
  q.u = u;
  q.grad = grad;
  q.lap = lap;
  NodeId r = g.sub(problem.residual.build(g, q), data);

  LossPart part;
  std::vector<NodeId> keep{r};
  std::vector<NodeId> remap;
  Graph full = g.take();
  const uint32_t width = lay.width();
  part.graph = compact(full, keep, remap);
  part.graph.n_inputs = std::max(part.graph.n_inputs, width);
  part.residual = remap[r];
  return part;
}

LossPart build_boundary_part(const BoundarySegment& seg, const Network& active, int dim) {
  GraphBuilder g;
  std::vector<NodeId> x(dim);
  for (int k = 0; k < dim; ++k) x[k] = g.input(k);
  NodeId v = active.emit(g, x);
  NodeId data = g.input(dim);
  NodeId r;
  if (seg.kind == BcKind::Dirichlet) {
    r = g.sub(v, data);
  } else {
    DerivHandles h = augment_derivatives(g, v, dim, 1);
    NodeId dn = seg.normal_sign() < 0 ? g.neg(h.grad[seg.axis]) : h.grad[seg.axis];
    r = g.sub(dn, data);
  }
  LossPart part;
  std::vector<NodeId> keep{r};
  std::vector<NodeId> remap;
  Graph full = g.take();
  part.graph = compact(full, keep, remap);
  part.graph.n_inputs = std::max(part.graph.n_inputs, static_cast<uint32_t>(dim + 1));
  part.residual = remap[r];
  return part;
}

}  // namespace

LevelLoss assemble_level_loss(const ProblemSpec& problem, const CompositeModel& composite,
                              const SampleSet& samples) {
  if (composite.n_levels() == 0)
    throw std::invalid_argument("assemble_level_loss: composite has no levels");
  if (samples.n_interior() == 0)
    throw std::invalid_argument("assemble_level_loss: empty interior sample set");
  const int dim = problem.domain.dim();
  if (samples.dim != dim)
    throw std::invalid_argument("assemble_level_loss: sample/problem dimension mismatch");
  const Network& active = composite.active();
  const bool has_frozen = composite.frozen_count() > 0;
  const bool frozen_in_graph = has_frozen && !problem.residual.linear;

  LevelLoss loss;
  loss.dim = dim;
  loss.n_params = active.params().size();

  LossComponent interior;
  interior.name = "interior";
  interior.parts.push_back(
      build_interior_part(problem, active, {dim, frozen_in_graph}));
  interior.n_samples = samples.n_interior();
  loss.components.push_back(std::move(interior));

  // Boundary segments pool into components by group, in first-appearance order.
  for (size_t s = 0; s < problem.boundary.size(); ++s) {
    const BoundarySegment& seg = problem.boundary[s];
    if (seg.group == "interior")
      throw std::invalid_argument("boundary group name 'interior' is reserved");
    LossComponent* comp = nullptr;
    for (auto& c : loss.components)
      if (c.name == seg.group) comp = &c;
    if (!comp) {
      loss.components.push_back({seg.group, {}, 0});
      comp = &loss.components.back();
    }
    if (samples.n_boundary(s) == 0)
      throw std::invalid_argument("assemble_level_loss: empty boundary sample set");
    comp->parts.push_back(build_boundary_part(seg, active, dim));
    comp->n_samples += samples.n_boundary(s);
  }

  fill_rows(loss, problem, composite, samples);
  return loss;
}

void fill_rows(LevelLoss& loss, const ProblemSpec& problem, const CompositeModel& composite,
               const SampleSet& samples) {
  const int dim = loss.dim;
  const bool has_frozen = composite.frozen_count() > 0;
  const bool frozen_in_graph = has_frozen && !problem.residual.linear;

  LossPart& ip = loss.components[0].parts[0];
  const InteriorLayout lay{dim, frozen_in_graph};
  const size_t n_r = samples.n_interior();
  ip.rows.resize(n_r, lay.width());
  for (size_t i = 0; i < n_r; ++i) {
    const double* x = samples.interior.data() + i * dim;
    double* row = ip.rows.row(i);
    std::copy(x, x + dim, row);
    const double f = problem.source({x, static_cast<size_t>(dim)});
    if (frozen_in_graph) {
      DerivativeBundle b = composite.frozen_derivatives({x, static_cast<size_t>(dim)});
      row[lay.data()] = f;
      row[lay.frozen_u()] = b.value;
      for (int k = 0; k < dim; ++k) row[lay.frozen_grad(k)] = b.grad[k];
      row[lay.frozen_lap()] = b.laplacian;
    } else if (has_frozen) {
      DerivativeBundle b = composite.frozen_derivatives({x, static_cast<size_t>(dim)});
      row[lay.data()] =
          f - problem.residual.value({x, static_cast<size_t>(dim)}, b.value, b.grad, b.laplacian);
    } else {
      row[lay.data()] = f;
    }
  }

  // Boundary parts were appended in segment order within each component.
  std::vector<size_t> next_part(loss.components.size(), 0);
  for (size_t s = 0; s < problem.boundary.size(); ++s) {
    const BoundarySegment& seg = problem.boundary[s];
    size_t ci = 0;
    while (loss.components[ci].name != seg.group) ++ci;
    LossPart& bp = loss.components[ci].parts[next_part[ci]++];

    const size_t n_b = samples.n_boundary(s);
    bp.rows.resize(n_b, dim + 1);
    for (size_t i = 0; i < n_b; ++i) {
      const double* x = samples.boundary[s].data() + i * dim;
      double* row = bp.rows.row(i);
      std::copy(x, x + dim, row);
      double d = seg.data({x, static_cast<size_t>(dim)});
      if (has_frozen) {
        DerivativeBundle b = composite.frozen_derivatives({x, static_cast<size_t>(dim)});
        if (seg.kind == BcKind::Dirichlet)
          d -= b.value;
        else
          d -= seg.normal_sign() * b.grad[seg.axis];
      }
      row[dim] = d;
    }
  }
}

namespace {

void ensure_workspace(LossWorkspace& ws, size_t n_nodes, size_t n_slots, size_t n_params) {
  if (ws.buf.size() < n_nodes * kLanes) ws.buf.resize(n_nodes * kLanes);
  if (ws.adj.size() < n_nodes * kLanes) ws.adj.resize(n_nodes * kLanes);
  if (ws.xin.size() < n_slots * kLanes) ws.xin.resize(n_slots * kLanes);
  if (ws.sgrad.size() < n_params) ws.sgrad.resize(n_params);
  if (ws.gacc.size() < n_params) ws.gacc.resize(n_params);
}

// Scalar reference path: one sample at a time, per-sample gradient vector.
void eval_part_reference(const LossPart& part, std::span<const double> params, size_t n_params,
                         double grad_scale, bool want_grad, bool want_trace, LossWorkspace& ws,
                         double& sq_sum, double& trace_sum, std::span<double> grad) {
  const size_t w = part.rows.cols;
  ensure_workspace(ws, part.graph.size(), w, n_params);
  for (size_t i = 0; i < part.rows.rows; ++i) {
    std::span<const double> row(part.rows.row(i), w);
    eval(part.graph, params, row, ws.buf);
    const double r = ws.buf[part.residual];
    sq_sum += r * r;
    if (!want_grad && !want_trace) continue;
    std::fill(ws.sgrad.begin(), ws.sgrad.begin() + n_params, 0.0);
    backward(part.graph, params, ws.buf, part.residual, 1.0, ws.adj,
             {ws.sgrad.data(), n_params});
    if (want_trace) {
      double acc = 0.0;
      for (size_t p = 0; p < n_params; ++p) acc += ws.sgrad[p] * ws.sgrad[p];
      trace_sum += acc;
    }
    if (want_grad) {
      const double c = grad_scale * 2.0 * r;
      for (size_t p = 0; p < n_params; ++p) grad[p] += c * ws.sgrad[p];
    }
  }
}

// Lane-batched path over one contiguous block range.
void eval_part_batched(const LossPart& part, std::span<const double> params, size_t n_params,
                       double grad_scale, bool want_grad, size_t block_begin, size_t block_end,
                       LossWorkspace& ws, double& sq_sum, std::span<double> grad) {
  const size_t w = part.rows.cols;
  const size_t n = part.rows.rows;
  ensure_workspace(ws, part.graph.size(), w, n_params);
  double seeds[kLanes];
  for (size_t blk = block_begin; blk < block_end; ++blk) {
    const size_t i0 = blk * kLanes;
    const size_t cnt = std::min(kLanes, n - i0);
    // Slot-major input block; padding lanes replicate the last valid row.
    for (size_t l = 0; l < kLanes; ++l) {
      const double* row = part.rows.row(i0 + std::min(cnt - 1, l));
      for (size_t s = 0; s < w; ++s) ws.xin[s * kLanes + l] = row[s];
    }
    eval_lanes(part.graph, params, ws.xin.data(), ws.buf);
    const double* rv = ws.buf.data() + static_cast<size_t>(part.residual) * kLanes;
    for (size_t l = 0; l < cnt; ++l) sq_sum += rv[l] * rv[l];
    if (!want_grad) continue;
    for (size_t l = 0; l < kLanes; ++l)
      seeds[l] = l < cnt ? grad_scale * 2.0 * rv[l] : 0.0;
    backward_lanes(part.graph, params, ws.buf, part.residual, seeds, ws.adj,
                   {ws.gacc.data(), n_params});
  }
}

}  // namespace

void eval_component(const LossComponent& comp, std::span<const double> params, size_t n_params,
                    bool want_trace, ExecPolicy exec, ComponentEval& out,
                    std::vector<LossWorkspace>& ws) {
  out.mean_sq = 0.0;
  out.trace = 0.0;
  if (out.grad.size() != n_params) out.grad.assign(n_params, 0.0);
  std::fill(out.grad.begin(), out.grad.end(), 0.0);
  if (ws.empty()) ws.resize(omp_workspace_count());
  const double inv_n = comp.n_samples ? 1.0 / static_cast<double>(comp.n_samples) : 0.0;

  double sq_sum = 0.0, trace_sum = 0.0;

  if (exec == ExecPolicy::Reference) {
    for (const LossPart& part : comp.parts)
      eval_part_reference(part, params, n_params, inv_n, true, want_trace, ws[0], sq_sum,
                          trace_sum, out.grad);
    out.mean_sq = sq_sum * inv_n;
    out.trace = trace_sum;
    return;
  }

  for (const LossPart& part : comp.parts) {
    const size_t n = part.rows.rows;
    const size_t n_blocks = (n + kLanes - 1) / kLanes;
#ifdef _OPENMP
    const bool parallel = exec == ExecPolicy::BatchedParallel && n_blocks > 1 && ws.size() > 1;
#else
    const bool parallel = false;
#endif
    if (!parallel) {
      eval_part_batched(part, params, n_params, inv_n, true, 0, n_blocks, ws[0], sq_sum,
                        out.grad);
    } else {
#ifdef _OPENMP
      const size_t n_threads = ws.size();
      std::vector<double> part_sums(n_threads, 0.0);
#pragma omp parallel num_threads(static_cast<int>(n_threads))
      {
        const size_t tid = static_cast<size_t>(omp_get_thread_num());
        LossWorkspace& w = ws[tid];
        ensure_workspace(w, part.graph.size(), part.rows.cols, n_params);
        std::fill(w.gacc.begin(), w.gacc.begin() + n_params, 0.0);
        const size_t chunk = (n_blocks + n_threads - 1) / n_threads;
        const size_t b0 = std::min(tid * chunk, n_blocks);
        const size_t b1 = std::min(b0 + chunk, n_blocks);
        double local = 0.0;
        eval_part_batched(part, params, n_params, inv_n, true, b0, b1, w, local,
                          {w.gacc.data(), n_params});
        part_sums[tid] = local;
      }
      // Deterministic reduction in thread order.
      for (size_t t = 0; t < n_threads; ++t) {
        sq_sum += part_sums[t];
        for (size_t p = 0; p < n_params; ++p) out.grad[p] += ws[t].gacc[p];
      }
#endif
    }
  }
  out.mean_sq = sq_sum * inv_n;

  if (want_trace) {
    // Trace statistics reuse the scalar reference sweep (runs on weight-update
    // iterations only).
    double dummy_sq = 0.0;
    for (const LossPart& part : comp.parts)
      eval_part_reference(part, params, n_params, 0.0, false, true, ws[0], dummy_sq, trace_sum,
                          {});
    out.trace = trace_sum;
  }
}

double loss_value(const LevelLoss& loss, std::span<const double> weights,
                  std::span<const double> params, ExecPolicy exec,
                  std::vector<LossWorkspace>& ws) {
  if (weights.size() != loss.components.size())
    throw std::invalid_argument("loss_value: weight count mismatch");
  double total = 0.0;
  if (ws.empty()) ws.resize(omp_workspace_count());
  for (size_t k = 0; k < loss.components.size(); ++k) {
    const LossComponent& comp = loss.components[k];
    const double inv_n = comp.n_samples ? 1.0 / static_cast<double>(comp.n_samples) : 0.0;
    double sq_sum = 0.0, trace_sum = 0.0;
    for (const LossPart& part : comp.parts) {
      if (exec == ExecPolicy::Reference) {
        eval_part_reference(part, params, loss.n_params, 0.0, false, false, ws[0], sq_sum,
                            trace_sum, {});
      } else {
        const size_t n_blocks = (part.rows.rows + kLanes - 1) / kLanes;
        eval_part_batched(part, params, loss.n_params, 0.0, false, 0, n_blocks, ws[0], sq_sum,
                          {});
      }
    }
    total += weights[k] * sq_sum * inv_n;
  }
  return total;
}

std::vector<double> eval_values(const Graph& g, NodeId out, const RowMatrix& pts,
                                std::span<const double> params, ExecPolicy exec) {
  std::vector<double> res(pts.rows);
  if (exec == ExecPolicy::Reference) {
    std::vector<double> buf(g.size());
    for (size_t i = 0; i < pts.rows; ++i) {
      eval(g, params, {pts.row(i), pts.cols}, buf);
      res[i] = buf[out];
    }
    return res;
  }
  const size_t n_blocks = (pts.rows + kLanes - 1) / kLanes;
  const size_t n_threads = exec == ExecPolicy::BatchedParallel ? omp_workspace_count() : 1;
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(static_cast<int>(n_threads))
#endif
  for (size_t blk = 0; blk < n_blocks; ++blk) {
    std::vector<double> buf(g.size() * kLanes), xin(pts.cols * kLanes);
    const size_t i0 = blk * kLanes;
    const size_t cnt = std::min(kLanes, pts.rows - i0);
    for (size_t l = 0; l < kLanes; ++l) {
      const double* row = pts.row(i0 + std::min(cnt - 1, l));
      for (size_t s = 0; s < pts.cols; ++s) xin[s * kLanes + l] = row[s];
    }
    eval_lanes(g, params, xin.data(), buf);
    for (size_t l = 0; l < cnt; ++l) res[i0 + l] = buf[static_cast<size_t>(out) * kLanes + l];
  }
  return res;
}

}  // namespace mlpinn
