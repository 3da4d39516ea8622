#pragma once

#include <string>
#include <vector>

#include "mlpinn/graph.hpp"
#include "mlpinn/model.hpp"
#include "mlpinn/problems.hpp"

namespace mlpinn {

// Reference: scalar per-point loops (the serial implementation kept for
// testing). Batched: lane-blocked kernels, serial over blocks.
// BatchedParallel: lane-blocked kernels with OpenMP over blocks.
enum class ExecPolicy { Reference, Batched, BatchedParallel };

struct RowMatrix {
  size_t rows = 0, cols = 0;
  std::vector<double> data;
  void resize(size_t r, size_t c) {
    rows = r;
    cols = c;
    data.assign(r * c, 0.0);
  }
  double* row(size_t i) { return data.data() + i * cols; }
  const double* row(size_t i) const { return data.data() + i * cols; }
};

// One residual expression with its per-sample input rows. Interior rows are
// [x, d] where d already carries the linear residual shift of the frozen
// levels (d = f - N[u_frozen]); nonlinear interiors above level 1 instead
// carry [x, f, u_f, grad_f, lap_f] and combine in-graph. Boundary rows are
// [x, d] with d = g - B[u_frozen].
struct LossPart {
  Graph graph;
  NodeId residual = 0;
  RowMatrix rows;
};

// A weighted loss component: the interior term or one boundary group pooled
// over its segments. The component loss is the mean squared residual over
// all its samples.
struct LossComponent {
  std::string name;
  std::vector<LossPart> parts;
  size_t n_samples = 0;
};

struct LevelLoss {
  std::vector<LossComponent> components;
  size_t n_params = 0;
  int dim = 0;
};

// Builds the active-level loss of Eqs.-style hierarchical correction: graphs
// reference only the active network's parameters; frozen levels enter through
// per-point data.
LevelLoss assemble_level_loss(const ProblemSpec& problem, const CompositeModel& composite,
                              const SampleSet& samples);
// Recomputes the data rows (used when resampling); graphs are reused.
void fill_rows(LevelLoss& loss, const ProblemSpec& problem, const CompositeModel& composite,
               const SampleSet& samples);

struct LossWorkspace {
  std::vector<double> buf, adj, xin, sgrad, gacc;
};

struct ComponentEval {
  double mean_sq = 0.0;          // unweighted component loss L_k
  double trace = 0.0;            // sum_i |grad_theta r_i|^2, if requested
  std::vector<double> grad;      // d(mean_sq)/d(theta_active)
};

// Evaluates one component's loss, gradient and (optionally) NTK trace.
// Workspaces grow on demand and are reused across calls; ws must hold at
// least one entry per OpenMP thread for the parallel policy.
void eval_component(const LossComponent& comp, std::span<const double> params, size_t n_params,
                    bool want_trace, ExecPolicy exec, ComponentEval& out,
                    std::vector<LossWorkspace>& ws);

// Loss value only (all components, given weights); used by equivalence tests.
double loss_value(const LevelLoss& loss, std::span<const double> weights,
                  std::span<const double> params, ExecPolicy exec,
                  std::vector<LossWorkspace>& ws);

// Forward-only batched evaluation of one graph output over many points.
std::vector<double> eval_values(const Graph& g, NodeId out, const RowMatrix& pts,
                                std::span<const double> params, ExecPolicy exec);

size_t omp_workspace_count();

}  // namespace mlpinn
