#include "mlpinn/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <memory>
#include <sstream>

namespace mlpinn {

uint64_t mix_seed(uint64_t a, uint64_t b) {
  uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

void TrainingTrace::save_csv(const std::string& path) const {
  FILE* f = std::fopen(path.c_str(), "w");
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  std::fprintf(f, "iteration");
  for (const auto& n : component_names) std::fprintf(f, ",loss_%s", n.c_str());
  for (const auto& n : component_names) std::fprintf(f, ",lambda_%s", n.c_str());
  std::fprintf(f, ",rel_l2_error\n");
  for (const TraceRow& r : rows) {
    std::fprintf(f, "%lld", static_cast<long long>(r.iteration));
    for (double v : r.losses) std::fprintf(f, ",%.17g", v);
    for (double v : r.weights) std::fprintf(f, ",%.17g", v);
    std::fprintf(f, ",%.17g\n", r.rel_l2);
  }
  std::fclose(f);
}

namespace {

std::string diverged_message(int64_t iteration, int level, const std::vector<double>& losses) {
  std::ostringstream os;
  os << "training diverged at iteration " << iteration << " (level " << level
     << "); loss components:";
  for (double v : losses) os << " " << v;
  return os.str();
}

}  // namespace

TrainingDiverged::TrainingDiverged(int64_t it, int lvl, std::vector<double> ls)
    : std::runtime_error(diverged_message(it, lvl, ls)),
      iteration(it),
      level(lvl),
      losses(std::move(ls)) {}

TrainResult train(const ProblemSpec& problem, const HierarchySchedule& schedule,
                  const SampleSet& samples, uint64_t seed, const TrainOptions& opts,
                  CompositeModel initial) {
  if (schedule.levels.empty()) throw std::invalid_argument("train: empty schedule");
  for (const LevelSpec& l : schedule.levels)
    if (l.iterations <= 0) throw std::invalid_argument("train: level budgets must be positive");
  if (opts.weights.initial <= 0.0 || !std::isfinite(opts.weights.initial))
    throw std::invalid_argument("train: initial weight must be positive and finite");

  CompositeModel composite = std::move(initial);
  const size_t base_levels = composite.n_levels();
  TrainResult result;
  TrainingTrace& trace = result.trace;
  std::vector<LossWorkspace> ws(omp_workspace_count());

  SampleSet cur = samples;
  uint64_t redraw = 0;
  int64_t global_it = 0;

  for (size_t li = 0; li < schedule.levels.size(); ++li) {
    const LevelSpec& lspec = schedule.levels[li];
    const int level_pos = static_cast<int>(base_levels + li);
    const uint64_t init_seed =
        lspec.init_seed.value_or(mix_seed(seed, static_cast<uint64_t>(level_pos)));
    composite.push_level(init_network(lspec.net, init_seed));

    LevelLoss ll = assemble_level_loss(problem, composite, cur);
    const size_t K = ll.components.size();
    const size_t P = ll.n_params;
    if (trace.component_names.empty())
      for (const auto& c : ll.components) trace.component_names.push_back(c.name);

    std::vector<double> weights(K, opts.weights.initial);
    std::vector<ComponentEval> evals(K);
    std::vector<double> stats(K), grad(P), losses(K);
    OptimizerState opt(lspec.optimizer, P);
    ParameterStore& params = composite.active().params();

    for (int it = 1; it <= lspec.iterations; ++it) {
      if (opts.resample_every > 0 && it > 1 && (it - 1) % opts.resample_every == 0) {
        redraw += 1;
        std::vector<size_t> per(cur.boundary.size());
        for (size_t s = 0; s < per.size(); ++s) per[s] = cur.n_boundary(s);
        cur = sample(problem, cur.n_interior(), per, mix_seed(samples.seed, redraw));
        fill_rows(ll, problem, composite, cur);
      }

      const bool update_weights =
          opts.weights.mode != WeightMode::Fixed && opts.weights.update_every > 0 &&
          it % opts.weights.update_every == 0;
      const bool want_trace = update_weights && opts.weights.mode == WeightMode::NtkTrace;

      for (size_t k = 0; k < K; ++k) {
        eval_component(ll.components[k], params.values(), P, want_trace, opts.exec, evals[k],
                       ws);
        losses[k] = evals[k].mean_sq;
      }

      bool finite = true;
      for (double v : losses) finite &= std::isfinite(v);
      if (!finite) throw TrainingDiverged(global_it + it, level_pos, losses);

      if (update_weights) {
        for (size_t k = 0; k < K; ++k) {
          if (opts.weights.mode == WeightMode::NtkTrace) {
            stats[k] = evals[k].trace;
          } else {
            double acc = 0.0;
            for (double v : evals[k].grad) acc += v * v;
            stats[k] = std::sqrt(acc);
          }
        }
        weights = update_adaptive_weights(stats, weights);
      }

      std::fill(grad.begin(), grad.end(), 0.0);
      for (size_t k = 0; k < K; ++k) {
        const double lk = weights[k];
        const std::vector<double>& gk = evals[k].grad;
        for (size_t p = 0; p < P; ++p) grad[p] += lk * gk[p];
      }

      if ((opts.trace_stride > 0 && it % opts.trace_stride == 0) || it == lspec.iterations) {
        TraceRow row;
        row.iteration = global_it + it;
        row.level = level_pos;
        row.losses = losses;
        row.weights = weights;
        if (opts.reference) row.rel_l2 = opts.reference(composite);
        trace.rows.push_back(std::move(row));
      }

      adam_step(opt, params, grad);
    }

    composite.freeze_active();
    if (opts.on_level_complete) opts.on_level_complete(composite, level_pos);
    global_it += lspec.iterations;
  }

  result.model = std::move(composite);
  return result;
}

ProblemSpec shifted_problem(const ProblemSpec& problem, const CompositeModel& frozen) {
  if (!problem.residual.linear)
    throw std::invalid_argument("shifted_problem: operator must be linear");
  auto bg = std::make_shared<CompositeModel>(frozen);
  const size_t n_levels = bg->n_levels();

  ProblemSpec out = problem;
  out.name = problem.name + "+shifted";
  auto op_value = problem.residual.value;
  auto f0 = problem.source;
  out.source = [bg, n_levels, op_value, f0](std::span<const double> x) {
    DerivativeBundle b = bg->prefix_derivatives(x, n_levels);
    return f0(x) - op_value(x, b.value, b.grad, b.laplacian);
  };
  out.boundary.clear();
  for (const BoundarySegment& seg : problem.boundary) {
    BoundarySegment s = seg;
    auto g0 = seg.data;
    if (seg.kind == BcKind::Dirichlet) {
      s.data = [bg, n_levels, g0](std::span<const double> x) {
        return g0(x) - bg->prefix_derivatives(x, n_levels).value;
      };
    } else {
      const int axis = seg.axis;
      const double sign = seg.normal_sign();
      s.data = [bg, n_levels, g0, axis, sign](std::span<const double> x) {
        return g0(x) - sign * bg->prefix_derivatives(x, n_levels).grad[axis];
      };
    }
    out.boundary.push_back(std::move(s));
  }
  out.exact.reset();
  return out;
}

}  // namespace mlpinn
