#pragma once

#include <functional>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mlpinn/loss.hpp"
#include "mlpinn/optimizer.hpp"

namespace mlpinn {

enum class WeightMode { Fixed, NtkTrace, GradNorm };

struct WeightConfig {
  WeightMode mode = WeightMode::NtkTrace;
  int update_every = 100;
  double initial = 1.0;
};

struct LevelSpec {
  NetworkSpec net;
  int iterations = 0;
  AdamConfig optimizer;
  // Explicit initialization seed; defaults to a value derived from the run
  // seed and the level position.
  std::optional<uint64_t> init_seed;
};

struct HierarchySchedule {
  std::vector<LevelSpec> levels;
};

struct TraceRow {
  int64_t iteration = 0;  // global across levels
  int level = 0;
  std::vector<double> losses;   // unweighted component losses, pre-step
  std::vector<double> weights;
  double rel_l2 = std::numeric_limits<double>::quiet_NaN();
};

struct TrainingTrace {
  std::vector<std::string> component_names;
  std::vector<TraceRow> rows;
  // Columns: iteration, loss_<component...>, lambda_<component...>, rel_l2_error.
  void save_csv(const std::string& path) const;
};

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(int64_t iteration, int level, std::vector<double> losses);
  int64_t iteration;
  int level;
  std::vector<double> losses;
};

struct TrainOptions {
  WeightConfig weights;
  ExecPolicy exec = ExecPolicy::BatchedParallel;
  int trace_stride = 100;
  int resample_every = 0;  // 0 = fixed sample set (default)
  std::function<double(const CompositeModel&)> reference;  // relative L2 evaluator
  std::function<void(const CompositeModel&, int)> on_level_complete;
};

struct TrainResult {
  CompositeModel model;
  TrainingTrace trace;
};

// Trains levels in sequence on top of `initial` (whose stores must all be
// frozen): each level starts from a fresh Glorot init and zero optimizer
// state; on completion its store freezes. Aborts with TrainingDiverged on a
// non-finite loss.
TrainResult train(const ProblemSpec& problem, const HierarchySchedule& schedule,
                  const SampleSet& samples, uint64_t seed, const TrainOptions& opts = {},
                  CompositeModel initial = {});

// The level-(M+1) task restated as the original linear PDE with shifted
// source f - N[u_M] and boundary data g - B[u_M]; refuses nonlinear
// operators.
ProblemSpec shifted_problem(const ProblemSpec& problem, const CompositeModel& frozen);

uint64_t mix_seed(uint64_t a, uint64_t b);

}  // namespace mlpinn
