#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "optsearch/optimizer.hpp"
#include "optsearch/runtime.hpp"
#include "optsearch/tasks.hpp"

namespace optsearch {

struct BenchOptions {
  TaskSpec task = [] {
    TaskSpec t;
    t.kind = TaskKind::rosenbrock;
    t.iterations_per_epoch = 4000;
    return t;
  }();
  std::size_t epochs = 1;
  std::vector<double> lrs{1e-5, 1e-4, 1e-3, 1e-2};
  ScheduleSpec schedule;
  RuntimeConfig runtime;
  /// Grid-search Adam's division constant over 1e-3..1e-8 as well.
  bool tune_adam_eps = false;
  /// Force f(t) = 0 inside PowerSign/AddSign.
  bool zero_internal_decay = false;
  std::uint64_t seed = 0;
};

struct TrajectoryPoint {
  std::int64_t step = 0;
  double metric = 0.0;
  double w0 = 0.0;
  double w1 = 0.0;
};

struct BenchRow {
  std::string optimizer;
  double lr = 0.0;
  double delta = 0.0;
  /// Metric at the end of the winning run (NaN when every run diverged).
  double final_metric = 0.0;
  /// Best metric seen during the winning run.
  double best_metric = 0.0;
  std::vector<TrajectoryPoint> trajectory;
};

/// `n` log-spaced rates 1e-5, 1e-4, ... when `text` is an integer,
/// otherwise a comma-separated list.
std::vector<double> parse_lr_grid(std::string_view text);

/// Best-of-grid run of one optimizer id or DSL program (selected by final
/// metric), with the winning run's trajectory.
BenchRow bench_optimizer(const std::string& id, const BenchOptions& options);

}  // namespace optsearch
