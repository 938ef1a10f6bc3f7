#include "optsearch/bench.hpp"

#include <charconv>
#include <cmath>
#include <limits>
#include <variant>

#include "optsearch/config.hpp"
#include "optsearch/errors.hpp"

namespace optsearch {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

struct RunResult {
  double final_metric = kNaN;
  double best_metric = kNaN;
};

bool better(MetricKind kind, double a, double b) {
  if (std::isnan(b)) return !std::isnan(a);
  if (std::isnan(a)) return false;
  return higher_is_better(kind) ? a > b : a < b;
}

RunResult run_once(const UpdateRule& rule, const BenchOptions& options, double lr,
                   const RuntimeConfig& runtime, std::vector<TrajectoryPoint>* trajectory) {
  auto task = make_task(options.task, options.seed);
  Optimizer optimizer(rule, task->num_parameters(), runtime,
                      RngStream(options.seed, "bench-optimizer"));
  RngStream rng(options.seed, "bench-data");
  TrainingClock clock{lr, 0,
                      static_cast<std::int64_t>(options.epochs * task->steps_per_epoch())};
  const bool analytic = !task->has_dataset();
  const MetricKind kind = task->metric();
  auto record = [&](std::int64_t step, std::span<const double> w, double metric) {
    if (!trajectory) return;
    trajectory->push_back({step, metric, w.size() > 0 ? w[0] : 0.0, w.size() > 1 ? w[1] : 0.0});
  };
  StepObserver observer;
  if (trajectory && analytic) {
    observer = [&](std::int64_t step, std::span<const double> w) {
      record(step, w, task->validation_metric(w));
    };
  }

  RunResult result;
  record(0, task->parameters(), task->validation_metric(task->parameters()));
  result.best_metric = task->validation_metric(task->parameters());
  if (!analytic) result.best_metric = kNaN;
  try {
    for (std::size_t e = 0; e < options.epochs; ++e) {
      const EpochMetrics m = run_epoch(*task, optimizer, options.schedule, clock, rng, observer);
      if (!analytic) record(clock.step, task->parameters(), m.validation_metric);
      const double seen = analytic ? m.best_validation : m.validation_metric;
      if (better(kind, seen, result.best_metric)) result.best_metric = seen;
      result.final_metric = m.validation_metric;
    }
  } catch (const DivergedError&) {
    return {};
  } catch (const OverflowError&) {
    return {};
  }
  return result;
}

}  // namespace

std::vector<double> parse_lr_grid(std::string_view text) {
  std::size_t count = 0;
  const auto* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, count);
  if (ec == std::errc{} && ptr == end) {
    if (count == 0) throw ConfigError("--lrs needs at least one learning rate");
    std::vector<double> out;
    for (std::size_t i = 0; i < count; ++i) out.push_back(std::pow(10.0, -5.0 + double(i)));
    return out;
  }
  std::vector<double> out = parse_double_list(text);
  if (out.empty()) throw ConfigError("--lrs is empty");
  for (double lr : out) {
    if (!(lr > 0.0)) throw ConfigError("learning rates must be positive");
  }
  return out;
}

BenchRow bench_optimizer(const std::string& id, const BenchOptions& options) {
  UpdateRule rule = parse_update_rule(id);
  bool tunes_delta = false;
  if (auto* named = std::get_if<NamedOptimizerSpec>(&rule)) {
    if (options.zero_internal_decay &&
        (named->family == OptimizerFamily::powersign || named->family == OptimizerFamily::addsign)) {
      named->internal_decay = DecaySpec{DecayKind::zero, 0.0};
    }
    tunes_delta = options.tune_adam_eps && named->family == OptimizerFamily::adam;
  }
  std::vector<double> deltas{options.runtime.delta};
  if (tunes_delta) deltas = {1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8};

  const MetricKind kind = make_task(options.task, options.seed)->metric();
  BenchRow row;
  row.optimizer = id;
  row.lr = kNaN;
  row.delta = options.runtime.delta;
  row.final_metric = kNaN;
  row.best_metric = kNaN;
  RuntimeConfig winner_runtime = options.runtime;
  for (double delta : deltas) {
    RuntimeConfig runtime = options.runtime;
    runtime.delta = delta;
    for (double lr : options.lrs) {
      const RunResult r = run_once(rule, options, lr, runtime, nullptr);
      if (better(kind, r.final_metric, row.final_metric)) {
        row.lr = lr;
        row.delta = delta;
        row.final_metric = r.final_metric;
        row.best_metric = r.best_metric;
        winner_runtime = runtime;
      }
    }
  }
  if (!std::isnan(row.lr)) run_once(rule, options, row.lr, winner_runtime, &row.trajectory);
  return row;
}

}  // namespace optsearch
