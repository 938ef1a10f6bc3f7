#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include <json.hpp>

#include "optsearch/config.hpp"
#include "optsearch/controller.hpp"
#include "optsearch/optimizer.hpp"
#include "optsearch/tasks.hpp"
#include "optsearch/work_queue.hpp"

namespace optsearch {

enum class EvalStatus { ok, diverged, early_stopped, overflow };
std::string_view to_string(EvalStatus status);
EvalStatus parse_eval_status(std::string_view text);

struct EvalJob {
  std::uint64_t sample_id = 0;
  UpdateRule rule;
  TaskSpec task;
  ScheduleSpec schedule;
  RuntimeConfig runtime;
  std::vector<double> sweep_grid{1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0};
  std::size_t sweep_epochs = 1;
  std::size_t full_epochs = 5;
  std::uint64_t seed = 0;
  EarlyStopConfig early_stop;
  /// Best score seen by earlier jobs at each checkpoint epoch (parallel to
  /// early_stop.checkpoint_epochs(full_epochs)); empty entries never stop.
  std::vector<std::optional<double>> best_so_far;

  void check() const;  // throws InvalidSpec
};

struct SweepPoint {
  double lr = 0.0;
  double metric = 0.0;  // NaN when the run failed
};

struct EvalResult {
  std::uint64_t sample_id = 0;
  std::string program;
  double reward = 0.0;
  double chosen_lr = 0.0;
  EvalStatus status = EvalStatus::ok;
  std::vector<SweepPoint> sweep;
  /// Metric after each full-run epoch: validation metric for learning
  /// tasks, best value seen so far for analytic tasks.
  std::vector<double> epoch_metrics;
  /// Validation metric at the end of the full run and the best one seen.
  double final_metric = 0.0;
  double best_metric = 0.0;
  std::int64_t wall_ms = 0;
  std::uint64_t seed = 0;
  std::string error;
};

/// Metric reported by a task built from `spec`.
MetricKind metric_of(const TaskSpec& spec);

enum class StopDecision { proceed, abort };

/// Aborts when `current` falls strictly below factor * best_so_far.
StopDecision early_stop_check(double current, std::optional<double> best_so_far, double factor);

/// The learning-rate sweep protocol: one fresh short run per grid value,
/// then a fresh full run at the best value. Never throws for numerical
/// failures; they become statuses with reward 0.
EvalResult evaluate_candidate(const EvalJob& job);

/// Seed for sample `sample_id` of a search seeded with `seed`.
std::uint64_t job_seed(std::uint64_t seed, std::uint64_t sample_id);

using Evaluator = std::function<EvalResult(const EvalJob&)>;

/// Fixed set of threads consuming a bounded job queue and returning
/// results over a separate channel.
class WorkerPool {
 public:
  WorkerPool(std::size_t workers, std::size_t capacity, Evaluator evaluator,
             std::size_t max_retries = 1);
  ~WorkerPool();
  WorkerPool(const WorkerPool&) = delete;
  WorkerPool& operator=(const WorkerPool&) = delete;

  /// Evaluates every job exactly once and returns results in job order.
  /// Throws WorkerPoolFailure when a job still fails after its retries.
  std::vector<EvalResult> run_batch(std::vector<EvalJob> jobs);

  std::size_t size() const { return threads_.size(); }

 private:
  struct Outcome {
    std::size_t slot = 0;
    std::optional<EvalResult> result;
    std::string error;
  };
  struct Task {
    std::size_t slot = 0;
    EvalJob job;
  };

  void work();

  Evaluator evaluator_;
  std::size_t max_retries_;
  BlockingQueue<Task> jobs_;
  BlockingQueue<Outcome> results_;
  std::vector<std::thread> threads_;
};

struct BatchStats {
  std::size_t batch = 0;
  double mean_reward = 0.0;
  double baseline = 0.0;
  double entropy = 0.0;
};

struct RankedProgram {
  std::string program;
  double reward = 0.0;
  std::uint64_t sample_id = 0;
};

struct SearchOutcome {
  std::vector<EvalResult> results;  // sample-id order
  std::vector<BatchStats> stats;
  std::vector<RankedProgram> topk;
};

/// Hooks into a running search. `log` receives one JSON line per sample and
/// per batch; `policy` is used (and left trained) when given, otherwise a
/// fresh policy is built from the config.
struct SearchHooks {
  std::ostream* log = nullptr;
  Evaluator evaluator;  // default: evaluate_candidate
  ControllerPolicy* policy = nullptr;
  /// Results logged before a resume; they seed the early-stopping table
  /// and the final ranking.
  std::vector<EvalResult> prior;
  std::function<void(const ControllerPolicy&)> on_batch;
};

SearchOutcome run_search(const SearchConfig& config, const SearchHooks& hooks = {});

nlohmann::ordered_json to_json(const EvalResult& result);
nlohmann::ordered_json to_json(const BatchStats& stats);
/// Inverse of to_json for sample records (null metrics become NaN).
EvalResult result_from_json(const nlohmann::json& record);
/// Sample records of a JSONL log, skipping statistics records.
std::vector<EvalResult> read_results(std::istream& log);

/// Programs ranked by reward (descending), then sample id; one entry per
/// distinct program, at most k.
std::vector<RankedProgram> rank_topk(const std::vector<EvalResult>& results, std::size_t k);
/// Same ranking recomputed from JSONL log lines.
std::vector<RankedProgram> replay_topk(std::istream& log, std::size_t k);

struct RerunReport {
  std::string program;
  double reward = 0.0;
  double best_metric = 0.0;
  double final_metric = 0.0;
  double chosen_lr = 0.0;
  EvalStatus status = EvalStatus::ok;
};

/// Re-evaluates programs with `epoch_multiplier` times the full-run budget
/// on `task`, in order, sharing one early-stopping table. The report is
/// sorted by reward, then input order.
std::vector<RerunReport> topk_rerun(const std::vector<std::string>& programs,
                                    const SearchConfig& config, const TaskSpec& task,
                                    std::size_t epoch_multiplier = 10);

}  // namespace optsearch
