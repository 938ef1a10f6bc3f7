#include "optsearch/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <istream>
#include <limits>
#include <map>
#include <ostream>
#include <set>

#include "optsearch/errors.hpp"

namespace optsearch {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

nlohmann::ordered_json number_or_null(double x) {
  if (std::isfinite(x)) return x;
  return nullptr;
}

double number_from(const nlohmann::json& j) {
  return j.is_null() ? kNaN : j.get<double>();
}

bool better(MetricKind kind, double a, double b) {
  return higher_is_better(kind) ? a > b : a < b;
}

struct RunFailure {
  EvalStatus status = EvalStatus::ok;
  std::string message;
};

// One training run from a fresh initialization.
class Run {
 public:
  Run(const Task& proto, const EvalJob& job, double lr, std::size_t epochs, std::uint64_t seed)
      : task_(fresh(proto, seed)),
        optimizer_(job.rule, task_->num_parameters(), job.runtime, RngStream(seed, "optimizer")),
        rng_(seed, "training"),
        schedule_(job.schedule) {
    clock_.lr = lr;
    clock_.total_steps = static_cast<std::int64_t>(epochs * task_->steps_per_epoch());
    analytic_ = !task_->has_dataset();
    kind_ = task_->metric();
    best_ = analytic_ ? task_->validation_metric(task_->parameters()) : kNaN;
  }

  // Returns the epoch metric (validation, or best seen for analytic tasks).
  double epoch() {
    const EpochMetrics m = run_epoch(*task_, optimizer_, schedule_, clock_, rng_);
    last_ = m.validation_metric;
    const double candidate = analytic_ ? m.best_validation : m.validation_metric;
    if (std::isnan(best_) || better(kind_, candidate, best_)) best_ = candidate;
    return analytic_ ? best_ : last_;
  }

  double last() const { return last_; }
  double best() const { return best_; }

 private:
  static std::unique_ptr<Task> fresh(const Task& proto, std::uint64_t seed) {
    auto task = proto.clone();
    task->initialize(seed);
    return task;
  }

  std::unique_ptr<Task> task_;
  Optimizer optimizer_;
  RngStream rng_;
  ScheduleSpec schedule_;
  TrainingClock clock_;
  bool analytic_ = false;
  MetricKind kind_ = MetricKind::accuracy;
  double last_ = kNaN;
  double best_ = kNaN;
};

// Runs `body`, mapping numerical failures to a status.
template <typename F>
RunFailure guarded(F&& body) {
  try {
    body();
  } catch (const OverflowError& e) {
    return {EvalStatus::overflow, e.what()};
  } catch (const DivergedError& e) {
    return {EvalStatus::diverged, e.what()};
  }
  return {};
}

}  // namespace

std::string_view to_string(EvalStatus status) {
  switch (status) {
    case EvalStatus::ok: return "ok";
    case EvalStatus::diverged: return "diverged";
    case EvalStatus::early_stopped: return "early_stopped";
    case EvalStatus::overflow: return "overflow";
  }
  return "?";
}

EvalStatus parse_eval_status(std::string_view text) {
  for (EvalStatus s :
       {EvalStatus::ok, EvalStatus::diverged, EvalStatus::early_stopped, EvalStatus::overflow}) {
    if (to_string(s) == text) return s;
  }
  throw ConfigError("unknown status '" + std::string(text) + "'");
}

void EvalJob::check() const {
  if (sweep_grid.empty()) throw InvalidSpec("empty learning-rate grid");
  for (std::size_t i = 0; i < sweep_grid.size(); ++i) {
    if (!(sweep_grid[i] > 0.0)) throw InvalidSpec("learning rates must be positive");
    if (i > 0 && !(sweep_grid[i] > sweep_grid[i - 1])) {
      throw InvalidSpec("learning-rate grid must be sorted and distinct");
    }
  }
  if (sweep_epochs == 0 || full_epochs == 0) throw InvalidSpec("epoch budgets must be positive");
  task.check();
}

MetricKind metric_of(const TaskSpec& spec) {
  if (spec.metric) return *spec.metric;
  const bool learning =
      spec.kind == TaskKind::logistic_regression || spec.kind == TaskKind::mlp;
  return learning ? MetricKind::accuracy : MetricKind::function_value;
}

StopDecision early_stop_check(double current, std::optional<double> best_so_far, double factor) {
  if (!best_so_far) return StopDecision::proceed;
  return current < factor * *best_so_far ? StopDecision::abort : StopDecision::proceed;
}

std::uint64_t job_seed(std::uint64_t seed, std::uint64_t sample_id) {
  return hash_combine(mix64(seed), sample_id);
}

EvalResult evaluate_candidate(const EvalJob& job) {
  const auto started = std::chrono::steady_clock::now();
  job.check();
  EvalResult result;
  result.sample_id = job.sample_id;
  result.seed = job.seed;
  result.program = describe(job.rule);

  const auto proto = make_task(job.task, 0);
  const MetricKind kind = proto->metric();
  auto finish = [&] {
    result.wall_ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                         std::chrono::steady_clock::now() - started)
                         .count();
    return result;
  };

  // Sweep: one fresh short run per learning rate.
  std::optional<std::size_t> chosen;
  double chosen_score = -1.0;
  EvalStatus failure = EvalStatus::diverged;
  std::string failure_message;
  for (std::size_t i = 0; i < job.sweep_grid.size(); ++i) {
    const double lr = job.sweep_grid[i];
    double metric = kNaN;
    const RunFailure f = guarded([&] {
      Run run(*proto, job, lr, job.sweep_epochs, hash_combine(job.seed, 0x5eed0000ULL + i));
      for (std::size_t e = 0; e < job.sweep_epochs; ++e) metric = run.epoch();
    });
    if (f.status != EvalStatus::ok) {
      metric = kNaN;
      failure = f.status;
      failure_message = f.message;
    }
    result.sweep.push_back({lr, metric});
    const double score = metric_to_reward(kind, metric);
    if (std::isfinite(metric) && score > chosen_score) {
      chosen = i;
      chosen_score = score;
    }
  }
  if (!chosen) {
    result.status = failure;
    result.error = failure_message;
    result.reward = 0.0;
    result.final_metric = kNaN;
    result.best_metric = kNaN;
    return finish();
  }
  result.chosen_lr = job.sweep_grid[*chosen];

  // Full run from a fresh initialization at the chosen rate.
  const std::vector<std::size_t> checkpoints = job.early_stop.checkpoint_epochs(job.full_epochs);
  const RunFailure f = guarded([&] {
    Run run(*proto, job, result.chosen_lr, job.full_epochs, hash_combine(job.seed, 0xF011ULL));
    for (std::size_t e = 1; e <= job.full_epochs; ++e) {
      const double metric = run.epoch();
      result.epoch_metrics.push_back(metric);
      result.final_metric = run.last();
      result.best_metric = run.best();
      const double score = metric_to_reward(kind, metric);
      result.reward = score;
      if (!job.early_stop.enabled) continue;
      const auto it = std::find(checkpoints.begin(), checkpoints.end(), e);
      if (it == checkpoints.end()) continue;
      const auto idx = static_cast<std::size_t>(it - checkpoints.begin());
      const std::optional<double> best =
          idx < job.best_so_far.size() ? job.best_so_far[idx] : std::nullopt;
      if (e < job.full_epochs &&
          early_stop_check(score, best, job.early_stop.factor) == StopDecision::abort) {
        result.status = EvalStatus::early_stopped;
        return;
      }
    }
  });
  if (f.status != EvalStatus::ok) {
    result.status = f.status;
    result.error = f.message;
    result.reward = 0.0;
  }
  result.reward = std::clamp(result.reward, 0.0, 1.0);
  return finish();
}

// --- Worker pool ------------------------------------------------------------

WorkerPool::WorkerPool(std::size_t workers, std::size_t capacity, Evaluator evaluator,
                       std::size_t max_retries)
    : evaluator_(std::move(evaluator)),
      max_retries_(max_retries),
      jobs_(capacity == 0 ? 2 * std::max<std::size_t>(workers, 1) : capacity) {
  if (workers == 0) throw ConfigError("worker count must be >= 1");
  for (std::size_t i = 0; i < workers; ++i) threads_.emplace_back([this] { work(); });
}

WorkerPool::~WorkerPool() {
  jobs_.close();
  for (auto& t : threads_) t.join();
}

void WorkerPool::work() {
  while (auto task = jobs_.pop()) {
    Outcome outcome;
    outcome.slot = task->slot;
    for (std::size_t attempt = 0; attempt <= max_retries_ && !outcome.result; ++attempt) {
      try {
        outcome.result = evaluator_(task->job);
      } catch (const std::exception& e) {
        outcome.error = e.what();
      } catch (...) {
        outcome.error = "unknown failure";
      }
    }
    results_.push(std::move(outcome));
  }
}

std::vector<EvalResult> WorkerPool::run_batch(std::vector<EvalJob> jobs) {
  const std::size_t n = jobs.size();
  std::vector<std::optional<EvalResult>> slots(n);
  std::size_t collected = 0;
  std::string first_error;
  auto collect = [&](Outcome outcome) {
    if (outcome.slot >= n || slots[outcome.slot] || (!outcome.result && outcome.error.empty())) {
      throw WorkerPoolFailure("result accounting mismatch");
    }
    if (outcome.result) {
      slots[outcome.slot] = std::move(outcome.result);
    } else {
      slots[outcome.slot] = EvalResult{};  // placeholder; the batch fails below
      if (first_error.empty()) {
        first_error = "job " + std::to_string(jobs[outcome.slot].sample_id) + ": " + outcome.error;
      }
    }
    ++collected;
  };
  for (std::size_t i = 0; i < n; ++i) {
    if (!jobs_.push(Task{i, jobs[i]})) throw WorkerPoolFailure("worker pool is closed");
  }
  while (collected < n) {
    auto outcome = results_.pop();
    if (!outcome) throw WorkerPoolFailure("result channel closed");
    collect(std::move(*outcome));
  }
  if (!first_error.empty()) throw WorkerPoolFailure(first_error);
  std::vector<EvalResult> out;
  out.reserve(n);
  for (auto& s : slots) out.push_back(std::move(*s));
  return out;
}

// --- Logging ----------------------------------------------------------------

nlohmann::ordered_json to_json(const EvalResult& r) {
  nlohmann::ordered_json j;
  j["sample_id"] = r.sample_id;
  j["program"] = r.program;
  j["reward"] = r.reward;
  j["chosen_lr"] = r.chosen_lr;
  j["status"] = std::string(to_string(r.status));
  auto sweep = nlohmann::ordered_json::array();
  for (const auto& p : r.sweep) {
    nlohmann::ordered_json point;
    point["lr"] = p.lr;
    point["metric"] = number_or_null(p.metric);
    sweep.push_back(point);
  }
  j["sweep"] = sweep;
  auto epochs = nlohmann::ordered_json::array();
  for (double m : r.epoch_metrics) epochs.push_back(number_or_null(m));
  j["epoch_metrics"] = epochs;
  j["final_metric"] = number_or_null(r.final_metric);
  j["best_metric"] = number_or_null(r.best_metric);
  j["wall_ms"] = r.wall_ms;
  j["seed"] = r.seed;
  return j;
}

nlohmann::ordered_json to_json(const BatchStats& s) {
  nlohmann::ordered_json j;
  j["batch"] = s.batch;
  j["mean_reward"] = number_or_null(s.mean_reward);
  j["baseline"] = number_or_null(s.baseline);
  j["entropy"] = number_or_null(s.entropy);
  return j;
}

EvalResult result_from_json(const nlohmann::json& j) {
  EvalResult r;
  try {
    r.sample_id = j.at("sample_id").get<std::uint64_t>();
    r.program = j.at("program").get<std::string>();
    r.reward = j.at("reward").get<double>();
    r.chosen_lr = j.at("chosen_lr").get<double>();
    r.status = parse_eval_status(j.at("status").get<std::string>());
    for (const auto& p : j.at("sweep")) {
      r.sweep.push_back({p.at("lr").get<double>(), number_from(p.at("metric"))});
    }
    for (const auto& m : j.at("epoch_metrics")) r.epoch_metrics.push_back(number_from(m));
    if (j.contains("final_metric")) r.final_metric = number_from(j.at("final_metric"));
    if (j.contains("best_metric")) r.best_metric = number_from(j.at("best_metric"));
    r.wall_ms = j.at("wall_ms").get<std::int64_t>();
    r.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed log record: ") + e.what());
  }
  return r;
}

std::vector<EvalResult> read_results(std::istream& log) {
  std::vector<EvalResult> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(log, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("log line " + std::to_string(line_no) + ": " + e.what());
    }
    if (j.contains("sample_id")) out.push_back(result_from_json(j));
  }
  return out;
}

std::vector<RankedProgram> rank_topk(const std::vector<EvalResult>& results, std::size_t k) {
  std::vector<const EvalResult*> order;
  for (const auto& r : results) order.push_back(&r);
  std::sort(order.begin(), order.end(), [](const EvalResult* a, const EvalResult* b) {
    if (a->reward != b->reward) return a->reward > b->reward;
    return a->sample_id < b->sample_id;
  });
  std::vector<RankedProgram> out;
  std::set<std::string> seen;
  for (const EvalResult* r : order) {
    if (out.size() >= k) break;
    if (!seen.insert(r->program).second) continue;
    out.push_back({r->program, r->reward, r->sample_id});
  }
  return out;
}

std::vector<RankedProgram> replay_topk(std::istream& log, std::size_t k) {
  return rank_topk(read_results(log), k);
}

// --- Search loop ------------------------------------------------------------

namespace {

// Best score per checkpoint epoch over the given results.
void absorb_scores(std::vector<std::optional<double>>& best,
                   const std::vector<std::size_t>& checkpoints, MetricKind kind,
                   const std::vector<EvalResult>& results) {
  for (const auto& r : results) {
    for (std::size_t i = 0; i < checkpoints.size(); ++i) {
      const std::size_t e = checkpoints[i];
      if (r.epoch_metrics.size() < e) continue;
      const double score = metric_to_reward(kind, r.epoch_metrics[e - 1]);
      if (!best[i] || score > *best[i]) best[i] = score;
    }
  }
}

EvalJob make_job(const SearchConfig& config, const TaskSpec& task, std::uint64_t sample_id,
                 UpdateRule rule) {
  EvalJob job;
  job.sample_id = sample_id;
  job.rule = std::move(rule);
  job.task = task;
  job.schedule = config.schedule;
  job.runtime = config.runtime;
  job.sweep_grid = config.sweep_grid;
  job.sweep_epochs = config.sweep_epochs;
  job.full_epochs = config.full_epochs;
  job.seed = job_seed(config.seed, sample_id);
  job.early_stop = config.early_stop;
  return job;
}

}  // namespace

SearchOutcome run_search(const SearchConfig& config, const SearchHooks& hooks) {
  config.check();
  SearchOutcome outcome;
  outcome.results = hooks.prior;
  std::sort(outcome.results.begin(), outcome.results.end(),
            [](const EvalResult& a, const EvalResult& b) { return a.sample_id < b.sample_id; });

  const SearchSpace space(config.constraints, config.n_groups);
  std::optional<ControllerPolicy> own;
  ControllerPolicy* policy = hooks.policy;
  if (!policy) {
    own.emplace(space.vocab_sizes(), config.controller, hash_combine(config.seed, 0xC047ULL));
    policy = &*own;
  }
  if (policy->vocab_sizes() != space.vocab_sizes()) {
    throw ConfigError("controller checkpoint does not match the configured search space");
  }

  const MetricKind kind = metric_of(config.task);
  const std::vector<std::size_t> checkpoints =
      config.early_stop.checkpoint_epochs(config.full_epochs);
  std::vector<std::optional<double>> best(checkpoints.size());
  absorb_scores(best, checkpoints, kind, outcome.results);

  if (policy->samples_done < config.total_samples) {
    WorkerPool pool(config.workers, config.queue_capacity,
                    hooks.evaluator ? hooks.evaluator : Evaluator(evaluate_candidate),
                    config.max_retries);
    while (policy->samples_done < config.total_samples) {
      const std::uint64_t done = policy->samples_done;
      const std::size_t batch_index = done / config.ppo.batch_size;
      const std::size_t n = std::min<std::uint64_t>(config.ppo.batch_size,
                                                    config.total_samples - done);
      RngStream rng(hash_combine(config.seed, batch_index), "controller-batch");
      std::vector<Trajectory> trajectories = sample_batch(*policy, n, space, rng);

      std::vector<EvalJob> jobs;
      for (std::size_t i = 0; i < n; ++i) {
        EvalJob job = make_job(config, config.task, done + i,
                               space.decode(trajectories[i].tokens));
        job.best_so_far = best;
        jobs.push_back(std::move(job));
      }
      std::vector<EvalResult> results = pool.run_batch(std::move(jobs));
      for (std::size_t i = 0; i < n; ++i) trajectories[i].reward = results[i].reward;

      BatchStats stats;
      stats.batch = batch_index;
      try {
        const PpoStats ppo = ppo_update(*policy, trajectories, policy->baseline, config.ppo);
        stats.mean_reward = ppo.mean_reward;
        stats.entropy = ppo.entropy;
      } catch (const NonFiniteGradient&) {
        // Parameters were restored; count the samples and keep searching.
        policy->samples_done += n;
        stats.mean_reward = 0.0;
        for (const auto& r : results) stats.mean_reward += r.reward / double(n);
        stats.entropy = kNaN;
      }
      stats.baseline = policy->baseline.value;

      absorb_scores(best, checkpoints, kind, results);
      if (hooks.log) {
        for (const auto& r : results) *hooks.log << to_json(r).dump() << '\n';
        *hooks.log << to_json(stats).dump() << '\n';
        hooks.log->flush();
      }
      for (auto& r : results) outcome.results.push_back(std::move(r));
      outcome.stats.push_back(stats);
      if (hooks.on_batch) hooks.on_batch(*policy);
    }
  }
  outcome.topk = rank_topk(outcome.results, config.top_k);
  return outcome;
}

std::vector<RerunReport> topk_rerun(const std::vector<std::string>& programs,
                                    const SearchConfig& config, const TaskSpec& task,
                                    std::size_t epoch_multiplier) {
  SearchConfig extended = config;
  extended.full_epochs = config.full_epochs * std::max<std::size_t>(epoch_multiplier, 1);
  const MetricKind kind = metric_of(task);
  const auto checkpoints = extended.early_stop.checkpoint_epochs(extended.full_epochs);
  std::vector<std::optional<double>> best(checkpoints.size());

  std::vector<RerunReport> report;
  for (std::size_t i = 0; i < programs.size(); ++i) {
    EvalJob job = make_job(extended, task, i, parse_update_rule(programs[i]));
    job.best_so_far = best;
    const EvalResult r = evaluate_candidate(job);
    absorb_scores(best, checkpoints, kind, {r});
    report.push_back({programs[i], r.reward, r.best_metric, r.final_metric, r.chosen_lr, r.status});
  }
  std::stable_sort(report.begin(), report.end(),
                   [](const RerunReport& a, const RerunReport& b) { return a.reward > b.reward; });
  return report;
}

}  // namespace optsearch
