#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "optsearch/optimizer.hpp"
#include "optsearch/runtime.hpp"

namespace optsearch {

enum class TaskKind { rosenbrock, quadratic, logistic_regression, mlp };
enum class MetricKind { function_value, accuracy, negative_log_loss };

TaskKind parse_task_kind(std::string_view name);
std::string_view to_string(TaskKind kind);
std::string_view to_string(MetricKind kind);

bool higher_is_better(MetricKind kind);
/// Maps a validation metric into [0, 1]: accuracy as is, losses and function
/// values as 1/(1+x). Non-finite values map to 0.
double metric_to_reward(MetricKind kind, double metric);

struct TaskSpec {
  TaskKind kind = TaskKind::logistic_regression;
  std::size_t dimension = 8;  // quadratic / logistic input dimension
  std::size_t train_samples = 1000;
  std::size_t validation_samples = 500;
  std::size_t hidden_width = 32;  // mlp, both hidden layers
  double condition_number = 10.0;
  double separation = 2.0;  // logistic: class means at +-separation along a unit direction
  std::uint64_t data_seed = 0;
  std::size_t batch_size = 100;
  std::size_t iterations_per_epoch = 1000;  // analytic tasks
  std::array<double, 2> rosenbrock_start{-1.5, 1.5};
  std::optional<MetricKind> metric;

  void check() const;  // throws InvalidSpec
};

/// Two-class dataset; rows of `x` are samples, labels are 0/1.
struct Dataset {
  Eigen::MatrixXd x;
  Eigen::VectorXd y;

  std::size_t size() const { return static_cast<std::size_t>(x.rows()); }
};

double rosenbrock(double x, double y);
std::array<double, 2> rosenbrock_grad(double x, double y);

/// A child problem: an objective with an analytic gradient, the current
/// parameters, and (for learning tasks) disjoint train/validation splits.
class Task {
 public:
  virtual ~Task() = default;

  const TaskSpec& spec() const { return spec_; }
  TaskKind kind() const { return spec_.kind; }
  MetricKind metric() const;

  Vec& parameters() { return w_; }
  const Vec& parameters() const { return w_; }
  std::size_t num_parameters() const { return w_.size(); }

  /// Fresh parameters derived from `seed`.
  void initialize(std::uint64_t seed) { w_ = initial_parameters(seed); }

  virtual bool has_dataset() const { return false; }
  virtual std::size_t train_size() const { return 0; }
  std::size_t steps_per_epoch() const;

  /// Mean training loss over `batch` (ignored by analytic tasks) and its
  /// gradient, written to `grad`.
  virtual double loss_and_grad(std::span<const double> w, std::span<const std::size_t> batch,
                               std::span<double> grad) const = 0;
  double loss(std::span<const double> w, std::span<const std::size_t> batch) const;

  /// Metric on held-out data (the objective itself for analytic tasks).
  virtual double validation_metric(std::span<const double> w) const = 0;

  virtual std::unique_ptr<Task> clone() const = 0;

 protected:
  explicit Task(TaskSpec spec) : spec_(std::move(spec)) {}
  virtual Vec initial_parameters(std::uint64_t seed) const = 0;

  TaskSpec spec_;
  Vec w_;
};

class RosenbrockTask final : public Task {
 public:
  explicit RosenbrockTask(TaskSpec spec);
  double loss_and_grad(std::span<const double> w, std::span<const std::size_t> batch,
                       std::span<double> grad) const override;
  double validation_metric(std::span<const double> w) const override;
  std::unique_ptr<Task> clone() const override { return std::make_unique<RosenbrockTask>(*this); }

 protected:
  Vec initial_parameters(std::uint64_t seed) const override;
};

/// f(w) = 0.5 w'Aw with A symmetric positive definite, eigenvalues
/// log-spaced in [1, condition_number].
class QuadraticTask final : public Task {
 public:
  explicit QuadraticTask(TaskSpec spec);
  double loss_and_grad(std::span<const double> w, std::span<const std::size_t> batch,
                       std::span<double> grad) const override;
  double validation_metric(std::span<const double> w) const override;
  std::unique_ptr<Task> clone() const override { return std::make_unique<QuadraticTask>(*this); }

  const Eigen::MatrixXd& hessian() const { return a_; }

 protected:
  Vec initial_parameters(std::uint64_t seed) const override;

 private:
  Eigen::MatrixXd a_;
};

/// Linear classifier with log-loss on two Gaussian blobs. Parameters are
/// the weights followed by the bias.
class LogisticTask final : public Task {
 public:
  explicit LogisticTask(TaskSpec spec);
  bool has_dataset() const override { return true; }
  std::size_t train_size() const override { return train_.size(); }
  double loss_and_grad(std::span<const double> w, std::span<const std::size_t> batch,
                       std::span<double> grad) const override;
  double validation_metric(std::span<const double> w) const override;
  std::unique_ptr<Task> clone() const override { return std::make_unique<LogisticTask>(*this); }

  const Dataset& train() const { return train_; }
  const Dataset& validation() const { return validation_; }

 protected:
  Vec initial_parameters(std::uint64_t seed) const override;

 private:
  Dataset train_;
  Dataset validation_;
};

/// Two hidden ReLU layers on concentric rings, one logit output.
class MlpTask final : public Task {
 public:
  explicit MlpTask(TaskSpec spec);
  bool has_dataset() const override { return true; }
  std::size_t train_size() const override { return train_.size(); }
  double loss_and_grad(std::span<const double> w, std::span<const std::size_t> batch,
                       std::span<double> grad) const override;
  double validation_metric(std::span<const double> w) const override;
  std::unique_ptr<Task> clone() const override { return std::make_unique<MlpTask>(*this); }

  const Dataset& train() const { return train_; }
  const Dataset& validation() const { return validation_; }

  /// Smallest |pre-activation| over the given training samples; used to keep
  /// finite-difference checks away from ReLU kinks.
  double min_abs_preactivation(std::span<const double> w,
                               std::span<const std::size_t> batch) const;

 protected:
  Vec initial_parameters(std::uint64_t seed) const override;

 private:
  Dataset train_;
  Dataset validation_;
};

std::unique_ptr<Task> make_task(const TaskSpec& spec, std::uint64_t seed);

struct EpochMetrics {
  double train_metric = 0.0;
  double validation_metric = 0.0;
  /// Best validation metric seen during the epoch (per step for analytic
  /// tasks, end of epoch for learning tasks).
  double best_validation = 0.0;
  std::size_t steps = 0;
};

/// Learning rate and step position within a run of `total_steps`.
struct TrainingClock {
  double lr = 0.0;
  std::int64_t step = 0;
  std::int64_t total_steps = 1;
};

using StepObserver = std::function<void(std::int64_t step, std::span<const double> w)>;

/// One pass: shuffled minibatches for learning tasks, iterations_per_epoch
/// full-batch steps for analytic tasks. Mutates the task parameters, the
/// optimizer and the clock. Throws DivergedError on non-finite values and
/// lets OverflowError from the rule propagate.
EpochMetrics run_epoch(Task& task, Optimizer& optimizer, const ScheduleSpec& schedule,
                       TrainingClock& clock, RngStream& rng,
                       const StepObserver& observer = nullptr);

}  // namespace optsearch
