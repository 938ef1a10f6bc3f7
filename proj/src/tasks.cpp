#include "optsearch/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <string>

#include "optsearch/errors.hpp"

namespace optsearch {

namespace {

// log(1 + exp(z)) without overflow.
double softplus(double z) { return z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

Dataset gaussian_blobs(std::size_t n, const Eigen::VectorXd& direction, double separation,
                       RngStream& rng) {
  const auto d = direction.size();
  Dataset data{Eigen::MatrixXd(static_cast<Eigen::Index>(n), d),
               Eigen::VectorXd(static_cast<Eigen::Index>(n))};
  for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(n); ++i) {
    const double label = rng.uniform() < 0.5 ? 0.0 : 1.0;
    data.y(i) = label;
    for (Eigen::Index j = 0; j < d; ++j) {
      data.x(i, j) = (2.0 * label - 1.0) * separation * direction(j) + rng.normal();
    }
  }
  return data;
}

// Inner disk (label 0) and outer ring (label 1) with radial jitter.
Dataset rings(std::size_t n, RngStream& rng) {
  Dataset data{Eigen::MatrixXd(static_cast<Eigen::Index>(n), 2),
               Eigen::VectorXd(static_cast<Eigen::Index>(n))};
  for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(n); ++i) {
    const double label = rng.uniform() < 0.5 ? 0.0 : 1.0;
    const double angle = 2.0 * std::numbers::pi * rng.uniform();
    const double radius =
        (label == 0.0 ? 1.0 * rng.uniform() : 1.5 + 0.5 * rng.uniform()) + 0.1 * rng.normal();
    data.y(i) = label;
    data.x(i, 0) = radius * std::cos(angle);
    data.x(i, 1) = radius * std::sin(angle);
  }
  return data;
}

std::vector<std::size_t> all_indices(std::size_t n) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return idx;
}

bool all_finite(std::span<const double> x) {
  return std::all_of(x.begin(), x.end(), [](double e) { return std::isfinite(e); });
}

// Views into the flat MLP parameter vector.
struct MlpShape {
  Eigen::Index in = 2;
  Eigen::Index hidden = 32;

  Eigen::Index size() const { return hidden * in + hidden + hidden * hidden + hidden + hidden + 1; }
};

// Parameters and gradients are copied through owned (aligned) storage:
// Eigen picks its vectorized path from the runtime address of mapped data,
// so mapping std::vector memory directly makes results depend on where the
// allocator put it.
Eigen::VectorXd owned(std::span<const double> w) {
  return Eigen::Map<const Eigen::VectorXd>(w.data(), static_cast<Eigen::Index>(w.size()));
}

void copy_out(const Eigen::VectorXd& g, std::span<double> out) {
  std::copy(g.data(), g.data() + g.size(), out.begin());
}

struct MlpParams {
  Eigen::MatrixXd w1;
  Eigen::VectorXd b1;
  Eigen::MatrixXd w2;
  Eigen::VectorXd b2;
  Eigen::RowVectorXd w3;
  double b3 = 0.0;

  MlpParams(const MlpShape& s, const double* p)
      : w1(Eigen::Map<const Eigen::MatrixXd>(p, s.hidden, s.in)),
        b1(Eigen::Map<const Eigen::VectorXd>(p + s.hidden * s.in, s.hidden)),
        w2(Eigen::Map<const Eigen::MatrixXd>(p + s.hidden * s.in + s.hidden, s.hidden, s.hidden)),
        b2(Eigen::Map<const Eigen::VectorXd>(p + s.hidden * s.in + s.hidden + s.hidden * s.hidden,
                                             s.hidden)),
        w3(Eigen::Map<const Eigen::RowVectorXd>(
            p + s.hidden * s.in + 2 * s.hidden + s.hidden * s.hidden, s.hidden)),
        b3(p[s.size() - 1]) {}

  /// Flattens in the same layout as the constructor reads.
  void write(double* p) const {
    auto put = [&p](const auto& m) { p = std::copy(m.data(), m.data() + m.size(), p); };
    put(w1);
    put(b1);
    put(w2);
    put(b2);
    put(w3);
    *p = b3;
  }
};

Eigen::MatrixXd gather_rows(const Eigen::MatrixXd& x, std::span<const std::size_t> rows) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) = x.row(static_cast<Eigen::Index>(rows[i]));
  }
  return out;
}

}  // namespace

TaskKind parse_task_kind(std::string_view name) {
  if (name == "rosenbrock") return TaskKind::rosenbrock;
  if (name == "quadratic") return TaskKind::quadratic;
  if (name == "logistic" || name == "logistic_regression") return TaskKind::logistic_regression;
  if (name == "mlp") return TaskKind::mlp;
  throw InvalidSpec("unknown task '" + std::string(name) + "'");
}

std::string_view to_string(TaskKind kind) {
  switch (kind) {
    case TaskKind::rosenbrock: return "rosenbrock";
    case TaskKind::quadratic: return "quadratic";
    case TaskKind::logistic_regression: return "logistic";
    case TaskKind::mlp: return "mlp";
  }
  return "?";
}

std::string_view to_string(MetricKind kind) {
  switch (kind) {
    case MetricKind::function_value: return "function_value";
    case MetricKind::accuracy: return "accuracy";
    case MetricKind::negative_log_loss: return "negative_log_loss";
  }
  return "?";
}

bool higher_is_better(MetricKind kind) { return kind == MetricKind::accuracy; }

double metric_to_reward(MetricKind kind, double metric) {
  if (!std::isfinite(metric)) return 0.0;
  if (kind == MetricKind::accuracy) return std::clamp(metric, 0.0, 1.0);
  return 1.0 / (1.0 + std::max(metric, 0.0));
}

void TaskSpec::check() const {
  const bool learning = kind == TaskKind::logistic_regression || kind == TaskKind::mlp;
  if (learning && (train_samples == 0 || validation_samples == 0)) {
    throw InvalidSpec("learning tasks need non-empty train and validation splits");
  }
  if (learning && batch_size == 0) throw InvalidSpec("batch_size must be positive");
  if (!learning && iterations_per_epoch == 0) {
    throw InvalidSpec("iterations_per_epoch must be positive");
  }
  if ((kind == TaskKind::quadratic || kind == TaskKind::logistic_regression) && dimension == 0) {
    throw InvalidSpec("dimension must be positive");
  }
  if (kind == TaskKind::mlp && hidden_width == 0) throw InvalidSpec("hidden_width must be positive");
  if (kind == TaskKind::quadratic && !(condition_number >= 1.0)) {
    throw InvalidSpec("condition_number must be >= 1");
  }
  if (metric && !learning && *metric != MetricKind::function_value) {
    throw InvalidSpec("analytic tasks report function_value");
  }
  if (metric && learning && *metric == MetricKind::function_value) {
    throw InvalidSpec("learning tasks report accuracy or negative_log_loss");
  }
}

double rosenbrock(double x, double y) {
  const double a = 1.0 - x;
  const double b = y - x * x;
  return a * a + 100.0 * b * b;
}

std::array<double, 2> rosenbrock_grad(double x, double y) {
  const double b = y - x * x;
  return {-2.0 * (1.0 - x) - 400.0 * x * b, 200.0 * b};
}

MetricKind Task::metric() const {
  if (spec_.metric) return *spec_.metric;
  return has_dataset() ? MetricKind::accuracy : MetricKind::function_value;
}

std::size_t Task::steps_per_epoch() const {
  if (!has_dataset()) return spec_.iterations_per_epoch;
  return (train_size() + spec_.batch_size - 1) / spec_.batch_size;
}

double Task::loss(std::span<const double> w, std::span<const std::size_t> batch) const {
  Vec scratch(w.size());
  return loss_and_grad(w, batch, scratch);
}

// --- Rosenbrock -------------------------------------------------------------

RosenbrockTask::RosenbrockTask(TaskSpec spec) : Task(std::move(spec)) { initialize(0); }

Vec RosenbrockTask::initial_parameters(std::uint64_t) const {
  return {spec_.rosenbrock_start[0], spec_.rosenbrock_start[1]};
}

double RosenbrockTask::loss_and_grad(std::span<const double> w, std::span<const std::size_t>,
                                     std::span<double> grad) const {
  const auto g = rosenbrock_grad(w[0], w[1]);
  grad[0] = g[0];
  grad[1] = g[1];
  return rosenbrock(w[0], w[1]);
}

double RosenbrockTask::validation_metric(std::span<const double> w) const {
  return rosenbrock(w[0], w[1]);
}

// --- Quadratic --------------------------------------------------------------

QuadraticTask::QuadraticTask(TaskSpec spec) : Task(std::move(spec)) {
  const auto d = static_cast<Eigen::Index>(spec_.dimension);
  if (spec_.condition_number == 1.0) {
    a_ = Eigen::MatrixXd::Identity(d, d);
  } else {
    RngStream rng(spec_.data_seed, "quadratic");
    Eigen::MatrixXd gauss(d, d);
    for (Eigen::Index i = 0; i < d; ++i) {
      for (Eigen::Index j = 0; j < d; ++j) gauss(i, j) = rng.normal();
    }
    const Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(gauss).householderQ();
    Eigen::VectorXd eig(d);
    for (Eigen::Index i = 0; i < d; ++i) {
      const double frac = d == 1 ? 0.0 : double(i) / double(d - 1);
      eig(i) = std::pow(spec_.condition_number, frac);
    }
    a_ = q * eig.asDiagonal() * q.transpose();
    a_ = 0.5 * (a_ + a_.transpose()).eval();
  }
  initialize(0);
}

Vec QuadraticTask::initial_parameters(std::uint64_t seed) const {
  RngStream rng(seed, "quadratic-init");
  Vec w(spec_.dimension);
  for (double& e : w) e = rng.normal();
  return w;
}

double QuadraticTask::loss_and_grad(std::span<const double> w, std::span<const std::size_t>,
                                    std::span<double> grad) const {
  const Eigen::VectorXd x = owned(w);
  const Eigen::VectorXd out = a_ * x;
  copy_out(out, grad);
  return 0.5 * x.dot(out);
}

double QuadraticTask::validation_metric(std::span<const double> w) const {
  Vec scratch(w.size());
  return loss_and_grad(w, {}, scratch);
}

// --- Logistic regression ----------------------------------------------------

LogisticTask::LogisticTask(TaskSpec spec) : Task(std::move(spec)) {
  RngStream rng(spec_.data_seed, "logistic-data");
  const auto d = static_cast<Eigen::Index>(spec_.dimension);
  Eigen::VectorXd direction(d);
  for (Eigen::Index j = 0; j < d; ++j) direction(j) = rng.normal();
  direction.normalize();
  RngStream train_rng = rng.split("train");
  RngStream val_rng = rng.split("validation");
  train_ = gaussian_blobs(spec_.train_samples, direction, spec_.separation, train_rng);
  validation_ = gaussian_blobs(spec_.validation_samples, direction, spec_.separation, val_rng);
  initialize(0);
}

Vec LogisticTask::initial_parameters(std::uint64_t seed) const {
  RngStream rng(seed, "logistic-init");
  Vec w(spec_.dimension + 1);
  for (double& e : w) e = 0.01 * rng.normal();
  return w;
}

double LogisticTask::loss_and_grad(std::span<const double> w,
                                   std::span<const std::size_t> batch,
                                   std::span<double> grad) const {
  const auto d = static_cast<Eigen::Index>(spec_.dimension);
  const Eigen::VectorXd weights = owned(w.first(static_cast<std::size_t>(d)));
  const double bias = w[static_cast<std::size_t>(d)];
  Eigen::VectorXd gw = Eigen::VectorXd::Zero(d);
  double gb = 0.0;
  double total = 0.0;
  for (std::size_t idx : batch) {
    const auto i = static_cast<Eigen::Index>(idx);
    const double z = train_.x.row(i).dot(weights) + bias;
    const double y = train_.y(i);
    // -[y log s(z) + (1-y) log(1 - s(z))]
    total += softplus(z) - y * z;
    const double r = sigmoid(z) - y;
    gw += r * train_.x.row(i).transpose();
    gb += r;
  }
  const double n = static_cast<double>(batch.size());
  gw /= n;
  copy_out(gw, grad);
  grad[static_cast<std::size_t>(d)] = gb / n;
  return total / n;
}

double LogisticTask::validation_metric(std::span<const double> w) const {
  const auto d = static_cast<Eigen::Index>(spec_.dimension);
  const Eigen::VectorXd weights = owned(w.first(static_cast<std::size_t>(d)));
  const Eigen::VectorXd z =
      (validation_.x * weights).array() + w[static_cast<std::size_t>(d)];
  const double n = static_cast<double>(validation_.size());
  if (metric() == MetricKind::negative_log_loss) {
    double total = 0.0;
    for (Eigen::Index i = 0; i < z.size(); ++i) total += softplus(z(i)) - validation_.y(i) * z(i);
    return total / n;
  }
  if (!z.allFinite()) return std::numeric_limits<double>::quiet_NaN();
  double correct = 0.0;
  for (Eigen::Index i = 0; i < z.size(); ++i) {
    correct += ((z(i) > 0.0) == (validation_.y(i) > 0.5)) ? 1.0 : 0.0;
  }
  return correct / n;
}

// --- MLP --------------------------------------------------------------------

MlpTask::MlpTask(TaskSpec spec) : Task(std::move(spec)) {
  RngStream rng(spec_.data_seed, "mlp-data");
  RngStream train_rng = rng.split("train");
  RngStream val_rng = rng.split("validation");
  train_ = rings(spec_.train_samples, train_rng);
  validation_ = rings(spec_.validation_samples, val_rng);
  initialize(0);
}

Vec MlpTask::initial_parameters(std::uint64_t seed) const {
  const MlpShape shape{2, static_cast<Eigen::Index>(spec_.hidden_width)};
  RngStream rng(seed, "mlp-init");
  Vec w(static_cast<std::size_t>(shape.size()), 0.0);
  auto fill = [&](std::size_t offset, Eigen::Index count, Eigen::Index fan_in) {
    const double bound = std::sqrt(6.0 / double(fan_in));
    for (Eigen::Index i = 0; i < count; ++i) {
      w[offset + static_cast<std::size_t>(i)] = bound * (2.0 * rng.uniform() - 1.0);
    }
  };
  const auto h = shape.hidden;
  fill(0, h * shape.in, shape.in);
  fill(static_cast<std::size_t>(h * shape.in + h), h * h, h);
  fill(static_cast<std::size_t>(h * shape.in + 2 * h + h * h), h, h);
  return w;
}

double MlpTask::loss_and_grad(std::span<const double> w, std::span<const std::size_t> batch,
                              std::span<double> grad) const {
  const MlpShape shape{2, static_cast<Eigen::Index>(spec_.hidden_width)};
  const MlpParams p(shape, w.data());
  MlpParams gp = p;

  // Columns are samples.
  const Eigen::MatrixXd x = gather_rows(train_.x, batch).transpose();
  const auto n = x.cols();
  const Eigen::MatrixXd z1 = (p.w1 * x).colwise() + p.b1;
  const Eigen::MatrixXd a1 = z1.cwiseMax(0.0);
  const Eigen::MatrixXd z2 = (p.w2 * a1).colwise() + p.b2;
  const Eigen::MatrixXd a2 = z2.cwiseMax(0.0);
  const Eigen::RowVectorXd z3 = (p.w3 * a2).array() + p.b3;

  double total = 0.0;
  Eigen::RowVectorXd dz3(n);
  for (Eigen::Index j = 0; j < n; ++j) {
    const double y = train_.y(static_cast<Eigen::Index>(batch[static_cast<std::size_t>(j)]));
    total += softplus(z3(j)) - y * z3(j);
    dz3(j) = (sigmoid(z3(j)) - y) / double(n);
  }

  gp.w3 = dz3 * a2.transpose();
  gp.b3 = dz3.sum();
  const Eigen::MatrixXd dz2 =
      ((p.w3.transpose() * dz3).array() * (z2.array() > 0.0).cast<double>()).matrix();
  gp.w2 = dz2 * a1.transpose();
  gp.b2 = dz2.rowwise().sum();
  const Eigen::MatrixXd dz1 =
      ((p.w2.transpose() * dz2).array() * (z1.array() > 0.0).cast<double>()).matrix();
  gp.w1 = dz1 * x.transpose();
  gp.b1 = dz1.rowwise().sum();
  gp.write(grad.data());
  return total / double(n);
}

double MlpTask::min_abs_preactivation(std::span<const double> w,
                                      std::span<const std::size_t> batch) const {
  const MlpShape shape{2, static_cast<Eigen::Index>(spec_.hidden_width)};
  const MlpParams p(shape, w.data());
  const Eigen::MatrixXd x = gather_rows(train_.x, batch).transpose();
  const Eigen::MatrixXd z1 = (p.w1 * x).colwise() + p.b1;
  const Eigen::MatrixXd z2 = (p.w2 * z1.cwiseMax(0.0)).colwise() + p.b2;
  return std::min(z1.cwiseAbs().minCoeff(), z2.cwiseAbs().minCoeff());
}

double MlpTask::validation_metric(std::span<const double> w) const {
  const MlpShape shape{2, static_cast<Eigen::Index>(spec_.hidden_width)};
  const MlpParams p(shape, w.data());
  const Eigen::MatrixXd x = validation_.x.transpose();
  const Eigen::MatrixXd a1 = ((p.w1 * x).colwise() + p.b1).cwiseMax(0.0);
  const Eigen::MatrixXd a2 = ((p.w2 * a1).colwise() + p.b2).cwiseMax(0.0);
  const Eigen::RowVectorXd z = (p.w3 * a2).array() + p.b3;
  const double n = static_cast<double>(validation_.size());
  if (metric() == MetricKind::negative_log_loss) {
    double total = 0.0;
    for (Eigen::Index i = 0; i < z.size(); ++i) total += softplus(z(i)) - validation_.y(i) * z(i);
    return total / n;
  }
  if (!z.allFinite()) return std::numeric_limits<double>::quiet_NaN();
  double correct = 0.0;
  for (Eigen::Index i = 0; i < z.size(); ++i) {
    correct += ((z(i) > 0.0) == (validation_.y(i) > 0.5)) ? 1.0 : 0.0;
  }
  return correct / n;
}

// --- Construction and training ----------------------------------------------

std::unique_ptr<Task> make_task(const TaskSpec& spec, std::uint64_t seed) {
  spec.check();
  std::unique_ptr<Task> task;
  switch (spec.kind) {
    case TaskKind::rosenbrock: task = std::make_unique<RosenbrockTask>(spec); break;
    case TaskKind::quadratic: task = std::make_unique<QuadraticTask>(spec); break;
    case TaskKind::logistic_regression: task = std::make_unique<LogisticTask>(spec); break;
    case TaskKind::mlp: task = std::make_unique<MlpTask>(spec); break;
  }
  task->initialize(seed);
  return task;
}

EpochMetrics run_epoch(Task& task, Optimizer& optimizer, const ScheduleSpec& schedule,
                       TrainingClock& clock, RngStream& rng, const StepObserver& observer) {
  Vec& w = task.parameters();
  Vec grad(w.size());
  const double horizon = static_cast<double>(std::max<std::int64_t>(clock.total_steps, 1));
  const bool minimize = !higher_is_better(task.metric());

  EpochMetrics metrics;
  double loss_sum = 0.0;

  auto take_step = [&](std::span<const std::size_t> batch) {
    const double loss = task.loss_and_grad(w, batch, grad);
    if (!std::isfinite(loss) || !all_finite(grad)) {
      throw DivergedError("non-finite loss or gradient at step " + std::to_string(clock.step));
    }
    loss_sum += loss;
    const double t = static_cast<double>(clock.step);
    const double lr = clock.lr * lr_multiplier(schedule, std::min(t, horizon), horizon, rng,
                                               optimizer.config());
    optimizer.step(w, grad, lr, t, horizon);
    if (!all_finite(w)) {
      throw DivergedError("non-finite parameters at step " + std::to_string(clock.step));
    }
    ++clock.step;
    ++metrics.steps;
    if (observer) observer(clock.step, w);
  };

  if (task.has_dataset()) {
    std::vector<std::size_t> order = all_indices(task.train_size());
    // Fisher-Yates with the stream's own bounded draws (portable across
    // standard libraries, unlike std::shuffle).
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[rng.below(i)]);
    }
    const std::size_t batch = task.spec().batch_size;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t stop = std::min(order.size(), start + batch);
      take_step(std::span<const std::size_t>(order).subspan(start, stop - start));
    }
    metrics.train_metric = loss_sum / static_cast<double>(std::max<std::size_t>(metrics.steps, 1));
    metrics.validation_metric = task.validation_metric(w);
    metrics.best_validation = metrics.validation_metric;
  } else {
    double best = task.validation_metric(w);
    for (std::size_t i = 0; i < task.spec().iterations_per_epoch; ++i) {
      take_step({});
      const double f = task.validation_metric(w);
      if (std::isfinite(f) && (minimize ? f < best : f > best)) best = f;
    }
    metrics.validation_metric = task.validation_metric(w);
    metrics.train_metric = metrics.validation_metric;
    metrics.best_validation = best;
  }
  if (!std::isfinite(metrics.validation_metric)) {
    throw DivergedError("non-finite validation metric");
  }
  return metrics;
}

}  // namespace optsearch
