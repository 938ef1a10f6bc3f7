#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "optsearch/errors.hpp"
#include "optsearch/tasks.hpp"

using namespace optsearch;
using doctest::Approx;

namespace {

std::vector<std::size_t> all_rows(const Task& task) {
  std::vector<std::size_t> idx(task.has_dataset() ? task.train_size() : 0);
  std::iota(idx.begin(), idx.end(), 0);
  return idx;
}

// Central differences of the task's loss; returns the largest element-wise
// relative disagreement with the analytic gradient.
double fd_error(const Task& task, const Vec& w, std::span<const std::size_t> batch, double h) {
  Vec grad(w.size());
  task.loss_and_grad(w, batch, grad);
  double worst = 0.0;
  Vec p = w;
  for (std::size_t i = 0; i < w.size(); ++i) {
    p[i] = w[i] + h;
    const double up = task.loss(p, batch);
    p[i] = w[i] - h;
    const double down = task.loss(p, batch);
    p[i] = w[i];
    const double fd = (up - down) / (2.0 * h);
    const double scale = std::max({std::abs(fd), std::abs(grad[i]), 1e-4});
    worst = std::max(worst, std::abs(fd - grad[i]) / scale);
  }
  return worst;
}

TaskSpec spec_of(TaskKind kind) {
  TaskSpec s;
  s.kind = kind;
  return s;
}

double logistic_oracle_loss(const Dataset& d, const Vec& w, std::span<const std::size_t> rows) {
  const std::size_t dim = w.size() - 1;
  double total = 0.0;
  for (std::size_t r : rows) {
    double z = w[dim];
    for (std::size_t j = 0; j < dim; ++j) z += w[j] * d.x(r, j);
    const double p = 1.0 / (1.0 + std::exp(-z));
    total -= d.y(r) * std::log(p) + (1.0 - d.y(r)) * std::log(1.0 - p);
  }
  return total / double(rows.size());
}

double best_sgd_accuracy(const TaskSpec& spec, std::size_t epochs) {
  double best = 0.0;
  for (double lr : {1e-3, 1e-2, 1e-1, 1.0, 10.0}) {
    auto task = make_task(spec, 1);
    Optimizer sgd(parse_update_rule("sgd"), task->num_parameters(), {}, RngStream(1, "opt"));
    RngStream rng(1, "data");
    TrainingClock clock{lr, 0, std::int64_t(epochs * task->steps_per_epoch())};
    EpochMetrics m;
    for (std::size_t e = 0; e < epochs; ++e) m = run_epoch(*task, sgd, {}, clock, rng);
    best = std::max(best, m.validation_metric);
  }
  return best;
}

}  // namespace

TEST_CASE("rosenbrock values and gradient") {
  CHECK(rosenbrock(1, 1) == 0.0);
  CHECK(rosenbrock_grad(1, 1) == std::array<double, 2>{0.0, 0.0});
  CHECK(rosenbrock(0, 0) == 1.0);
  const auto g = rosenbrock_grad(-1, 1);
  CHECK(g[0] == -4.0);
  CHECK(g[1] == 0.0);
  auto f = [](double x, double y) { return (1 - x) * (1 - x) + 100 * (y - x * x) * (y - x * x); };
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> U(-2.0, 2.0);
  for (int i = 0; i < 100; ++i) {
    const double x = U(rng), y = U(rng), h = 1e-6;
    const auto a = rosenbrock_grad(x, y);
    const double fx = (f(x + h, y) - f(x - h, y)) / (2 * h);
    const double fy = (f(x, y + h) - f(x, y - h)) / (2 * h);
    CHECK(std::abs(a[0] - fx) / std::max(std::abs(fx), 1.0) < 1e-6);
    CHECK(std::abs(a[1] - fy) / std::max(std::abs(fy), 1.0) < 1e-6);
  }
}

TEST_CASE("rosenbrock task starts at the fixed point") {
  auto task = make_task(spec_of(TaskKind::rosenbrock), 99);
  CHECK(task->parameters() == Vec{-1.5, 1.5});
  CHECK(task->validation_metric(task->parameters()) == Approx(rosenbrock(-1.5, 1.5)));
  CHECK(task->steps_per_epoch() == 1000);
}

TEST_CASE("quadratic with condition number 1 converges in one step") {
  TaskSpec s = spec_of(TaskKind::quadratic);
  s.condition_number = 1.0;
  s.dimension = 16;
  auto task = make_task(s, 3);
  Vec w = task->parameters();
  Vec g(w.size());
  task->loss_and_grad(w, {}, g);
  for (std::size_t i = 0; i < w.size(); ++i) w[i] -= 1.0 * g[i];
  CHECK(task->validation_metric(w) < 1e-28);
}

TEST_CASE("quadratic Hessian has the requested spectrum") {
  TaskSpec s = spec_of(TaskKind::quadratic);
  s.condition_number = 100.0;
  s.dimension = 12;
  auto task = make_task(s, 4);
  const auto& a = dynamic_cast<QuadraticTask&>(*task).hessian();
  CHECK((a - a.transpose()).norm() < 1e-12);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(a);
  CHECK(eig.eigenvalues().minCoeff() == Approx(1.0).epsilon(1e-10));
  CHECK(eig.eigenvalues().maxCoeff() == Approx(100.0).epsilon(1e-10));
}

TEST_CASE("datasets are deterministic and splits are disjoint") {
  for (TaskKind kind : {TaskKind::logistic_regression, TaskKind::mlp}) {
    auto a = make_task(spec_of(kind), 5);
    auto b = make_task(spec_of(kind), 5);
    const Dataset* ta;
    const Dataset* tb;
    const Dataset* va;
    if (kind == TaskKind::mlp) {
      ta = &dynamic_cast<MlpTask&>(*a).train();
      tb = &dynamic_cast<MlpTask&>(*b).train();
      va = &dynamic_cast<MlpTask&>(*a).validation();
    } else {
      ta = &dynamic_cast<LogisticTask&>(*a).train();
      tb = &dynamic_cast<LogisticTask&>(*b).train();
      va = &dynamic_cast<LogisticTask&>(*a).validation();
    }
    CHECK(ta->x == tb->x);
    CHECK(ta->y == tb->y);
    CHECK(a->parameters() == b->parameters());
    CHECK(ta->size() == 1000);
    CHECK(va->size() == 500);
    for (Eigen::Index i = 0; i < va->x.rows(); ++i) {
      for (Eigen::Index j = 0; j < ta->x.rows(); ++j) REQUIRE(va->x.row(i) != ta->x.row(j));
    }
    // classes are balanced-ish
    CHECK(std::abs(ta->y.mean() - 0.5) < 0.1);
  }
  TaskSpec other = spec_of(TaskKind::logistic_regression);
  other.data_seed = 1;
  CHECK(dynamic_cast<LogisticTask&>(*make_task(other, 5)).train().x !=
        dynamic_cast<LogisticTask&>(*make_task(spec_of(TaskKind::logistic_regression), 5)).train().x);
}

TEST_CASE("logistic loss matches a direct evaluation") {
  auto task = make_task(spec_of(TaskKind::logistic_regression), 6);
  const auto& d = dynamic_cast<LogisticTask&>(*task).train();
  std::mt19937_64 rng(6);
  std::normal_distribution<double> N;
  Vec w(task->num_parameters());
  for (double& x : w) x = N(rng);
  const auto rows = all_rows(*task);
  CHECK(task->loss(w, rows) == Approx(logistic_oracle_loss(d, w, rows)).epsilon(1e-12));
}

TEST_CASE("analytic gradients match central differences") {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> N;
  for (TaskKind kind : {TaskKind::quadratic, TaskKind::logistic_regression, TaskKind::rosenbrock}) {
    auto task = make_task(spec_of(kind), 8);
    const auto rows = all_rows(*task);
    for (int trial = 0; trial < 10; ++trial) {
      Vec w(task->num_parameters());
      for (double& x : w) x = N(rng);
      CHECK(fd_error(*task, w, rows, 1e-5) < 1e-5);
    }
  }
}

TEST_CASE("mlp gradients match central differences away from ReLU kinks") {
  auto task = make_task(spec_of(TaskKind::mlp), 9);
  auto& mlp = dynamic_cast<MlpTask&>(*task);
  std::vector<std::size_t> batch(64);
  std::iota(batch.begin(), batch.end(), 0);
  int checked = 0;
  for (std::uint64_t seed = 0; checked < 10 && seed < 200; ++seed) {
    task->initialize(seed);
    const Vec w = task->parameters();
    if (mlp.min_abs_preactivation(w, batch) < 1e-4) continue;  // resample
    CHECK(fd_error(*task, w, batch, 1e-5) < 1e-5);
    ++checked;
  }
  CHECK(checked == 10);
}

TEST_CASE("logistic SGD reaches > 0.9 validation accuracy in 5 epochs") {
  CHECK(best_sgd_accuracy(spec_of(TaskKind::logistic_regression), 5) > 0.9);
}

TEST_CASE("lr = 0 leaves parameters and metric unchanged") {
  for (TaskKind kind : {TaskKind::rosenbrock, TaskKind::quadratic, TaskKind::logistic_regression,
                        TaskKind::mlp}) {
    TaskSpec s = spec_of(kind);
    s.iterations_per_epoch = 50;
    auto task = make_task(s, 10);
    const Vec before = task->parameters();
    const double metric = task->validation_metric(before);
    Optimizer opt(parse_update_rule("adam"), before.size(), {}, RngStream(0, "o"));
    RngStream rng(0, "d");
    TrainingClock clock{0.0, 0, std::int64_t(task->steps_per_epoch())};
    const EpochMetrics m = run_epoch(*task, opt, {}, clock, rng);
    CHECK(task->parameters() == before);
    CHECK(m.validation_metric == metric);
    CHECK(m.steps == task->steps_per_epoch());
  }
}

TEST_CASE("run_epoch is bit-reproducible") {
  auto run = [] {
    auto task = make_task(spec_of(TaskKind::mlp), 11);
    Optimizer opt(parse_update_rule("g eps id id add ; out1 g id drop1 left"),
                  task->num_parameters(), {}, RngStream(2, "o"));
    RngStream rng(2, "d");
    TrainingClock clock{0.05, 0, 2 * std::int64_t(task->steps_per_epoch())};
    ScheduleSpec sched = parse_schedule("noisy-linear-cosine");
    run_epoch(*task, opt, sched, clock, rng);
    const EpochMetrics m = run_epoch(*task, opt, sched, clock, rng);
    return std::pair{task->parameters(), m.validation_metric};
  };
  const auto a = run();
  const auto b = run();
  CHECK(a.second == b.second);
  CHECK(a.first == b.first);
}

TEST_CASE("rosenbrock epoch is 1000 full-batch iterations with a best-seen value") {
  auto task = make_task(spec_of(TaskKind::rosenbrock), 0);
  Optimizer opt(parse_update_rule("sgd"), 2, {}, RngStream(0, "o"));
  RngStream rng(0, "d");
  TrainingClock clock{1e-3, 0, 1000};
  std::int64_t observed = 0;
  const EpochMetrics m =
      run_epoch(*task, opt, {}, clock, rng, [&](std::int64_t, std::span<const double>) { ++observed; });
  CHECK(m.steps == 1000);
  CHECK(clock.step == 1000);
  CHECK(observed == 1000);
  CHECK(m.best_validation <= m.validation_metric);
  CHECK(m.validation_metric < rosenbrock(-1.5, 1.5));
}

TEST_CASE("divergence is reported") {
  auto task = make_task(spec_of(TaskKind::rosenbrock), 0);
  Optimizer opt(parse_update_rule("sgd"), 2, {}, RngStream(0, "o"));
  RngStream rng(0, "d");
  TrainingClock clock{10.0, 0, 1000};
  CHECK_THROWS_AS(run_epoch(*task, opt, {}, clock, rng), DivergedError);
}

TEST_CASE("spec checks and rewards") {
  TaskSpec s;
  s.batch_size = 0;
  CHECK_THROWS_AS(s.check(), InvalidSpec);
  s = {};
  s.kind = TaskKind::quadratic;
  s.condition_number = 0.5;
  CHECK_THROWS_AS(make_task(s, 0), InvalidSpec);
  CHECK(metric_to_reward(MetricKind::accuracy, 0.75) == 0.75);
  CHECK(metric_to_reward(MetricKind::function_value, 1.0) == 0.5);
  CHECK(metric_to_reward(MetricKind::function_value, std::nan("")) == 0.0);
  CHECK(parse_task_kind("logistic") == TaskKind::logistic_regression);
  CHECK_THROWS(parse_task_kind("cnn"));
}
