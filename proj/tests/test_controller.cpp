#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "doctest.h"
#include "optsearch/controller.hpp"
#include "optsearch/errors.hpp"
#include "optsearch/search_space.hpp"

using namespace optsearch;
using doctest::Approx;

namespace {

ConstraintSet flags(bool distinct, bool no_add, bool reuse) {
  ConstraintSet c = ConstraintSet::defaults();
  c.distinct_operands = distinct;
  c.no_final_add = no_add;
  c.must_reuse_output = reuse;
  return c;
}

ControllerConfig small(double init = 0.08) {
  ControllerConfig c;
  c.hidden_size = 12;
  c.embedding_size = 4;
  c.init_scale = init;
  return c;
}

// Per-token log-probabilities by differencing teacher-forced prefixes.
std::vector<double> token_logps(const ControllerPolicy& policy, const std::vector<std::size_t>& tokens,
                                const ActionSpace& space) {
  std::vector<double> out;
  double prev = 0.0;
  for (std::size_t k = 1; k <= tokens.size(); ++k) {
    const double lp = policy.sequence_logp(std::span(tokens).first(k), space);
    out.push_back(lp - prev);
    prev = lp;
  }
  return out;
}

// Exact entropy of a fully enumerated policy on a tiny space.
double enumerate_entropy(const ControllerPolicy& policy, const ActionSpace& space) {
  std::vector<std::size_t> seq(space.length(), 0);
  double h = 0.0;
  double mass = 0.0;
  for (;;) {
    const double lp = policy.sequence_logp(seq, space);
    mass += std::exp(lp);
    h -= std::exp(lp) * lp;
    std::size_t k = 0;
    while (k < seq.size() && ++seq[k] == space.vocab_size(k)) seq[k++] = 0;
    if (k == seq.size()) break;
  }
  CHECK(mass == Approx(1.0).epsilon(1e-12));
  return h;
}

}  // namespace

TEST_CASE("vocabularies grow with the operand bank") {
  const SearchSpace space(ConstraintSet::defaults(), 3);
  CHECK(space.length() == 15);
  const std::size_t base = space.vocab_size(0);
  CHECK(space.vocab_size(1) == base);
  CHECK(space.vocab_size(5) == base + 1);
  CHECK(space.vocab_size(10) == base + 2);
  CHECK(std::get<Operand>(space.token(5, base)) == Operand::bank_ref(1));
  CHECK(std::get<Operand>(space.token(11, base + 1)) == Operand::bank_ref(2));

  ControllerPolicy policy(space.vocab_sizes(), {}, 1);
  std::vector<std::size_t> prefix(5, 0);
  const StepDistribution d = step_logits(policy, prefix, space);
  CHECK(d.probs.size() == Eigen::Index(base + 1));
  CHECK(d.probs(Eigen::Index(base)) > 0.0);
}

TEST_CASE("masked tokens get probability exactly zero") {
  const SearchSpace space(flags(true, true, false), 2);
  ControllerPolicy policy(space.vocab_sizes(), {}, 2);
  RngStream rng(2, "t");
  const auto batch = sample_batch(policy, 50, space, rng);
  const std::size_t add = space.index_of(9, Binary::add);
  for (const auto& t : batch) {
    const StepDistribution last = step_logits(policy, std::span(t.tokens).first(9), space);
    CHECK(last.probs(Eigen::Index(add)) == 0.0);
    CHECK(last.probs.sum() == Approx(1.0).epsilon(1e-14));
    const StepDistribution op2 = step_logits(policy, std::span(t.tokens).first(1), space);
    CHECK(op2.probs(Eigen::Index(t.tokens[0])) == 0.0);
  }
}

TEST_CASE("initial policy is near uniform") {
  const SearchSpace space(ConstraintSet::defaults(), 2);
  ControllerPolicy policy(space.vocab_sizes(), {}, 3);
  RngStream rng(3, "t");
  for (const auto& t : sample_batch(policy, 20, space, rng)) {
    for (std::size_t k = 0; k < space.length(); ++k) {
      const StepDistribution d = step_logits(policy, std::span(t.tokens).first(k), space);
      REQUIRE(d.probs.maxCoeff() / d.probs.minCoeff() < 1.5);
    }
  }
}

TEST_CASE("sampling: determinism, length and validity") {
  const SearchSpace space(flags(true, true, true), 3);
  ControllerPolicy policy(space.vocab_sizes(), {}, 4);
  RngStream a(4, "s");
  RngStream b(4, "s");
  const auto x = sample_batch(policy, 40, space, a);
  const auto y = sample_batch(policy, 40, space, b);
  for (std::size_t i = 0; i < x.size(); ++i) {
    CHECK(x[i].tokens == y[i].tokens);
    CHECK(x[i].logps == y[i].logps);
    REQUIRE(x[i].tokens.size() == 15);
    const auto program = space.decode(x[i].tokens);
    REQUIRE(program.groups.size() == 3);
    REQUIRE(validate(program, space.constraints()).ok());
    REQUIRE(space.encode(program) == x[i].tokens);
  }
  // recorded log-probabilities are those of the sampling distribution
  const auto lp = batch_logps(policy, x);
  for (std::size_t i = 0; i < x.size(); ++i) {
    CHECK(lp[i] == Approx(x[i].logp()).epsilon(1e-12));
    CHECK(policy.sequence_logp(x[i].tokens, space) == Approx(x[i].logp()).epsilon(1e-12));
  }
}

TEST_CASE("masking soundness under each constraint flag") {
  for (int flag = 0; flag < 3; ++flag) {
    const SearchSpace space(flags(flag == 0, flag == 1, flag == 2), 3);
    ControllerPolicy policy(space.vocab_sizes(), {}, 5);
    RngStream rng(5 + flag, "s");
    for (const auto& t : sample_batch(policy, 3000, space, rng)) {
      REQUIRE(validate(space.decode(t.tokens), space.constraints()).ok());
    }
  }
}

TEST_CASE("token frequencies of a zeroed policy are masked-uniform") {
  // theta = 0 gives equal logits, so each step is uniform over the allowed
  // tokens; compare the sampled counts with that closed form.
  const SearchSpace space(flags(true, false, false), 1);
  ControllerPolicy policy(space.vocab_sizes(), {}, 6);
  policy.theta().setZero();
  const std::size_t n = 100000;
  RngStream rng(6, "s");
  const auto batch = sample_batch(policy, n, space, rng);
  const std::size_t V = space.vocab_size(0);
  std::vector<double> op1(V, 0.0), op2_given_first(V, 0.0);
  std::size_t first_count = 0;
  for (const auto& t : batch) {
    op1[t.tokens[0]] += 1.0;
    if (t.tokens[0] == 0) {
      ++first_count;
      op2_given_first[t.tokens[1]] += 1.0;
    }
  }
  for (std::size_t j = 0; j < V; ++j) {
    const double p = 1.0 / double(V);
    CHECK(std::abs(op1[j] - n * p) <= 3.0 * std::sqrt(n * p * (1 - p)));
  }
  CHECK(op2_given_first[0] == 0.0);
  for (std::size_t j = 1; j < V; ++j) {
    const double p = 1.0 / double(V - 1);
    const double m = double(first_count);
    CHECK(std::abs(op2_given_first[j] - m * p) <= 3.0 * std::sqrt(m * p * (1 - p)));
  }
}

TEST_CASE("sampled frequencies follow the exact masked distribution") {
  const SearchSpace space(ConstraintSet::defaults(), 1);
  ControllerPolicy policy(space.vocab_sizes(), {}, 7);
  const std::size_t n = 50000;
  RngStream rng(7, "s");
  const auto batch = sample_batch(policy, n, space, rng);
  const StepDistribution d = step_logits(policy, {}, space);
  std::vector<double> count(space.vocab_size(0), 0.0);
  for (const auto& t : batch) count[t.tokens[0]] += 1.0;
  for (std::size_t j = 0; j < count.size(); ++j) {
    const double p = d.probs(Eigen::Index(j));
    CHECK(std::abs(count[j] - n * p) <= 3.5 * std::sqrt(n * p * (1 - p)));
  }
}

TEST_CASE("ppo: zero advantage with no entropy bonus leaves theta unchanged") {
  const SearchSpace space(ConstraintSet::defaults(), 2);
  ControllerPolicy policy(space.vocab_sizes(), {}, 8);
  RngStream rng(8, "s");
  auto batch = sample_batch(policy, 5, space, rng);
  for (auto& t : batch) t.reward = 0.5;
  Baseline baseline{0.5, true};
  PpoConfig cfg;
  cfg.entropy_coef = 0.0;
  cfg.learning_rate = 1e-2;
  const Eigen::VectorXd before = policy.theta();
  ppo_update(policy, batch, baseline, cfg);
  CHECK(policy.theta() == before);
  CHECK(baseline.value == Approx(0.5));

  cfg.entropy_coef = 0.0015;
  ppo_update(policy, batch, baseline, cfg);
  CHECK(policy.theta() != before);
}

TEST_CASE("ppo: a rewarded trajectory becomes more likely token by token") {
  const SearchSpace space(ConstraintSet::defaults(), 2);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    ControllerPolicy policy(space.vocab_sizes(), {}, seed);
    RngStream rng(seed, "s");
    auto batch = sample_batch(policy, 1, space, rng);
    batch[0].reward = 1.0;
    Baseline baseline{0.0, true};
    PpoConfig cfg;
    cfg.learning_rate = 1e-3;
    const auto before = token_logps(policy, batch[0].tokens, space);
    ppo_update(policy, batch, baseline, cfg);
    const auto after = token_logps(policy, batch[0].tokens, space);
    for (std::size_t k = 0; k < before.size(); ++k) CHECK(after[k] >= before[k]);
  }
}

TEST_CASE("ppo: ratio is 1 at entry and the baseline is an EMA") {
  const SearchSpace space(ConstraintSet::defaults(), 2);
  ControllerPolicy policy(space.vocab_sizes(), {}, 9);
  RngStream rng(9, "s");
  auto batch = sample_batch(policy, 5, space, rng);
  const std::vector<double> rewards{0.1, 0.9, 0.3, 0.7, 0.5};
  for (std::size_t i = 0; i < 5; ++i) batch[i].reward = rewards[i];
  Baseline baseline{0.2, true};
  PpoConfig cfg;
  const PpoStats stats = ppo_update(policy, batch, baseline, cfg);
  // with every ratio at 1 the clipped surrogate is the mean advantage
  CHECK(stats.surrogate == Approx(0.5 - 0.2).epsilon(1e-12));
  CHECK(stats.baseline == 0.2);
  CHECK(stats.mean_reward == Approx(0.5));
  CHECK(baseline.value == Approx(0.95 * 0.2 + 0.05 * 0.5).epsilon(1e-15));
  CHECK(policy.samples_done == 5);

  Baseline fresh;
  ControllerPolicy p2(space.vocab_sizes(), {}, 9);
  ppo_update(p2, batch, fresh, cfg);
  CHECK(fresh.initialized);
  CHECK(fresh.value == Approx(0.5).epsilon(1e-15));
}

TEST_CASE("ppo: surrogate gradient matches finite differences on a 3-token toy") {
  const FreeSpace space({3, 3, 3});
  ControllerPolicy policy(space.vocab_sizes(), small(0.5), 10);
  RngStream rng(10, "s");
  auto batch = sample_batch(policy, 6, space, rng);
  std::vector<double> adv{1.0, -0.5, 0.3, -1.2, 0.8, 0.1};
  // old log-probs off the current ones so that some ratios leave the clip
  // band and some do not
  std::vector<double> old = batch_logps(policy, batch);
  const std::vector<double> shift{0.0, 0.05, -0.1, 0.4, -0.3, 0.15};
  for (std::size_t i = 0; i < old.size(); ++i) old[i] += shift[i];
  PpoConfig cfg;
  cfg.entropy_coef = 0.01;

  Eigen::VectorXd grad;
  ppo_objective(policy, batch, old, adv, cfg, &grad);
  Eigen::VectorXd& theta = policy.theta();
  const double h = 1e-6;
  double worst = 0.0;
  for (Eigen::Index i = 0; i < theta.size(); ++i) {
    const double keep = theta(i);
    theta(i) = keep + h;
    const double up = ppo_objective(policy, batch, old, adv, cfg, nullptr);
    theta(i) = keep - h;
    const double down = ppo_objective(policy, batch, old, adv, cfg, nullptr);
    theta(i) = keep;
    const double fd = (up - down) / (2 * h);
    worst = std::max(worst, std::abs(fd - grad(i)) / std::max({std::abs(fd), std::abs(grad(i)), 1e-3}));
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("ppo: gradient never reaches masked logits") {
  const SearchSpace space(flags(false, true, false), 2);
  ControllerPolicy policy(space.vocab_sizes(), {}, 11);
  RngStream rng(11, "s");
  auto batch = sample_batch(policy, 5, space, rng);
  const std::vector<double> adv{1.0, -1.0, 0.5, 0.2, -0.3};
  Eigen::VectorXd grad;
  ppo_objective(policy, batch, batch_logps(policy, batch), adv, PpoConfig{}, &grad);
  const std::size_t last = space.length() - 1;
  const std::size_t add = space.index_of(last, Binary::add);
  const auto& lay = policy.layout();
  const auto V = space.vocab_size(last);
  const auto H = policy.config().hidden_size;
  CHECK(grad(Eigen::Index(lay.proj_bias[last] + add)) == 0.0);
  for (std::size_t col = 0; col < H; ++col) {
    REQUIRE(grad(Eigen::Index(lay.proj[last] + col * V + add)) == 0.0);
  }
}

TEST_CASE("ppo: non-finite rewards abort the update") {
  const SearchSpace space(ConstraintSet::defaults(), 2);
  ControllerPolicy policy(space.vocab_sizes(), {}, 12);
  RngStream rng(12, "s");
  auto batch = sample_batch(policy, 5, space, rng);
  for (auto& t : batch) t.reward = 0.5;
  batch[2].reward = std::numeric_limits<double>::infinity();
  Baseline baseline{0.1, true};
  const Eigen::VectorXd before = policy.theta();
  CHECK_THROWS_AS(ppo_update(policy, batch, baseline, PpoConfig{}), NonFiniteGradient);
  CHECK(policy.theta() == before);
  CHECK(policy.adam_t == 0);
  CHECK(baseline.value == 0.1);
}

TEST_CASE("entropy: closed forms") {
  const FreeSpace toy({3, 4, 2});
  ControllerPolicy uniform(toy.vocab_sizes(), small(), 13);
  uniform.theta().setZero();
  RngStream rng(13, "e");
  CHECK(entropy(uniform, toy, 2000, rng) == Approx(std::log(24.0)).epsilon(1e-12));
  CHECK(uniform_entropy(toy) == Approx(std::log(24.0)).epsilon(1e-15));

  const SearchSpace space(ConstraintSet::defaults(), 2);
  ControllerPolicy zero(space.vocab_sizes(), {}, 13);
  zero.theta().setZero();
  CHECK(entropy(zero, space, 500, rng) == Approx(uniform_entropy(space)).epsilon(1e-12));

  // one-hot: a huge bias on token 0 at every step
  ControllerPolicy peaked(toy.vocab_sizes(), small(), 14);
  for (std::size_t k = 0; k < toy.length(); ++k) peaked.theta()(Eigen::Index(peaked.layout().proj_bias[k])) = 60.0;
  CHECK(entropy(peaked, toy, 200, rng) < 1e-20);

  // Monte Carlo estimate against full enumeration
  ControllerPolicy random(toy.vocab_sizes(), small(1.0), 15);
  CHECK(entropy(random, toy, 20000, rng) == Approx(enumerate_entropy(random, toy)).epsilon(0.01));
}

TEST_CASE("checkpoint round trip is exact") {
  const SearchSpace space(ConstraintSet::defaults(), 2);
  ControllerPolicy policy(space.vocab_sizes(), {}, 16);
  RngStream rng(16, "s");
  auto batch = sample_batch(policy, 5, space, rng);
  for (auto& t : batch) t.reward = 0.3;
  batch[0].reward = 0.9;
  ppo_update(policy, batch, policy.baseline, PpoConfig{});
  std::stringstream buf;
  policy.save(buf);
  const ControllerPolicy back = ControllerPolicy::load(buf);
  CHECK(back.theta() == policy.theta());
  CHECK(back.adam_m == policy.adam_m);
  CHECK(back.adam_v == policy.adam_v);
  CHECK(back.adam_t == policy.adam_t);
  CHECK(back.baseline.value == policy.baseline.value);
  CHECK(back.baseline.initialized);
  CHECK(back.samples_done == 5);
  CHECK(back.vocab_sizes() == policy.vocab_sizes());

  std::stringstream bad("optsearch-controller v9\n");
  CHECK_THROWS(ControllerPolicy::load(bad));
}

TEST_CASE("config checks") {
  PpoConfig c;
  CHECK_NOTHROW(c.check());
  c.clip = 1.0;
  CHECK_THROWS_AS(c.check(), InvalidSpec);
  c = {};
  c.entropy_coef = -1;
  CHECK_THROWS_AS(c.check(), InvalidSpec);
  ConstraintSet none = ConstraintSet::defaults();
  none.binaries = {Binary::add};
  none.no_final_add = true;
  const SearchSpace space(none, 1);
  std::vector<char> allowed;
  const std::vector<std::size_t> prefix{0, 1, 0, 0};
  CHECK_THROWS_AS(space.mask(4, prefix, allowed), EmptySupport);
}
