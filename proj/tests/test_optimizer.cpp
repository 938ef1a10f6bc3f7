#include <cmath>
#include <numbers>
#include <random>

#include "doctest.h"
#include "optsearch/errors.hpp"
#include "optsearch/optimizer.hpp"

using namespace optsearch;
using doctest::Approx;

namespace {

// Reference optimizers written directly from the update formulas, with
// their own EMA bookkeeping.
struct Oracle {
  Vec m, v, buf;
  int t = 0;
  double b1 = 0.9, b2 = 0.999, delta = 1e-8;

  explicit Oracle(std::size_t n) : m(n, 0.0), v(n, 0.0), buf(n, 0.0) {}

  void absorb(const Vec& g) {
    ++t;
    for (std::size_t i = 0; i < g.size(); ++i) {
      m[i] = b1 * m[i] + (1 - b1) * g[i];
      v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i];
    }
  }
  double mhat(std::size_t i) const { return m[i] / (1 - std::pow(b1, t)); }
  double vhat(std::size_t i) const { return v[i] / (1 - std::pow(b2, t)); }

  Vec adam(const Vec& g) const {
    Vec u(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) u[i] = mhat(i) / (std::sqrt(vhat(i)) + delta);
    return u;
  }
  Vec rmsprop(const Vec& g) const {
    Vec u(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) u[i] = g[i] / (std::sqrt(vhat(i)) + delta);
    return u;
  }
  static double sgn(double x) { return x > 0 ? 1.0 : x < 0 ? -1.0 : 0.0; }
  Vec powersign(const Vec& g, double alpha, double f) const {
    Vec u(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) u[i] = std::pow(alpha, f * sgn(g[i]) * sgn(m[i])) * g[i];
    return u;
  }
  Vec addsign(const Vec& g, double alpha, double f) const {
    Vec u(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) u[i] = (alpha + f * sgn(g[i]) * sgn(m[i])) * g[i];
    return u;
  }
};

Vec random_vec(std::mt19937_64& rng, std::size_t n, double scale) {
  std::normal_distribution<double> N(0.0, scale);
  Vec x(n);
  for (double& e : x) e = N(rng);
  return x;
}

double max_rel_err(const Vec& a, const Vec& b) {
  double e = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double scale = std::max(std::abs(b[i]), 1e-300);
    e = std::max(e, std::abs(a[i] - b[i]) / scale);
  }
  return e;
}

Vec program_u(const std::string& text, const OptimizerState& s, const Vec& g, double t = 1,
              double T = 100) {
  RngStream rng(0, "p");
  return program_delta(parse_program(text), s, g, g, t, T, rng, {});
}

}  // namespace

TEST_CASE("init_state allocates only what the rule reads") {
  const RuntimeConfig cfg;
  const auto ps = init_state(parse_program("sign_g sign_m id id mul ; out1 g exp id mul"), 10, cfg);
  CHECK(ps.m.has_value());
  CHECK(ps.m->size() == 10);
  CHECK_FALSE(ps.v.has_value());
  CHECK_FALSE(ps.gamma.has_value());
  CHECK(ps.vector_slot_count() == 1);
  CHECK(ps.slots() == std::set<StateSlot>{StateSlot::m, StateSlot::step});

  const auto adam = init_state(parse_optimizer_id("adam"), 10, cfg);
  CHECK(adam.vector_slot_count() == 2);
  CHECK(adam.slots() == std::set<StateSlot>{StateSlot::m, StateSlot::v, StateSlot::step});
  for (double x : *adam.m) CHECK(x == 0.0);
  CHECK(adam.step == 0);

  const auto sgd = init_state(parse_optimizer_id("sgd"), 10, cfg);
  CHECK(sgd.vector_slot_count() == 0);
  CHECK(sgd.slots().empty());

  CHECK(init_state(parse_optimizer_id("addsign-ld"), 10, cfg).vector_slot_count() == 1);
  CHECK(init_state(parse_optimizer_id("momentum"), 10, cfg).momentum_buf.has_value());
}

TEST_CASE("property: allocated slots equal required_state") {
  const RuntimeConfig cfg;
  for (const char* text : {"g g id id left", "m v id sqrt div", "gamma g id id mul",
                           "rmsprop adam id id add", "sign_m g id id mul ; out1 ld id id mul",
                           "eps_t wd2 id id sub"}) {
    const auto p = parse_program(text);
    CHECK(init_state(p, 4, cfg).slots() == required_state(p));
  }
}

TEST_CASE("program_delta: SGD") {
  OptimizerState s = init_state(parse_program("g g id id left"), 2);
  const Vec g{0.3, -0.2};
  advance_state(s, g, {});
  CHECK(program_u("g g id id left", s, g) == g);
}

TEST_CASE("program_delta: PowerSign at step 1") {
  const std::string ps = "sign_g sign_m id id mul ; out1 g exp id mul";
  OptimizerState s = init_state(parse_program(ps), 1);
  const Vec g{0.1};
  advance_state(s, g, {});
  CHECK(corrected_m(s, {})[0] == Approx(0.1).epsilon(1e-15));
  CHECK(program_u(ps, s, g)[0] == Approx(std::numbers::e * 0.1).epsilon(1e-15));
}

TEST_CASE("program_delta: Adam in one and two groups agree") {
  std::mt19937_64 rng(1);
  OptimizerState s = init_state(parse_program("m v id sqrt div"), 16);
  for (int i = 0; i < 20; ++i) {
    const Vec g = random_vec(rng, 16, 1.0);
    advance_state(s, g, {});
    const Vec one = program_u("m v id sqrt div", s, g);
    const Vec two = program_u("m v id sqrt div ; out1 out1 id id left", s, g);
    const Vec alt = program_u("v m sqrt id left ; m out1 id id div", s, g);
    CHECK(max_rel_err(one, two) == 0.0);
    CHECK(max_rel_err(one, alt) < 1e-15);
  }
}

TEST_CASE("named_delta: AddSign and PowerSign") {
  const RuntimeConfig cfg;
  NamedOptimizerSpec add = parse_optimizer_id("addsign");
  OptimizerState s = init_state(add, 1);
  advance_state(s, Vec{1.0}, cfg);
  // disagreement: g < 0 while m > 0
  CHECK(named_delta(add, s, Vec{-0.5}, 1, 10, cfg)[0] == 0.0);
  CHECK(named_delta(add, s, Vec{0.5}, 1, 10, cfg)[0] == 1.0);

  NamedOptimizerSpec pow = parse_optimizer_id("powersign");
  OptimizerState p = init_state(pow, 1);
  advance_state(p, Vec{2.0}, cfg);
  CHECK(named_delta(pow, p, Vec{2.0}, 1, 10, cfg)[0] == Approx(5.43656365691809).epsilon(1e-14));
  CHECK(named_delta(pow, p, Vec{-2.0}, 1, 10, cfg)[0] ==
        Approx(-2.0 / std::numbers::e).epsilon(1e-14));
}

TEST_CASE("named_delta: f = 0 reduces to SGD exactly") {
  std::mt19937_64 rng(2);
  const RuntimeConfig cfg;
  for (const char* id : {"powersign", "addsign"}) {
    NamedOptimizerSpec spec = parse_optimizer_id(id);
    spec.internal_decay = {DecayKind::zero, 0.0};
    OptimizerState s = init_state(spec, 32);
    for (int i = 0; i < 50; ++i) {
      const Vec g = random_vec(rng, 32, 1.0);
      advance_state(s, g, cfg);
      REQUIRE(named_delta(spec, s, g, i, 50, cfg) == g);
    }
  }
}

TEST_CASE("property: named rules match the reference formulas") {
  std::mt19937_64 rng(3);
  const RuntimeConfig cfg;
  const std::size_t n = 64;
  for (int trial = 0; trial < 5; ++trial) {
    Oracle ref(n);
    OptimizerState adam = init_state(parse_optimizer_id("adam"), n);
    OptimizerState rms = init_state(parse_optimizer_id("rmsprop"), n);
    OptimizerState ps = init_state(parse_optimizer_id("powersign"), n);
    for (int step = 1; step <= 100; ++step) {
      const Vec g = random_vec(rng, n, std::pow(10.0, -3.0 + trial));
      ref.absorb(g);
      advance_state(adam, g, cfg);
      advance_state(rms, g, cfg);
      advance_state(ps, g, cfg);
      REQUIRE(max_rel_err(named_delta(parse_optimizer_id("adam"), adam, g, step, 100, cfg),
                          ref.adam(g)) < 1e-12);
      REQUIRE(max_rel_err(named_delta(parse_optimizer_id("rmsprop"), rms, g, step, 100, cfg),
                          ref.rmsprop(g)) < 1e-12);
      const double f = decay_value({DecayKind::linear}, step, 100);
      REQUIRE(max_rel_err(named_delta(parse_optimizer_id("powersign-ld"), ps, g, step, 100, cfg),
                          ref.powersign(g, std::numbers::e, f)) < 1e-12);
      REQUIRE(max_rel_err(named_delta(parse_optimizer_id("addsign-ld"), ps, g, step, 100, cfg),
                          ref.addsign(g, 1.0, f)) < 1e-12);
    }
  }
}

TEST_CASE("property: DSL SGD, RMSProp and Adam match the native rules") {
  std::mt19937_64 rng(4);
  const RuntimeConfig cfg;
  const std::size_t n = 64;
  for (const char* id : {"sgd", "rmsprop", "adam", "powersign", "addsign", "powersign-ld",
                         "addsign-cd", "powersign-rd10", "addsign-ld"}) {
    const NamedOptimizerSpec spec = parse_optimizer_id(id);
    const UpdateRuleProgram program = as_program(spec);
    OptimizerState native = init_state(spec, n);
    OptimizerState dsl = init_state(program, n);
    RngStream r(0, "unused");
    for (int step = 1; step <= 100; ++step) {
      const Vec g = random_vec(rng, n, 0.1);
      advance_state(native, g, cfg);
      advance_state(dsl, g, cfg);
      const Vec a = named_delta(spec, native, g, step, 100, cfg);
      const Vec b = program_delta(program, dsl, g, g, step, 100, r, cfg);
      REQUIRE(max_rel_err(b, a) < 1e-12);
    }
  }
}

TEST_CASE("as_program forms") {
  CHECK(format_program(as_program(parse_optimizer_id("powersign"))) ==
        "sign_g sign_m id id mul ; out1 g exp id mul");
  CHECK(format_program(as_program(parse_optimizer_id("addsign-ld"))) ==
        "sign_g sign_m id id mul ; ld out1 id id mul ; c1 out2 id id add ; out3 g id id mul");
  CHECK_THROWS_AS(as_program(parse_optimizer_id("momentum")), NotExpressible);
}

TEST_CASE("property: sign(m) is unchanged by bias correction") {
  std::mt19937_64 rng(5);
  OptimizerState s = init_state(parse_optimizer_id("powersign"), 64);
  RuntimeConfig raw;
  raw.bias_correction = false;
  for (int step = 0; step < 200; ++step) {
    const Vec g = random_vec(rng, 64, 1.0);
    advance_state(s, g, {});
    const Vec hat = corrected_m(s, {});
    for (std::size_t i = 0; i < 64; ++i) REQUIRE(sign_of(hat[i]) == sign_of((*s.m)[i]));
    REQUIRE(named_delta(parse_optimizer_id("powersign"), s, g, step, 200, {}) ==
            named_delta(parse_optimizer_id("powersign"), s, g, step, 200, raw));
  }
}

TEST_CASE("property: PowerSign and AddSign scale sets") {
  std::mt19937_64 rng(6);
  const RuntimeConfig cfg;
  for (const char* id : {"powersign-cd", "addsign-rd10"}) {
    const NamedOptimizerSpec spec = parse_optimizer_id(id);
    OptimizerState s = init_state(spec, 64);
    const double alpha = spec.resolved_alpha();
    for (int step = 1; step <= 100; ++step) {
      Vec g = random_vec(rng, 64, 1.0);
      g[0] = 0.0;
      advance_state(s, g, cfg);
      const double f = decay_value(spec.internal_decay, step, 100);
      const Vec u = named_delta(spec, s, g, step, 100, cfg);
      for (std::size_t i = 1; i < 64; ++i) {
        const double scale = u[i] / g[i];
        if (spec.family == OptimizerFamily::powersign) {
          REQUIRE((scale == Approx(std::pow(alpha, f)) || scale == Approx(std::pow(alpha, -f))));
        } else {
          REQUIRE((scale == Approx(alpha + f) || scale == Approx(alpha - f)));
        }
      }
      REQUIRE(u[0] == 0.0);
    }
  }
}

TEST_CASE("optimizer ids") {
  for (const char* id : {"sgd", "momentum", "rmsprop", "adam", "powersign", "powersign-ld",
                         "powersign-cd", "powersign-rd10", "addsign", "addsign-ld", "addsign-cd",
                         "addsign-rd20"}) {
    CHECK(optimizer_id(parse_optimizer_id(id)) == id);
  }
  CHECK(parse_optimizer_id("powersign").resolved_alpha() == std::numbers::e);
  CHECK(parse_optimizer_id("addsign").resolved_alpha() == 1.0);
  CHECK_THROWS_AS(parse_optimizer_id("nadam"), UnknownOptimizer);
  CHECK_THROWS_AS(parse_optimizer_id("powersign-rd"), UnknownOptimizer);
  CHECK(std::holds_alternative<UpdateRuleProgram>(parse_update_rule("g g id id left")));
  CHECK(describe(parse_update_rule("adam")) == "adam");
}

TEST_CASE("schedules") {
  RngStream rng(0, "sched");
  const ScheduleSpec lc = parse_schedule("linear-cosine");
  CHECK(lr_multiplier(lc, 0, 100, rng) == 1.0);
  CHECK(lr_multiplier(lc, 100, 100, rng) == Approx(0.0).epsilon(1e-15));
  const ScheduleSpec noisy = parse_schedule("noisy-linear-cosine");
  for (int i = 0; i < 20; ++i) CHECK(lr_multiplier(noisy, 100, 100, rng) == 0.001);
  CHECK(lr_multiplier(parse_schedule("cosine"), 50, 100, rng) == Approx(0.5).epsilon(1e-15));
  const ScheduleSpec step = parse_schedule("stepwise");
  CHECK(lr_multiplier(step, 10, 100, rng) == 1.0);
  CHECK(lr_multiplier(step, 50, 100, rng) == 0.1);
  CHECK(lr_multiplier(step, 80, 100, rng) == 0.01);
  CHECK(lr_multiplier(parse_schedule("constant"), 80, 100, rng) == 1.0);
  CHECK_THROWS_AS(parse_schedule("exp"), InvalidSpec);
}

TEST_CASE("property: schedules stay non-negative, noisy one is bounded in expectation") {
  RngStream rng(1, "sched");
  for (const char* id : {"constant", "stepwise", "cosine", "linear-cosine", "restart"}) {
    const ScheduleSpec s = parse_schedule(id);
    for (int t = 0; t <= 1000; ++t) REQUIRE(lr_multiplier(s, t, 1000, rng) >= 0.0);
  }
  const ScheduleSpec noisy = parse_schedule("noisy-linear-cosine");
  const ScheduleSpec lc = parse_schedule("linear-cosine");
  for (int t : {0, 100, 500, 900}) {
    double mean = 0.0;
    const int draws = 20000;
    for (int i = 0; i < draws; ++i) mean += lr_multiplier(noisy, t, 1000, rng);
    mean /= draws;
    const double sd = std::sqrt(1.0 / std::pow(1.0 + t, 0.55)) * decay_value({DecayKind::cyclical, 0.5}, t, 1000);
    CHECK(std::abs(mean - (lr_multiplier(lc, t, 1000, rng) + 0.001)) < 4.0 * sd / std::sqrt(draws) + 1e-12);
  }
}

TEST_CASE("determinism: identical seeds give identical trajectories") {
  auto run = [](std::uint64_t seed) {
    Optimizer opt(parse_update_rule("g eps_t id id add ; out1 m drop3 id mul"), 8, {},
                  RngStream(seed, "opt"));
    Vec w(8, 1.0);
    for (int t = 0; t < 50; ++t) {
      Vec g(w);
      opt.step(w, g, 0.01, t, 50);
    }
    return w;
  };
  CHECK(run(3) == run(3));
  CHECK(run(3) != run(4));
}

TEST_CASE("momentum is classical with coefficient 0.9") {
  const NamedOptimizerSpec spec = parse_optimizer_id("momentum");
  OptimizerState s = init_state(spec, 1);
  double buf = 0.0;
  for (double g : {1.0, -0.5, 2.0, 0.25}) {
    advance_state(s, Vec{g}, {});
    buf = 0.9 * buf + g;
    CHECK(named_delta(spec, s, Vec{g}, 1, 10, {})[0] == Approx(buf).epsilon(1e-15));
  }
}
