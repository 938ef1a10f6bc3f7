#include "optsearch/optimizer.hpp"

#include <charconv>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "optsearch/errors.hpp"

namespace optsearch {

namespace {

double bias_scale(double beta, std::int64_t step, const RuntimeConfig& config) {
  if (!config.bias_correction || step <= 0) return 1.0;
  return 1.0 - std::pow(beta, static_cast<double>(step));
}

Vec corrected(const std::optional<Vec>& slot, double beta, std::int64_t step,
              const RuntimeConfig& config, const char* name) {
  if (!slot) throw std::logic_error(std::string("optimizer state has no ") + name + " slot");
  const double scale = bias_scale(beta, step, config);
  Vec out(*slot);
  if (scale != 1.0) {
    for (double& e : out) e /= scale;
  }
  return out;
}

void ema(Vec& slot, double beta, std::span<const double> g, int power) {
  for (std::size_t i = 0; i < slot.size(); ++i) {
    double x = g[i];
    if (power == 2) x = g[i] * g[i];
    if (power == 3) x = g[i] * g[i] * g[i];
    slot[i] = beta * slot[i] + (1.0 - beta) * x;
  }
}

void require_finite(const Vec& x, const char* what) {
  for (double e : x) {
    if (!std::isfinite(e)) throw OverflowError(std::string("non-finite operand ") + what);
  }
}

// m / (sqrt|v| + delta); shared by the adam operand and native Adam/RMSProp
// so DSL and native forms round identically.
Vec scaled_by_rms(std::span<const double> num, const Vec& v_hat, double delta) {
  Vec out(num.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = num[i] / (std::sqrt(std::abs(v_hat[i])) + delta);
  }
  return out;
}

Operand decay_operand(const DecaySpec& decay) {
  switch (decay.kind) {
    case DecayKind::linear:
      return {OperandKind::linear_decay, 0.0};
    case DecayKind::cyclical:
      return Operand::cyclical(decay.n);
    case DecayKind::restart:
      if (decay.n != std::floor(decay.n) || decay.n < 1.0) {
        throw NotExpressible("restart decay needs an integral period count");
      }
      return Operand::restart(static_cast<int>(decay.n));
    default:
      throw NotExpressible("internal decay has no operand");
  }
}

Group group(Operand a, Operand b, Unary u1, Unary u2, Binary op) { return {a, b, u1, u2, op}; }

constexpr Operand kG{OperandKind::grad, 0.0};

}  // namespace

double NamedOptimizerSpec::resolved_alpha() const {
  if (alpha) return *alpha;
  return family == OptimizerFamily::powersign ? std::numbers::e : 1.0;
}

NamedOptimizerSpec parse_optimizer_id(std::string_view id) {
  NamedOptimizerSpec spec;
  if (id == "sgd") return spec;
  if (id == "momentum") {
    spec.family = OptimizerFamily::momentum;
    return spec;
  }
  if (id == "rmsprop") {
    spec.family = OptimizerFamily::rmsprop;
    return spec;
  }
  if (id == "adam") {
    spec.family = OptimizerFamily::adam;
    return spec;
  }
  std::string_view rest;
  if (id.starts_with("powersign")) {
    spec.family = OptimizerFamily::powersign;
    rest = id.substr(9);
  } else if (id.starts_with("addsign")) {
    spec.family = OptimizerFamily::addsign;
    rest = id.substr(7);
  } else {
    throw UnknownOptimizer("unknown optimizer '" + std::string(id) + "'");
  }
  if (rest.empty()) return spec;
  if (rest == "-ld") {
    spec.internal_decay = {DecayKind::linear, 0.0};
    return spec;
  }
  if (rest == "-cd") {
    spec.internal_decay = {DecayKind::cyclical, 0.5};
    return spec;
  }
  if (rest.starts_with("-rd")) {
    const std::string_view digits = rest.substr(3);
    int n = 0;
    auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), n);
    if (ec == std::errc() && ptr == digits.data() + digits.size() && n >= 1 &&
        digits.front() != '0') {
      spec.internal_decay = {DecayKind::restart, double(n)};
      return spec;
    }
  }
  throw UnknownOptimizer("unknown optimizer '" + std::string(id) + "'");
}

std::string optimizer_id(const NamedOptimizerSpec& spec) {
  std::string id;
  switch (spec.family) {
    case OptimizerFamily::sgd: return "sgd";
    case OptimizerFamily::momentum: return "momentum";
    case OptimizerFamily::rmsprop: return "rmsprop";
    case OptimizerFamily::adam: return "adam";
    case OptimizerFamily::powersign: id = "powersign"; break;
    case OptimizerFamily::addsign: id = "addsign"; break;
  }
  switch (spec.internal_decay.kind) {
    case DecayKind::none: break;
    case DecayKind::zero: id += "-zero"; break;
    case DecayKind::linear: id += "-ld"; break;
    case DecayKind::cyclical:
      id += spec.internal_decay.n == 0.5 ? "-cd" : "-cd" + std::to_string(spec.internal_decay.n);
      break;
    case DecayKind::restart:
      id += "-rd" + std::to_string(static_cast<long long>(spec.internal_decay.n));
      break;
    case DecayKind::annealed_noise: id += "-eps_t"; break;
  }
  return id;
}

UpdateRule parse_update_rule(std::string_view text) {
  try {
    return parse_optimizer_id(text);
  } catch (const UnknownOptimizer&) {
    // Named ids never contain whitespace; anything else goes to the parser.
    if (text.find_first_of(" \t;") == std::string_view::npos) throw;
  }
  return parse_program(text);
}

std::string describe(const UpdateRule& rule) {
  if (const auto* program = std::get_if<UpdateRuleProgram>(&rule)) return format_program(*program);
  return optimizer_id(std::get<NamedOptimizerSpec>(rule));
}

std::set<StateSlot> OptimizerState::slots() const {
  std::set<StateSlot> out;
  if (m) out.insert(StateSlot::m);
  if (v) out.insert(StateSlot::v);
  if (gamma) out.insert(StateSlot::gamma);
  if (counts_steps) out.insert(StateSlot::step);
  return out;
}

std::size_t OptimizerState::vector_slot_count() const {
  return std::size_t(m.has_value()) + v.has_value() + gamma.has_value() +
         momentum_buf.has_value();
}

OptimizerState init_state(const UpdateRuleProgram& program, std::size_t size,
                          const RuntimeConfig&) {
  OptimizerState state;
  for (StateSlot slot : required_state(program)) {
    switch (slot) {
      case StateSlot::m: state.m.emplace(size, 0.0); break;
      case StateSlot::v: state.v.emplace(size, 0.0); break;
      case StateSlot::gamma: state.gamma.emplace(size, 0.0); break;
      case StateSlot::step: state.counts_steps = true; break;
    }
  }
  return state;
}

OptimizerState init_state(const NamedOptimizerSpec& spec, std::size_t size,
                          const RuntimeConfig&) {
  OptimizerState state;
  state.momentum = spec.momentum;
  switch (spec.family) {
    case OptimizerFamily::sgd:
      break;
    case OptimizerFamily::momentum:
      state.momentum_buf.emplace(size, 0.0);
      break;
    case OptimizerFamily::rmsprop:
      state.v.emplace(size, 0.0);
      state.counts_steps = true;
      break;
    case OptimizerFamily::adam:
      state.m.emplace(size, 0.0);
      state.v.emplace(size, 0.0);
      state.counts_steps = true;
      break;
    case OptimizerFamily::powersign:
    case OptimizerFamily::addsign:
      state.m.emplace(size, 0.0);
      state.counts_steps = true;
      break;
  }
  return state;
}

OptimizerState init_state(const UpdateRule& rule, std::size_t size, const RuntimeConfig& config) {
  return std::visit([&](const auto& r) { return init_state(r, size, config); }, rule);
}

void advance_state(OptimizerState& state, std::span<const double> g, const RuntimeConfig& config) {
  if (state.counts_steps) ++state.step;
  if (state.m) ema(*state.m, config.beta1, g, 1);
  if (state.v) ema(*state.v, config.beta2, g, 2);
  if (state.gamma) ema(*state.gamma, config.beta3, g, 3);
  if (state.momentum_buf) {
    Vec& buf = *state.momentum_buf;
    for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = state.momentum * buf[i] + g[i];
  }
}

Vec corrected_m(const OptimizerState& state, const RuntimeConfig& config) {
  return corrected(state.m, config.beta1, state.step, config, "m");
}

Vec corrected_v(const OptimizerState& state, const RuntimeConfig& config) {
  return corrected(state.v, config.beta2, state.step, config, "v");
}

Vec corrected_gamma(const OptimizerState& state, const RuntimeConfig& config) {
  return corrected(state.gamma, config.beta3, state.step, config, "gamma");
}

Vec program_delta(const UpdateRuleProgram& program, const OptimizerState& state,
                  std::span<const double> g, std::span<const double> w, double t, double T,
                  RngStream& rng, const RuntimeConfig& config) {
  const std::size_t size = g.size();
  std::vector<Vec> bank;
  bank.reserve(program.groups.size());

  auto broadcast = [size](double value) { return Vec(size, value); };
  auto scaled_w = [&](double scale) {
    Vec out(size);
    for (std::size_t i = 0; i < size; ++i) out[i] = scale * w[i];
    return out;
  };

  auto operand = [&](const Operand& op) -> Vec {
    Vec out;
    switch (op.kind) {
      case OperandKind::grad:
        out.assign(g.begin(), g.end());
        break;
      case OperandKind::grad2:
        out.resize(size);
        for (std::size_t i = 0; i < size; ++i) out[i] = g[i] * g[i];
        break;
      case OperandKind::grad3:
        out.resize(size);
        for (std::size_t i = 0; i < size; ++i) out[i] = g[i] * g[i] * g[i];
        break;
      case OperandKind::m:
        out = corrected_m(state, config);
        break;
      case OperandKind::v:
        out = corrected_v(state, config);
        break;
      case OperandKind::gamma:
        out = corrected_gamma(state, config);
        break;
      case OperandKind::sign_grad:
        out.resize(size);
        for (std::size_t i = 0; i < size; ++i) out[i] = sign_of(g[i]);
        break;
      case OperandKind::sign_m:
        out = corrected_m(state, config);
        for (double& e : out) e = sign_of(e);
        break;
      case OperandKind::one:
        out = broadcast(1.0);
        break;
      case OperandKind::two:
        out = broadcast(2.0);
        break;
      case OperandKind::noise:
        out = sample_noise(NoiseKind::eps, t, size, rng, config);
        break;
      case OperandKind::wd4:
        out = scaled_w(1e-4);
        break;
      case OperandKind::wd3:
        out = scaled_w(1e-3);
        break;
      case OperandKind::wd2:
        out = scaled_w(1e-2);
        break;
      case OperandKind::wd1:
        out = scaled_w(1e-1);
        break;
      case OperandKind::adam:
        out = scaled_by_rms(corrected_m(state, config), corrected_v(state, config), config.delta);
        break;
      case OperandKind::rmsprop:
        out = scaled_by_rms(g, corrected_v(state, config), config.delta);
        break;
      case OperandKind::linear_decay:
        out = broadcast(decay_value({DecayKind::linear, 0.0}, t, T));
        break;
      case OperandKind::cyclical_decay:
        out = broadcast(decay_value({DecayKind::cyclical, op.param}, t, T));
        break;
      case OperandKind::restart_decay:
        out = broadcast(decay_value({DecayKind::restart, op.param}, t, T));
        break;
      case OperandKind::annealed_noise:
        out = sample_noise(NoiseKind::eps_t, t, size, rng, config);
        break;
      case OperandKind::bank: {
        const int k = op.bank_index();
        if (k < 1 || k > static_cast<int>(bank.size())) {
          throw std::logic_error("bank reference out" + std::to_string(k) + " is not computed");
        }
        out = bank[static_cast<std::size_t>(k - 1)];
        break;
      }
    }
    require_finite(out, "in update rule");
    return out;
  };

  for (const Group& grp : program.groups) {
    const Vec a = operand(grp.op1);
    const Vec b = operand(grp.op2);
    const Vec ua = apply_unary(grp.u1, a, rng, config);
    const Vec ub = apply_unary(grp.u2, b, rng, config);
    bank.push_back(apply_binary(grp.b, ua, ub, config));
  }
  if (bank.empty()) throw std::invalid_argument("program has no groups");
  return std::move(bank.back());
}

Vec named_delta(const NamedOptimizerSpec& spec, const OptimizerState& state,
                std::span<const double> g, double t, double T, const RuntimeConfig& config) {
  switch (spec.family) {
    case OptimizerFamily::sgd:
      return Vec(g.begin(), g.end());
    case OptimizerFamily::momentum:
      if (!state.momentum_buf) throw std::logic_error("optimizer state has no momentum buffer");
      return *state.momentum_buf;
    case OptimizerFamily::rmsprop:
      return scaled_by_rms(g, corrected_v(state, config), config.delta);
    case OptimizerFamily::adam:
      return scaled_by_rms(corrected_m(state, config), corrected_v(state, config), config.delta);
    case OptimizerFamily::powersign:
    case OptimizerFamily::addsign: {
      const double f = decay_value(spec.internal_decay, t, T);
      const double alpha = spec.resolved_alpha();
      if (!(alpha > 0.0)) throw InvalidSpec("alpha must be positive");
      const Vec m_hat = corrected_m(state, config);
      Vec out(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double agreement = sign_of(g[i]) * sign_of(m_hat[i]);
        double scale = 0.0;
        if (spec.family == OptimizerFamily::powersign) {
          scale = alpha == std::numbers::e ? std::exp(f * agreement)
                                           : std::pow(alpha, f * agreement);
        } else {
          scale = alpha + f * agreement;
        }
        out[i] = scale * g[i];
      }
      return out;
    }
  }
  return Vec(g.begin(), g.end());
}

UpdateRuleProgram as_program(const NamedOptimizerSpec& spec) {
  const Operand g = kG;
  const Operand sign_g{OperandKind::sign_grad, 0.0};
  const Operand sign_m{OperandKind::sign_m, 0.0};
  const Operand c1{OperandKind::one, 0.0};
  const Operand c2{OperandKind::two, 0.0};
  const Operand m{OperandKind::m, 0.0};
  const Operand v{OperandKind::v, 0.0};
  auto out = [](int k) { return Operand::bank_ref(k); };

  switch (spec.family) {
    case OptimizerFamily::sgd:
      return {{group(g, g, Unary::id, Unary::id, Binary::left)}};
    case OptimizerFamily::rmsprop:
      return {{group(g, v, Unary::id, Unary::sqrt, Binary::div)}};
    case OptimizerFamily::adam:
      return {{group(m, v, Unary::id, Unary::sqrt, Binary::div)}};
    case OptimizerFamily::momentum:
      throw NotExpressible("momentum needs a velocity buffer that no operand provides");
    case OptimizerFamily::powersign:
    case OptimizerFamily::addsign:
      break;
  }

  const double alpha = spec.resolved_alpha();
  const bool power = spec.family == OptimizerFamily::powersign;
  const DecaySpec& decay = spec.internal_decay;

  if (power && alpha != std::numbers::e && alpha != 2.0) {
    throw NotExpressible("PowerSign base must be e or 2 to be expressible");
  }
  if (!power && alpha != 1.0 && alpha != 2.0) {
    throw NotExpressible("AddSign offset must be 1 or 2 to be expressible");
  }
  if (decay.kind == DecayKind::annealed_noise) {
    throw NotExpressible("noise is not a supported internal decay");
  }
  if (decay.kind == DecayKind::zero) {
    // f = 0: PowerSign reduces to g, AddSign to alpha * g.
    if (power || alpha == 1.0) return {{group(g, g, Unary::id, Unary::id, Binary::left)}};
    return {{group(c2, g, Unary::id, Unary::id, Binary::mul)}};
  }

  UpdateRuleProgram program;
  program.groups.push_back(group(sign_g, sign_m, Unary::id, Unary::id, Binary::mul));
  int agreement = 1;
  if (decay.kind != DecayKind::none) {
    program.groups.push_back(
        group(decay_operand(decay), out(1), Unary::id, Unary::id, Binary::mul));
    agreement = 2;
  }
  if (power) {
    if (alpha == std::numbers::e) {
      program.groups.push_back(group(out(agreement), g, Unary::exp, Unary::id, Binary::mul));
    } else {
      program.groups.push_back(group(c2, out(agreement), Unary::id, Unary::id, Binary::pow));
      program.groups.push_back(
          group(out(agreement + 1), g, Unary::id, Unary::id, Binary::mul));
    }
  } else {
    program.groups.push_back(
        group(alpha == 1.0 ? c1 : c2, out(agreement), Unary::id, Unary::id, Binary::add));
    program.groups.push_back(group(out(agreement + 1), g, Unary::id, Unary::id, Binary::mul));
  }
  return program;
}

ScheduleSpec parse_schedule(std::string_view id) {
  ScheduleSpec spec;
  if (id == "constant") {
    spec.kind = ScheduleKind::constant;
  } else if (id == "stepwise") {
    spec.kind = ScheduleKind::stepwise;
  } else if (id == "cosine") {
    spec.kind = ScheduleKind::cosine;
  } else if (id == "linear-cosine") {
    spec.kind = ScheduleKind::linear_cosine;
  } else if (id == "noisy-linear-cosine") {
    spec.kind = ScheduleKind::noisy_linear_cosine;
  } else if (id == "restart") {
    spec.kind = ScheduleKind::restart;
  } else {
    throw InvalidSpec("unknown schedule '" + std::string(id) + "'");
  }
  return spec;
}

std::string_view to_string(ScheduleKind kind) {
  switch (kind) {
    case ScheduleKind::constant: return "constant";
    case ScheduleKind::stepwise: return "stepwise";
    case ScheduleKind::cosine: return "cosine";
    case ScheduleKind::linear_cosine: return "linear-cosine";
    case ScheduleKind::noisy_linear_cosine: return "noisy-linear-cosine";
    case ScheduleKind::restart: return "restart";
  }
  return "?";
}

double lr_multiplier(const ScheduleSpec& spec, double t, double T, RngStream& rng,
                     const RuntimeConfig& config) {
  const DecaySpec cosine{DecayKind::cyclical, 0.5};
  const DecaySpec linear{DecayKind::linear, 0.0};
  switch (spec.kind) {
    case ScheduleKind::constant:
      return 1.0;
    case ScheduleKind::stepwise: {
      if (!(T > 0.0)) throw InvalidHorizon("schedule horizon T must be positive");
      double factor = 1.0;
      for (std::size_t i = 0; i < spec.boundaries.size() && i < spec.factors.size(); ++i) {
        if (t / T >= spec.boundaries[i]) factor = spec.factors[i];
      }
      return factor;
    }
    case ScheduleKind::cosine:
      return decay_value(cosine, t, T);
    case ScheduleKind::linear_cosine:
      return decay_value(linear, t, T) * decay_value(cosine, t, T);
    case ScheduleKind::noisy_linear_cosine: {
      const double noise = sample_noise(NoiseKind::eps_t, t, 1, rng, config).front();
      return (decay_value(linear, t, T) + noise) * decay_value(cosine, t, T) + 0.001;
    }
    case ScheduleKind::restart:
      return decay_value({DecayKind::restart, spec.restarts}, t, T);
  }
  return 1.0;
}

Optimizer::Optimizer(UpdateRule rule, std::size_t size, RuntimeConfig config, RngStream rng)
    : rule_(std::move(rule)),
      config_(config),
      state_(init_state(rule_, size, config_)),
      rng_(std::move(rng)) {
  config_.check();
}

Vec Optimizer::update(std::span<const double> g, std::span<const double> w, double t, double T) {
  advance_state(state_, g, config_);
  if (const auto* program = std::get_if<UpdateRuleProgram>(&rule_)) {
    return program_delta(*program, state_, g, w, t, T, rng_, config_);
  }
  return named_delta(std::get<NamedOptimizerSpec>(rule_), state_, g, t, T, config_);
}

void Optimizer::step(std::span<double> w, std::span<const double> g, double lr, double t,
                     double T) {
  const Vec u = update(g, w, t, T);
  for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * u[i];
}

}  // namespace optsearch
