#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <variant>

#include "optsearch/dsl.hpp"
#include "optsearch/runtime.hpp"

namespace optsearch {

enum class OptimizerFamily { sgd, momentum, rmsprop, adam, powersign, addsign };

struct NamedOptimizerSpec {
  OptimizerFamily family = OptimizerFamily::sgd;
  /// Base of PowerSign / offset of AddSign. Unset means the family default
  /// (e for PowerSign, 1 for AddSign).
  std::optional<double> alpha;
  /// f(t) applied to sign(g)*sign(m).
  DecaySpec internal_decay;
  double momentum = 0.9;

  double resolved_alpha() const;

  friend bool operator==(const NamedOptimizerSpec&, const NamedOptimizerSpec&) = default;
};

/// A DSL program or a natively implemented optimizer.
using UpdateRule = std::variant<UpdateRuleProgram, NamedOptimizerSpec>;

/// Parses `sgd`, `momentum`, `rmsprop`, `adam`, `powersign[-ld|-cd|-rd<n>]`,
/// `addsign[-ld|-cd|-rd<n>]`. Throws UnknownOptimizer.
NamedOptimizerSpec parse_optimizer_id(std::string_view id);
std::string optimizer_id(const NamedOptimizerSpec& spec);

/// Accepts a named id or a DSL program.
UpdateRule parse_update_rule(std::string_view text);
std::string describe(const UpdateRule& rule);

/// Per-parameter optimizer memory. Vector slots are allocated only when the
/// rule reads them.
struct OptimizerState {
  std::optional<Vec> m;
  std::optional<Vec> v;
  std::optional<Vec> gamma;
  std::optional<Vec> momentum_buf;
  std::int64_t step = 0;
  bool counts_steps = false;
  double momentum = 0.9;  // coefficient for momentum_buf

  /// Allocated vector slots plus `step` when bias correction is tracked.
  std::set<StateSlot> slots() const;
  std::size_t vector_slot_count() const;
};

OptimizerState init_state(const UpdateRuleProgram& program, std::size_t size,
                          const RuntimeConfig& config = {});
OptimizerState init_state(const NamedOptimizerSpec& spec, std::size_t size,
                          const RuntimeConfig& config = {});
OptimizerState init_state(const UpdateRule& rule, std::size_t size,
                          const RuntimeConfig& config = {});

/// Absorbs the current gradient into every allocated slot and advances the
/// step counter. Call once per step, before computing the update.
void advance_state(OptimizerState& state, std::span<const double> g, const RuntimeConfig& config);

/// Bias-corrected reads (raw EMA when bias correction is off).
Vec corrected_m(const OptimizerState& state, const RuntimeConfig& config);
Vec corrected_v(const OptimizerState& state, const RuntimeConfig& config);
Vec corrected_gamma(const OptimizerState& state, const RuntimeConfig& config);

/// Evaluates the program's groups in order and returns the final output u
/// (the caller applies w <- w - lr * u). t is the training step and T the
/// horizon used by decay operands. Throws OverflowError.
Vec program_delta(const UpdateRuleProgram& program, const OptimizerState& state,
                  std::span<const double> g, std::span<const double> w, double t, double T,
                  RngStream& rng, const RuntimeConfig& config);

Vec named_delta(const NamedOptimizerSpec& spec, const OptimizerState& state,
                std::span<const double> g, double t, double T, const RuntimeConfig& config);

/// DSL program equivalent to `spec`. Throws NotExpressible (e.g. Momentum,
/// which needs a buffer the operand set does not provide).
UpdateRuleProgram as_program(const NamedOptimizerSpec& spec);

enum class ScheduleKind { constant, stepwise, cosine, linear_cosine, noisy_linear_cosine, restart };

struct ScheduleSpec {
  ScheduleKind kind = ScheduleKind::constant;
  double base_lr = 1.0;
  /// stepwise: multiplier becomes factors[i] once t/T reaches boundaries[i].
  std::vector<double> boundaries{0.5, 0.75};
  std::vector<double> factors{0.1, 0.01};
  /// restart: number of periods.
  double restarts = 10.0;
};

ScheduleSpec parse_schedule(std::string_view id);
std::string_view to_string(ScheduleKind kind);

/// Learning-rate multiplier at step t of T. Only noisy_linear_cosine draws
/// from `rng`.
double lr_multiplier(const ScheduleSpec& spec, double t, double T, RngStream& rng,
                     const RuntimeConfig& config = {});

/// A rule bound to its state and noise stream.
class Optimizer {
 public:
  Optimizer(UpdateRule rule, std::size_t size, RuntimeConfig config, RngStream rng);

  /// Advances state with g and returns u for step t of T.
  Vec update(std::span<const double> g, std::span<const double> w, double t, double T);
  /// w <- w - lr * u.
  void step(std::span<double> w, std::span<const double> g, double lr, double t, double T);

  const OptimizerState& state() const { return state_; }
  const UpdateRule& rule() const { return rule_; }
  const RuntimeConfig& config() const { return config_; }

 private:
  UpdateRule rule_;
  RuntimeConfig config_;
  OptimizerState state_;
  RngStream rng_;
};

}  // namespace optsearch
