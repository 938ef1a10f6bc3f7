#pragma once

// Update-rule language. A program is 1-4 groups of five tokens
// (op1 op2 u1 u2 b); group i computes b(u1(op1), u2(op2)) and appends the
// result to the operand bank as out<i>. The last group's output is the
// update u, applied as w <- w - lr * u.

#include <cstdint>
#include <set>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace optsearch {

inline constexpr std::size_t kMaxGroups = 4;

enum class OperandKind {
  grad,            // g
  grad2,           // g2
  grad3,           // g3
  m,               // bias-corrected EMA of g
  v,               // bias-corrected EMA of g^2
  gamma,           // bias-corrected EMA of g^3
  sign_grad,       // sign_g
  sign_m,          // sign_m
  one,             // c1
  two,             // c2
  noise,           // eps
  wd4,             // 1e-4 w
  wd3,             // 1e-3 w
  wd2,             // 1e-2 w
  wd1,             // 1e-1 w
  adam,            // m / (sqrt(v) + delta)
  rmsprop,         // g / (sqrt(v) + delta)
  linear_decay,    // ld
  cyclical_decay,  // cd<n>, `cd` alone is n = 0.5
  restart_decay,   // rd<n>
  annealed_noise,  // eps_t
  bank,            // out<k>
};

/// `param` carries n for cd/rd and k for out<k>; it is zero otherwise.
struct Operand {
  OperandKind kind = OperandKind::grad;
  double param = 0.0;

  static Operand bank_ref(int k) { return {OperandKind::bank, double(k)}; }
  static Operand cyclical(double n) { return {OperandKind::cyclical_decay, n}; }
  static Operand restart(int n) { return {OperandKind::restart_decay, double(n)}; }

  bool is_bank() const { return kind == OperandKind::bank; }
  int bank_index() const { return static_cast<int>(param); }

  friend bool operator==(const Operand&, const Operand&) = default;
  friend auto operator<=>(const Operand&, const Operand&) = default;
};

enum class Unary { id, neg, exp, log, sqrt, clip5, clip4, clip3, drop1, drop3, drop5, sign, sigmoid };

enum class Binary { add, sub, mul, div, pow, left };

using Token = std::variant<Operand, Unary, Binary>;

struct Group {
  Operand op1;
  Operand op2;
  Unary u1 = Unary::id;
  Unary u2 = Unary::id;
  Binary b = Binary::left;

  friend bool operator==(const Group&, const Group&) = default;
};

struct UpdateRuleProgram {
  std::vector<Group> groups;

  friend bool operator==(const UpdateRuleProgram&, const UpdateRuleProgram&) = default;
};

/// Sampling/validation constraints. Bank references are always allowed and
/// are not listed in `operands`.
struct ConstraintSet {
  bool distinct_operands = false;
  bool no_final_add = false;
  bool must_reuse_output = false;
  std::vector<Operand> operands;
  std::vector<Unary> unaries;
  std::vector<Binary> binaries;

  /// The default search vocabulary: every operand and function of the base
  /// language (decays ld, cd, cd1, rd10, rd20, eps_t), without `sigmoid`.
  static ConstraintSet defaults();
  /// Same vocabulary plus the `sigmoid` extension.
  static ConstraintSet with_extensions();

  bool allows(const Operand& op) const;
  bool allows(Unary u) const;
  bool allows(Binary b) const;
};

enum class ViolationKind {
  duplicate_operands,
  final_add,
  missing_reuse,
  disallowed_operand,
  disallowed_unary,
  disallowed_binary,
  bad_bank_reference,
  bad_group_count,
};

struct Violation {
  std::size_t group = 0;  // 1-based; 0 for whole-program violations
  ViolationKind kind;
  std::string message;
};

struct ValidationReport {
  std::vector<Violation> violations;

  bool ok() const { return violations.empty(); }
  bool has(ViolationKind kind) const;
};

enum class StateSlot { m, v, gamma, step };

std::string_view to_string(Unary u);
std::string_view to_string(Binary b);
std::string_view to_string(StateSlot s);
std::string to_string(const Operand& op);
std::string to_string(const Token& t);

const std::vector<Unary>& all_unaries();
const std::vector<Binary>& all_binaries();

/// Parses a single token of the given kind; throws DslError(unknown_token).
Operand parse_operand(std::string_view text);
Unary parse_unary(std::string_view text);
Binary parse_binary(std::string_view text);

UpdateRuleProgram parse_program(std::string_view text);
std::string format_program(const UpdateRuleProgram& program);

ValidationReport validate(const UpdateRuleProgram& program, const ConstraintSet& constraints);

/// EMA slots (and the step counter used for bias correction) that the
/// program's operands read.
std::set<StateSlot> required_state(const UpdateRuleProgram& program);

}  // namespace optsearch
