#include "optsearch/dsl.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <utility>

#include "optsearch/errors.hpp"

namespace optsearch {

namespace {

struct NamedOperand {
  std::string_view name;
  OperandKind kind;
};

// Operands spelled by a fixed name. cd<n>, rd<n> and out<k> are handled
// separately because they carry a number.
constexpr std::array<NamedOperand, 20> kFixedOperands{{
    {"g", OperandKind::grad},
    {"g2", OperandKind::grad2},
    {"g3", OperandKind::grad3},
    {"m", OperandKind::m},
    {"v", OperandKind::v},
    {"gamma", OperandKind::gamma},
    {"sign_g", OperandKind::sign_grad},
    {"sign_m", OperandKind::sign_m},
    {"c1", OperandKind::one},
    {"c2", OperandKind::two},
    {"eps", OperandKind::noise},
    {"wd4", OperandKind::wd4},
    {"wd3", OperandKind::wd3},
    {"wd2", OperandKind::wd2},
    {"wd1", OperandKind::wd1},
    {"adam", OperandKind::adam},
    {"rmsprop", OperandKind::rmsprop},
    {"ld", OperandKind::linear_decay},
    {"cd", OperandKind::cyclical_decay},
    {"eps_t", OperandKind::annealed_noise},
}};

constexpr std::array<std::pair<std::string_view, Unary>, 13> kUnaries{{
    {"id", Unary::id},
    {"neg", Unary::neg},
    {"exp", Unary::exp},
    {"log", Unary::log},
    {"sqrt", Unary::sqrt},
    {"clip5", Unary::clip5},
    {"clip4", Unary::clip4},
    {"clip3", Unary::clip3},
    {"drop1", Unary::drop1},
    {"drop3", Unary::drop3},
    {"drop5", Unary::drop5},
    {"sign", Unary::sign},
    {"sigmoid", Unary::sigmoid},
}};

constexpr std::array<std::pair<std::string_view, Binary>, 6> kBinaries{{
    {"add", Binary::add},
    {"sub", Binary::sub},
    {"mul", Binary::mul},
    {"div", Binary::div},
    {"pow", Binary::pow},
    {"left", Binary::left},
}};

constexpr double kDefaultCyclicalPeriods = 0.5;

DslError unknown(std::string_view text, std::string_view what) {
  return DslError(DslErrc::unknown_token,
                  "unknown " + std::string(what) + " token '" + std::string(text) + "'",
                  std::string(text));
}

// Positive integer without sign or leading zeros.
bool parse_index(std::string_view digits, int& out) {
  if (digits.empty() || digits.front() == '0') return false;
  if (!std::all_of(digits.begin(), digits.end(), [](char c) { return c >= '0' && c <= '9'; })) {
    return false;
  }
  auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), out);
  return ec == std::errc() && ptr == digits.data() + digits.size() && out >= 1;
}

bool parse_positive(std::string_view digits, double& out) {
  if (digits.empty()) return false;
  // from_chars accepts "inf"/"nan"; only plain decimal spellings are tokens.
  if (!std::all_of(digits.begin(), digits.end(),
                   [](char c) { return (c >= '0' && c <= '9') || c == '.'; })) {
    return false;
  }
  auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), out);
  return ec == std::errc() && ptr == digits.data() + digits.size() && std::isfinite(out) &&
         out > 0.0;
}

std::string format_number(double x) {
  std::array<char, 64> buf{};
  auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), x);
  return std::string(buf.data(), ptr);
}

struct RawToken {
  std::string_view text;
  std::size_t offset;
};

}  // namespace

std::string_view to_string(Unary u) {
  for (const auto& [name, value] : kUnaries) {
    if (value == u) return name;
  }
  return "?";
}

std::string_view to_string(Binary b) {
  for (const auto& [name, value] : kBinaries) {
    if (value == b) return name;
  }
  return "?";
}

std::string_view to_string(StateSlot s) {
  switch (s) {
    case StateSlot::m: return "m";
    case StateSlot::v: return "v";
    case StateSlot::gamma: return "gamma";
    case StateSlot::step: return "step";
  }
  return "?";
}

std::string to_string(const Operand& op) {
  switch (op.kind) {
    case OperandKind::bank:
      return "out" + std::to_string(op.bank_index());
    case OperandKind::restart_decay:
      return "rd" + std::to_string(static_cast<long long>(op.param));
    case OperandKind::cyclical_decay:
      if (op.param == kDefaultCyclicalPeriods) return "cd";
      return "cd" + format_number(op.param);
    default:
      for (const auto& entry : kFixedOperands) {
        if (entry.kind == op.kind) return std::string(entry.name);
      }
  }
  return "?";
}

std::string to_string(const Token& t) {
  return std::visit(
      [](const auto& value) -> std::string {
        using T = std::decay_t<decltype(value)>;
        if constexpr (std::is_same_v<T, Operand>) {
          return to_string(value);
        } else {
          return std::string(to_string(value));
        }
      },
      t);
}

const std::vector<Unary>& all_unaries() {
  static const std::vector<Unary> all = [] {
    std::vector<Unary> out;
    for (const auto& entry : kUnaries) out.push_back(entry.second);
    return out;
  }();
  return all;
}

const std::vector<Binary>& all_binaries() {
  static const std::vector<Binary> all = [] {
    std::vector<Binary> out;
    for (const auto& entry : kBinaries) out.push_back(entry.second);
    return out;
  }();
  return all;
}

Operand parse_operand(std::string_view text) {
  for (const auto& entry : kFixedOperands) {
    if (entry.name == text) {
      Operand op{entry.kind, 0.0};
      if (entry.kind == OperandKind::cyclical_decay) op.param = kDefaultCyclicalPeriods;
      return op;
    }
  }
  if (text.starts_with("out")) {
    int k = 0;
    if (parse_index(text.substr(3), k)) return Operand::bank_ref(k);
  } else if (text.starts_with("rd")) {
    int n = 0;
    if (parse_index(text.substr(2), n)) return Operand::restart(n);
  } else if (text.starts_with("cd")) {
    double n = 0.0;
    if (parse_positive(text.substr(2), n)) return Operand::cyclical(n);
  }
  throw unknown(text, "operand");
}

Unary parse_unary(std::string_view text) {
  for (const auto& [name, value] : kUnaries) {
    if (name == text) return value;
  }
  throw unknown(text, "unary");
}

Binary parse_binary(std::string_view text) {
  for (const auto& [name, value] : kBinaries) {
    if (name == text) return value;
  }
  throw unknown(text, "binary");
}

UpdateRuleProgram parse_program(std::string_view text) {
  // Split into groups on ';' and tokens on whitespace, remembering offsets
  // for diagnostics.
  std::vector<std::vector<RawToken>> groups(1);
  std::vector<std::size_t> group_offsets{0};
  std::size_t i = 0;
  while (i < text.size()) {
    const char c = text[i];
    if (c == ';') {
      groups.emplace_back();
      group_offsets.push_back(i + 1);
      ++i;
    } else if (c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v') {
      ++i;
    } else {
      std::size_t j = i;
      while (j < text.size() && text[j] != ';' && text[j] != ' ' && text[j] != '\t' &&
             text[j] != '\n' && text[j] != '\r' && text[j] != '\f' && text[j] != '\v') {
        ++j;
      }
      groups.back().push_back({text.substr(i, j - i), i});
      i = j;
    }
  }

  if (groups.size() == 1 && groups.front().empty()) {
    throw DslError(DslErrc::empty_program, "empty program");
  }

  UpdateRuleProgram program;
  std::size_t token_index = 0;
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    const auto& raw = groups[gi];
    if (gi >= kMaxGroups) {
      const std::size_t offset = raw.empty() ? group_offsets[gi] : raw.front().offset;
      throw DslError(DslErrc::too_many_groups,
                     "too many groups: at most " + std::to_string(kMaxGroups) + " allowed",
                     raw.empty() ? std::string() : std::string(raw.front().text), token_index,
                     offset);
    }
    if (raw.size() != 5) {
      const std::size_t offset = raw.size() > 5 ? raw[5].offset : group_offsets[gi];
      throw DslError(DslErrc::wrong_arity,
                     "group " + std::to_string(gi + 1) + " has " + std::to_string(raw.size()) +
                         " tokens, expected 5",
                     raw.size() > 5 ? std::string(raw[5].text) : std::string(),
                     token_index + std::min<std::size_t>(raw.size(), 5), offset);
    }
    auto annotate = [&](std::size_t k, auto&& parse) {
      try {
        return parse(raw[k].text);
      } catch (const DslError& e) {
        throw DslError(e.code(),
                       std::string(e.what()) + " at token " + std::to_string(token_index + k) +
                           " (offset " + std::to_string(raw[k].offset) + ")",
                       std::string(raw[k].text), token_index + k, raw[k].offset);
      }
    };
    Group group;
    group.op1 = annotate(0, parse_operand);
    group.op2 = annotate(1, parse_operand);
    group.u1 = annotate(2, parse_unary);
    group.u2 = annotate(3, parse_unary);
    group.b = annotate(4, parse_binary);
    for (std::size_t k = 0; k < 2; ++k) {
      const Operand& op = k == 0 ? group.op1 : group.op2;
      if (op.is_bank() && op.bank_index() > static_cast<int>(gi)) {
        throw DslError(DslErrc::forward_bank_reference,
                       "'" + std::string(raw[k].text) + "' in group " + std::to_string(gi + 1) +
                           " refers to an output that is not yet computed (token " +
                           std::to_string(token_index + k) + ", offset " +
                           std::to_string(raw[k].offset) + ")",
                       std::string(raw[k].text), token_index + k, raw[k].offset);
      }
    }
    program.groups.push_back(group);
    token_index += 5;
  }
  return program;
}

std::string format_program(const UpdateRuleProgram& program) {
  std::string out;
  for (std::size_t i = 0; i < program.groups.size(); ++i) {
    const Group& g = program.groups[i];
    if (i > 0) out += " ; ";
    out += to_string(g.op1);
    out += ' ';
    out += to_string(g.op2);
    out += ' ';
    out += to_string(g.u1);
    out += ' ';
    out += to_string(g.u2);
    out += ' ';
    out += to_string(g.b);
  }
  return out;
}

ConstraintSet ConstraintSet::defaults() {
  ConstraintSet c;
  for (OperandKind kind :
       {OperandKind::grad, OperandKind::grad2, OperandKind::grad3, OperandKind::m, OperandKind::v,
        OperandKind::gamma, OperandKind::sign_grad, OperandKind::sign_m, OperandKind::one,
        OperandKind::two, OperandKind::noise, OperandKind::wd4, OperandKind::wd3,
        OperandKind::wd2, OperandKind::wd1, OperandKind::adam, OperandKind::rmsprop,
        OperandKind::linear_decay}) {
    c.operands.push_back({kind, 0.0});
  }
  c.operands.push_back(Operand::cyclical(kDefaultCyclicalPeriods));
  c.operands.push_back(Operand::cyclical(1.0));
  c.operands.push_back(Operand::restart(10));
  c.operands.push_back(Operand::restart(20));
  c.operands.push_back({OperandKind::annealed_noise, 0.0});
  for (Unary u : all_unaries()) {
    if (u != Unary::sigmoid) c.unaries.push_back(u);
  }
  c.binaries = all_binaries();
  return c;
}

ConstraintSet ConstraintSet::with_extensions() {
  ConstraintSet c = defaults();
  c.unaries.push_back(Unary::sigmoid);
  return c;
}

bool ConstraintSet::allows(const Operand& op) const {
  return op.is_bank() || std::find(operands.begin(), operands.end(), op) != operands.end();
}

bool ConstraintSet::allows(Unary u) const {
  return std::find(unaries.begin(), unaries.end(), u) != unaries.end();
}

bool ConstraintSet::allows(Binary b) const {
  return std::find(binaries.begin(), binaries.end(), b) != binaries.end();
}

bool ValidationReport::has(ViolationKind kind) const {
  return std::any_of(violations.begin(), violations.end(),
                     [kind](const Violation& v) { return v.kind == kind; });
}

ValidationReport validate(const UpdateRuleProgram& program, const ConstraintSet& constraints) {
  ValidationReport report;
  auto add = [&](std::size_t group, ViolationKind kind, std::string message) {
    report.violations.push_back({group, kind, std::move(message)});
  };

  const std::size_t n = program.groups.size();
  if (n == 0 || n > kMaxGroups) {
    add(0, ViolationKind::bad_group_count,
        "program has " + std::to_string(n) + " groups, expected 1-" + std::to_string(kMaxGroups));
  }

  for (std::size_t i = 0; i < n; ++i) {
    const Group& g = program.groups[i];
    const std::size_t gi = i + 1;
    for (const Operand* op : {&g.op1, &g.op2}) {
      if (op->is_bank()) {
        if (op->bank_index() < 1 || op->bank_index() >= static_cast<int>(gi)) {
          add(gi, ViolationKind::bad_bank_reference,
              "group " + std::to_string(gi) + ": " + to_string(*op) +
                  " is not a previously computed output");
        }
      } else if (!constraints.allows(*op)) {
        add(gi, ViolationKind::disallowed_operand,
            "group " + std::to_string(gi) + ": operand " + to_string(*op) + " is not allowed");
      }
    }
    for (Unary u : {g.u1, g.u2}) {
      if (!constraints.allows(u)) {
        add(gi, ViolationKind::disallowed_unary,
            "group " + std::to_string(gi) + ": unary " + std::string(to_string(u)) +
                " is not allowed");
      }
    }
    if (!constraints.allows(g.b)) {
      add(gi, ViolationKind::disallowed_binary,
          "group " + std::to_string(gi) + ": binary " + std::string(to_string(g.b)) +
              " is not allowed");
    }
    if (constraints.distinct_operands && g.op1 == g.op2) {
      add(gi, ViolationKind::duplicate_operands,
          "group " + std::to_string(gi) + ": op1 == op2 (" + to_string(g.op1) + ")");
    }
    if (constraints.must_reuse_output && gi > 1 && !g.op1.is_bank() && !g.op2.is_bank()) {
      add(gi, ViolationKind::missing_reuse,
          "group " + std::to_string(gi) + ": does not reference a previous output");
    }
  }
  if (constraints.no_final_add && n > 0 && program.groups.back().b == Binary::add) {
    add(n, ViolationKind::final_add, "final binary is add");
  }
  return report;
}

std::set<StateSlot> required_state(const UpdateRuleProgram& program) {
  std::set<StateSlot> slots;
  for (const Group& g : program.groups) {
    for (const Operand* op : {&g.op1, &g.op2}) {
      switch (op->kind) {
        case OperandKind::m:
        case OperandKind::sign_m:
          slots.insert(StateSlot::m);
          break;
        case OperandKind::v:
        case OperandKind::rmsprop:
          slots.insert(StateSlot::v);
          break;
        case OperandKind::gamma:
          slots.insert(StateSlot::gamma);
          break;
        case OperandKind::adam:
          slots.insert(StateSlot::m);
          slots.insert(StateSlot::v);
          break;
        default:
          break;
      }
    }
  }
  if (!slots.empty()) slots.insert(StateSlot::step);
  return slots;
}

}  // namespace optsearch
