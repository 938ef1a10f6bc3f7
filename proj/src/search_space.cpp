#include "optsearch/search_space.hpp"

#include <algorithm>
#include <string>

#include "optsearch/errors.hpp"

namespace optsearch {

std::vector<std::size_t> ActionSpace::vocab_sizes() const {
  std::vector<std::size_t> sizes(length());
  for (std::size_t k = 0; k < sizes.size(); ++k) sizes[k] = vocab_size(k);
  return sizes;
}

void FreeSpace::mask(std::size_t step, std::span<const std::size_t>,
                     std::vector<char>& allowed) const {
  allowed.assign(vocab_size(step), 1);
  if (allowed.empty()) throw EmptySupport("step " + std::to_string(step) + " has no tokens");
}

SearchSpace::SearchSpace(ConstraintSet constraints, std::size_t n_groups)
    : constraints_(std::move(constraints)), n_groups_(n_groups) {
  if (n_groups_ < 1 || n_groups_ > kMaxGroups) {
    throw InvalidSpec("n_groups must be in [1, " + std::to_string(kMaxGroups) + "]");
  }
  if (constraints_.unaries.empty() || constraints_.binaries.empty()) {
    throw EmptySupport("constraint allow-lists must be non-empty");
  }
  if (constraints_.operands.empty()) throw EmptySupport("operand allow-list is empty");
}

std::size_t SearchSpace::vocab_size(std::size_t step) const {
  switch (role(step)) {
    case StepRole::op1:
    case StepRole::op2:
      return constraints_.operands.size() + group_of(step);
    case StepRole::u1:
    case StepRole::u2:
      return constraints_.unaries.size();
    case StepRole::binary:
      return constraints_.binaries.size();
  }
  return 0;
}

Operand SearchSpace::operand(std::size_t group, std::size_t index) const {
  const auto& base = constraints_.operands;
  if (index < base.size()) return base[index];
  const std::size_t k = index - base.size() + 1;
  if (k > group) throw InvalidSpec("operand index out of range");
  return Operand::bank_ref(static_cast<int>(k));
}

Token SearchSpace::token(std::size_t step, std::size_t index) const {
  switch (role(step)) {
    case StepRole::op1:
    case StepRole::op2:
      return operand(group_of(step), index);
    case StepRole::u1:
    case StepRole::u2:
      return constraints_.unaries.at(index);
    case StepRole::binary:
      return constraints_.binaries.at(index);
  }
  return Operand{};
}

std::size_t SearchSpace::index_of(std::size_t step, const Token& tok) const {
  for (std::size_t i = 0; i < vocab_size(step); ++i) {
    if (token(step, i) == tok) return i;
  }
  throw InvalidSpec("token '" + to_string(tok) + "' is not offered at step " +
                    std::to_string(step));
}

void SearchSpace::mask(std::size_t step, std::span<const std::size_t> prefix,
                       std::vector<char>& allowed) const {
  allowed.assign(vocab_size(step), 1);
  const std::size_t group = group_of(step);
  const std::size_t base = constraints_.operands.size();

  if (role(step) == StepRole::op2) {
    const std::size_t first = prefix[step - 1];
    if (constraints_.distinct_operands) allowed[first] = 0;
    // A later group must read some earlier output: if op1 did not, op2 has to.
    if (constraints_.must_reuse_output && group > 0 && first < base) {
      std::fill(allowed.begin(), allowed.begin() + static_cast<std::ptrdiff_t>(base), 0);
    }
  } else if (role(step) == StepRole::binary && group + 1 == n_groups_ &&
             constraints_.no_final_add) {
    const auto& bins = constraints_.binaries;
    const auto it = std::find(bins.begin(), bins.end(), Binary::add);
    if (it != bins.end()) allowed[static_cast<std::size_t>(it - bins.begin())] = 0;
  }

  if (std::none_of(allowed.begin(), allowed.end(), [](char a) { return a != 0; })) {
    throw EmptySupport("constraints forbid every token at step " + std::to_string(step));
  }
}

UpdateRuleProgram SearchSpace::decode(std::span<const std::size_t> tokens) const {
  if (tokens.size() != length()) throw InvalidSpec("token sequence has the wrong length");
  UpdateRuleProgram program;
  for (std::size_t g = 0; g < n_groups_; ++g) {
    const std::size_t s = 5 * g;
    Group group;
    group.op1 = operand(g, tokens[s]);
    group.op2 = operand(g, tokens[s + 1]);
    group.u1 = constraints_.unaries.at(tokens[s + 2]);
    group.u2 = constraints_.unaries.at(tokens[s + 3]);
    group.b = constraints_.binaries.at(tokens[s + 4]);
    program.groups.push_back(group);
  }
  return program;
}

std::vector<std::size_t> SearchSpace::encode(const UpdateRuleProgram& program) const {
  if (program.groups.size() != n_groups_) {
    throw InvalidSpec("program has " + std::to_string(program.groups.size()) +
                      " groups, search space has " + std::to_string(n_groups_));
  }
  std::vector<std::size_t> tokens;
  for (std::size_t g = 0; g < n_groups_; ++g) {
    const Group& group = program.groups[g];
    const std::size_t s = 5 * g;
    tokens.push_back(index_of(s, group.op1));
    tokens.push_back(index_of(s + 1, group.op2));
    tokens.push_back(index_of(s + 2, group.u1));
    tokens.push_back(index_of(s + 3, group.u2));
    tokens.push_back(index_of(s + 4, group.b));
  }
  return tokens;
}

}  // namespace optsearch
