#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "optsearch/dsl.hpp"

namespace optsearch {

/// A fixed-length sequence of categorical choices with prefix-dependent masks.
class ActionSpace {
 public:
  virtual ~ActionSpace() = default;

  virtual std::size_t length() const = 0;
  virtual std::size_t vocab_size(std::size_t step) const = 0;
  /// Writes allowed[i] for every token of `step` given the choices so far.
  /// Throws EmptySupport when nothing is allowed.
  virtual void mask(std::size_t step, std::span<const std::size_t> prefix,
                    std::vector<char>& allowed) const = 0;

  std::vector<std::size_t> vocab_sizes() const;
};

/// Every token allowed at every step.
class FreeSpace final : public ActionSpace {
 public:
  explicit FreeSpace(std::vector<std::size_t> sizes) : sizes_(std::move(sizes)) {}

  std::size_t length() const override { return sizes_.size(); }
  std::size_t vocab_size(std::size_t step) const override { return sizes_.at(step); }
  void mask(std::size_t step, std::span<const std::size_t> prefix,
            std::vector<char>& allowed) const override;

 private:
  std::vector<std::size_t> sizes_;
};

enum class StepRole { op1, op2, u1, u2, binary };

/// Token sequences of 5 * n_groups choices that decode to DSL programs.
/// Operand steps of group g (0-based) offer the allowed base operands
/// followed by out1..out<g>.
class SearchSpace final : public ActionSpace {
 public:
  SearchSpace(ConstraintSet constraints, std::size_t n_groups);

  std::size_t length() const override { return 5 * n_groups_; }
  std::size_t vocab_size(std::size_t step) const override;
  void mask(std::size_t step, std::span<const std::size_t> prefix,
            std::vector<char>& allowed) const override;

  std::size_t n_groups() const { return n_groups_; }
  const ConstraintSet& constraints() const { return constraints_; }
  static StepRole role(std::size_t step) { return static_cast<StepRole>(step % 5); }
  static std::size_t group_of(std::size_t step) { return step / 5; }

  Token token(std::size_t step, std::size_t index) const;
  /// Index of `token` at `step`; throws InvalidSpec when it is not offered.
  std::size_t index_of(std::size_t step, const Token& token) const;

  UpdateRuleProgram decode(std::span<const std::size_t> tokens) const;
  std::vector<std::size_t> encode(const UpdateRuleProgram& program) const;

 private:
  Operand operand(std::size_t group, std::size_t index) const;

  ConstraintSet constraints_;
  std::size_t n_groups_;
};

}  // namespace optsearch
