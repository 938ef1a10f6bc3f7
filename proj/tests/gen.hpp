#pragma once

// Hand-rolled random generators for property tests.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "optsearch/dsl.hpp"

namespace testgen {

using optsearch::Binary;
using optsearch::Group;
using optsearch::Operand;
using optsearch::OperandKind;
using optsearch::Unary;
using optsearch::UpdateRuleProgram;

inline Operand random_base_operand(std::mt19937_64& rng) {
  static const std::vector<Operand> pool = [] {
    std::vector<Operand> ops;
    for (int k = 0; k <= int(OperandKind::rmsprop); ++k) ops.push_back({OperandKind(k), 0.0});
    ops.push_back({OperandKind::linear_decay, 0.0});
    ops.push_back(Operand::cyclical(0.5));
    ops.push_back(Operand::cyclical(1.0));
    ops.push_back(Operand::cyclical(2.5));
    ops.push_back(Operand::restart(10));
    ops.push_back(Operand::restart(20));
    ops.push_back({OperandKind::annealed_noise, 0.0});
    return ops;
  }();
  return pool[rng() % pool.size()];
}

/// A structurally valid program with 1..4 groups; bank references are
/// drawn with probability 1/3 where available.
inline UpdateRuleProgram random_program(std::mt19937_64& rng, bool allow_sigmoid = true) {
  const auto& unaries = optsearch::all_unaries();
  const auto& binaries = optsearch::all_binaries();
  UpdateRuleProgram p;
  const std::size_t n = 1 + rng() % optsearch::kMaxGroups;
  for (std::size_t i = 0; i < n; ++i) {
    auto operand = [&] {
      if (i > 0 && rng() % 3 == 0) return Operand::bank_ref(int(1 + rng() % i));
      return random_base_operand(rng);
    };
    auto unary = [&] {
      for (;;) {
        Unary u = unaries[rng() % unaries.size()];
        if (allow_sigmoid || u != Unary::sigmoid) return u;
      }
    };
    Group g;
    g.op1 = operand();
    g.op2 = operand();
    g.u1 = unary();
    g.u2 = unary();
    g.b = binaries[rng() % binaries.size()];
    p.groups.push_back(g);
  }
  return p;
}

inline std::string random_bytes(std::mt19937_64& rng, std::size_t max_len) {
  static const std::string alphabet = "gmv_12345outcdrl;; \t\nsqrexpidngaw.-+eE\x01\xff";
  std::string s(rng() % (max_len + 1), ' ');
  for (auto& c : s) {
    c = rng() % 4 == 0 ? char(rng() % 256) : alphabet[rng() % alphabet.size()];
  }
  return s;
}

/// Random text built from real tokens, mostly near-valid.
inline std::string random_token_soup(std::mt19937_64& rng) {
  static const std::vector<std::string> words = {
      "g", "g2", "m", "v", "out1", "out2", "out5", "out0", "cd", "cd2", "rd10", "rdx",
      "id", "exp", "sqrt", "sigmoid", "add", "mul", "left", "pow", ";", ";", "foo", "1e-3"};
  std::string s;
  const std::size_t n = rng() % 24;
  for (std::size_t i = 0; i < n; ++i) {
    if (i) s += ' ';
    s += words[rng() % words.size()];
  }
  return s;
}

/// Valid program text with at most one random edit (or none).
inline std::string mutate(std::string text, std::mt19937_64& rng) {
  if (text.empty()) return text;
  const std::size_t pos = rng() % text.size();
  switch (rng() % 5) {
    case 0: text.erase(pos, 1 + rng() % 4); break;
    case 1: text.insert(pos, 1, char(rng() % 256)); break;
    case 2: text[pos] = ";0 gx"[rng() % 5]; break;
    case 3: text += " ; out9 g id id left"; break;
    default: break;
  }
  return text;
}

}  // namespace testgen
