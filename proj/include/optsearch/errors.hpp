#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace optsearch {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class DslErrc {
  empty_program,
  unknown_token,
  wrong_arity,
  forward_bank_reference,
  too_many_groups,
};

/// Parse failure. `token_index` counts tokens from 0 across the whole
/// string; `offset` is the byte offset of the offending token.
class DslError : public Error {
 public:
  DslError(DslErrc code, std::string message, std::string token = {},
           std::size_t token_index = 0, std::size_t offset = 0)
      : Error(std::move(message)),
        code_(code),
        token_(std::move(token)),
        token_index_(token_index),
        offset_(offset) {}

  DslErrc code() const noexcept { return code_; }
  const std::string& token() const noexcept { return token_; }
  std::size_t token_index() const noexcept { return token_index_; }
  std::size_t offset() const noexcept { return offset_; }

 private:
  DslErrc code_;
  std::string token_;
  std::size_t token_index_;
  std::size_t offset_;
};

/// A rule or schedule produced a non-finite value.
class OverflowError : public Error {
 public:
  using Error::Error;
};

class InvalidHorizon : public Error {
 public:
  using Error::Error;
};

class NotExpressible : public Error {
 public:
  using Error::Error;
};

class InvalidSpec : public Error {
 public:
  using Error::Error;
};

/// Training produced non-finite parameters, loss, gradient or metric.
class DivergedError : public Error {
 public:
  using Error::Error;
};

class EmptySupport : public Error {
 public:
  using Error::Error;
};

class NonFiniteGradient : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class WorkerPoolFailure : public Error {
 public:
  using Error::Error;
};

class UnknownOptimizer : public Error {
 public:
  using Error::Error;
};

}  // namespace optsearch
