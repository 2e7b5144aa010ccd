#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace ssrseg {

// Shapes or arguments that break an operation's contract.
class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Hyperparameters, run configs and op parameters that cannot be satisfied.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed container files. Carries the byte offset where parsing failed.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " (at byte offset " + std::to_string(offset) + ")"),
        reason_(what),
        offset_(offset) {}

  const std::string& reason() const noexcept { return reason_; }
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::string reason_;
  std::size_t offset_;
};

// Checkpoint/model mismatch on load.
class LoadError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// File system failures, with the offending path in the message.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// The finite-difference oracle could not produce a trustworthy answer.
class OracleError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace ssrseg
