#pragma once

#include <stdexcept>
#include <string>

namespace dosediff {

// Thrown when a caller violates a documented precondition.
class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Thrown when training produces a non-finite loss.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Thrown by phantom generation when geometry placement fails after retries.
class GenerationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// File-format and persistence failures, tagged so callers can distinguish them.
class IoError : public std::runtime_error {
 public:
  enum class Kind {
    OpenFailed,
    BadMagic,
    BadVersion,
    Truncated,
    Malformed,
    DuplicateName,
    DigestMismatch,
  };

  IoError(Kind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

}  // namespace dosediff

#define DD_CHECK(cond, msg)                              \
  do {                                                   \
    if (!(cond)) {                                       \
      throw ::dosediff::ContractError(std::string(msg)); \
    }                                                    \
  } while (0)
