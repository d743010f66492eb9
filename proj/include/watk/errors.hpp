#pragma once

#include <stdexcept>
#include <string>

namespace watk {

/// Bad user input: malformed files, invalid parameters, precondition
/// violations. The CLI maps these to exit status 1.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Checkpoint or tensor-container problems.
class ModelError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

/// Internal consistency failure (a checked mathematical invariant did not
/// hold). Exit status 2.
class InternalError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

}  // namespace watk
