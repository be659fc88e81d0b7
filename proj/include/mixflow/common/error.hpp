#pragma once

#include <stdexcept>
#include <string>

namespace mixflow {

// Exception hierarchy. The CLI maps each family onto a process exit code:
// ValidationError -> 2, NumericalError -> 3, IoError -> 4.

class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Mismatched tensor or point-set dimensions.
class ShapeError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace mixflow
