#pragma once

#include <stdexcept>
#include <string>

namespace guided_attn {

// Malformed arguments, shapes or configuration (exit code 1 at the CLI).
class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Inputs that are well-formed but unusable: empty masks, missing files,
// corrupt checkpoints, single-class label sets (exit code 2).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite values or other numerical breakdown (exit code 3).
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace guided_attn
