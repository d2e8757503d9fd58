#pragma once

#include <stdexcept>
#include <string>

namespace biasedit {

// Caller broke a documented precondition (wrong rank, empty input, ...).
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Operand shapes do not agree with the operator.
class ShapeError : public ContractViolation {
 public:
  using ContractViolation::ContractViolation;
};

// Object used in the wrong lifecycle state (e.g. backward on an unevaluated graph).
class StateError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Malformed or inconsistent input data (instance files, lexicons, checkpoints).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A non-finite value appeared where the numerics require finite reals.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace biasedit
