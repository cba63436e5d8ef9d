#pragma once

#include <stdexcept>
#include <string>

namespace convbert {

// Base of every error this library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shapes or extents that do not line up.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Hyperparameters that violate a structural invariant (odd k, divisibility).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Bad user data: token ids out of range, malformed files, tiny corpora.
class InputError : public Error {
 public:
  using Error::Error;
};

// Caller broke an API precondition (non-scalar loss, n == 0).
class ContractError : public Error {
 public:
  using Error::Error;
};

// A numeric evaluation produced a non-finite value.
class EvaluationError : public Error {
 public:
  using Error::Error;
};

}  // namespace convbert
