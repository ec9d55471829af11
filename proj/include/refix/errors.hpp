#pragma once

#include <stdexcept>
#include <string>

namespace refix {

/// Precondition violated by the caller (bad shape, bad parameter, bad config).
class InvalidInput : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Input data on disk is missing, malformed or inconsistent.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A computation produced non-finite values (e.g. a diverging training run).
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A registered external component failed. Callers may catch this and fall
/// back to the built-in implementation.
class ExternalEstimatorError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace refix
