#pragma once

#include <stdexcept>
#include <string>

namespace rp2 {

// Invalid argument supplied by the caller (labels, thresholds, empty inputs).
class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DimensionError : public InputError {
 public:
  using InputError::InputError;
};

// NaN or Inf produced inside a computation.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Transform or configuration parameters outside their valid domain.
class ParameterError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A black-box oracle failed to answer (transport error, protocol violation).
class OracleError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace rp2
