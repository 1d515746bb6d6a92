#pragma once

#include <stdexcept>
#include <string>

namespace nnleak {

// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Value outside the IEEE-754 "usual case" (subnormal, NaN, infinity, or an
// exponent that leaves [1, 254]).
class OutOfModelError : public Error {
 public:
  using Error::Error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

// Malformed, truncated, or version-mismatched trace/model/config file.
class FormatError : public Error {
 public:
  using Error::Error;
};

class EmptyGridError : public Error {
 public:
  using Error::Error;
};

// Correlation is undefined (constant hypothesis vector, too few traces).
class DegenerateError : public Error {
 public:
  using Error::Error;
};

// The monotonic leak-sample window ran out before every value was placed.
class WindowExhaustedError : public Error {
 public:
  using Error::Error;
};

// Config validation failure; `field()` names the offending entry.
class ConfigError : public Error {
 public:
  ConfigError(std::string field, const std::string& what)
      : Error(field + ": " + what), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

// Reconstructed layer output drifted too far from the observed leakage to
// keep propagating into the next layer.
class PropagatedError : public Error {
 public:
  using Error::Error;
};

}  // namespace nnleak
