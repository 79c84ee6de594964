#pragma once

#include <stdexcept>
#include <string>

namespace mmdit {

// Base of every error the library throws. Each subclass maps onto one
// failure family so callers (and the CLI exit codes) can dispatch on type.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// A precondition of an operation was violated (empty mask, non-scalar loss).
class ContractError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class GeometryError : public Error {
 public:
  using Error::Error;
};

class DegeneracyError : public GeometryError {
 public:
  using GeometryError::GeometryError;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Non-finite loss during training.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace mmdit
