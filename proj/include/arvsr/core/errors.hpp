#pragma once

#include <stdexcept>
#include <string>

namespace arvsr {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operand shapes do not conform, or an argument is out of its valid range.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// NaN or Inf produced by an operation.
class NumericalError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed or missing input data (files, streams, manifests).
class DataError : public Error {
 public:
  using Error::Error;
};

}  // namespace arvsr
