#pragma once

#include <stdexcept>
#include <string>

namespace moelab {

// Root of every error the library throws. The CLI maps ValidationError and
// ConfigError to exit code 1; anything else is a runtime failure.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

class RoutingError : public Error {
 public:
  using Error::Error;
};

// Corpus task specifications that cannot be realised (e.g. overlapping vocabularies).
class SpecError : public Error {
 public:
  using Error::Error;
};

// Unknown token met while tokenizing in strict mode.
class UnknownTokenError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace moelab
