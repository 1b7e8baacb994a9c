#pragma once

#include <stdexcept>
#include <string>

namespace segkit {

// Base of every error segkit throws. Each subclass names one failure family so
// callers (the CLI in particular) can map it to an exit status.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad argument values or mismatched shapes handed to an operation.
class ParameterError : public Error {
 public:
  using Error::Error;
};

// Spatial arithmetic produced a non-positive output extent.
class GeometryError : public Error {
 public:
  using Error::Error;
};

// Batch normalization asked to estimate statistics from fewer than two values.
class DegenerateBatchError : public Error {
 public:
  using Error::Error;
};

class RegistrationError : public Error {
 public:
  using Error::Error;
};

// Unknown component, unknown parameter, inconsistent model wiring.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed dataset content (bad list line, undecodable image, invalid label).
class DataError : public Error {
 public:
  using Error::Error;
};

// Corrupt or incompatible checkpoint bytes.
class FormatError : public Error {
 public:
  using Error::Error;
};

class MetricError : public Error {
 public:
  using Error::Error;
};

// Training diverged or hit an unrecoverable numeric state.
class TrainingError : public Error {
 public:
  using Error::Error;
};

// The outside world is missing something: a file, a directory, write access.
class EnvironmentError : public Error {
 public:
  using Error::Error;
};

}  // namespace segkit
