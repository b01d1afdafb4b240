#pragma once

#include <stdexcept>
#include <string>

namespace mfpnet {

// Base for everything this library throws. The CLI maps subclasses onto exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor dimensions disagree with what an operation requires.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf, failed gradient checks, impossible numeric preconditions.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Malformed file contents (bad magic, truncated payload, checksum mismatch).
class FormatError : public Error {
 public:
  using Error::Error;
};

// File could not be opened/written.
class IoError : public Error {
 public:
  using Error::Error;
};

// Invalid model/train/data configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace mfpnet
