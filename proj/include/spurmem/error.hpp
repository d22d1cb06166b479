#pragma once

#include <stdexcept>
#include <string>

namespace spurmem {

// Base of every error raised by the library. The CLI maps subclasses to exit
// codes (see tools/spurmem.cpp).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

// Zero-norm vectors fed to a cosine similarity and similar ill-posed inputs.
class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// A NeuronRef that does not name a hidden unit of the bound model.
class ReferenceError : public Error {
 public:
  using Error::Error;
};

class CorruptionError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  ParseError(const std::string& what, long row)
      : Error(row >= 0 ? "row " + std::to_string(row) + ": " + what : what), row_(row) {}
  long row() const { return row_; }

 private:
  long row_;
};

// NaN/Inf detected in a loss or metric.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace spurmem
