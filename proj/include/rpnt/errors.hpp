#pragma once

#include <stdexcept>
#include <string>

namespace rpnt {

// All library failures derive from Error so callers (the CLI in particular)
// can map them onto exit codes in one place.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible tensor shapes.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Invalid or inconsistent configuration values.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// A math function evaluated outside its domain (log of a nonpositive value...).
class DomainError : public Error {
 public:
  using Error::Error;
};

// API misuse: calling an operation in a state that does not support it.
class UsageError : public Error {
 public:
  using Error::Error;
};

// Non-finite values during training or inference.
class NumericFault : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace rpnt
