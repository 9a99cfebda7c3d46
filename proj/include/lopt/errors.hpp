#pragma once

#include <stdexcept>
#include <string>

namespace lopt {

/// Base class for all errors raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Non-finite value produced by a forward op or found in a gradient.
class NumericsError : public Error {
 public:
  using Error::Error;
};

/// Caller broke an API precondition (non-scalar loss, empty mask, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class InputError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class ReportError : public Error {
 public:
  using Error::Error;
};

}  // namespace lopt
