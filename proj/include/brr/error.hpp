#pragma once

#include <stdexcept>
#include <string>

namespace brr {

/// Base of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shapes or counts that make an operation impossible (empty inputs, n0 = 1 derangements).
class StructuralError : public Error {
 public:
  using Error::Error;
};

/// Argument values outside their documented range.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Evaluation of a generating function outside its domain.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// No observation satisfies the conditioning event required by an augmentation.
class DegenerateOverlapError : public Error {
 public:
  using Error::Error;
};

/// Numerical failure while fitting a learner.
class FitError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  using Error::Error;
};

}  // namespace brr
