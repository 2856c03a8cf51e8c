#pragma once

#include <stdexcept>
#include <string>

namespace subnet_unlearn {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidShape : public Error {
 public:
  using Error::Error;
};

class DimensionMismatch : public Error {
 public:
  using Error::Error;
};

class UnknownTask : public Error {
 public:
  using Error::Error;
};

class InvalidRequest : public Error {
 public:
  using Error::Error;
};

// A sparse-independent learner ran out of free parameters in some layer.
class CapacityExhausted : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace subnet_unlearn
