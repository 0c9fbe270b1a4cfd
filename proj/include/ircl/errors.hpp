#pragma once

#include <stdexcept>
#include <string>

namespace ircl {

/// Root of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A precondition on an argument was violated.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// A file or payload could not be parsed.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// A requested entity (session, module, image, plant) does not exist.
class NotFound : public Error {
 public:
  using Error::Error;
};

/// A batch lacks normal or anomalous samples.
class DegenerateBatch : public Error {
 public:
  using Error::Error;
};

/// A vector with zero norm was asked to be normalized.
class DegenerateEmbedding : public Error {
 public:
  using Error::Error;
};

/// A metric is undefined for the given input (e.g. single-class data).
class UndefinedMetric : public Error {
 public:
  using Error::Error;
};

/// NaN or infinity reached a computation that requires finite values.
class NonFiniteValue : public Error {
 public:
  using Error::Error;
};

}  // namespace ircl
