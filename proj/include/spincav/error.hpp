#pragma once

#include <stdexcept>
#include <string>

namespace spincav {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A documented precondition of an operation was violated by the caller.
class PreconditionError : public Error {
 public:
  using Error::Error;
};

/// Input file could not be read or parsed.
class InputFormatError : public Error {
 public:
  using Error::Error;
};

class MissingFileError : public InputFormatError {
 public:
  using InputFormatError::InputFormatError;
};
class MalformedHeaderError : public InputFormatError {
 public:
  using InputFormatError::InputFormatError;
};
class RowCountError : public InputFormatError {
 public:
  using InputFormatError::InputFormatError;
};
class NonFiniteValueError : public InputFormatError {
 public:
  using InputFormatError::InputFormatError;
};
class EmptySheetError : public InputFormatError {
 public:
  using InputFormatError::InputFormatError;
};

class EigenSolverError : public Error {
 public:
  using Error::Error;
};

class NoResonanceError : public Error {
 public:
  using Error::Error;
};

class OutOfBoundsError : public Error {
 public:
  using Error::Error;
};

/// An evaluation point sits too close to a current element.
class ClearanceError : public Error {
 public:
  ClearanceError(const std::string& what, long point_index, long element_index)
      : Error(what), point_index(point_index), element_index(element_index) {}
  long point_index;
  long element_index;
};

class SingularSystemError : public Error {
 public:
  using Error::Error;
};

/// Time integration error estimate exceeded the requested tolerance.
class AccuracyError : public Error {
 public:
  using Error::Error;
};

class NoDipError : public Error {
 public:
  using Error::Error;
};

}  // namespace spincav
