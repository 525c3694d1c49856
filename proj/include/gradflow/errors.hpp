#pragma once

#include <stdexcept>
#include <string>

namespace gradflow {

/// Base class for all gradflow errors.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Invalid or mismatched tensor dimensions, including element-count overflow.
class ShapeError : public Error {
public:
  using Error::Error;
};

/// A scalar argument or configuration value is out of its allowed range.
class ValueError : public Error {
public:
  using Error::Error;
};

/// Malformed container file or manifest.
class FormatError : public Error {
public:
  using Error::Error;
};

/// Reference to a node id that does not exist on the tape.
class GraphError : public Error {
public:
  using Error::Error;
};

/// Operation called in the wrong lifecycle phase (e.g. backward twice).
class StateError : public Error {
public:
  using Error::Error;
};

/// A documented precondition of an operation was violated by the caller.
class ContractError : public Error {
public:
  using Error::Error;
};

/// Filesystem failure.
class IoError : public Error {
public:
  using Error::Error;
};

/// Scene target placement failed after the rejection-sampling budget.
class GenerationError : public Error {
public:
  using Error::Error;
};

} // namespace gradflow
