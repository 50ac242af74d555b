// Error types shared by every pktrack module.
//
// All failures are reported by exception. Each module throws the most specific
// type below; callers that only care about "something went wrong" catch
// pktrack::Error.

#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace pktrack {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Geometry.
class DegenerateView : public Error {
 public:
  using Error::Error;
};
class DegenerateGeometry : public Error {
 public:
  using Error::Error;
};
class NoConvergence : public Error {
 public:
  using Error::Error;
};

// Configuration and shapes.
class InvalidConfig : public Error {
 public:
  using Error::Error;
};
class ShapeError : public Error {
 public:
  using Error::Error;
};

// File formats. Line numbers count data rows from 1 (the header is line 0).
class LineError : public Error {
 public:
  LineError(const std::string& what, std::size_t line)
      : Error(what + " (line " + std::to_string(line) + ")"), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};
class ParseError : public LineError {
 public:
  using LineError::LineError;
};
class InvariantError : public LineError {
 public:
  using LineError::LineError;
};
class SchemaError : public Error {
 public:
  using Error::Error;
};

// Learning stages.
class NoLabels : public Error {
 public:
  using Error::Error;
};
class EmptyDataset : public Error {
 public:
  using Error::Error;
};
class TrackTooShort : public Error {
 public:
  using Error::Error;
};

// Metrics.
class EmptySequence : public Error {
 public:
  using Error::Error;
};
class AlignmentError : public Error {
 public:
  using Error::Error;
};
class KeyMismatch : public Error {
 public:
  using Error::Error;
};

}  // namespace pktrack
