#pragma once

#include <stdexcept>
#include <string>

namespace multipath {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor extents disagree with what an operation requires.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A scalar or index argument is outside its documented domain.
class ArgumentError : public Error {
 public:
  using Error::Error;
};

/// An object is used before reaching the state the call requires
/// (e.g. inference-mode batch norm without running moments).
class StateError : public Error {
 public:
  using Error::Error;
};

/// Reverse-mode request that the tape cannot honor.
class GraphError : public Error {
 public:
  using Error::Error;
};

/// A requested quantity was never computed (e.g. an unvisited sink's utility).
class AvailabilityError : public Error {
 public:
  using Error::Error;
};

/// Malformed on-disk input.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Training produced a non-finite value.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration; carries the dotted path of the offending field.
class ConfigError : public Error {
 public:
  ConfigError(std::string path, const std::string& message)
      : Error(path.empty() ? message : path + ": " + message), path_(std::move(path)) {}

  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

}  // namespace multipath
