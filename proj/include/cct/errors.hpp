#pragma once

#include <stdexcept>
#include <string>

namespace cct {

/// Base of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor shapes or geometry.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Invalid argument or configuration value. The CLI maps this to exit code 1.
class ValueError : public Error {
 public:
  using Error::Error;
};

/// File system or codec failure.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Malformed or truncated checkpoint / manifest.
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace cct
