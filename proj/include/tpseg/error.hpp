#pragma once

#include <stdexcept>
#include <string>

namespace tpseg {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor extents. The message names every shape involved.
class ShapeError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Unknown or out-of-range task identifier.
class TaskError : public Error {
 public:
  using Error::Error;
};

/// Index outside its valid range (block, level, slot).
class RangeError : public Error {
 public:
  using Error::Error;
};

/// Non-finite loss or parameter during training.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// File-system or format failure; carries the offending path.
class IoError : public Error {
 public:
  IoError(const std::string& path, const std::string& what)
      : Error(path + ": " + what), path_(path) {}
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

}  // namespace tpseg
