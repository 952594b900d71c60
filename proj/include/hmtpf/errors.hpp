#pragma once

#include <stdexcept>
#include <string>

namespace hmtpf {

/// Shape or extent mismatch between operands.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Bad configuration value, missing channel, unknown key.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Misuse of the autodiff machinery (non-scalar loss, loss not on tape).
class AutodiffError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// NaN/Inf surfaced during training or evaluation.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Filesystem failure. The message always carries the offending path.
class IoError : public std::runtime_error {
 public:
  IoError(const std::string& what, std::string path)
      : std::runtime_error(what + ": " + path), path_(std::move(path)) {}
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

class MissingFileError : public IoError {
 public:
  using IoError::IoError;
};

class LengthMismatchError : public IoError {
 public:
  using IoError::IoError;
};

class UnsupportedVersionError : public IoError {
 public:
  using IoError::IoError;
};

class CorruptFileError : public IoError {
 public:
  using IoError::IoError;
};

/// A value that breaks a data-type invariant (ids, extents, channel names).
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

}  // namespace hmtpf
