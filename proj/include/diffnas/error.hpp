#pragma once

#include <stdexcept>
#include <string>

namespace diffnas {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes do not line up for an operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration value (bad range, odd embedding size, ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A caller violated a precondition of an API.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Malformed on-disk artifact. Carries the byte offset where parsing failed.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

/// A pipeline stage was asked to run before its inputs exist.
class StageDependencyError : public Error {
 public:
  using Error::Error;
};

/// NaN or Inf was produced where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Near-constant target passed to a variance-normalized loss.
class DegenerateTargetError : public Error {
 public:
  using Error::Error;
};

/// Rejection sampling gave up without a hit.
class InfeasibleError : public Error {
 public:
  using Error::Error;
};

}  // namespace diffnas
