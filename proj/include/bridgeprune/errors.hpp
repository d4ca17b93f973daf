#pragma once

#include <stdexcept>
#include <string>

namespace bridgeprune {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible tensor shapes.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Bad hyperparameters, unknown config keys, impossible layer geometry.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed dataset or checkpoint bytes.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Checkpoint written by an unsupported format version.
class CheckpointVersionError : public FormatError {
 public:
  using FormatError::FormatError;
};

// Checkpoint header or manifest that cannot be parsed.
class CorruptManifestError : public FormatError {
 public:
  using FormatError::FormatError;
};

// A tensor whose bytes are missing or do not match its declared shape.
class TensorLengthError : public FormatError {
 public:
  TensorLengthError(const std::string& tensor, const std::string& what)
      : FormatError("tensor '" + tensor + "': " + what), tensor_(tensor) {}
  const std::string& tensor() const { return tensor_; }

 private:
  std::string tensor_;
};

// NaN/Inf where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

// An operation the graph topology cannot support (e.g. removing filters
// that feed a residual connection).
class UnsupportedStructureError : public Error {
 public:
  using Error::Error;
};

// Regularizer begin/end called out of order.
class LifecycleError : public Error {
 public:
  using Error::Error;
};

// Caller-supplied data out of range (labels, empty datasets).
class InputError : public Error {
 public:
  using Error::Error;
};

// A PruneSpec that does not fit the graph it is applied to.
class PruneSpecError : public Error {
 public:
  using Error::Error;
};

}  // namespace bridgeprune
