#pragma once

#include <stdexcept>
#include <string>

namespace lmukws {

/// Invalid argument value (precondition violation).
class ArgumentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Tensor or topology dimensions that do not fit together.
class StructuralError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Malformed or unsupported input data (audio, manifests, dataset layout).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Model file that cannot be decoded.
class LoadError : public DataError {
 public:
  using DataError::DataError;
};

/// Training diverged or produced non-finite values.
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void require(bool ok, const std::string& what) {
  if (!ok) throw ArgumentError(what);
}

inline void require_shape(bool ok, const std::string& what) {
  if (!ok) throw StructuralError(what);
}

}  // namespace detail
}  // namespace lmukws
