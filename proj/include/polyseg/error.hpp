#pragma once

#include <stdexcept>
#include <string>

namespace polyseg {

/// Bad input data: malformed files, invariant violations, inconsistent shapes.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Caller misuse: bad arguments or preconditions on options.
class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Filesystem failures.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw DataError(msg);
}

inline void require_arg(bool cond, const std::string& msg) {
  if (!cond) throw UsageError(msg);
}

}  // namespace detail
}  // namespace polyseg
