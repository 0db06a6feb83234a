#pragma once

#include <stdexcept>
#include <string>

namespace bandmod {

/// Bad user input: malformed config, violated precondition, out-of-range
/// field. Mapped to exit code 2 at the CLI boundary.
class ValidationError : public std::runtime_error {
 public:
  explicit ValidationError(const std::string& what) : std::runtime_error(what) {}
};

/// Failure while executing an otherwise valid request (I/O, numeric
/// overflow, divergence). Mapped to exit code 3 at the CLI boundary.
class RuntimeFault : public std::runtime_error {
 public:
  explicit RuntimeFault(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace bandmod
