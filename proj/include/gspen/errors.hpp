#pragma once

#include <stdexcept>
#include <string>

namespace gspen {

class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Thrown when an algorithm requires a graph property (e.g. acyclicity) that
/// the given region graph does not have.
class UnsupportedStructure : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class UnsupportedOperation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class ResourceLimit : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Parse failure in an input file. The message carries the location.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& where, const std::string& what)
      : std::runtime_error(where + ": " + what) {}
};

class NumericFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace gspen
