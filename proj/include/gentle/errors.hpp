#pragma once

#include <stdexcept>
#include <string>

namespace gentle {

/// Invalid configuration or dimension mismatch. CLI exit code 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A required input file or directory is absent. CLI exit code 3.
class MissingInputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed on-disk data (bad magic, schema version, row counts).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace gentle
