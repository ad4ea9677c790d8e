// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace lga {

struct InvalidArgument : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct ParseError : std::runtime_error {
  ParseError(std::size_t line, const std::string& what)
      : std::runtime_error("line " + std::to_string(line) + ": " + what), line(line) {}
  std::size_t line;
};

struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Checkpoint header does not describe something we can load.
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Checkpoint payload is shorter or longer than its header promises.
struct CorruptionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DegenerateKeyError : NumericError {
  using NumericError::NumericError;
};

struct DegenerateBatchError : NumericError {
  using NumericError::NumericError;
};

/// Raised by the CLI when an upstream artifact is absent or was produced
/// under a different configuration.
struct MissingInput : std::runtime_error {
  explicit MissingInput(const std::string& path)
      : std::runtime_error("missing-input:" + path), path(path) {}
  std::string path;
};

struct ConfigMismatch : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace lga
