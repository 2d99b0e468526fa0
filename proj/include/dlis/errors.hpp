#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace dlis {

// Dimension mismatch between containers or layers.
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Invalid convolution/pooling geometry (kernel larger than padded input,
// non-positive stride, negative padding, ...).
struct GeometryError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Invalid run configuration or operation precondition.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Filesystem-level failure (missing file, short read, unwritable path).
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed file content; carries the byte offset of the failure.
struct ParseError : std::runtime_error {
  ParseError(const std::string& msg, size_t at)
      : std::runtime_error(msg + " (at byte " + std::to_string(at) + ")"),
        offset(at) {}
  size_t offset;
};

// A determinism or oracle check failed.
struct VerificationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace dlis
