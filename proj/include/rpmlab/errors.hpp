// errors.hpp -- exception types thrown across the library.
#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace rpmlab {

// Tensor operation received operands with incompatible shapes.
struct ShapeMismatch : std::runtime_error {
  explicit ShapeMismatch(const std::string& m) : std::runtime_error(m) {}
};

// Image geometry invalid for the requested patch decomposition.
struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& m) : std::runtime_error(m) {}
};

// A function produced NaN or Inf where a finite value is required.
struct NonFiniteError : std::runtime_error {
  explicit NonFiniteError(const std::string& m) : std::runtime_error(m) {}
};

// Requested rule set cannot be realized by the puzzle generator.
struct UnsatisfiableRules : std::runtime_error {
  explicit UnsatisfiableRules(const std::string& m) : std::runtime_error(m) {}
};

// Dataset file has an unknown magic or version.
struct FormatError : std::runtime_error {
  explicit FormatError(const std::string& m) : std::runtime_error(m) {}
};

// Dataset file ends before the declared instance count.
struct TruncationError : std::runtime_error {
  explicit TruncationError(const std::string& m) : std::runtime_error(m) {}
};

// Metadata alignment called with a label count other than two.
struct MetadataArityError : std::runtime_error {
  explicit MetadataArityError(const std::string& m) : std::runtime_error(m) {}
};

// Operation requires codebook tensors absent from the checkpoint.
struct MissingCodebookError : std::runtime_error {
  explicit MissingCodebookError(const std::string& m) : std::runtime_error(m) {}
};

// Invalid or inconsistent run configuration.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& m) : std::runtime_error(m) {}
};

// Dataset unusable for the requested operation (missing, empty, malformed).
struct DataError : std::runtime_error {
  explicit DataError(const std::string& m) : std::runtime_error(m) {}
};

// Training loss became non-finite; carries the offending step.
struct DivergenceError : std::runtime_error {
  DivergenceError(const std::string& m, int64_t at_step)
      : std::runtime_error(m + " at step " + std::to_string(at_step)), step(at_step) {}
  int64_t step;
};

}  // namespace rpmlab
