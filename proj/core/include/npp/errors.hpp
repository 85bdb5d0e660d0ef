#pragma once

#include <stdexcept>
#include <string>

namespace npp {

/// Base class for every error thrown by this library.
struct error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Filesystem / stream failures (missing file, short read, write failure).
struct io_error : error {
  using error::error;
};

/// Structurally invalid input file (bad magic, nonsense header fields).
struct format_error : error {
  using error::error;
};

/// Valid file, but stores a sample type this library does not handle.
struct unsupported_dtype_error : format_error {
  using format_error::format_error;
};

/// Tensor or volume extents incompatible with the requested operation.
struct shape_error : error {
  using error::error;
};

/// Bad user-supplied configuration (file or flag level).
struct config_error : error {
  using error::error;
};

/// Argument outside an operation's mathematical domain.
struct domain_error : error {
  using error::error;
};

/// Affine matrix that cannot be used (singular or near-singular).
struct invalid_affine_error : error {
  using error::error;
};

/// Metric request whose value is undefined for the given inputs.
struct undefined_metric_error : error {
  using error::error;
};

/// Non-finite values encountered where finite arithmetic is required.
struct numeric_error : error {
  using error::error;
};

/// Thrown by the optimizer when a step must be skipped (non-finite
/// gradients). The step is dropped and training continues.
struct abort_step_error : numeric_error {
  using numeric_error::numeric_error;
};

}  // namespace npp
