#pragma once

#include <stdexcept>
#include <string>

namespace splitq {

// Base of every exception thrown by the library.
class error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Mismatched or unsupported tensor dimensions.
class shape_error : public error {
 public:
  using error::error;
};

// Out-of-range configuration or argument.
class parameter_error : public error {
 public:
  using error::error;
};

// Input data violates a value-level precondition (NaN, empty calibration set).
class data_error : public error {
 public:
  using error::error;
};

// File could not be opened, read, written or parsed.
class io_error : public error {
 public:
  using error::error;
};

}  // namespace splitq
