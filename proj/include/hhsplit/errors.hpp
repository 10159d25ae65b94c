// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace hhsplit {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not agree.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Index list is out of range or contains duplicates.
class IndexError : public Error {
 public:
  using Error::Error;
};

/// A scalar argument (rank, fraction, bit-width, ...) is outside its domain.
class RangeError : public Error {
 public:
  using Error::Error;
};

/// An iterative numeric routine failed to converge.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Malformed, truncated or inconsistent serialized data.
class FormatError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Importance requested before any calibration tokens were accumulated.
class EmptyCalibrationError : public Error {
 public:
  using Error::Error;
};

/// Compression requested on a split whose tail has no neurons.
class NothingToCompressError : public Error {
 public:
  using Error::Error;
};

/// Ablation fraction rounds to zero neurons.
class DegenerateAblationError : public Error {
 public:
  using Error::Error;
};

/// Timer resolution too coarse for the measured interval.
class MeasurementError : public Error {
 public:
  using Error::Error;
};

}  // namespace hhsplit
