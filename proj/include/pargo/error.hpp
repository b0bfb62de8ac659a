#pragma once

#include <stdexcept>
#include <string>

namespace pargo {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not agree.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Partition/cascade divisibility, layer range, or an all-masked attention row.
class MaskError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values, divergence, or a failed gradient check.
class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace pargo
