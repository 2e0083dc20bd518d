#pragma once

#include <stdexcept>
#include <string>

namespace dsiam {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor shapes do not line up for an operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// API misuse: non-scalar loss, bad arguments, non-square assignment input.
class UsageError : public Error {
 public:
  using Error::Error;
};

// Numerically invalid input, e.g. non-finite sampling coordinates.
class InputError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed file contents (PPM, DST1, config).
class ParseError : public Error {
 public:
  using Error::Error;
};

// Two views share no pixels; no correspondence grid can be built.
class EmptyOverlap : public Error {
 public:
  using Error::Error;
};

class NonFiniteLoss : public Error {
 public:
  using Error::Error;
};

}  // namespace dsiam
