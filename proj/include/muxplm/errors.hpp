#pragma once

#include <stdexcept>
#include <string>

namespace muxplm {

// Base of every error the library raises. The C API maps each subclass onto a
// status code (see muxplm.h).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor extents disagree with an operation's contract.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// A value is outside the domain an operation accepts (rates, ids, sizes).
class ValueError : public Error {
 public:
  using Error::Error;
};

// Invalid run configuration (unknown size name, malformed key/value line).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed or corrupted file (checkpoint magic, checksum, CSV rows).
class FormatError : public Error {
 public:
  using Error::Error;
};

// Training stages requested out of order without an override.
class StageOrderError : public Error {
 public:
  using Error::Error;
};

}  // namespace muxplm
