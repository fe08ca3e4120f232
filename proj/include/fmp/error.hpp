#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace fmp {

// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

// Violated protocol preconditions (empty sets, too few samples, mismatched uploads).
class ProtocolError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class RangeError : public Error {
 public:
  using Error::Error;
};

class WireError : public Error {
 public:
  using Error::Error;
};

// Malformed file or message; carries the byte offset at which decoding failed.
class FormatError : public WireError {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : WireError(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

}  // namespace fmp
