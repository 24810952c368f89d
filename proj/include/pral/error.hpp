#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace pral {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor shapes that cannot be combined.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Token id or slot index outside its valid range.
class IndexError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Sequence does not fit the positional capacity of a model.
class CapacityError : public Error {
 public:
  using Error::Error;
};

// Value cannot be represented in the unified dialog format.
class FormatError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

class IngestError : public Error {
 public:
  using Error::Error;
};

class TurnOrderError : public Error {
 public:
  using Error::Error;
};

// Raised when a gradient or loss stops being finite. `name()` identifies the
// parameter (or "loss") that carried the bad value.
class NonFiniteError : public Error {
 public:
  explicit NonFiniteError(const std::string& name)
      : Error("non-finite value in " + name), name_(name) {}
  const std::string& name() const { return name_; }

 private:
  std::string name_;
};

}  // namespace pral
