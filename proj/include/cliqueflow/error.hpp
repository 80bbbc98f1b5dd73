#pragma once

#include <stdexcept>
#include <string>

namespace cliqueflow {

// Root of every error the library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Input violates a documented domain invariant (angle out of range, too many atoms, ...).
class InvariantError : public Error {
 public:
  using Error::Error;
};

class DegenerateCellError : public Error {
 public:
  using Error::Error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class KnotMismatchError : public Error {
 public:
  KnotMismatchError(std::size_t row, std::size_t offset, const std::string& what)
      : Error(what), row_(row), offset_(offset) {}
  std::size_t row() const noexcept { return row_; }
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t row_;
  std::size_t offset_;
};

class ParseError : public Error {
 public:
  ParseError(std::size_t line, const std::string& field, const std::string& what)
      : Error("line " + std::to_string(line) + ", field '" + field + "': " + what),
        line_(line),
        field_(field) {}
  std::size_t line() const noexcept { return line_; }
  const std::string& field() const noexcept { return field_; }

 private:
  std::size_t line_;
  std::string field_;
};

// A numeric quantity became NaN/Inf (ES surrogate value, integrator state, ...).
class NonFiniteError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class VersionMismatchError : public Error {
 public:
  using Error::Error;
};

class CorruptFileError : public Error {
 public:
  CorruptFileError(std::size_t offset, const std::string& what)
      : Error("corrupt file at byte " + std::to_string(offset) + ": " + what), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

}  // namespace cliqueflow
