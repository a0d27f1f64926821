#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>

namespace calip {

/// Base of every error the engine raises. Callers that only need a message
/// catch this; the CLI maps subclasses to exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shape mismatch between operands.
class DimensionError : public Error {
 public:
  explicit DimensionError(const std::string& what) : Error("dimension error: " + what) {}
};

/// Out-of-domain scalar parameter (temperature <= 0, negative weight, ...).
class ParameterError : public Error {
 public:
  explicit ParameterError(const std::string& what) : Error("parameter error: " + what) {}
};

/// Few-shot protocol violation (too few samples, shots outside the protocol set).
class ProtocolError : public Error {
 public:
  explicit ProtocolError(const std::string& what) : Error("protocol error: " + what) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error("io error: " + what) {}
};

/// Errors that may be tied to a position in a binary file.
class FileError : public Error {
 public:
  FileError(const std::string& kind, std::optional<std::uint64_t> offset, const std::string& what)
      : Error(offset ? kind + " at byte offset " + std::to_string(*offset) + ": " + what
                     : kind + ": " + what),
        offset_(offset) {}

  std::optional<std::uint64_t> offset() const noexcept { return offset_; }

 private:
  std::optional<std::uint64_t> offset_;
};

/// Wrong magic or unsupported version.
class FormatError : public FileError {
 public:
  FormatError(std::uint64_t offset, const std::string& what) : FileError("format error", offset, what) {}
};

/// Structurally readable but invalid content: truncation, NaN, label overflow.
/// Also raised, without an offset, for non-finite in-memory values.
class IntegrityError : public FileError {
 public:
  IntegrityError(std::uint64_t offset, const std::string& what)
      : FileError("integrity error", offset, what) {}
  explicit IntegrityError(const std::string& what) : FileError("integrity error", std::nullopt, what) {}
};

}  // namespace calip
