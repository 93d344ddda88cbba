#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace saelab {

enum class ErrorKind {
  Usage,       // bad config or flags
  Io,          // missing / unreadable / unwritable file
  Parse,       // malformed binary or text file
  Divergence,  // non-finite values during training
  Shape,       // dimension mismatch
  Capability,  // operation not supported by this architecture
  Domain,      // invalid numeric input (empty, degenerate, ...)
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

/// Structured parse failure; `offset` is the byte position where reading failed.
class ParseError : public Error {
 public:
  ParseError(std::uint64_t offset, const std::string& what)
      : Error(ErrorKind::Parse, what + " at offset " + std::to_string(offset)), offset_(offset) {}
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

}  // namespace saelab
