#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace urt {

enum class ErrorKind {
  dimension,
  config,
  format,
  version,
  lookup,
  sampling,
  contract,
  io,
};

constexpr std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::dimension: return "dimension";
    case ErrorKind::config: return "config";
    case ErrorKind::format: return "format";
    case ErrorKind::version: return "version";
    case ErrorKind::lookup: return "lookup";
    case ErrorKind::sampling: return "sampling";
    case ErrorKind::contract: return "contract";
    case ErrorKind::io: return "io";
  }
  return "unknown";
}

/// Every failure raised by the library carries a machine-readable category.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& detail)
      : std::runtime_error(detail), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }
  std::string_view category() const noexcept { return to_string(kind_); }

 private:
  ErrorKind kind_;
};

inline void require(bool condition, ErrorKind kind, const std::string& detail) {
  if (!condition) throw Error(kind, detail);
}

}  // namespace urt
