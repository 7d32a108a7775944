#pragma once

#include <stdexcept>
#include <string>

namespace ctcstream {

enum class ErrorKind {
  io,
  format,
  mismatch,
  invalid_label,
  normalization,
  invalid_argument,
  too_large,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::io: return "io";
    case ErrorKind::format: return "format";
    case ErrorKind::mismatch: return "mismatch";
    case ErrorKind::invalid_label: return "invalid-label";
    case ErrorKind::normalization: return "normalization";
    case ErrorKind::invalid_argument: return "invalid-argument";
    case ErrorKind::too_large: return "too-large";
  }
  return "unknown";
}

// Every failure raised by the library carries a kind so the CLI can map it
// to an exit status without parsing messages.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace ctcstream
