#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace cwat {

/// Failure categories. The CLI maps each one to a distinct exit code.
enum class ErrorCategory {
  shape,
  config,
  io,
  data,
  numeric,
  state,
};

inline std::string_view category_name(ErrorCategory c) {
  switch (c) {
    case ErrorCategory::shape: return "shape";
    case ErrorCategory::config: return "config";
    case ErrorCategory::io: return "io";
    case ErrorCategory::data: return "data";
    case ErrorCategory::numeric: return "numeric";
    case ErrorCategory::state: return "state";
  }
  return "unknown";
}

inline int exit_code(ErrorCategory c) {
  switch (c) {
    case ErrorCategory::shape: return 6;
    case ErrorCategory::config: return 2;
    case ErrorCategory::io: return 3;
    case ErrorCategory::data: return 4;
    case ErrorCategory::numeric: return 5;
    case ErrorCategory::state: return 7;
  }
  return 1;
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& what)
      : std::runtime_error(what), category_(category) {}

  ErrorCategory category() const noexcept { return category_; }

 private:
  ErrorCategory category_;
};

[[noreturn]] inline void fail(ErrorCategory c, const std::string& what) {
  throw Error(c, what);
}

}  // namespace cwat
