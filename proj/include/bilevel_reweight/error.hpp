#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace bilevel_reweight {

enum class ErrorKind {
  kInvalidArgument,
  kNumericOverflow,
  kAssumptionViolation,
  kSingularDesign,
  kStepTooLarge,
  kAbsoluteContinuityViolation,
  kPreconditionViolation,
  kNoConvergence,
  kParse,
};

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kInvalidArgument: return "invalid-argument";
    case ErrorKind::kNumericOverflow: return "numeric-overflow";
    case ErrorKind::kAssumptionViolation: return "assumption-violation";
    case ErrorKind::kSingularDesign: return "singular-design";
    case ErrorKind::kStepTooLarge: return "step-too-large";
    case ErrorKind::kAbsoluteContinuityViolation: return "absolute-continuity-violation";
    case ErrorKind::kPreconditionViolation: return "precondition-violation";
    case ErrorKind::kNoConvergence: return "no-convergence";
    case ErrorKind::kParse: return "parse-error";
  }
  return "unknown";
}

/// Every failure raised by the library carries one of the kinds above so
/// callers (and the CLI summary) can react without parsing messages.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

/// Parse failures remember the 1-based line they occurred on (0 when the
/// problem is not tied to a line, e.g. a missing file).
class ParseError : public Error {
 public:
  ParseError(const std::string& source, std::size_t line, const std::string& message)
      : Error(ErrorKind::kParse, source + (line > 0 ? ":" + std::to_string(line) : std::string()) +
                                     ": " + message),
        line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) { throw Error(kind, message); }

inline void require(bool condition, ErrorKind kind, const std::string& message) {
  if (!condition) fail(kind, message);
}

}  // namespace bilevel_reweight
