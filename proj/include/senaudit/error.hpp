#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace senaudit {

enum class ErrorCode {
  format,              // malformed input text
  schema,              // input refers to something the contest does not know
  empty_batch,
  domain,              // argument outside its mathematical domain
  infeasible,
  undefined_sample,
  invalid_pooling,
  ordering_violation,  // an audit step happened before its prerequisite
  not_selected,
  conflicting_reading,
  not_applicable,
  already_elected,
  missing_margin,
  invalid_state,
  integrity,           // a stored record disagrees with its recomputation
  forbidden,
  not_found,
  io,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::format: return "format";
    case ErrorCode::schema: return "schema";
    case ErrorCode::empty_batch: return "empty_batch";
    case ErrorCode::domain: return "domain";
    case ErrorCode::infeasible: return "infeasible";
    case ErrorCode::undefined_sample: return "undefined_sample";
    case ErrorCode::invalid_pooling: return "invalid_pooling";
    case ErrorCode::ordering_violation: return "ordering_violation";
    case ErrorCode::not_selected: return "not_selected";
    case ErrorCode::conflicting_reading: return "conflicting_reading";
    case ErrorCode::not_applicable: return "not_applicable";
    case ErrorCode::already_elected: return "already_elected";
    case ErrorCode::missing_margin: return "missing_margin";
    case ErrorCode::invalid_state: return "invalid_state";
    case ErrorCode::integrity: return "integrity";
    case ErrorCode::forbidden: return "forbidden";
    case ErrorCode::not_found: return "not_found";
    case ErrorCode::io: return "io";
  }
  return "unknown";
}

/// Every failure raised by the library carries a machine-readable code so the
/// service layer can map it onto a structured error envelope.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace senaudit
