#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace matchscope {

enum class ErrorCode {
  InvalidArgument,
  Io,
  BadMagic,
  Truncated,
  NonFinite,
  DuplicateId,
  OutOfRange,
  MalformedJson,
  NotFound,
  FullyMasked,
  DegenerateVector,
  DimensionMismatch,
  ShapeMismatch,
  NoValidTriplet,
  OrphanEmbedding,
  Conflict,
  Extractor,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidArgument: return "invalid_argument";
    case ErrorCode::Io: return "io_error";
    case ErrorCode::BadMagic: return "bad_magic";
    case ErrorCode::Truncated: return "truncated";
    case ErrorCode::NonFinite: return "non_finite";
    case ErrorCode::DuplicateId: return "duplicate_id";
    case ErrorCode::OutOfRange: return "out_of_range";
    case ErrorCode::MalformedJson: return "malformed_json";
    case ErrorCode::NotFound: return "not_found";
    case ErrorCode::FullyMasked: return "fully_masked_query";
    case ErrorCode::DegenerateVector: return "degenerate_vector";
    case ErrorCode::DimensionMismatch: return "dimension_mismatch";
    case ErrorCode::ShapeMismatch: return "shape_mismatch";
    case ErrorCode::NoValidTriplet: return "no_valid_triplet";
    case ErrorCode::OrphanEmbedding: return "orphan_embedding";
    case ErrorCode::Conflict: return "conflict";
    case ErrorCode::Extractor: return "extractor_error";
  }
  return "unknown";
}

// Every failure raised by the library carries a machine-readable code so the
// CLI and HTTP layers can map it to exit codes / status codes.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

}  // namespace matchscope
