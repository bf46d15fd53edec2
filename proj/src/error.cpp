#include "talktrack/error.hpp"

namespace talktrack {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kConfig: return "config";
    case ErrorKind::kData: return "data";
    case ErrorKind::kLookup: return "lookup";
    case ErrorKind::kEligibility: return "eligibility";
    case ErrorKind::kProtocol: return "protocol";
    case ErrorKind::kOracleSize: return "oracle_size";
    case ErrorKind::kDivergence: return "divergence";
    case ErrorKind::kNotFound: return "not_found";
    case ErrorKind::kConflict: return "conflict";
  }
  return "unknown";
}

int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kConfig: return 2;
    case ErrorKind::kData:
    case ErrorKind::kLookup:
    case ErrorKind::kEligibility: return 3;
    case ErrorKind::kDivergence: return 4;
    default: return 1;
  }
}

}  // namespace talktrack
