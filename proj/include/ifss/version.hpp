#pragma once

namespace ifss {

inline constexpr const char* kEngineVersion = "0.1.0";

inline const char* code_revision() {
#ifdef IFSS_CODE_REVISION
  return IFSS_CODE_REVISION;
#else
  return "unknown";
#endif
}

}  // namespace ifss
