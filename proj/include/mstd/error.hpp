#pragma once

#include <stdexcept>
#include <string>

namespace mstd {

enum class ErrorKind {
  kDimension,
  kConfig,
  kUsage,
  kData,
  kFormat,
  kIo,
  kDependency,
  kNumeric,
  kInvariant,
};

/// Base of every library error. The kind decides the CLI exit code.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kDimension: return "dimension error";
    case ErrorKind::kConfig: return "configuration error";
    case ErrorKind::kUsage: return "usage error";
    case ErrorKind::kData: return "data error";
    case ErrorKind::kFormat: return "format error";
    case ErrorKind::kIo: return "I/O error";
    case ErrorKind::kDependency: return "missing dependency";
    case ErrorKind::kNumeric: return "numerical divergence";
    case ErrorKind::kInvariant: return "internal invariant violated";
  }
  return "error";
}

[[noreturn]] inline void fail(ErrorKind kind, const std::string& msg) {
  throw Error(kind, std::string(to_string(kind)) + ": " + msg);
}

/// 0 ok, 2 config, 3 I/O or format, 4 missing dependency, 5 numerical divergence.
inline int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kConfig:
    case ErrorKind::kUsage:
    case ErrorKind::kDimension: return 2;
    case ErrorKind::kData:
    case ErrorKind::kFormat:
    case ErrorKind::kIo: return 3;
    case ErrorKind::kDependency: return 4;
    case ErrorKind::kNumeric: return 5;
    case ErrorKind::kInvariant: return 1;
  }
  return 1;
}

}  // namespace mstd
