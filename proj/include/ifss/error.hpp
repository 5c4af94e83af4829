#pragma once

#include <stdexcept>
#include <string>

namespace ifss {

// Error categories map 1:1 onto CLI exit codes.
enum class ErrorKind : int {
  Usage = 1,     // bad flags, bad config keys
  Data = 2,      // missing/invalid inputs, shape mismatches
  Numeric = 3,   // divergence, non-finite values
  Protocol = 4,  // session access violations
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, std::string message)
      : std::runtime_error(std::move(message)), kind_(kind) {}

  ErrorKind kind() const { return kind_; }
  int exit_code() const { return static_cast<int>(kind_); }

  static Error usage(std::string msg) { return {ErrorKind::Usage, std::move(msg)}; }
  static Error data(std::string msg) { return {ErrorKind::Data, std::move(msg)}; }
  static Error numeric(std::string msg) { return {ErrorKind::Numeric, std::move(msg)}; }
  static Error protocol(std::string msg) { return {ErrorKind::Protocol, std::move(msg)}; }

 private:
  ErrorKind kind_;
};

}  // namespace ifss
