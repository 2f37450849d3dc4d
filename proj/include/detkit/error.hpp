#pragma once

#include <stdexcept>
#include <string>

namespace detkit {

// Maps onto the CLI exit codes: usage 2, data 3, infeasible 4.
enum class ErrorKind { usage, data, infeasible };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

inline Error usage_error(const std::string& what) {
  return Error(ErrorKind::usage, what);
}

inline Error data_error(const std::string& what) {
  return Error(ErrorKind::data, what);
}

inline Error infeasible_error(const std::string& what) {
  return Error(ErrorKind::infeasible, what);
}

}  // namespace detkit
