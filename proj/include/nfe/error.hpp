// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace nfe {

/// Machine-readable failure classes. The CLI maps each one to a distinct exit code.
enum class ErrorKind {
  invalid_argument,
  shape_mismatch,
  dead_exit,
  dataset_missing,
  dataset_corrupt,
  checksum_mismatch,
  diverged,
  io,
  format,
};

const char* to_string(ErrorKind kind) noexcept;
int exit_code(ErrorKind kind) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] void fail(ErrorKind kind, const std::string& what);

inline void require(bool cond, const std::string& what) {
  if (!cond) fail(ErrorKind::invalid_argument, what);
}

}  // namespace nfe
