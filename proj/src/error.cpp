// SPDX-License-Identifier: Apache-2.0
#include "nfe/error.hpp"
#include "nfe/log.hpp"

#include <iostream>
#include <mutex>

namespace nfe {

const char* to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::invalid_argument: return "InvalidArgument";
    case ErrorKind::shape_mismatch: return "ShapeMismatch";
    case ErrorKind::dead_exit: return "DeadExit";
    case ErrorKind::dataset_missing: return "DatasetMissing";
    case ErrorKind::dataset_corrupt: return "DatasetCorrupt";
    case ErrorKind::checksum_mismatch: return "ChecksumMismatch";
    case ErrorKind::diverged: return "Diverged";
    case ErrorKind::io: return "IoError";
    case ErrorKind::format: return "FormatError";
  }
  return "Unknown";
}

int exit_code(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::invalid_argument: return 2;
    case ErrorKind::shape_mismatch: return 3;
    case ErrorKind::dead_exit: return 4;
    case ErrorKind::dataset_missing: return 5;
    case ErrorKind::dataset_corrupt: return 6;
    case ErrorKind::checksum_mismatch: return 7;
    case ErrorKind::diverged: return 8;
    case ErrorKind::io: return 9;
    case ErrorKind::format: return 10;
  }
  return 1;
}

void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

namespace log {
namespace {

std::mutex g_mutex;
Level g_min = Level::info;

const char* level_name(Level l) {
  switch (l) {
    case Level::debug: return "debug";
    case Level::info: return "info";
    case Level::warn: return "warn";
    case Level::error: return "error";
  }
  return "?";
}

Sink& sink() {
  static Sink s = [](Level l, const std::string& msg) {
    std::cerr << "[" << level_name(l) << "] " << msg << '\n';
  };
  return s;
}

}  // namespace

Sink set_sink(Sink s) {
  std::lock_guard lock(g_mutex);
  Sink old = std::move(sink());
  sink() = std::move(s);
  return old;
}

void set_min_level(Level level) {
  std::lock_guard lock(g_mutex);
  g_min = level;
}

void write(Level level, const std::string& msg) {
  std::lock_guard lock(g_mutex);
  if (level < g_min || !sink()) return;
  sink()(level, msg);
}

}  // namespace log
}  // namespace nfe
