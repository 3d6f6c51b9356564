// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <string>

namespace nfe::log {

enum class Level { debug, info, warn, error };

using Sink = std::function<void(Level, const std::string&)>;

/// Replaces the process-wide sink; returns the previous one. Default writes to stderr.
Sink set_sink(Sink sink);
void set_min_level(Level level);

void write(Level level, const std::string& msg);
inline void debug(const std::string& msg) { write(Level::debug, msg); }
inline void info(const std::string& msg) { write(Level::info, msg); }
inline void warn(const std::string& msg) { write(Level::warn, msg); }
inline void error(const std::string& msg) { write(Level::error, msg); }

}  // namespace nfe::log
