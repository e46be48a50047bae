// Copyright (C) 2026 The sgma-toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <iostream>
#include <mutex>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>

namespace sgma {

/// Broad failure categories. CLI exit codes and retry decisions key off these.
enum class ErrorKind {
  resolution,         // image shape does not match the encoder
  load,               // weights or registry could not be loaded
  input,              // caller-supplied value is invalid (empty text, bad range)
  capability,         // encoder lacks a required hook
  numeric,            // non-finite value or zero-norm vector
  config,             // inconsistent configuration
  io,                 // filesystem failure
  parse,              // malformed file or response
  transport,          // remote model call failed
  invariant,          // internal contract violated
  not_differentiable  // objective component has no gradient
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::resolution: return "resolution";
    case ErrorKind::load: return "load";
    case ErrorKind::input: return "input";
    case ErrorKind::capability: return "capability";
    case ErrorKind::numeric: return "numeric";
    case ErrorKind::config: return "config";
    case ErrorKind::io: return "io";
    case ErrorKind::parse: return "parse";
    case ErrorKind::transport: return "transport";
    case ErrorKind::invariant: return "invariant";
    case ErrorKind::not_differentiable: return "not_differentiable";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + " error: " + message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

template <typename... Args>
std::string concat(Args&&... args) {
  std::ostringstream oss;
  (oss << ... << std::forward<Args>(args));
  return oss.str();
}

template <typename... Args>
[[noreturn]] void fail(ErrorKind kind, Args&&... args) {
  throw Error(kind, concat(std::forward<Args>(args)...));
}

// Logging ------------------------------------------------------------------

enum class LogLevel { debug, info, warning, error };

using LogSink = std::function<void(LogLevel, std::string_view)>;

namespace detail {
struct LogState {
  std::mutex mutex;
  LogSink sink;
  LogLevel threshold = LogLevel::info;
};
inline LogState& log_state() {
  static LogState state;
  return state;
}
}  // namespace detail

/// Replaces the process-wide log sink; pass an empty function to restore stderr.
inline LogSink set_log_sink(LogSink sink) {
  auto& s = detail::log_state();
  std::lock_guard lock(s.mutex);
  return std::exchange(s.sink, std::move(sink));
}

inline void set_log_level(LogLevel level) {
  auto& s = detail::log_state();
  std::lock_guard lock(s.mutex);
  s.threshold = level;
}

inline void log(LogLevel level, std::string_view message) {
  auto& s = detail::log_state();
  std::lock_guard lock(s.mutex);
  if (level < s.threshold) return;
  if (s.sink) {
    s.sink(level, message);
    return;
  }
  static constexpr const char* tags[] = {"debug", "info", "warning", "error"};
  std::clog << "[sgma " << tags[static_cast<int>(level)] << "] " << message << '\n';
}

template <typename... Args>
void log_warning(Args&&... args) {
  log(LogLevel::warning, concat(std::forward<Args>(args)...));
}

template <typename... Args>
void log_info(Args&&... args) {
  log(LogLevel::info, concat(std::forward<Args>(args)...));
}

}  // namespace sgma
