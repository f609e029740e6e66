// Copyright 2026 The familykit Authors
// SPDX-License-Identifier: Apache-2.0

#ifndef FAMILYKIT_ERROR_HPP
#define FAMILYKIT_ERROR_HPP

#include <stdexcept>
#include <string>

namespace familykit {

/// Error categories. The numeric values double as CLI exit codes where one exists.
enum class ErrorKind : int {
  config = 2,
  data = 3,
  numeric = 4,
  integrity = 5,
  dimension = 6,
  input = 7,
  graph = 8,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

  /// Process exit code for this error. Errors without a dedicated code map to the
  /// nearest CLI category.
  int exit_code() const noexcept {
    switch (kind_) {
      case ErrorKind::config:
      case ErrorKind::dimension:
      case ErrorKind::input:
        return 2;
      case ErrorKind::data:
        return 3;
      case ErrorKind::numeric:
        return 4;
      case ErrorKind::integrity:
      case ErrorKind::graph:
        return 5;
    }
    return 1;
  }

 private:
  ErrorKind kind_;
};

inline Error config_error(const std::string& msg) { return {ErrorKind::config, "config error: " + msg}; }
inline Error data_error(const std::string& msg) { return {ErrorKind::data, "data error: " + msg}; }
inline Error numeric_error(const std::string& msg) { return {ErrorKind::numeric, "numeric error: " + msg}; }
inline Error integrity_error(const std::string& msg) { return {ErrorKind::integrity, "integrity error: " + msg}; }
inline Error dimension_error(const std::string& msg) { return {ErrorKind::dimension, "dimension error: " + msg}; }
inline Error input_error(const std::string& msg) { return {ErrorKind::input, "input error: " + msg}; }
inline Error graph_error(const std::string& msg) { return {ErrorKind::graph, "graph error: " + msg}; }

}  // namespace familykit

#endif  // FAMILYKIT_ERROR_HPP
