// Copyright 2026 The vidplug Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace vidplug {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor extents. Messages name both shapes.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration value, placement, or flag combination.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what, std::string key = {})
      : Error(what), key_(std::move(key)) {}

  /// Offending config key, when one is known ("section.key").
  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

/// Caller violated an operation precondition (non-scalar loss, empty list, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Malformed sample data (label out of range, ragged stream).
class DataError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf encountered where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Unreadable or truncated checkpoint / dataset container.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Plugin-only checkpoint whose backbone digest does not match.
class CompatibilityError : public Error {
 public:
  using Error::Error;
};

}  // namespace vidplug
