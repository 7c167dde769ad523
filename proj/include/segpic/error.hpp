#pragma once

#include <stdexcept>
#include <string>

namespace segpic {

// Exit codes shared by the command-line front end.
enum class ExitCode : int {
  ok = 0,
  usage = 2,
  data = 3,
  numeric = 4,
};

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual ExitCode exit_code() const noexcept { return ExitCode::data; }
};

// Shape or rank mismatch between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf values, out-of-bounds scales, non-finite denominators.
class NumericError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const noexcept override { return ExitCode::numeric; }
};

// Malformed files: PGM/PPM headers, weight files, containers.
class ParseError : public Error {
 public:
  using Error::Error;
};

// Inconsistent configuration (schedules, widths, unknown keys).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Encoder/decoder divergence or failed integrity checks.
class ConsistencyError : public Error {
 public:
  using Error::Error;
};

// Inputs outside a function's domain (e.g. RD curves that do not overlap).
class DomainError : public Error {
 public:
  using Error::Error;
};

class UsageError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const noexcept override { return ExitCode::usage; }
};

}  // namespace segpic
