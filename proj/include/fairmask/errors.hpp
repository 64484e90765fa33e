#pragma once

#include <stdexcept>
#include <string>

namespace fairmask {

// Invalid user-supplied configuration (bad ratios, malformed search space, ...).
class ConfigError : public std::runtime_error {
public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// Malformed input file (CSV cell, checkpoint, config JSON).
class ParseError : public std::runtime_error {
public:
  explicit ParseError(const std::string& what) : std::runtime_error(what) {}
};

// Non-finite values or diverged optimization.
class NumericError : public std::runtime_error {
public:
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

// A metric that is undefined on the given inputs (single-class AUC, empty group rate).
class MetricError : public std::runtime_error {
public:
  explicit MetricError(const std::string& what) : std::runtime_error(what) {}
};

// File I/O failure (missing file, short read, version mismatch).
class IoError : public std::runtime_error {
public:
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace fairmask
