#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace ctscan {

/// Base of every error raised by the library. `category()` is the short
/// machine-readable tag the CLI prints as "error: <category>: <detail>".
class Error : public std::runtime_error {
 public:
  Error(std::string category, const std::string& detail)
      : std::runtime_error(detail), category_(std::move(category)) {}

  const std::string& category() const noexcept { return category_; }

 private:
  std::string category_;
};

struct DimensionError : Error {
  explicit DimensionError(const std::string& detail) : Error("dimension", detail) {}
};

struct ContractError : Error {
  explicit ContractError(const std::string& detail) : Error("contract", detail) {}
};

struct NumericError : Error {
  explicit NumericError(const std::string& detail) : Error("numeric", detail) {}
};

struct FormatError : Error {
  explicit FormatError(const std::string& detail) : Error("format", detail) {}
};

struct ParameterError : Error {
  explicit ParameterError(const std::string& detail) : Error("parameter", detail) {}
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& detail) : Error("config", detail) {}
};

struct IoError : Error {
  explicit IoError(const std::string& detail) : Error("io", detail) {}
};

}  // namespace ctscan
