#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace tkknn {

// Base of every error thrown by the library.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ParseError : Error {
  ParseError(std::size_t line, const std::string& what)
      : Error("line " + std::to_string(line) + ": " + what), line(line) {}
  std::size_t line;
};

struct DimensionError : Error { using Error::Error; };
struct FormatError : Error { using Error::Error; };
struct LengthError : Error { using Error::Error; };
struct InputError : Error { using Error::Error; };
struct IndexError : Error { using Error::Error; };
struct NumericError : Error { using Error::Error; };
struct ConfigError : Error { using Error::Error; };

}  // namespace tkknn
