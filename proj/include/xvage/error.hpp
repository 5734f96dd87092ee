#pragma once

#include <stdexcept>
#include <string>

namespace xvage {

// Base for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad input, manifest, config or arguments. The CLI maps these to exit code 1.
class ValidationError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class OutOfRangeError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class ShapeError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// Audio file could not be decoded.
class DecodeError : public Error {
 public:
  using Error::Error;
};

// A loss term became NaN/Inf during training. Exit code 2.
class NanAbort : public Error {
 public:
  explicit NanAbort(const std::string& term)
      : Error("non-finite loss term '" + term + "', aborting training"),
        term_(term) {}
  const std::string& term() const noexcept { return term_; }

 private:
  std::string term_;
};

}  // namespace xvage
