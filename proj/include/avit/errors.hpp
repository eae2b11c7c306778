#pragma once

#include <stdexcept>
#include <string>

namespace avit {

// Error categories map one-to-one onto CLI exit codes (see pipeline.hpp).
class ParameterError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class TokenizationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define AVIT_REQUIRE(cond, msg)                       \
  do {                                                \
    if (!(cond)) throw ::avit::ParameterError(msg);   \
  } while (0)

}  // namespace avit
