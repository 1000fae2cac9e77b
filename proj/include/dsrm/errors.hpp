#pragma once

#include <stdexcept>
#include <string>

namespace dsrm {

/// Bad argument or violated precondition. Maps to CLI exit code 2.
struct InvalidArgument : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Malformed input file; the message names the offending row.
struct ParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Non-finite value encountered during training. Maps to CLI exit code 3.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Input for which the requested quantity is undefined (e.g. a zero direction).
struct DegenerateInput : std::domain_error {
  using std::domain_error::domain_error;
};

template <typename E = InvalidArgument>
inline void require(bool cond, const std::string& msg) {
  if (!cond) throw E(msg);
}

}  // namespace dsrm
