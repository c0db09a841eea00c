#pragma once

#include <stdexcept>
#include <string>

namespace resp {

// Bad arguments: non-finite inputs, shape mismatches, out-of-range config.
class InvalidInputError : public std::invalid_argument {
 public:
  explicit InvalidInputError(const std::string& what) : std::invalid_argument(what) {}
};

// Responsibility weights would make the filter objective non-convex.
class ConvexityError : public std::runtime_error {
 public:
  ConvexityError(const std::string& what, int agent)
      : std::runtime_error(what), agent_index(agent) {}
  int agent_index;
};

// CSV / dataset / checkpoint parsing failures, with a 1-based line when known.
class ParseError : public std::runtime_error {
 public:
  explicit ParseError(const std::string& what, long line = -1)
      : std::runtime_error(line >= 0 ? what + " (line " + std::to_string(line) + ")" : what),
        line_number(line) {}
  long line_number;
};

// Filesystem failures: missing files, unwritable paths.
class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

// Solver breakdowns that are not the caller's fault (non-convergence where
// convergence is contractually required, NaNs mid-optimization).
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace resp
