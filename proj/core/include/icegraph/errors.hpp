#pragma once

#include <stdexcept>
#include <string>

namespace icegraph {

// Error categories map 1:1 onto CLI exit codes (see tools/icegraph.cpp):
//   validation_error -> 2, io_error -> 3, numeric_error -> 4.

// Bad arguments, malformed configs, violated preconditions.
struct validation_error : std::runtime_error {
  explicit validation_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Missing/corrupt files, failed reads or writes.
struct io_error : std::runtime_error {
  explicit io_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Solver divergence, NaN/Inf, singular systems.
struct numeric_error : std::runtime_error {
  explicit numeric_error(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace icegraph
