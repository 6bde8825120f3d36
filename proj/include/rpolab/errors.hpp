#pragma once

#include <stdexcept>
#include <string>

namespace rpolab {

// Error categories map one-to-one onto the CLI exit codes:
//   UsageError -> 2, IoError -> 1, DivergenceError -> 3, IntegrityError -> 4.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IntegrityError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace rpolab
