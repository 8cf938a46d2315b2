#pragma once

#include <stdexcept>
#include <string>

namespace colorcaps {

// Error taxonomy. The CLI maps these onto exit codes:
//   config_error -> 1 (usage), io_error/shape_error/domain_error -> 2 (data),
//   check_error -> 3 (failed verification).
struct error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct config_error : error {
  using error::error;
};

struct shape_error : error {
  using error::error;
};

struct domain_error : error {
  using error::error;
};

struct io_error : error {
  using error::error;
};

struct check_error : error {
  using error::error;
};

}  // namespace colorcaps
