#pragma once

#include <functional>
#include <stdexcept>
#include <string>

namespace ftl {

// Invalid configuration or input file; maps to CLI exit code 1.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Matrix is not symmetric positive definite; carries the failing pivot.
struct NotPositiveDefinite : std::runtime_error {
  explicit NotPositiveDefinite(int pivot_index)
      : std::runtime_error("matrix not positive definite at pivot " +
                           std::to_string(pivot_index)),
        pivot(pivot_index) {}
  int pivot;
};

// Warning channel: defaults to stderr, tests may capture it.
void warn(const std::string& message);
void set_warn_handler(std::function<void(const std::string&)> handler);

}  // namespace ftl
