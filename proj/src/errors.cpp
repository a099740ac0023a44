#include "ftl/errors.hpp"

#include <iostream>
#include <mutex>
#include <utility>

namespace ftl {

namespace {
std::mutex warn_mutex;
std::function<void(const std::string&)> warn_handler;
}  // namespace

void warn(const std::string& message) {
  std::lock_guard lock(warn_mutex);
  if (warn_handler) {
    warn_handler(message);
  } else {
    std::cerr << "[ftl] warning: " << message << "\n";
  }
}

void set_warn_handler(std::function<void(const std::string&)> handler) {
  std::lock_guard lock(warn_mutex);
  warn_handler = std::move(handler);
}

}  // namespace ftl
