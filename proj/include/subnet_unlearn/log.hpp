#pragma once

#include <atomic>
#include <iostream>
#include <string_view>

namespace subnet_unlearn {

inline std::atomic<bool>& warnings_enabled() {
  static std::atomic<bool> on{true};
  return on;
}

inline void log_warning(std::string_view msg) {
  if (warnings_enabled().load(std::memory_order_relaxed)) std::cerr << "warning: " << msg << '\n';
}

}  // namespace subnet_unlearn
