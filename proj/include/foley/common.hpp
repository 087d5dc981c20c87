#pragma once

#include <sstream>
#include <stdexcept>
#include <string>

namespace foley {

// Invalid configuration or violated call contract. The CLI maps this to exit code 1.
class ConfigError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

// Runtime failure (I/O, divergence, corrupt file). The CLI maps this to exit code 2.
class RuntimeError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

template <typename... Args>
std::string msg(Args&&... args) {
  std::ostringstream os;
  (os << ... << args);
  return os.str();
}

inline void check_config(bool ok, const std::string& what) {
  if (!ok) throw ConfigError(what);
}

inline void check_runtime(bool ok, const std::string& what) {
  if (!ok) throw RuntimeError(what);
}

}  // namespace foley
