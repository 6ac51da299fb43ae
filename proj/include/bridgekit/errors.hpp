#pragma once

#include <stdexcept>
#include <string>

namespace bridgekit {

// Error taxonomy mirrored by the CLI exit codes: config 2, ordering 3, io 4.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct OrderingError : std::runtime_error {
  explicit OrderingError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace bridgekit
