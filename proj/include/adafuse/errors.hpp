#pragma once

#include <functional>
#include <stdexcept>
#include <string>

namespace adafuse {

// Error taxonomy mirrors the CLI exit-code contract:
// DataError -> 1, ConfigError -> 2, DivergenceError -> 3.
struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct GraphError : std::runtime_error {
    explicit GraphError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DivergenceError : std::runtime_error {
    int epoch;
    DivergenceError(const std::string& msg, int epoch_idx)
        : std::runtime_error(msg), epoch(epoch_idx) {}
};

// Non-fatal warnings (constant meta feature, zero-vector cosine, ...).
// Tests swap the handler to count emissions; default prints to stderr.
using WarnHandler = std::function<void(const std::string&)>;
void warn(const std::string& msg);
WarnHandler set_warn_handler(WarnHandler handler);

}  // namespace adafuse
