#include "adafuse/errors.hpp"

#include <iostream>
#include <utility>

namespace adafuse {

namespace {
WarnHandler g_warn_handler;  // empty -> stderr
}

void warn(const std::string& msg) {
    if (g_warn_handler) {
        g_warn_handler(msg);
    } else {
        std::cerr << "warning: " << msg << "\n";
    }
}

WarnHandler set_warn_handler(WarnHandler handler) {
    WarnHandler old = std::move(g_warn_handler);
    g_warn_handler = std::move(handler);
    return old;
}

}  // namespace adafuse
