#pragma once

#include <string>

#include "adafuse/graph.hpp"

namespace adafuse {

// Versioned binary container: JSON config header plus named parameter
// tensors (name, trainable flag, shape, little-endian 64-bit floats).
// Round-trips bit-exactly.
void save_checkpoint(const std::string& path, const ParamStore& store,
                     const std::string& config_json);

// Fills an empty store with the checkpoint contents; returns the config JSON.
std::string load_checkpoint(const std::string& path, ParamStore& store);

}  // namespace adafuse
