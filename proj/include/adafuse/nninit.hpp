#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "adafuse/graph.hpp"
#include "adafuse/rng.hpp"

namespace adafuse {

// Parameter init draws from a substream derived from the parameter name, so
// values depend only on the seed and the name, not on creation order.
inline void init_uniform(ParamStore& store, const Rng& rng, const std::string& name,
                         std::vector<int> shape, double bound) {
    Rng r = rng.derive(name);
    Tensor t(std::move(shape));
    for (double& v : t.data) v = r.uniform(-bound, bound);
    store.create(name, std::move(t));
}

inline void init_const(ParamStore& store, const std::string& name, std::vector<int> shape,
                       double value, bool trainable = true) {
    store.create(name, Tensor(std::move(shape), value), trainable);
}

// Fan-in scaled uniform for fully connected layers.
inline void init_fc(ParamStore& store, const Rng& rng, const std::string& w_name,
                    const std::string& b_name, int in_dim, int out_dim) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_dim));
    init_uniform(store, rng, w_name, {in_dim, out_dim}, bound);
    init_uniform(store, rng, b_name, {out_dim}, bound);
}

}  // namespace adafuse
