#pragma once

#include <array>
#include <cstdint>

#include "adafuse/datamodel.hpp"

namespace adafuse {

// Seeded synthetic multimodal dataset. Each clip draws a shared latent z and
// per-modality private latents u_m; every timestep of modality m is
//   rho * (z P_m) + (1-rho) * (u_m Q_m) + sigma_m * noise
// with fixed random projections P_m, Q_m drawn once per dataset. The label is
// tanh of a linear read-out of z plus (1-rho)-weighted read-outs of the
// private latents, thresholded at 0 for DOP.
struct SynthConfig {
    int n_episodes = 6;
    int clips_per_episode = 8;
    std::array<int, 2> seq_len_acoustic{8, 16};
    std::array<int, 2> seq_len_visual{8, 16};
    std::array<int, 2> seq_len_language{8, 16};
    int d_acoustic = 12;
    int d_visual = 12;
    int d_language = 12;
    int shared_dim = 4;
    std::array<double, 3> noise{0.1, 0.1, 0.1};  // sigma_A, sigma_V, sigma_L
    double alignment_strength = 0.7;             // rho in [0,1]
    Task task = Task::IPP;
    uint64_t seed = 0;

    void validate() const;
};

DatasetManifest generate(const SynthConfig& config);

}  // namespace adafuse
