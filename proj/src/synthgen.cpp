#include "adafuse/synthgen.hpp"

#include <cmath>
#include <string>

#include "adafuse/errors.hpp"
#include "adafuse/rng.hpp"

namespace adafuse {

namespace {

void check_range(const std::array<int, 2>& r, const std::string& what) {
    if (r[0] < 1 || r[1] < r[0])
        throw ConfigError("synth config: " + what + " range must satisfy 1 <= lo <= hi");
}

// Feature amplitude relative to the latent scale. Of the same order as a
// per-timestep noise sigma of ~0.1, so mildly noisy streams genuinely need
// temporal averaging while a sigma of several units drowns a stream.
constexpr double kSignalGain = 0.15;

Tensor draw_projection(Rng& rng, int in_dim, int out_dim) {
    Tensor p({in_dim, out_dim});
    const double scale = kSignalGain / std::sqrt(static_cast<double>(in_dim));
    for (double& v : p.data) v = rng.normal() * scale;
    return p;
}

std::vector<double> draw_unit(Rng& rng, int dim) {
    std::vector<double> v(dim);
    double norm2 = 0.0;
    for (double& x : v) {
        x = rng.normal();
        norm2 += x * x;
    }
    const double inv = 1.0 / std::sqrt(norm2);
    for (double& x : v) x *= inv;
    return v;
}

std::string pad_id(const char* prefix, int i, int width) {
    std::string s = std::to_string(i);
    while (static_cast<int>(s.size()) < width) s = "0" + s;
    return prefix + s;
}

}  // namespace

void SynthConfig::validate() const {
    if (n_episodes < 1) throw ConfigError("synth config: n_episodes must be >= 1");
    if (clips_per_episode < 1) throw ConfigError("synth config: clips_per_episode must be >= 1");
    check_range(seq_len_acoustic, "acoustic seq_len");
    check_range(seq_len_visual, "visual seq_len");
    check_range(seq_len_language, "language seq_len");
    if (d_acoustic < 2 || d_visual < 2 || d_language < 2)
        throw ConfigError("synth config: feature dims must be >= 2");
    if (shared_dim < 2) throw ConfigError("synth config: shared_dim must be >= 2");
    for (const double s : noise)
        if (!(s >= 0.0)) throw ConfigError("synth config: noise sigmas must be >= 0");
    if (!(alignment_strength >= 0.0 && alignment_strength <= 1.0))
        throw ConfigError("synth config: alignment_strength must be in [0,1]");
}

DatasetManifest generate(const SynthConfig& config) {
    config.validate();
    const Rng root(config.seed);

    const int dims[3] = {config.d_acoustic, config.d_visual, config.d_language};
    const std::array<int, 2> len_ranges[3] = {config.seq_len_acoustic, config.seq_len_visual,
                                              config.seq_len_language};

    // Dataset-level structure: projections and label read-out directions.
    Rng struct_rng = root.derive("structure");
    Tensor shared_proj[3];
    Tensor private_proj[3];
    for (int m = 0; m < 3; ++m) {
        shared_proj[m] = draw_projection(struct_rng, config.shared_dim, dims[m]);
        private_proj[m] = draw_projection(struct_rng, config.shared_dim, dims[m]);
    }
    const std::vector<double> shared_readout = draw_unit(struct_rng, config.shared_dim);
    std::vector<double> private_readout[3];
    for (int m = 0; m < 3; ++m) private_readout[m] = draw_unit(struct_rng, config.shared_dim);

    const double rho = config.alignment_strength;
    constexpr double label_gain = 0.8;  // keeps tanh labels away from saturation

    DatasetManifest manifest;
    manifest.task = config.task;
    manifest.d_acoustic = config.d_acoustic;
    manifest.d_visual = config.d_visual;
    manifest.d_language = config.d_language;

    for (int e = 0; e < config.n_episodes; ++e)
        manifest.episodes.push_back(pad_id("E", e + 1, 2));

    for (int e = 0; e < config.n_episodes; ++e) {
        for (int c = 0; c < config.clips_per_episode; ++c) {
            Rng rng = root.derive("clip", static_cast<uint64_t>(e), static_cast<uint64_t>(c));

            std::vector<double> z(config.shared_dim);
            for (double& v : z) v = rng.normal();
            std::vector<double> privates[3];
            for (int m = 0; m < 3; ++m) {
                privates[m].resize(config.shared_dim);
                for (double& v : privates[m]) v = rng.normal();
            }

            FeatureClip clip;
            clip.episode_id = manifest.episodes[e];
            clip.clip_id = clip.episode_id + "_C" + pad_id("", c, 3);
            clip.speaker_id = clip.episode_id + "_S" + std::to_string(c % 2);

            Tensor* streams[3] = {&clip.acoustic, &clip.visual, &clip.language};
            for (int m = 0; m < 3; ++m) {
                const int lo = len_ranges[m][0], hi = len_ranges[m][1];
                const int T = lo + static_cast<int>(rng.uniform_int(
                                       static_cast<uint64_t>(hi - lo + 1)));
                Tensor seq({T, dims[m]});
                std::vector<double> base(dims[m], 0.0);
                for (int k = 0; k < config.shared_dim; ++k)
                    for (int d = 0; d < dims[m]; ++d)
                        base[d] += rho * z[k] * shared_proj[m].at(k, d) +
                                   (1.0 - rho) * privates[m][k] * private_proj[m].at(k, d);
                for (int t = 0; t < T; ++t)
                    for (int d = 0; d < dims[m]; ++d)
                        seq.at(t, d) = base[d] + config.noise[m] * rng.normal();
                *streams[m] = std::move(seq);
            }

            double raw = 0.0;
            for (int k = 0; k < config.shared_dim; ++k) raw += shared_readout[k] * z[k];
            for (int m = 0; m < 3; ++m)
                for (int k = 0; k < config.shared_dim; ++k)
                    raw += (1.0 - rho) * private_readout[m][k] * privates[m][k];
            const double squashed = std::tanh(label_gain * raw);
            clip.label = config.task == Task::IPP ? squashed : (squashed > 0.0 ? 1.0 : 0.0);

            clip.meta[0] = rng.uniform(0.3, 0.7);  // initial vote score
            clip.meta[1] = static_cast<double>(clip.language.shape[0]);  // speaking length

            manifest.clips.push_back(std::move(clip));
        }
    }
    return manifest;
}

}  // namespace adafuse
