#include "adafuse/heterogeneity.hpp"

#include <algorithm>
#include <cmath>

#include "adafuse/errors.hpp"
#include "adafuse/nninit.hpp"

namespace adafuse {

void ModalityWeights::validate() const {
    double sum = 0.0;
    for (const double v : w) {
        if (v < 0.0 || v > 1.0) throw GraphError("modality weights: entry outside [0,1]");
        sum += v;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw GraphError("modality weights: sum differs from 1");
    if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("modality weights: alpha must be in (0,1)");
    if (!(beta > 0.0)) throw ConfigError("modality weights: beta must be > 0");
}

std::array<double, 3> compute_target_weights(const std::array<double, 3>& losses, double beta) {
    if (!(beta > 0.0)) throw ConfigError("target weights: beta must be > 0");
    for (const double l : losses)
        if (!std::isfinite(l) || l < 0.0)
            throw GraphError("target weights: losses must be finite and >= 0");
    // softmax of -beta * L with max subtraction
    std::array<double, 3> logits{};
    for (int m = 0; m < 3; ++m) logits[m] = -beta * losses[m];
    const double mx = *std::max_element(logits.begin(), logits.end());
    std::array<double, 3> out{};
    double sum = 0.0;
    for (int m = 0; m < 3; ++m) {
        out[m] = std::exp(logits[m] - mx);
        sum += out[m];
    }
    for (double& v : out) v /= sum;
    return out;
}

ModalityWeights update_weights(const ModalityWeights& weights,
                               const std::array<double, 3>& target) {
    weights.validate();
    double target_sum = 0.0;
    for (const double v : target) target_sum += v;
    if (std::abs(target_sum - 1.0) > 1e-9)
        throw GraphError("update_weights: target does not sum to 1");
    ModalityWeights next = weights;
    for (int m = 0; m < 3; ++m)
        next.w[m] = weights.alpha * weights.w[m] + (1.0 - weights.alpha) * target[m];
    return next;
}

ReferenceModel::ReferenceModel(std::string prefix, double dropout)
    : prefix_(std::move(prefix)), dropout_(dropout) {}

void ReferenceModel::init_params(ParamStore& store, const Rng& rng) const {
    init_fc(store, rng, prefix_ + ".W1", prefix_ + ".b1", 16, 16);
    init_fc(store, rng, prefix_ + ".W2", prefix_ + ".b2", 16, 8);
    init_fc(store, rng, prefix_ + ".W3", prefix_ + ".b3", 8, 1);
}

int ReferenceModel::build(Graph& g, int latents) const {
    int h = g.relu(g.add_bias(g.matmul(latents, g.param(prefix_ + ".W1")),
                              g.param(prefix_ + ".b1")));
    h = g.dropout(h, dropout_);  // dropout follows every FC16
    h = g.relu(g.add_bias(g.matmul(h, g.param(prefix_ + ".W2")), g.param(prefix_ + ".b2")));
    return g.sigmoid(g.add_bias(g.matmul(h, g.param(prefix_ + ".W3")), g.param(prefix_ + ".b3")));
}

double reference_predict(ParamStore& store, const ReferenceModel& model, const Tensor& latent) {
    if (latent.numel() != 16) throw GraphError("reference_predict: latent must have 16 entries");
    Graph g(store, Mode::eval);
    Tensor row = latent;
    row.shape = {1, 16};
    const int out = model.build(g, g.constant(std::move(row)));
    g.run();
    return g.value(out).data[0];
}

double reference_loss(ParamStore& store, const ReferenceModel& model, const Tensor& latents,
                      const std::vector<double>& labels) {
    if (labels.empty()) throw DataError("reference_loss: empty validation set");
    if (latents.shape.size() != 2 || latents.shape[0] != static_cast<int>(labels.size()))
        throw GraphError("reference_loss: latent/label count mismatch");
    Graph g(store, Mode::eval);
    const int out = model.build(g, g.constant(latents));
    g.run();
    const Tensor& preds = g.value(out);
    double sum = 0.0;
    for (size_t i = 0; i < labels.size(); ++i) {
        const double d = preds.data[i] - labels[i];
        sum += d * d;
    }
    return sum / static_cast<double>(labels.size());
}

int build_weighted_concat(Graph& g, const std::array<int, 3>& latents,
                          const std::array<double, 3>& w) {
    double sum = 0.0;
    for (const double v : w) sum += v;
    if (std::abs(sum - 1.0) > 1e-9)
        throw GraphError("weighted_concat: weights must sum to 1");
    return g.concat_cols(
        {g.scale(latents[0], w[0]), g.scale(latents[1], w[1]), g.scale(latents[2], w[2])});
}

}  // namespace adafuse
