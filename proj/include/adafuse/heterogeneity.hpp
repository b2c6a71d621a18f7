#pragma once

#include <array>
#include <string>

#include "adafuse/graph.hpp"
#include "adafuse/rng.hpp"

namespace adafuse {

// Scalar modality weights (A, V, L order) with their EMA state. The triple
// stays on the simplex: each update is a convex combination of the current
// weights and a softmax target, both summing to 1.
struct ModalityWeights {
    std::array<double, 3> w{1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0};
    double alpha = 0.5;  // EMA rate
    double beta = 50.0;  // softmax scale
    std::array<double, 3> last_ref_losses{0.0, 0.0, 0.0};

    void validate() const;
};

// w~_m = exp(-beta L_m) / sum exp(-beta L_m'), computed with max subtraction.
std::array<double, 3> compute_target_weights(const std::array<double, 3>& losses, double beta);

// w <- alpha w + (1 - alpha) w~
ModalityWeights update_weights(const ModalityWeights& weights,
                               const std::array<double, 3>& target);

// Unimodal reference MLP: FC16+ReLU, FC8+ReLU, FC1+sigmoid on a 16-dim
// latent; its validation MSE estimates the modality's usefulness.
class ReferenceModel {
public:
    explicit ReferenceModel(std::string prefix, double dropout = 0.4);
    void init_params(ParamStore& store, const Rng& rng) const;
    int build(Graph& g, int latents) const;  // [B x 16] -> [B x 1] in (0,1)
    const std::string& prefix() const { return prefix_; }

private:
    std::string prefix_;
    double dropout_;
};

// Eval-mode prediction for a single 16-dim latent.
double reference_predict(ParamStore& store, const ReferenceModel& model, const Tensor& latent);

// Mean squared error of eval-mode predictions against labels (both in the
// sigmoid output space); errors on an empty set.
double reference_loss(ParamStore& store, const ReferenceModel& model, const Tensor& latents,
                      const std::vector<double>& labels);

// H_het = w_A H_A (+) w_V H_V (+) w_L H_L, always in A,V,L order.
int build_weighted_concat(Graph& g, const std::array<int, 3>& latents,
                          const std::array<double, 3>& w);

}  // namespace adafuse
