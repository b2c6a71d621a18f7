#pragma once

#include <array>
#include <string>

#include "adafuse/graph.hpp"
#include "adafuse/rng.hpp"

namespace adafuse {

// One FC16+ReLU MLP applied with identical parameters to all three modality
// latents; projects them into the shared space the alignment losses act on.
class SharedProjector {
public:
    explicit SharedProjector(std::string prefix = "shared", int dim = 16, double dropout = 0.4);
    void init_params(ParamStore& store, const Rng& rng) const;
    int build(Graph& g, int latents) const;  // [B x 16] -> [B x 16], pre-dropout
    // dropout sits on the prediction path only; the alignment losses read the
    // clean projections
    int build_dropout(Graph& g, int shared) const;
    const std::string& prefix() const { return prefix_; }
    int dim() const { return dim_; }

private:
    std::string prefix_;
    int dim_;
    double dropout_;
};

// Mean over the batch of 1 - cos(row_m, row_n); zero rows contribute loss 1.
int build_cosine_loss(Graph& g, int batch_m, int batch_n);

// Deep CORAL: squared Frobenius distance between the batch covariance
// matrices, scaled by 1/(4 d^2). Batches need at least two rows.
int build_coral_loss(Graph& g, int batch_m, int batch_n);

struct AlignmentNodes {
    std::array<int, 3> shared{};   // H_m^s per modality (A, V, L order)
    int h_align = -1;              // elementwise mean of the three
    std::array<int, 3> l_cos{-1, -1, -1};  // pairs (A,V), (A,L), (V,L)
    std::array<int, 3> l_da{-1, -1, -1};
    int loss = -1;                 // sum of the built pair terms
};

// Shared projections plus their mean; the loss terms are appended separately
// so eval-only forwards on tiny batches never build CORAL.
AlignmentNodes build_alignment_embed(Graph& g, const SharedProjector& projector,
                                     const std::array<int, 3>& latents);

// Appends l_cos (+ l_da unless disabled) for the three unordered pairs and
// their sum to an embed result.
void build_alignment_losses(Graph& g, AlignmentNodes& nodes, bool include_da = true);

// Convenience: embed plus losses in one call.
AlignmentNodes build_alignment(Graph& g, const SharedProjector& projector,
                               const std::array<int, 3>& latents, bool include_da = true);

int build_fuse_aligned(Graph& g, const std::array<int, 3>& shared);

// Scalar conveniences mirroring the loss definitions on plain tensors.
double cosine_loss_value(const Tensor& batch_m, const Tensor& batch_n);
double coral_loss_value(const Tensor& batch_m, const Tensor& batch_n);

}  // namespace adafuse
