#include "adafuse/alignment.hpp"

#include "adafuse/errors.hpp"
#include "adafuse/nninit.hpp"

namespace adafuse {

SharedProjector::SharedProjector(std::string prefix, int dim, double dropout)
    : prefix_(std::move(prefix)), dim_(dim), dropout_(dropout) {}

void SharedProjector::init_params(ParamStore& store, const Rng& rng) const {
    init_fc(store, rng, prefix_ + ".W", prefix_ + ".b", dim_, dim_);
}

int SharedProjector::build(Graph& g, int latents) const {
    const int w = g.param(prefix_ + ".W");
    const int b = g.param(prefix_ + ".b");
    return g.relu(g.add_bias(g.matmul(latents, w), b));
}

int SharedProjector::build_dropout(Graph& g, int shared) const {
    return g.dropout(shared, dropout_);
}

int build_cosine_loss(Graph& g, int batch_m, int batch_n) {
    const int cos = g.cosine_rows(batch_m, batch_n);
    return g.mean_all(g.affine(cos, -1.0, 1.0));
}

namespace {

// Covariance of a [B x d] batch: (X^T X - (1^T X)^T (1^T X) / B) / (B - 1).
int build_covariance(Graph& g, int batch) {
    const int B = g.shape(batch)[0];
    const int ones = g.constant(Tensor({1, B}, 1.0));
    const int colsum = g.matmul(ones, batch);  // [1 x d]
    const int outer = g.matmul(g.transpose(colsum), colsum);
    const int gram = g.matmul(g.transpose(batch), batch);
    return g.scale(g.sub(gram, g.scale(outer, 1.0 / B)), 1.0 / (B - 1.0));
}

}  // namespace

int build_coral_loss(Graph& g, int batch_m, int batch_n) {
    if (g.shape(batch_m)[0] < 2 || g.shape(batch_n)[0] < 2)
        throw GraphError("coral needs batch >= 2");
    const int d = g.shape(batch_m)[1];
    const int diff = g.sub(build_covariance(g, batch_m), build_covariance(g, batch_n));
    return g.scale(g.sumsq(diff), 1.0 / (4.0 * d * d));
}

AlignmentNodes build_alignment_embed(Graph& g, const SharedProjector& projector,
                                     const std::array<int, 3>& latents) {
    AlignmentNodes nodes;
    std::array<int, 3> dropped{};
    for (int m = 0; m < 3; ++m) {
        nodes.shared[m] = projector.build(g, latents[m]);
        dropped[m] = projector.build_dropout(g, nodes.shared[m]);
    }
    nodes.h_align = build_fuse_aligned(g, dropped);
    return nodes;
}

void build_alignment_losses(Graph& g, AlignmentNodes& nodes, bool include_da) {
    constexpr int pairs[3][2] = {{0, 1}, {0, 2}, {1, 2}};  // (A,V), (A,L), (V,L)
    std::vector<int> terms;
    for (int p = 0; p < 3; ++p) {
        nodes.l_cos[p] = build_cosine_loss(g, nodes.shared[pairs[p][0]], nodes.shared[pairs[p][1]]);
        terms.push_back(nodes.l_cos[p]);
        if (include_da) {
            nodes.l_da[p] =
                build_coral_loss(g, nodes.shared[pairs[p][0]], nodes.shared[pairs[p][1]]);
            terms.push_back(nodes.l_da[p]);
        } else {
            nodes.l_da[p] = -1;
        }
    }
    int sum = terms[0];
    for (size_t i = 1; i < terms.size(); ++i) sum = g.add(sum, terms[i]);
    nodes.loss = sum;
}

AlignmentNodes build_alignment(Graph& g, const SharedProjector& projector,
                               const std::array<int, 3>& latents, bool include_da) {
    AlignmentNodes nodes = build_alignment_embed(g, projector, latents);
    build_alignment_losses(g, nodes, include_da);
    return nodes;
}

int build_fuse_aligned(Graph& g, const std::array<int, 3>& shared) {
    return g.scale(g.add(g.add(shared[0], shared[1]), shared[2]), 1.0 / 3.0);
}

namespace {

double scalar_loss(const Tensor& batch_m, const Tensor& batch_n,
                   int (*builder)(Graph&, int, int)) {
    ParamStore store;
    Graph g(store, Mode::eval);
    const int a = g.constant(batch_m);
    const int b = g.constant(batch_n);
    const int loss = builder(g, a, b);
    g.run();
    return g.value(loss).data[0];
}

}  // namespace

double cosine_loss_value(const Tensor& batch_m, const Tensor& batch_n) {
    return scalar_loss(batch_m, batch_n, &build_cosine_loss);
}

double coral_loss_value(const Tensor& batch_m, const Tensor& batch_n) {
    return scalar_loss(batch_m, batch_n, &build_coral_loss);
}

}  // namespace adafuse
