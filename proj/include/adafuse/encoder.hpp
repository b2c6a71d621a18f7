#pragma once

#include <string>
#include <utility>
#include <vector>

#include "adafuse/graph.hpp"
#include "adafuse/rng.hpp"

namespace adafuse {

inline constexpr int kLatentDim = 16;

struct EncoderConfig {
    int input_dim = 0;
    int model_dim = kLatentDim;  // input, hidden and output dim of the encoder layer
    int heads = 4;
    double dropout = 0.4;
    bool positional_encoding = true;
};

// Scaled dot-product attention weights of one clip: per-head matrices
// [queries x keys] plus the query/head average a_t.
struct AttentionRecord {
    std::vector<Tensor> head_weights;
    Tensor aggregated;  // a_t, length = valid timesteps
};

Tensor temporal_attention(const AttentionRecord& record);

// Per-modality pipeline: FC+ReLU input embedding, batch-norm over the
// batch x time axis, dropout, optional sinusoidal positional encoding, one
// 4-head self-attention encoder layer, masked max pooling to a 16-dim latent.
class ModalityEncoder {
public:
    ModalityEncoder(std::string prefix, EncoderConfig config);

    void init_params(ParamStore& store, const Rng& rng) const;

    struct ClipInput {
        int features = -1;  // node [T x input_dim]
        Tensor mask;        // over T; empty = all timesteps valid
    };

    struct AttnNodes {
        std::vector<int> heads;  // softmax node per head, [T x T]
        Tensor mask;
        int seq_len = 0;
    };

    struct BatchResult {
        int latents = -1;          // [B x 16]
        std::vector<int> h_trans;  // per clip [T x 16]
        std::vector<AttnNodes> attention;
    };

    BatchResult encode_batch(Graph& g, const std::vector<ClipInput>& clips) const;

    // Stage builders, used by encode_batch and exercised directly in tests.
    int build_embed(Graph& g, int features) const;  // FC+ReLU, pre batch-norm
    int build_batch_norm(Graph& g, int h, Tensor row_mask = {}) const;
    std::pair<int, AttnNodes> build_encoder_layer(Graph& g, int h_in, Tensor mask = {}) const;

    const EncoderConfig& config() const { return config_; }
    const std::string& prefix() const { return prefix_; }

    static Tensor positional_encoding_table(int seq_len, int dim);

private:
    std::string prefix_;
    EncoderConfig config_;
};

AttentionRecord extract_attention(const Graph& g, const ModalityEncoder::AttnNodes& nodes);

}  // namespace adafuse
