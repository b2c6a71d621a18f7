#include "adafuse/encoder.hpp"

#include <cmath>

#include "adafuse/errors.hpp"
#include "adafuse/nninit.hpp"

namespace adafuse {

ModalityEncoder::ModalityEncoder(std::string prefix, EncoderConfig config)
    : prefix_(std::move(prefix)), config_(config) {
    if (config_.input_dim < 1) throw ConfigError("encoder: input_dim must be >= 1");
    if (config_.model_dim < 1 || config_.model_dim % config_.heads != 0)
        throw ConfigError("encoder: head count must divide model dim");
}

void ModalityEncoder::init_params(ParamStore& store, const Rng& rng) const {
    const int d = config_.model_dim;
    init_fc(store, rng, prefix_ + ".embed.W", prefix_ + ".embed.b", config_.input_dim, d);
    init_const(store, prefix_ + ".embed.bn.gamma", {d}, 1.0);
    init_const(store, prefix_ + ".embed.bn.beta", {d}, 0.0);
    init_const(store, prefix_ + ".embed.bn.running_mean", {d}, 0.0, false);
    init_const(store, prefix_ + ".embed.bn.running_var", {d}, 1.0, false);
    const double xavier = std::sqrt(6.0 / static_cast<double>(d + d));
    for (const char* p : {".attn.Wq", ".attn.Wk", ".attn.Wv", ".attn.Wo"})
        init_uniform(store, rng, prefix_ + p, {d, d}, xavier);
    // no key bias: a constant shift of every key cancels inside the softmax
    for (const char* p : {".attn.bq", ".attn.bv", ".attn.bo"})
        init_const(store, prefix_ + p, {d}, 0.0);
    init_const(store, prefix_ + ".ln1.gamma", {d}, 1.0);
    init_const(store, prefix_ + ".ln1.beta", {d}, 0.0);
    init_fc(store, rng, prefix_ + ".ffn.W1", prefix_ + ".ffn.b1", d, d);
    init_fc(store, rng, prefix_ + ".ffn.W2", prefix_ + ".ffn.b2", d, d);
    init_const(store, prefix_ + ".ln2.gamma", {d}, 1.0);
    init_const(store, prefix_ + ".ln2.beta", {d}, 0.0);
}

int ModalityEncoder::build_embed(Graph& g, int features) const {
    if (g.shape(features).size() != 2 || g.shape(features)[1] != config_.input_dim)
        throw GraphError("encoder '" + prefix_ + "': features must be [T x " +
                         std::to_string(config_.input_dim) + "]");
    const int w = g.param(prefix_ + ".embed.W");
    const int b = g.param(prefix_ + ".embed.b");
    return g.relu(g.add_bias(g.matmul(features, w), b));
}

int ModalityEncoder::build_batch_norm(Graph& g, int h, Tensor row_mask) const {
    return g.batch_norm(h, g.param(prefix_ + ".embed.bn.gamma"),
                        g.param(prefix_ + ".embed.bn.beta"), prefix_ + ".embed.bn.running_mean",
                        prefix_ + ".embed.bn.running_var", 0.1, 1e-5, std::move(row_mask));
}

Tensor ModalityEncoder::positional_encoding_table(int seq_len, int dim) {
    Tensor pe({seq_len, dim});
    for (int t = 0; t < seq_len; ++t)
        for (int i = 0; i < dim / 2; ++i) {
            const double rate = std::pow(10000.0, -2.0 * i / static_cast<double>(dim));
            pe.at(t, 2 * i) = std::sin(t * rate);
            pe.at(t, 2 * i + 1) = std::cos(t * rate);
        }
    return pe;
}

std::pair<int, ModalityEncoder::AttnNodes> ModalityEncoder::build_encoder_layer(
    Graph& g, int h_in, Tensor mask) const {
    const int d = config_.model_dim;
    const int head_dim = d / config_.heads;
    const int T = g.shape(h_in)[0];

    const int q = g.add_bias(g.matmul(h_in, g.param(prefix_ + ".attn.Wq")),
                             g.param(prefix_ + ".attn.bq"));
    const int k = g.matmul(h_in, g.param(prefix_ + ".attn.Wk"));
    const int v = g.add_bias(g.matmul(h_in, g.param(prefix_ + ".attn.Wv")),
                             g.param(prefix_ + ".attn.bv"));

    AttnNodes record;
    record.mask = mask;
    record.seq_len = T;
    std::vector<int> contexts;
    for (int h = 0; h < config_.heads; ++h) {
        const int qh = g.slice_cols(q, h * head_dim, (h + 1) * head_dim);
        const int kh = g.slice_cols(k, h * head_dim, (h + 1) * head_dim);
        const int vh = g.slice_cols(v, h * head_dim, (h + 1) * head_dim);
        const int scores =
            g.scale(g.matmul(qh, g.transpose(kh)), 1.0 / std::sqrt(static_cast<double>(head_dim)));
        const int alpha = g.softmax_rows(scores, mask);
        record.heads.push_back(alpha);
        contexts.push_back(g.matmul(alpha, vh));
    }
    const int ctx = g.concat_cols(contexts);
    const int attn_out =
        g.add_bias(g.matmul(ctx, g.param(prefix_ + ".attn.Wo")), g.param(prefix_ + ".attn.bo"));
    const int h1 = g.layer_norm(g.add(h_in, attn_out), g.param(prefix_ + ".ln1.gamma"),
                                g.param(prefix_ + ".ln1.beta"));
    const int ffn_hidden = g.relu(
        g.add_bias(g.matmul(h1, g.param(prefix_ + ".ffn.W1")), g.param(prefix_ + ".ffn.b1")));
    const int ffn_out = g.add_bias(g.matmul(ffn_hidden, g.param(prefix_ + ".ffn.W2")),
                                   g.param(prefix_ + ".ffn.b2"));
    const int h_trans = g.layer_norm(g.add(h1, ffn_out), g.param(prefix_ + ".ln2.gamma"),
                                     g.param(prefix_ + ".ln2.beta"));
    return {h_trans, std::move(record)};
}

ModalityEncoder::BatchResult ModalityEncoder::encode_batch(
    Graph& g, const std::vector<ClipInput>& clips) const {
    if (clips.empty()) throw GraphError("encoder '" + prefix_ + "': empty batch");

    // FC+ReLU per clip, then one batch-norm over all timesteps of the batch.
    std::vector<int> embedded;
    std::vector<int> lengths;
    bool any_mask = false;
    int total_rows = 0;
    for (const auto& clip : clips) {
        embedded.push_back(build_embed(g, clip.features));
        const int t = g.shape(clip.features)[0];
        lengths.push_back(t);
        total_rows += t;
        if (!clip.mask.data.empty()) any_mask = true;
    }
    Tensor row_mask;
    if (any_mask) {
        row_mask = Tensor({total_rows}, 1.0);
        int offset = 0;
        for (size_t i = 0; i < clips.size(); ++i) {
            if (!clips[i].mask.data.empty())
                for (int t = 0; t < lengths[i]; ++t)
                    row_mask.data[offset + t] = clips[i].mask.data[t];
            offset += lengths[i];
        }
    }
    const int stacked = embedded.size() == 1 ? embedded[0] : g.concat_rows(embedded);
    int normed = build_batch_norm(g, stacked, std::move(row_mask));
    normed = g.dropout(normed, config_.dropout);

    BatchResult result;
    std::vector<int> latent_rows;
    int offset = 0;
    for (size_t i = 0; i < clips.size(); ++i) {
        int h = clips.size() == 1 ? normed : g.slice_rows(normed, offset, offset + lengths[i]);
        offset += lengths[i];
        if (config_.positional_encoding)
            h = g.add(h, g.constant(positional_encoding_table(lengths[i], config_.model_dim)));
        auto [h_trans, attn] = build_encoder_layer(g, h, clips[i].mask);
        result.h_trans.push_back(h_trans);
        result.attention.push_back(std::move(attn));
        latent_rows.push_back(
            g.reshape(g.max_rows(h_trans, clips[i].mask), {1, config_.model_dim}));
    }
    result.latents = latent_rows.size() == 1 ? latent_rows[0] : g.concat_rows(latent_rows);
    return result;
}

AttentionRecord extract_attention(const Graph& g, const ModalityEncoder::AttnNodes& nodes) {
    AttentionRecord record;
    const int T = nodes.seq_len;
    std::vector<int> valid;
    for (int t = 0; t < T; ++t)
        if (nodes.mask.data.empty() || nodes.mask.data[t] == 1.0) valid.push_back(t);
    for (const int alpha : nodes.heads) {
        const Tensor& full = g.value(alpha);
        Tensor w({static_cast<int>(valid.size()), static_cast<int>(valid.size())});
        for (size_t i = 0; i < valid.size(); ++i)
            for (size_t j = 0; j < valid.size(); ++j) w.at(i, j) = full.at(valid[i], valid[j]);
        record.head_weights.push_back(std::move(w));
    }
    record.aggregated = temporal_attention(record);
    return record;
}

Tensor temporal_attention(const AttentionRecord& record) {
    if (record.head_weights.empty()) throw GraphError("temporal_attention: empty record");
    const int queries = record.head_weights[0].shape[0];
    const int keys = record.head_weights[0].shape[1];
    Tensor a({keys});
    for (const Tensor& w : record.head_weights)
        for (int i = 0; i < queries; ++i)
            for (int t = 0; t < keys; ++t) a.data[t] += w.at(i, t);
    const double denom = static_cast<double>(queries) * record.head_weights.size();
    for (double& v : a.data) v /= denom;
    return a;
}

}  // namespace adafuse
