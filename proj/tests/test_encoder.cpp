#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "adafuse/encoder.hpp"
#include "adafuse/errors.hpp"

using namespace adafuse;

namespace {

Tensor random_tensor(Rng& rng, std::vector<int> shape, double scale = 1.0) {
    Tensor t(std::move(shape));
    for (double& v : t.data) v = rng.normal() * scale;
    return t;
}

ModalityEncoder make_encoder(int input_dim, bool positional = true, double dropout = 0.4) {
    EncoderConfig config;
    config.input_dim = input_dim;
    config.dropout = dropout;
    config.positional_encoding = positional;
    return ModalityEncoder("enc.T", config);
}

}  // namespace

TEST_CASE("input embedding: shapes, zero weights, ReLU") {
    const auto enc = make_encoder(5);
    ParamStore store;
    enc.init_params(store, Rng(3));

    SUBCASE("zero weights and bias give an all-zero pre-batch-norm embedding") {
        for (double& v : store.value("enc.T.embed.W").data) v = 0.0;
        for (double& v : store.value("enc.T.embed.b").data) v = 0.0;
        Graph g(store, Mode::eval);
        Rng rng(4);
        const int h = enc.build_embed(g, g.constant(random_tensor(rng, {3, 5})));
        g.run();
        for (const double v : g.value(h).data) CHECK(v == 0.0);
    }
    SUBCASE("a T=1 sequence embeds to one 16-dim row") {
        Graph g(store, Mode::eval);
        Rng rng(5);
        const int h = enc.build_embed(g, g.constant(random_tensor(rng, {1, 5})));
        CHECK(g.shape(h) == std::vector<int>{1, 16});
    }
    SUBCASE("ReLU zeroes negative pre-activations") {
        // weights = rows of +1 on one output each, bias 0, negative input
        Tensor& w = store.value("enc.T.embed.W");
        for (double& v : w.data) v = 0.0;
        for (int i = 0; i < 5; ++i) w.at(i, i) = 1.0;
        for (double& v : store.value("enc.T.embed.b").data) v = 0.0;
        Graph g(store, Mode::eval);
        const int h =
            enc.build_embed(g, g.constant(Tensor::row_major({1, 5}, {-1, 2, -3, 4, -5})));
        g.run();
        CHECK(g.value(h).at(0, 0) == 0.0);
        CHECK(g.value(h).at(0, 1) == 2.0);
        CHECK(g.value(h).at(0, 2) == 0.0);
        CHECK(g.value(h).at(0, 3) == 4.0);
        CHECK(g.value(h).at(0, 4) == 0.0);
    }
    SUBCASE("wrong feature dim is rejected") {
        Graph g(store, Mode::eval);
        CHECK_THROWS_AS(enc.build_embed(g, g.constant(Tensor({2, 7}, 0.0))), GraphError);
    }
}

TEST_CASE("attention behavior on short and masked sequences") {
    const auto enc = make_encoder(16);
    ParamStore store;
    enc.init_params(store, Rng(6));
    Rng rng(7);

    SUBCASE("T=1: the single attention weight is exactly 1") {
        Graph g(store, Mode::eval);
        auto [h_trans, record] = enc.build_encoder_layer(g, g.constant(random_tensor(rng, {1, 16})));
        g.run();
        for (const int alpha : record.heads) CHECK(g.value(alpha).data[0] == 1.0);
        CHECK(g.shape(h_trans) == std::vector<int>{1, 16});
    }
    SUBCASE("masked positions receive zero attention from every query") {
        Tensor mask({4}, 1.0);
        mask.data[2] = 0.0;
        Graph g(store, Mode::eval);
        auto [h_trans, record] =
            enc.build_encoder_layer(g, g.constant(random_tensor(rng, {4, 16})), mask);
        (void)h_trans;
        g.run();
        for (const int alpha : record.heads) {
            const Tensor& a = g.value(alpha);
            for (int i = 0; i < 4; ++i) CHECK(a.at(i, 2) == 0.0);
        }
    }
    SUBCASE("attention rows sum to 1 within 1e-12") {
        Graph g(store, Mode::eval);
        auto [h_trans, record] =
            enc.build_encoder_layer(g, g.constant(random_tensor(rng, {6, 16})));
        (void)h_trans;
        g.run();
        const auto rec = extract_attention(g, record);
        for (const Tensor& w : rec.head_weights)
            for (int i = 0; i < w.shape[0]; ++i) {
                double sum = 0.0;
                for (int j = 0; j < w.shape[1]; ++j) sum += w.at(i, j);
                CHECK(std::abs(sum - 1.0) < 1e-12);
            }
    }
}

TEST_CASE("permuting timesteps with positional encoding off permutes the output") {
    const auto enc = make_encoder(6, /*positional=*/false);
    ParamStore store;
    enc.init_params(store, Rng(8));
    Rng rng(9);
    const Tensor x = random_tensor(rng, {5, 6});
    const std::vector<int> perm = {3, 0, 4, 1, 2};
    Tensor xp({5, 6});
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 6; ++j) xp.at(i, j) = x.at(perm[i], j);

    auto h_trans_of = [&](const Tensor& input) {
        Graph g(store, Mode::eval);
        ModalityEncoder::ClipInput clip;
        clip.features = g.input("x", input.shape);
        const auto result = enc.encode_batch(g, {clip});
        g.bind("x", input);
        g.run();
        return std::pair{g.value(result.h_trans[0]), g.value(result.latents)};
    };
    const auto [h, latent] = h_trans_of(x);
    const auto [hp, latent_p] = h_trans_of(xp);
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 16; ++j)
            CHECK(hp.at(i, j) == doctest::Approx(h.at(perm[i], j)).epsilon(1e-12));
    // max pooling is permutation invariant, so the latent is unchanged
    for (int j = 0; j < 16; ++j)
        CHECK(latent_p.at(0, j) == doctest::Approx(latent.at(0, j)).epsilon(1e-12));
}

TEST_CASE("temporal attention aggregates queries and heads") {
    SUBCASE("uniform attention over T=4 gives 0.25 everywhere") {
        AttentionRecord rec;
        rec.head_weights = {Tensor({4, 4}, 0.25), Tensor({4, 4}, 0.25)};
        const Tensor a = temporal_attention(rec);
        for (const double v : a.data) CHECK(v == doctest::Approx(0.25).epsilon(1e-15));
    }
    SUBCASE("H=1, I=1 returns that single attention row") {
        AttentionRecord rec;
        rec.head_weights = {Tensor::row_major({1, 3}, {0.2, 0.5, 0.3})};
        const Tensor a = temporal_attention(rec);
        CHECK(a.data == std::vector<double>{0.2, 0.5, 0.3});
    }
    SUBCASE("two heads with rows (1,0) and (0,1) average to (0.5, 0.5)") {
        AttentionRecord rec;
        rec.head_weights = {Tensor::row_major({1, 2}, {1, 0}), Tensor::row_major({1, 2}, {0, 1})};
        const Tensor a = temporal_attention(rec);
        CHECK(a.data[0] == doctest::Approx(0.5));
        CHECK(a.data[1] == doctest::Approx(0.5));
    }
    SUBCASE("aggregated weights sum to 1 for a real record") {
        const auto enc = make_encoder(16);
        ParamStore store;
        enc.init_params(store, Rng(10));
        Rng rng(11);
        Graph g(store, Mode::eval);
        auto [h_trans, nodes] =
            enc.build_encoder_layer(g, g.constant(random_tensor(rng, {7, 16})));
        (void)h_trans;
        g.run();
        const auto rec = extract_attention(g, nodes);
        double sum = 0.0;
        for (const double v : rec.aggregated.data) {
            CHECK(v >= 0.0);
            sum += v;
        }
        CHECK(std::abs(sum - 1.0) < 1e-12);
    }
}

TEST_CASE("padding a sequence then masking it yields the same latent") {
    const auto enc = make_encoder(5);
    ParamStore store;
    enc.init_params(store, Rng(12));
    Rng rng(13);
    const Tensor xa = random_tensor(rng, {4, 5});
    const Tensor xb = random_tensor(rng, {6, 5});

    Tensor xb_padded({9, 5}, 0.0);
    for (int i = 0; i < 6; ++i)
        for (int j = 0; j < 5; ++j) xb_padded.at(i, j) = xb.at(i, j);
    for (int i = 6; i < 9; ++i)
        for (int j = 0; j < 5; ++j) xb_padded.at(i, j) = rng.normal();  // garbage padding
    Tensor mask({9}, 1.0);
    for (int i = 6; i < 9; ++i) mask.data[i] = 0.0;

    auto latents_of = [&](const Tensor& second, const Tensor& second_mask) {
        Graph g(store, Mode::eval);
        ModalityEncoder::ClipInput c0, c1;
        c0.features = g.input("a", xa.shape);
        c1.features = g.input("b", second.shape);
        c1.mask = second_mask;
        const auto result = enc.encode_batch(g, {c0, c1});
        g.bind("a", xa);
        g.bind("b", second);
        g.run();
        return g.value(result.latents);
    };
    const Tensor plain = latents_of(xb, {});
    const Tensor padded = latents_of(xb_padded, mask);
    REQUIRE(plain.shape == padded.shape);
    for (size_t i = 0; i < plain.data.size(); ++i)
        CHECK(std::abs(plain.data[i] - padded.data[i]) < 1e-10);
}

TEST_CASE("gradient check passes through the full encoder in eval mode") {
    const auto enc = make_encoder(4);
    ParamStore store;
    enc.init_params(store, Rng(14));
    Rng rng(15);
    Graph g(store, Mode::eval);
    ModalityEncoder::ClipInput c0, c1;
    c0.features = g.constant(random_tensor(rng, {5, 4}));
    c1.features = g.constant(random_tensor(rng, {3, 4}));
    const auto result = enc.encode_batch(g, {c0, c1});
    Tensor probe(g.shape(result.latents));
    for (double& v : probe.data) v = rng.normal();
    const int loss = g.sum_all(g.mul(result.latents, g.constant(std::move(probe))));
    const auto report = g.grad_check(loss, 1e-5, 1e-4);
    CAPTURE(report.worst_param);
    CHECK(report.max_rel_err < 1e-4);
}

TEST_CASE("positional encoding table has the sinusoidal structure") {
    const Tensor pe = ModalityEncoder::positional_encoding_table(4, 16);
    for (int i = 0; i < 8; ++i) {
        CHECK(pe.at(0, 2 * i) == 0.0);  // sin(0)
        CHECK(pe.at(0, 2 * i + 1) == 1.0);  // cos(0)
    }
    CHECK(pe.at(2, 0) == doctest::Approx(std::sin(2.0)));
    CHECK(pe.at(3, 1) == doctest::Approx(std::cos(3.0)));
}
