#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "adafuse/checkpoint.hpp"
#include "adafuse/errors.hpp"
#include "adafuse/fusion.hpp"
#include "adafuse/synthgen.hpp"

using namespace adafuse;

namespace {

DatasetManifest tiny_dataset(Task task = Task::IPP, uint64_t seed = 11) {
    SynthConfig config;
    config.n_episodes = 2;
    config.clips_per_episode = 3;
    config.seq_len_acoustic = {3, 6};
    config.seq_len_visual = {3, 6};
    config.seq_len_language = {3, 6};
    config.d_acoustic = 3;
    config.d_visual = 4;
    config.d_language = 5;
    config.shared_dim = 2;
    config.task = task;
    config.seed = seed;
    return generate(config);
}

ModelConfig model_config_for(const DatasetManifest& m, AblationFlags ablation = {}) {
    ModelConfig mc;
    mc.task = m.task;
    mc.d_acoustic = m.d_acoustic;
    mc.d_visual = m.d_visual;
    mc.d_language = m.d_language;
    mc.ablation = ablation;
    return mc;
}

std::vector<const FeatureClip*> first_clips(const DatasetManifest& m, size_t n) {
    std::vector<const FeatureClip*> out;
    for (size_t i = 0; i < n; ++i) out.push_back(&m.clips[i]);
    return out;
}

std::vector<double> mapped(const std::vector<const FeatureClip*>& clips, Task task) {
    std::vector<double> out;
    for (const auto* c : clips) out.push_back(map_label(c->label, task));
    return out;
}

}  // namespace

TEST_CASE("an all-zero final head predicts 0.5 for any input") {
    const auto data = tiny_dataset();
    const FusionModel model(model_config_for(data));
    ParamStore store;
    model.init_params(store, 5);
    for (const auto& name : store.names("head."))
        for (double& v : store.value(name).data) v = 0.0;

    Graph g(store, Mode::eval);
    const auto clips = first_clips(data, 3);
    const auto nodes = model.build_forward(g, clips, {1.0 / 3, 1.0 / 3, 1.0 / 3});
    model.bind_batch(g, clips);
    g.run();
    for (const double v : g.value(nodes.yhat).data) CHECK(v == 0.5);
}

TEST_CASE("equal_weights ablation ignores the supplied weights") {
    const auto data = tiny_dataset();
    const auto clips = first_clips(data, 4);

    AblationFlags equal;
    equal.equal_weights = true;
    const FusionModel flagged(model_config_for(data, equal));
    const FusionModel plain(model_config_for(data));

    ParamStore s1;
    flagged.init_params(s1, 77);
    ParamStore s2;
    plain.init_params(s2, 77);

    auto forward = [&](const FusionModel& m, ParamStore& s, std::array<double, 3> w) {
        Graph g(s, Mode::eval);
        const auto nodes = m.build_forward(g, clips, w);
        m.bind_batch(g, clips);
        g.run();
        return g.value(nodes.yhat).data;
    };
    // skewed weights with the flag equal the uniform weights without it
    const auto with_flag = forward(flagged, s1, {0.8, 0.1, 0.1});
    const auto uniform = forward(plain, s2, {1.0 / 3, 1.0 / 3, 1.0 / 3});
    CHECK(with_flag == uniform);
    const auto skewed = forward(plain, s2, {0.8, 0.1, 0.1});
    CHECK(with_flag != skewed);
}

TEST_CASE("unimodal ablation shrinks the head input to latent + meta") {
    const auto data = tiny_dataset();
    AblationFlags uni;
    uni.unimodal = 2;  // language
    const FusionModel model(model_config_for(data, uni));
    CHECK(model.head_input_dim() == 18);

    ParamStore store;
    model.init_params(store, 13);
    CHECK(store.value("head.W1").shape == std::vector<int>{18, 16});
    CHECK(store.names("enc.A").empty());
    CHECK(store.names("enc.V").empty());
    CHECK(!store.names("enc.L").empty());
    CHECK(store.names("shared").empty());

    // other encoders (created by a full model elsewhere) receive no gradient
    const FusionModel full(model_config_for(data));
    ParamStore full_store;
    full.init_params(full_store, 13);
    // no overlap of unimodal graph with enc.A params apart from names: build
    // the unimodal graph on its own store and confirm only enc.L and head
    // parameters appear in the gradient map
    Graph g(store, Mode::eval);
    const auto clips = first_clips(data, 3);
    auto nodes = model.build_forward(g, clips, {1.0 / 3, 1.0 / 3, 1.0 / 3});
    model.build_losses(g, nodes, mapped(clips, data.task), 0.1);
    model.bind_batch(g, clips);
    g.run();
    const auto grads = g.backward(nodes.loss_total);
    for (const auto& [name, grad] : grads) {
        const bool ok = name.rfind("enc.L", 0) == 0 || name.rfind("head.", 0) == 0;
        CAPTURE(name);
        CHECK(ok);
    }
    CHECK(nodes.loss_align == -1);  // unimodal has no alignment term
}

TEST_CASE("persuasion loss closed forms") {
    SUBCASE("perfect IPP prediction gives zero") {
        CHECK(persuasion_loss_value({0.3, 0.7}, {0.3, 0.7}, Task::IPP) == 0.0);
    }
    SUBCASE("DOP at 0.5 gives ln 2") {
        CHECK(persuasion_loss_value({0.5, 0.5}, {0.0, 1.0}, Task::DOP) ==
              doctest::Approx(std::log(2.0)).epsilon(1e-12));
    }
    SUBCASE("IPP batch {(0.2,0.4),(0.6,0.6)} gives 0.02") {
        CHECK(persuasion_loss_value({0.2, 0.6}, {0.4, 0.6}, Task::IPP) ==
              doctest::Approx(0.02).epsilon(1e-12));
    }
    SUBCASE("BCE clamps rather than overflowing at hard 0/1 predictions") {
        const double v = persuasion_loss_value({0.0, 1.0}, {1.0, 0.0}, Task::DOP);
        CHECK(std::isfinite(v));
        CHECK(v == doctest::Approx(-std::log(1e-7)).epsilon(1e-6));
    }
    SUBCASE("the graph build matches the direct evaluation") {
        ParamStore store;
        Graph g(store, Mode::eval);
        const int yhat = g.constant(Tensor::row_major({3, 1}, {0.2, 0.7, 0.5}));
        const int loss = build_persuasion_loss(g, yhat, {0.1, 0.9, 0.4}, Task::IPP);
        g.run();
        CHECK(g.value(loss).data[0] ==
              doctest::Approx(persuasion_loss_value({0.2, 0.7, 0.5}, {0.1, 0.9, 0.4}, Task::IPP))
                  .epsilon(1e-15));

        Graph g2(store, Mode::eval);
        const int yhat2 = g2.constant(Tensor::row_major({2, 1}, {0.3, 0.8}));
        const int loss2 = build_persuasion_loss(g2, yhat2, {0.0, 1.0}, Task::DOP);
        g2.run();
        CHECK(g2.value(loss2).data[0] ==
              doctest::Approx(persuasion_loss_value({0.3, 0.8}, {0.0, 1.0}, Task::DOP))
                  .epsilon(1e-15));
    }
}

TEST_CASE("total loss combines the terms") {
    CHECK(total_loss_value(0.37, 0.9, 0.0) == 0.37);
    CHECK(total_loss_value(0.02, 0.3, 0.1) == doctest::Approx(0.05).epsilon(1e-15));
    CHECK_THROWS_AS(total_loss_value(0.1, 0.1, -0.5), ConfigError);

    // no_alignment: total equals the persuasion term even with gamma > 0
    const auto data = tiny_dataset();
    AblationFlags na;
    na.no_alignment = true;
    const FusionModel model(model_config_for(data, na));
    ParamStore store;
    model.init_params(store, 3);
    Graph g(store, Mode::eval);
    const auto clips = first_clips(data, 3);
    auto nodes = model.build_forward(g, clips, {1.0 / 3, 1.0 / 3, 1.0 / 3});
    model.build_losses(g, nodes, mapped(clips, data.task), 0.1);
    model.bind_batch(g, clips);
    g.run();
    CHECK(g.value(nodes.loss_total).data[0] == g.value(nodes.loss_pers).data[0]);
}

TEST_CASE("label mapping round-trips IPP into sigmoid space") {
    CHECK(map_label(-1.0, Task::IPP) == 0.0);
    CHECK(map_label(1.0, Task::IPP) == 1.0);
    CHECK(map_label(0.0, Task::IPP) == 0.5);
    CHECK(unmap_prediction(map_label(0.37, Task::IPP), Task::IPP) ==
          doctest::Approx(0.37).epsilon(1e-15));
    CHECK(map_label(1.0, Task::DOP) == 1.0);
    CHECK(unmap_prediction(0.8, Task::DOP) == 0.8);
}

TEST_CASE("end-to-end gradient check on a 4-clip batch passes at 1e-4") {
    const auto data = tiny_dataset(Task::IPP, 21);
    const FusionModel model(model_config_for(data));
    ParamStore store;
    model.init_params(store, 9);
    Graph g(store, Mode::eval);
    const auto clips = first_clips(data, 4);
    auto nodes = model.build_forward(g, clips, {0.5, 0.25, 0.25});
    model.build_losses(g, nodes, mapped(clips, data.task), 0.1);
    model.bind_batch(g, clips);
    const auto report = g.grad_check(nodes.loss_total, 1e-3, 1e-4);
    CAPTURE(report.worst_param);
    CHECK(report.max_rel_err < 1e-4);
    CHECK(report.checked > 1000);
}

TEST_CASE("predictions are invariant to padding plus masking") {
    const auto data = tiny_dataset(Task::IPP, 31);
    const FusionModel model(model_config_for(data));
    ParamStore store;
    model.init_params(store, 41);

    auto clips = first_clips(data, 3);
    // pad the second clip's visual stream with garbage rows + a mask
    FeatureClip padded = *clips[1];
    const int t_valid = padded.visual.shape[0];
    Tensor vis({t_valid + 3, padded.visual.shape[1]}, 0.0);
    Rng rng(51);
    for (int i = 0; i < t_valid; ++i)
        for (int j = 0; j < vis.shape[1]; ++j) vis.at(i, j) = padded.visual.at(i, j);
    for (int i = t_valid; i < vis.shape[0]; ++i)
        for (int j = 0; j < vis.shape[1]; ++j) vis.at(i, j) = rng.normal() * 3.0;
    padded.visual = vis;

    std::vector<std::array<Tensor, 3>> masks(clips.size());
    masks[1][1] = Tensor({t_valid + 3}, 1.0);
    for (int i = t_valid; i < t_valid + 3; ++i) masks[1][1].data[i] = 0.0;

    auto forward_plain = [&]() {
        Graph g(store, Mode::eval);
        const auto nodes = model.build_forward(g, clips, {1.0 / 3, 1.0 / 3, 1.0 / 3});
        model.bind_batch(g, clips);
        g.run();
        return g.value(nodes.yhat).data;
    };
    auto forward_padded = [&]() {
        auto with_pad = clips;
        with_pad[1] = &padded;
        Graph g(store, Mode::eval);
        const auto nodes = model.build_forward(g, with_pad, {1.0 / 3, 1.0 / 3, 1.0 / 3}, &masks);
        model.bind_batch(g, with_pad);
        g.run();
        return g.value(nodes.yhat).data;
    };
    const auto a = forward_plain();
    const auto b = forward_padded();
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) CHECK(std::abs(a[i] - b[i]) < 1e-10);
}

TEST_CASE("checkpoints round-trip bit-exactly") {
    const auto data = tiny_dataset();
    const FusionModel model(model_config_for(data));
    ParamStore store;
    model.init_params(store, 61);
    const std::string config_json = R"({"task":"IPP","seed":61})";

    namespace fs = std::filesystem;
    const auto p1 = (fs::temp_directory_path() / "adafuse_ckpt_a.bin").string();
    const auto p2 = (fs::temp_directory_path() / "adafuse_ckpt_b.bin").string();
    save_checkpoint(p1, store, config_json);

    ParamStore loaded;
    const std::string loaded_json = load_checkpoint(p1, loaded);
    CHECK(loaded_json == config_json);
    REQUIRE(loaded.size() == store.size());
    for (int i = 0; i < store.size(); ++i) {
        CHECK(loaded.name(i) == store.name(i));
        CHECK(loaded.trainable(i) == store.trainable(i));
        CHECK(loaded.value(i).shape == store.value(i).shape);
        CHECK(loaded.value(i).data == store.value(i).data);
    }
    CHECK(loaded.fingerprint() == store.fingerprint());

    // saving the loaded store reproduces the file byte for byte
    save_checkpoint(p2, loaded, loaded_json);
    std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
    std::stringstream s1, s2;
    s1 << f1.rdbuf();
    s2 << f2.rdbuf();
    CHECK(s1.str() == s2.str());
    std::remove(p1.c_str());
    std::remove(p2.c_str());
}
