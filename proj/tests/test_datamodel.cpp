#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "adafuse/datamodel.hpp"
#include "adafuse/errors.hpp"
#include "adafuse/synthgen.hpp"

using namespace adafuse;

namespace {

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

DatasetManifest tiny_manifest(int n_episodes, int clips_per_episode = 1) {
    SynthConfig config;
    config.n_episodes = n_episodes;
    config.clips_per_episode = clips_per_episode;
    config.seq_len_acoustic = {2, 4};
    config.seq_len_visual = {2, 4};
    config.seq_len_language = {2, 4};
    config.d_acoustic = 3;
    config.d_visual = 3;
    config.d_language = 3;
    config.shared_dim = 2;
    config.seed = 7;
    return generate(config);
}

void write_lines(const std::string& path, const std::vector<std::string>& lines) {
    std::ofstream out(path, std::ios::binary);
    for (const auto& l : lines) out << l << "\n";
}

}  // namespace

TEST_CASE("manifest round-trips through the JSONL format") {
    const auto manifest = tiny_manifest(4, 2);
    const std::string path = temp_path("adafuse_dm_roundtrip.jsonl");
    save_manifest(manifest, path);
    const auto loaded = load_manifest(path);
    CHECK(loaded.task == manifest.task);
    CHECK(loaded.episodes == manifest.episodes);
    REQUIRE(loaded.clips.size() == manifest.clips.size());
    for (size_t i = 0; i < loaded.clips.size(); ++i) {
        CHECK(loaded.clips[i].clip_id == manifest.clips[i].clip_id);
        CHECK(loaded.clips[i].acoustic.data == manifest.clips[i].acoustic.data);
        CHECK(loaded.clips[i].label == manifest.clips[i].label);
        CHECK(loaded.clips[i].meta == manifest.clips[i].meta);
    }
    std::remove(path.c_str());
}

TEST_CASE("load_manifest validates and names the offending clip") {
    const std::string header =
        R"({"task":"IPP","d_A":2,"d_V":2,"d_L":2,"episodes":["E1"]})";
    const std::string good =
        R"({"episode_id":"E1","clip_id":"c0","speaker_id":"s0","acoustic":[[1,2]],"visual":[[0,1]],"language":[[2,2]],"meta":[0.5,60],"label":0.25})";
    const std::string path = temp_path("adafuse_dm_validate.jsonl");

    SUBCASE("valid three-clip file") {
        std::string c1 = good, c2 = good;
        c1.replace(c1.find("c0"), 2, "c1");
        c2.replace(c2.find("c0"), 2, "c2");
        write_lines(path, {header, good, c1, c2});
        CHECK(load_manifest(path).clips.size() == 3);
    }
    SUBCASE("IPP label out of range is rejected with the clip id") {
        std::string bad = good;
        bad.replace(bad.find("0.25"), 4, "1.5");
        bad.replace(bad.find("c0"), 2, "c9");
        write_lines(path, {header, good, bad});
        CHECK_THROWS_WITH_AS(load_manifest(path), doctest::Contains("c9"), DataError);
    }
    SUBCASE("empty clips is an empty-dataset error") {
        write_lines(path, {header});
        CHECK_THROWS_WITH_AS(load_manifest(path), doctest::Contains("empty dataset"), DataError);
    }
    SUBCASE("dimension mismatch is rejected") {
        std::string bad = good;
        bad.replace(bad.find("[[1,2]]"), 7, "[[1,2,3]]");
        write_lines(path, {header, bad});
        CHECK_THROWS_AS(load_manifest(path), DataError);
    }
    SUBCASE("malformed JSON is rejected") {
        write_lines(path, {header, "{not json"});
        CHECK_THROWS_AS(load_manifest(path), DataError);
    }
    SUBCASE("DOP labels must be 0 or 1") {
        std::string h = header;
        h.replace(h.find("IPP"), 3, "DOP");
        std::string bad = good;
        bad.replace(bad.find("0.25"), 4, "0.5");
        write_lines(path, {h, bad});
        CHECK_THROWS_AS(load_manifest(path), DataError);
    }
    SUBCASE("unknown episode is rejected") {
        std::string bad = good;
        bad.replace(bad.find("\"E1\","), 5, "\"E7\",");
        write_lines(path, {header, bad});
        CHECK_THROWS_AS(load_manifest(path), DataError);
    }
    std::remove(path.c_str());
}

TEST_CASE("rolling folds follow the train/val/test window rule") {
    SUBCASE("13 episodes, 10 folds: the last fold matches the window layout") {
        const auto manifest = tiny_manifest(13);
        const auto plan = make_rolling_folds(manifest, 10);
        REQUIRE(plan.folds.size() == 10);
        const Fold& last = plan.folds.back();
        CHECK(last.test_episodes == std::vector<std::string>{"E13"});
        CHECK(last.val_episodes == std::vector<std::string>{"E11", "E12"});
        REQUIRE(last.train_episodes.size() == 10);
        CHECK(last.train_episodes.front() == "E01");
        CHECK(last.train_episodes.back() == "E10");
        // first fold tests on E4
        CHECK(plan.folds.front().test_episodes == std::vector<std::string>{"E04"});
    }
    SUBCASE("minimum case: 4 episodes, 1 fold") {
        const auto manifest = tiny_manifest(4);
        const auto plan = make_rolling_folds(manifest, 1);
        REQUIRE(plan.folds.size() == 1);
        CHECK(plan.folds[0].train_episodes == std::vector<std::string>{"E01"});
        CHECK(plan.folds[0].val_episodes == std::vector<std::string>{"E02", "E03"});
        CHECK(plan.folds[0].test_episodes == std::vector<std::string>{"E04"});
    }
    SUBCASE("too few episodes errors with the minimum") {
        const auto manifest = tiny_manifest(5);
        CHECK_THROWS_WITH_AS(make_rolling_folds(manifest, 3), doctest::Contains("6"), DataError);
    }
}

TEST_CASE("cross-validation folds partition episodes by group") {
    SUBCASE("10 episodes, 10 folds") {
        const auto manifest = tiny_manifest(10);
        const auto plan = make_cross_validation_folds(manifest, 10);
        REQUIRE(plan.folds.size() == 10);
        for (const auto& fold : plan.folds) {
            CHECK(fold.test_episodes.size() == 1);
            CHECK(fold.val_episodes.size() == 1);
            CHECK(fold.train_episodes.size() == 8);
        }
    }
    SUBCASE("4 episodes, 2 folds gives groups of 2") {
        const auto manifest = tiny_manifest(4);
        const auto plan = make_cross_validation_folds(manifest, 2);
        REQUIRE(plan.folds.size() == 2);
        CHECK(plan.folds[0].test_episodes.size() == 2);
        CHECK(plan.folds[0].val_episodes.size() == 2);
    }
    SUBCASE("1 episode, 2 folds errors") {
        const auto manifest = tiny_manifest(1);
        CHECK_THROWS_AS(make_cross_validation_folds(manifest, 2), DataError);
    }
}

TEST_CASE("fold plans never leak a test episode into train or val") {
    const auto manifest = tiny_manifest(12);
    for (const auto& plan :
         {make_rolling_folds(manifest, 9), make_cross_validation_folds(manifest, 4)}) {
        for (const auto& fold : plan.folds) {
            std::set<std::string> seen;
            for (const auto& e : fold.test_episodes) CHECK(seen.insert(e).second);
            for (const auto& e : fold.val_episodes) CHECK(seen.insert(e).second);
            for (const auto& e : fold.train_episodes) CHECK(seen.insert(e).second);
        }
    }
}

TEST_CASE("fold plans are deterministic functions of the manifest") {
    const auto manifest = tiny_manifest(13);
    const auto a = make_rolling_folds(manifest, 10);
    const auto b = make_rolling_folds(manifest, 10);
    REQUIRE(a.folds.size() == b.folds.size());
    for (size_t i = 0; i < a.folds.size(); ++i) {
        CHECK(a.folds[i].test_episodes == b.folds[i].test_episodes);
        CHECK(a.folds[i].val_episodes == b.folds[i].val_episodes);
        CHECK(a.folds[i].train_episodes == b.folds[i].train_episodes);
    }
}

TEST_CASE("meta normalization fits on train and clamps out-of-range values") {
    FeatureClip lo, hi, probe;
    lo.meta = {0.4, 60.0};
    hi.meta = {0.6, 120.0};
    SUBCASE("midpoint maps to 0.5") {
        probe.meta = {0.5, 90.0};
        const auto out = normalize_meta({&lo, &hi}, {&probe});
        CHECK(out[0].meta[1] == doctest::Approx(0.5));
    }
    SUBCASE("beyond the fitted max clamps to 1") {
        probe.meta = {0.7, 150.0};
        const auto out = normalize_meta({&lo, &hi}, {&probe});
        CHECK(out[0].meta[0] == 1.0);
        CHECK(out[0].meta[1] == 1.0);
    }
    SUBCASE("below the fitted min clamps to 0") {
        probe.meta = {0.1, 10.0};
        const auto out = normalize_meta({&lo, &hi}, {&probe});
        CHECK(out[0].meta[1] == 0.0);
    }
    SUBCASE("constant feature maps to 0.5 and warns") {
        int warnings = 0;
        auto old = set_warn_handler([&](const std::string&) { ++warnings; });
        FeatureClip same1, same2;
        same1.meta = {0.5, 100.0};
        same2.meta = {0.5, 200.0};
        probe.meta = {0.4, 150.0};
        const auto out = normalize_meta({&same1, &same2}, {&probe});
        CHECK(out[0].meta[0] == 0.5);
        CHECK(out[0].meta[1] == doctest::Approx(0.5));
        CHECK(warnings == 1);
        set_warn_handler(old);
    }
    SUBCASE("train applied to itself stays inside [0,1]") {
        const auto out = normalize_meta({&lo, &hi}, {&lo, &hi});
        for (const auto& clip : out)
            for (const double v : clip.meta) {
                CHECK(v >= 0.0);
                CHECK(v <= 1.0);
            }
    }
    SUBCASE("empty train set errors") {
        CHECK_THROWS_AS(normalize_meta({}, {&probe}), DataError);
    }
}
