#include "adafuse/datamodel.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "adafuse/errors.hpp"

namespace adafuse {

using nlohmann::json;

std::string task_name(Task t) { return t == Task::IPP ? "IPP" : "DOP"; }

Task task_from_name(const std::string& name) {
    if (name == "IPP") return Task::IPP;
    if (name == "DOP") return Task::DOP;
    throw DataError("unknown task '" + name + "' (expected IPP or DOP)");
}

std::vector<const FeatureClip*> DatasetManifest::clips_of(
    const std::vector<std::string>& episode_ids) const {
    std::set<std::string> wanted(episode_ids.begin(), episode_ids.end());
    std::vector<const FeatureClip*> out;
    for (const auto& clip : clips)
        if (wanted.count(clip.episode_id)) out.push_back(&clip);
    return out;
}

namespace {

Tensor parse_sequence(const json& j, int expected_dim, const std::string& clip_id,
                      const std::string& field) {
    if (!j.is_array() || j.empty())
        throw DataError("clip '" + clip_id + "': " + field + " must be a nonempty array of rows");
    const int rows = static_cast<int>(j.size());
    Tensor t({rows, expected_dim});
    for (int i = 0; i < rows; ++i) {
        const json& row = j[i];
        if (!row.is_array() || static_cast<int>(row.size()) != expected_dim)
            throw DataError("clip '" + clip_id + "': " + field + " row " + std::to_string(i) +
                            " has dim " + std::to_string(row.size()) + ", expected " +
                            std::to_string(expected_dim));
        for (int k = 0; k < expected_dim; ++k) {
            if (!row[k].is_number())
                throw DataError("clip '" + clip_id + "': " + field + " contains a non-number");
            const double v = row[k].get<double>();
            if (!std::isfinite(v))
                throw DataError("clip '" + clip_id + "': " + field + " contains a non-finite value");
            t.at(i, k) = v;
        }
    }
    return t;
}

void validate_label(Task task, double label, const std::string& clip_id) {
    if (!std::isfinite(label)) throw DataError("clip '" + clip_id + "': non-finite label");
    if (task == Task::IPP) {
        if (label < -1.0 || label > 1.0)
            throw DataError("clip '" + clip_id + "': IPP label " + std::to_string(label) +
                            " outside [-1,1]");
    } else {
        if (label != 0.0 && label != 1.0)
            throw DataError("clip '" + clip_id + "': DOP label must be 0 or 1");
    }
}

json sequence_to_json(const Tensor& t) {
    json rows = json::array();
    for (int i = 0; i < t.shape[0]; ++i) {
        json row = json::array();
        for (int j = 0; j < t.shape[1]; ++j) row.push_back(t.at(i, j));
        rows.push_back(std::move(row));
    }
    return rows;
}

}  // namespace

DatasetManifest load_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open manifest '" + path + "'");

    std::string line;
    if (!std::getline(in, line)) throw DataError("manifest '" + path + "' is empty");

    json header;
    try {
        header = json::parse(line);
    } catch (const json::exception& e) {
        throw DataError(std::string("manifest header: malformed JSON: ") + e.what());
    }

    DatasetManifest m;
    try {
        m.task = task_from_name(header.at("task").get<std::string>());
        m.d_acoustic = header.at("d_A").get<int>();
        m.d_visual = header.at("d_V").get<int>();
        m.d_language = header.at("d_L").get<int>();
        m.episodes = header.at("episodes").get<std::vector<std::string>>();
    } catch (const json::exception& e) {
        throw DataError(std::string("manifest header: ") + e.what());
    }
    if (m.d_acoustic < 1 || m.d_visual < 1 || m.d_language < 1)
        throw DataError("manifest header: feature dims must be >= 1");
    if (m.episodes.empty()) throw DataError("manifest header: empty episode list");
    {
        std::set<std::string> seen;
        for (const auto& e : m.episodes)
            if (!seen.insert(e).second)
                throw DataError("manifest header: duplicate episode '" + e + "'");
    }

    const std::set<std::string> episode_set(m.episodes.begin(), m.episodes.end());
    int line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw DataError("line " + std::to_string(line_no) + ": malformed JSON: " + e.what());
        }
        FeatureClip clip;
        std::string clip_id = "<line " + std::to_string(line_no) + ">";
        try {
            clip.clip_id = j.at("clip_id").get<std::string>();
            clip_id = clip.clip_id;
            clip.episode_id = j.at("episode_id").get<std::string>();
            clip.speaker_id = j.at("speaker_id").get<std::string>();
            clip.acoustic = parse_sequence(j.at("acoustic"), m.d_acoustic, clip_id, "acoustic");
            clip.visual = parse_sequence(j.at("visual"), m.d_visual, clip_id, "visual");
            clip.language = parse_sequence(j.at("language"), m.d_language, clip_id, "language");
            const auto meta = j.at("meta").get<std::vector<double>>();
            if (meta.size() != 2)
                throw DataError("clip '" + clip_id + "': meta must have exactly 2 values");
            clip.meta = {meta[0], meta[1]};
            clip.label = j.at("label").get<double>();
        } catch (const json::exception& e) {
            throw DataError("clip '" + clip_id + "': " + e.what());
        }
        for (const double v : clip.meta)
            if (!std::isfinite(v))
                throw DataError("clip '" + clip_id + "': non-finite meta value");
        validate_label(m.task, clip.label, clip_id);
        if (!episode_set.count(clip.episode_id))
            throw DataError("clip '" + clip_id + "': episode '" + clip.episode_id +
                            "' not in manifest episode list");
        m.clips.push_back(std::move(clip));
    }
    if (m.clips.empty()) throw DataError("empty dataset: manifest '" + path + "' has no clips");
    return m;
}

void save_manifest(const DatasetManifest& manifest, const std::string& path) {
    std::ofstream out(path, std::ios::binary);  // binary: LF endings everywhere
    if (!out) throw DataError("cannot write manifest '" + path + "'");
    json header;
    header["task"] = task_name(manifest.task);
    header["d_A"] = manifest.d_acoustic;
    header["d_V"] = manifest.d_visual;
    header["d_L"] = manifest.d_language;
    header["episodes"] = manifest.episodes;
    out << header.dump() << "\n";
    for (const auto& clip : manifest.clips) {
        json j;
        j["episode_id"] = clip.episode_id;
        j["clip_id"] = clip.clip_id;
        j["speaker_id"] = clip.speaker_id;
        j["acoustic"] = sequence_to_json(clip.acoustic);
        j["visual"] = sequence_to_json(clip.visual);
        j["language"] = sequence_to_json(clip.language);
        j["meta"] = {clip.meta[0], clip.meta[1]};
        j["label"] = clip.label;
        out << j.dump() << "\n";
    }
}

FoldPlan make_rolling_folds(const DatasetManifest& manifest, int n_folds) {
    const int k = static_cast<int>(manifest.episodes.size());
    if (n_folds < 1) throw DataError("rolling folds: n_folds must be >= 1");
    if (k < n_folds + 3)
        throw DataError("rolling folds: need at least " + std::to_string(n_folds + 3) +
                        " episodes for " + std::to_string(n_folds) + " folds, have " +
                        std::to_string(k));
    FoldPlan plan;
    for (int i = k - n_folds + 1; i <= k; ++i) {  // 1-based episode index
        Fold fold;
        fold.test_episodes = {manifest.episodes[i - 1]};
        fold.val_episodes = {manifest.episodes[i - 3], manifest.episodes[i - 2]};
        for (int j = 1; j <= i - 3; ++j) fold.train_episodes.push_back(manifest.episodes[j - 1]);
        plan.folds.push_back(std::move(fold));
    }
    return plan;
}

FoldPlan make_cross_validation_folds(const DatasetManifest& manifest, int n_folds) {
    const int k = static_cast<int>(manifest.episodes.size());
    if (n_folds < 2) throw DataError("cross validation: n_folds must be >= 2");
    if (k < n_folds)
        throw DataError("cross validation: fewer episodes (" + std::to_string(k) +
                        ") than folds (" + std::to_string(n_folds) + ")");
    // Contiguous groups, as equal as possible; the first k%n groups get one extra.
    std::vector<std::vector<std::string>> groups(n_folds);
    const int base = k / n_folds;
    const int extra = k % n_folds;
    int pos = 0;
    for (int gi = 0; gi < n_folds; ++gi) {
        const int len = base + (gi < extra ? 1 : 0);
        for (int j = 0; j < len; ++j) groups[gi].push_back(manifest.episodes[pos++]);
    }
    FoldPlan plan;
    for (int gi = 0; gi < n_folds; ++gi) {
        const int vi = (gi + 1) % n_folds;
        Fold fold;
        fold.test_episodes = groups[gi];
        fold.val_episodes = groups[vi];
        for (int gj = 0; gj < n_folds; ++gj) {
            if (gj == gi || gj == vi) continue;
            for (const auto& e : groups[gj]) fold.train_episodes.push_back(e);
        }
        plan.folds.push_back(std::move(fold));
    }
    return plan;
}

MetaNormalizer MetaNormalizer::fit(const std::vector<const FeatureClip*>& train_clips) {
    if (train_clips.empty()) throw DataError("normalize_meta: empty training set");
    MetaNormalizer n;
    for (int k = 0; k < 2; ++k) {
        double lo = train_clips[0]->meta[k];
        double hi = lo;
        for (const auto* clip : train_clips) {
            lo = std::min(lo, clip->meta[k]);
            hi = std::max(hi, clip->meta[k]);
        }
        if (lo == hi)
            warn("normalize_meta: meta feature " + std::to_string(k) +
                 " is constant on the training fold; mapping to 0.5");
        n.lo_[k] = lo;
        n.hi_[k] = hi;
    }
    return n;
}

std::array<double, 2> MetaNormalizer::apply(const std::array<double, 2>& meta) const {
    std::array<double, 2> out{};
    for (int k = 0; k < 2; ++k) {
        if (lo_[k] == hi_[k]) {
            out[k] = 0.5;
        } else {
            const double v = (meta[k] - lo_[k]) / (hi_[k] - lo_[k]);
            out[k] = std::min(1.0, std::max(0.0, v));
        }
    }
    return out;
}

FeatureClip MetaNormalizer::apply(const FeatureClip& clip) const {
    FeatureClip out = clip;
    out.meta = apply(clip.meta);
    return out;
}

std::vector<FeatureClip> normalize_meta(const std::vector<const FeatureClip*>& train_clips,
                                        const std::vector<const FeatureClip*>& apply_to) {
    const MetaNormalizer n = MetaNormalizer::fit(train_clips);
    std::vector<FeatureClip> out;
    out.reserve(apply_to.size());
    for (const auto* clip : apply_to) out.push_back(n.apply(*clip));
    return out;
}

}  // namespace adafuse
