#pragma once

#include <array>
#include <string>
#include <vector>

#include "adafuse/tensor.hpp"

namespace adafuse {

enum class Task { IPP, DOP };

std::string task_name(Task t);
Task task_from_name(const std::string& name);

// One speaker clip: three variable-length feature sequences, the two
// meta-data values (initial vote score, speaking length) and a label.
// IPP labels live in [-1,1]; DOP labels are 0/1.
struct FeatureClip {
    std::string episode_id;
    std::string clip_id;
    std::string speaker_id;
    Tensor acoustic;  // [T_A x d_A]
    Tensor visual;    // [T_V x d_V]
    Tensor language;  // [T_L x d_L]
    std::array<double, 2> meta{};
    double label = 0.0;
};

struct DatasetManifest {
    Task task = Task::IPP;
    int d_acoustic = 0;
    int d_visual = 0;
    int d_language = 0;
    std::vector<std::string> episodes;  // temporal order
    std::vector<FeatureClip> clips;

    std::vector<const FeatureClip*> clips_of(const std::vector<std::string>& episode_ids) const;
};

struct Fold {
    std::vector<std::string> test_episodes;  // exactly 1 for rolling plans
    std::vector<std::string> val_episodes;
    std::vector<std::string> train_episodes;
};

struct FoldPlan {
    std::vector<Fold> folds;
};

// JSONL: line 1 is the header object, every further line one clip object.
DatasetManifest load_manifest(const std::string& path);
void save_manifest(const DatasetManifest& manifest, const std::string& path);

// Rolling-window plan over the last n_folds episodes: the fold testing on
// E_i trains on E_1..E_{i-3} and validates on {E_{i-2}, E_{i-1}}.
FoldPlan make_rolling_folds(const DatasetManifest& manifest, int n_folds);

// Episode-grouped cross validation: contiguous groups, one group test, the
// cyclically next group validation, the rest train.
FoldPlan make_cross_validation_folds(const DatasetManifest& manifest, int n_folds);

// Min-max normalization of the meta features, fitted on the training fold
// only. Out-of-range values clamp to [0,1]; a constant feature maps to 0.5.
class MetaNormalizer {
public:
    static MetaNormalizer fit(const std::vector<const FeatureClip*>& train_clips);
    std::array<double, 2> apply(const std::array<double, 2>& meta) const;
    FeatureClip apply(const FeatureClip& clip) const;

private:
    std::array<double, 2> lo_{};
    std::array<double, 2> hi_{};
};

std::vector<FeatureClip> normalize_meta(const std::vector<const FeatureClip*>& train_clips,
                                        const std::vector<const FeatureClip*>& apply_to);

}  // namespace adafuse
