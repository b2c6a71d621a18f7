#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "adafuse/fusion.hpp"

namespace adafuse {

struct TrainConfig {
    double lr = 0.001;
    double weight_decay = 1e-5;
    int master_epochs = 200;  // N
    int slave_epochs = 10;    // n
    double gamma = 0.1;
    double alpha = 0.5;
    double beta = 50.0;
    int batch_size = 32;
    uint64_t seed = 0;
    Task task = Task::IPP;
    AblationFlags ablation;
    enum class RefTrainOn { train, val };
    RefTrainOn ref_train_on = RefTrainOn::val;
    bool positional_encoding = true;
    double dropout = 0.4;
    int patience = 0;  // 0 = no early stopping

    void validate() const;
};

struct EpochStats {
    double loss_total = 0.0;
    double loss_pers = 0.0;
    double loss_align = 0.0;  // 0 when the term is ablated
    double val_metric = 0.0;  // MSE (IPP) or accuracy (DOP), label space
    std::array<double, 3> weights{};
    std::array<double, 3> ref_losses{};
};

struct TrainHistory {
    std::vector<EpochStats> epochs;
};

// First/second-moment adaptive optimizer with bias correction; weight decay
// enters as an L2 term added to the gradient.
class Adam {
public:
    Adam(double lr, double weight_decay)
        : lr_(lr), weight_decay_(weight_decay) {}
    void step(ParamStore& store, const std::map<std::string, Tensor>& grads);

private:
    struct Moments {
        Tensor m, v;
    };
    double lr_;
    double weight_decay_;
    double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
    int t_ = 0;
    std::unordered_map<std::string, Moments> moments_;
};

// One training run, stepwise so tests can interleave assertions with the
// master and slave phases. train() drives the full schedule.
class TrainerSession {
public:
    TrainerSession(const TrainConfig& config, int d_acoustic, int d_visual, int d_language,
                   std::vector<FeatureClip> train_set, std::vector<FeatureClip> val_set,
                   ParamStore& store);

    void master_epoch(int epoch);          // update theta over training minibatches
    void slave_phase(int epoch);           // latents -> n slave epochs -> ref losses -> w
    EpochStats finish_epoch(int epoch);    // val metric + history row

    const FusionModel& model() const { return model_; }
    const ModalityWeights& weights() const { return weights_; }
    const TrainHistory& history() const { return history_; }
    bool heterogeneity_active() const;
    double validation_metric();            // label-space metric on the val set

private:
    std::vector<std::vector<int>> make_batches(int epoch);
    std::array<Tensor, 3> compute_latents(const std::vector<const FeatureClip*>& clips);
    std::vector<const FeatureClip*> pointers(const std::vector<FeatureClip>& clips) const;

    TrainConfig config_;
    ParamStore& store_;
    FusionModel model_;
    std::vector<ReferenceModel> refs_;
    ModalityWeights weights_;
    Adam master_adam_;
    std::vector<Adam> slave_adams_;
    Rng root_;
    std::vector<FeatureClip> train_set_;
    std::vector<FeatureClip> val_set_;
    std::vector<double> train_labels_mapped_;
    std::vector<double> val_labels_mapped_;
    TrainHistory history_;
    EpochStats current_;
};

struct TrainOutput {
    ModelConfig model_config;
    ModalityWeights weights;
    TrainHistory history;
};

// Algorithm: per master epoch, (1) update theta with the total loss over
// shuffled minibatches, (2) freeze latent embeddings, (3) run the slave
// epochs on the reference models, (4) measure reference losses on the
// validation set, (5) EMA-update the modality weights.
TrainOutput train(const TrainConfig& config, int d_acoustic, int d_visual, int d_language,
                  const std::vector<const FeatureClip*>& train_set,
                  const std::vector<const FeatureClip*>& val_set, ParamStore& store);

// Eval-mode predictions in label space.
std::vector<double> predict(ParamStore& store, const FusionModel& model,
                            const std::vector<const FeatureClip*>& clips,
                            const std::array<double, 3>& weights);

struct GridSpec {
    std::vector<double> lr, gamma, alpha, beta;
};

struct GridCell {
    double lr, gamma, alpha, beta;
    double mean_val_metric;
};

struct GridResult {
    TrainConfig best;
    std::vector<GridCell> table;
};

// Trains every grid point on every fold (normalizing meta per fold) and
// selects by mean validation metric; ties go to the lexicographically
// smallest (lr, gamma, alpha, beta).
GridResult grid_search(const TrainConfig& base, const GridSpec& grid,
                       const DatasetManifest& manifest, const FoldPlan& plan);

}  // namespace adafuse
