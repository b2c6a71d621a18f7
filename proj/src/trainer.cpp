#include "adafuse/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "adafuse/errors.hpp"

namespace adafuse {

void TrainConfig::validate() const {
    if (!(lr > 0.0)) throw ConfigError("train config: lr must be > 0");
    if (weight_decay < 0.0) throw ConfigError("train config: weight_decay must be >= 0");
    if (master_epochs < 0 || slave_epochs < 0)
        throw ConfigError("train config: epoch counts must be >= 0");
    if (gamma < 0.0) throw ConfigError("train config: gamma must be >= 0");
    if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("train config: alpha must be in (0,1)");
    if (!(beta > 0.0)) throw ConfigError("train config: beta must be > 0");
    if (batch_size < 2) throw ConfigError("train config: batch_size must be >= 2");
    if (!(dropout >= 0.0 && dropout < 1.0))
        throw ConfigError("train config: dropout must be in [0,1)");
    if (patience < 0) throw ConfigError("train config: patience must be >= 0");
}

void Adam::step(ParamStore& store, const std::map<std::string, Tensor>& grads) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, t_);
    const double bc2 = 1.0 - std::pow(beta2_, t_);
    for (const auto& [name, grad] : grads) {
        Tensor& value = store.value(name);
        auto& mom = moments_[name];
        if (mom.m.data.empty()) {
            mom.m = Tensor(value.shape);
            mom.v = Tensor(value.shape);
        }
        for (size_t i = 0; i < value.data.size(); ++i) {
            const double g = grad.data[i] + weight_decay_ * value.data[i];
            mom.m.data[i] = beta1_ * mom.m.data[i] + (1.0 - beta1_) * g;
            mom.v.data[i] = beta2_ * mom.v.data[i] + (1.0 - beta2_) * g * g;
            const double mhat = mom.m.data[i] / bc1;
            const double vhat = mom.v.data[i] / bc2;
            value.data[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
        }
    }
}

namespace {

ModelConfig make_model_config(const TrainConfig& config, int d_a, int d_v, int d_l) {
    ModelConfig mc;
    mc.task = config.task;
    mc.d_acoustic = d_a;
    mc.d_visual = d_v;
    mc.d_language = d_l;
    mc.positional_encoding = config.positional_encoding;
    mc.dropout = config.dropout;
    mc.ablation = config.ablation;
    return mc;
}

std::vector<double> mapped_labels(const std::vector<FeatureClip>& clips, Task task) {
    std::vector<double> out;
    out.reserve(clips.size());
    for (const auto& c : clips) out.push_back(map_label(c.label, task));
    return out;
}

double label_space_metric(const std::vector<double>& y_true, const std::vector<double>& y_pred,
                          Task task) {
    double sum = 0.0;
    if (task == Task::IPP) {
        for (size_t i = 0; i < y_true.size(); ++i) {
            const double d = y_true[i] - y_pred[i];
            sum += d * d;
        }
        return sum / static_cast<double>(y_true.size());
    }
    for (size_t i = 0; i < y_true.size(); ++i) {
        const double cls = y_pred[i] >= 0.5 ? 1.0 : 0.0;
        sum += cls == y_true[i] ? 1.0 : 0.0;
    }
    return sum / static_cast<double>(y_true.size());
}

}  // namespace

TrainerSession::TrainerSession(const TrainConfig& config, int d_acoustic, int d_visual,
                               int d_language, std::vector<FeatureClip> train_set,
                               std::vector<FeatureClip> val_set, ParamStore& store)
    : config_(config),
      store_(store),
      model_(make_model_config(config, d_acoustic, d_visual, d_language)),
      weights_{},
      master_adam_(config.lr, config.weight_decay),
      root_(config.seed),
      train_set_(std::move(train_set)),
      val_set_(std::move(val_set)) {
    config_.validate();
    if (train_set_.empty()) throw DataError("train: empty training set");
    if (val_set_.empty()) throw DataError("train: empty validation set");

    weights_.alpha = config_.alpha;
    weights_.beta = config_.beta;

    model_.init_params(store_, root_.derive("init_theta").next_u64());
    if (heterogeneity_active()) {
        const Rng ref_rng = root_.derive("init_phi");
        for (int m = 0; m < 3; ++m) {
            refs_.emplace_back(std::string("ref.") + FusionModel::modality_name(m),
                               config_.dropout);
            refs_[m].init_params(store_, ref_rng);
            slave_adams_.emplace_back(config_.lr, config_.weight_decay);
        }
    }
    train_labels_mapped_ = mapped_labels(train_set_, config_.task);
    val_labels_mapped_ = mapped_labels(val_set_, config_.task);
}

bool TrainerSession::heterogeneity_active() const {
    return !config_.ablation.equal_weights && config_.ablation.unimodal < 0;
}

std::vector<const FeatureClip*> TrainerSession::pointers(
    const std::vector<FeatureClip>& clips) const {
    std::vector<const FeatureClip*> out;
    out.reserve(clips.size());
    for (const auto& c : clips) out.push_back(&c);
    return out;
}

std::vector<std::vector<int>> TrainerSession::make_batches(int epoch) {
    std::vector<int> order(train_set_.size());
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng = root_.derive("shuffle", static_cast<uint64_t>(epoch));
    shuffle_rng.shuffle(order);
    std::vector<std::vector<int>> batches;
    for (size_t i = 0; i < order.size(); i += config_.batch_size) {
        const size_t end = std::min(order.size(), i + config_.batch_size);
        batches.emplace_back(order.begin() + i, order.begin() + end);
    }
    // CORAL needs >= 2 rows; fold a trailing singleton into the previous batch.
    if (batches.size() > 1 && batches.back().size() == 1) {
        batches[batches.size() - 2].push_back(batches.back()[0]);
        batches.pop_back();
    }
    return batches;
}

void TrainerSession::master_epoch(int epoch) {
    current_ = EpochStats{};
    const auto batches = make_batches(epoch);
    double total_clips = 0.0;
    for (size_t bi = 0; bi < batches.size(); ++bi) {
        const auto& batch = batches[bi];
        std::vector<const FeatureClip*> clips;
        std::vector<double> labels;
        for (const int idx : batch) {
            clips.push_back(&train_set_[idx]);
            labels.push_back(train_labels_mapped_[idx]);
        }
        Graph g(store_, Mode::train,
                root_.derive("noise", static_cast<uint64_t>(epoch), bi).next_u64());
        auto nodes = model_.build_forward(g, clips, weights_.w);
        model_.build_losses(g, nodes, labels, config_.gamma);
        model_.bind_batch(g, clips);
        try {
            g.run();
        } catch (const GraphError& e) {
            throw DivergenceError(std::string("training diverged at epoch ") +
                                      std::to_string(epoch) + ": " + e.what(),
                                  epoch);
        }
        const double n = static_cast<double>(batch.size());
        current_.loss_total += g.value(nodes.loss_total).data[0] * n;
        current_.loss_pers += g.value(nodes.loss_pers).data[0] * n;
        if (nodes.loss_align >= 0) current_.loss_align += g.value(nodes.loss_align).data[0] * n;
        total_clips += n;
        const auto grads = g.backward(nodes.loss_total);
        master_adam_.step(store_, grads);
    }
    current_.loss_total /= total_clips;
    current_.loss_pers /= total_clips;
    current_.loss_align /= total_clips;
}

std::array<Tensor, 3> TrainerSession::compute_latents(
    const std::vector<const FeatureClip*>& clips) {
    Graph g(store_, Mode::eval);
    auto nodes = model_.build_forward(g, clips, weights_.w);
    model_.bind_batch(g, clips);
    g.run();
    std::array<Tensor, 3> latents;
    for (int m = 0; m < 3; ++m) latents[m] = g.value(nodes.latents[m]);
    return latents;
}

void TrainerSession::slave_phase(int epoch) {
    if (!heterogeneity_active()) {
        current_.ref_losses = {0.0, 0.0, 0.0};
        current_.weights = weights_.w;
        return;
    }
    const auto& slave_clips =
        config_.ref_train_on == TrainConfig::RefTrainOn::val ? val_set_ : train_set_;
    const auto& slave_labels = config_.ref_train_on == TrainConfig::RefTrainOn::val
                                   ? val_labels_mapped_
                                   : train_labels_mapped_;
    const auto slave_latents = compute_latents(pointers(slave_clips));
    const auto val_latents = config_.ref_train_on == TrainConfig::RefTrainOn::val
                                 ? slave_latents
                                 : compute_latents(pointers(val_set_));

    Tensor label_col({static_cast<int>(slave_labels.size()), 1});
    for (size_t i = 0; i < slave_labels.size(); ++i) label_col.data[i] = slave_labels[i];

    for (int se = 0; se < config_.slave_epochs; ++se) {
        for (int m = 0; m < 3; ++m) {
            Graph g(store_, Mode::train,
                    root_.derive("slave_noise", static_cast<uint64_t>(epoch),
                                 static_cast<uint64_t>(se) * 3 + m)
                        .next_u64());
            const int latents = g.constant(slave_latents[m]);
            const int preds = refs_[m].build(g, latents);
            const int diff = g.sub(preds, g.constant(label_col));
            const int loss = g.mean_all(g.mul(diff, diff));
            try {
                g.run();
            } catch (const GraphError& e) {
                throw DivergenceError(std::string("slave training diverged at epoch ") +
                                          std::to_string(epoch) + ": " + e.what(),
                                      epoch);
            }
            const auto grads = g.backward(loss);
            slave_adams_[m].step(store_, grads);
        }
    }

    for (int m = 0; m < 3; ++m)
        current_.ref_losses[m] =
            reference_loss(store_, refs_[m], val_latents[m], val_labels_mapped_);
    weights_.last_ref_losses = current_.ref_losses;
    const auto target = compute_target_weights(current_.ref_losses, weights_.beta);
    weights_ = update_weights(weights_, target);
    current_.weights = weights_.w;
}

double TrainerSession::validation_metric() {
    const auto preds = predict(store_, model_, pointers(val_set_), weights_.w);
    std::vector<double> y_true;
    for (const auto& c : val_set_) y_true.push_back(c.label);
    return label_space_metric(y_true, preds, config_.task);
}

EpochStats TrainerSession::finish_epoch(int epoch) {
    (void)epoch;
    current_.val_metric = validation_metric();
    current_.weights = weights_.w;
    history_.epochs.push_back(current_);
    return current_;
}

TrainOutput train(const TrainConfig& config, int d_acoustic, int d_visual, int d_language,
                  const std::vector<const FeatureClip*>& train_set,
                  const std::vector<const FeatureClip*>& val_set, ParamStore& store) {
    std::vector<FeatureClip> train_copy, val_copy;
    for (const auto* c : train_set) train_copy.push_back(*c);
    for (const auto* c : val_set) val_copy.push_back(*c);
    TrainerSession session(config, d_acoustic, d_visual, d_language, std::move(train_copy),
                           std::move(val_copy), store);
    double best_metric = 0.0;
    int since_best = 0;
    for (int epoch = 0; epoch < config.master_epochs; ++epoch) {
        session.master_epoch(epoch);
        session.slave_phase(epoch);
        const EpochStats stats = session.finish_epoch(epoch);
        if (config.patience > 0) {
            const bool better =
                epoch == 0 || (config.task == Task::IPP ? stats.val_metric < best_metric
                                                        : stats.val_metric > best_metric);
            if (better) {
                best_metric = stats.val_metric;
                since_best = 0;
            } else if (++since_best >= config.patience) {
                break;
            }
        }
    }
    TrainOutput out;
    out.model_config = session.model().config();
    out.weights = session.weights();
    out.history = session.history();
    return out;
}

std::vector<double> predict(ParamStore& store, const FusionModel& model,
                            const std::vector<const FeatureClip*>& clips,
                            const std::array<double, 3>& weights) {
    Graph g(store, Mode::eval);
    auto nodes = model.build_forward(g, clips, weights);
    model.bind_batch(g, clips);
    g.run();
    const Tensor& yhat = g.value(nodes.yhat);
    std::vector<double> out;
    out.reserve(clips.size());
    for (size_t i = 0; i < clips.size(); ++i)
        out.push_back(unmap_prediction(yhat.data[i], model.config().task));
    return out;
}

GridResult grid_search(const TrainConfig& base, const GridSpec& grid,
                       const DatasetManifest& manifest, const FoldPlan& plan) {
    if (grid.lr.empty() || grid.gamma.empty() || grid.alpha.empty() || grid.beta.empty())
        throw ConfigError("grid search: all four grids must be nonempty");
    if (plan.folds.empty()) throw ConfigError("grid search: empty fold plan");

    GridResult result;
    bool have_best = false;
    std::array<double, 4> best_key{};
    double best_metric = 0.0;

    for (const double lr : grid.lr)
        for (const double gamma : grid.gamma)
            for (const double alpha : grid.alpha)
                for (const double beta : grid.beta) {
                    TrainConfig config = base;
                    config.lr = lr;
                    config.gamma = gamma;
                    config.alpha = alpha;
                    config.beta = beta;
                    double sum = 0.0;
                    for (const auto& fold : plan.folds) {
                        const auto train_ptrs = manifest.clips_of(fold.train_episodes);
                        const auto val_ptrs = manifest.clips_of(fold.val_episodes);
                        const auto train_clips = normalize_meta(train_ptrs, train_ptrs);
                        const auto val_clips = normalize_meta(train_ptrs, val_ptrs);
                        std::vector<const FeatureClip*> tr, va;
                        for (const auto& c : train_clips) tr.push_back(&c);
                        for (const auto& c : val_clips) va.push_back(&c);
                        ParamStore store;
                        const auto out = train(config, manifest.d_acoustic, manifest.d_visual,
                                               manifest.d_language, tr, va, store);
                        sum += out.history.epochs.empty() ? 0.0
                                                          : out.history.epochs.back().val_metric;
                    }
                    const double mean = sum / static_cast<double>(plan.folds.size());
                    result.table.push_back({lr, gamma, alpha, beta, mean});
                    const std::array<double, 4> key{lr, gamma, alpha, beta};
                    const bool better =
                        base.task == Task::IPP ? mean < best_metric : mean > best_metric;
                    const bool tie = mean == best_metric && key < best_key;
                    if (!have_best || better || tie) {
                        have_best = true;
                        best_metric = mean;
                        best_key = key;
                        result.best = config;
                    }
                }
    return result;
}

}  // namespace adafuse
