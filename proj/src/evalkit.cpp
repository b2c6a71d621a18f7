#include "adafuse/evalkit.hpp"

#include <atomic>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <thread>

#include <json.hpp>

#include "adafuse/checkpoint.hpp"
#include "adafuse/errors.hpp"

namespace adafuse {

double mse(const std::vector<double>& y_true, const std::vector<double>& y_pred) {
    if (y_true.empty() || y_true.size() != y_pred.size())
        throw DataError("mse: empty input or length mismatch");
    double sum = 0.0;
    for (size_t i = 0; i < y_true.size(); ++i) {
        const double d = y_true[i] - y_pred[i];
        sum += d * d;
    }
    return sum / static_cast<double>(y_true.size());
}

double accuracy(const std::vector<double>& y_true, const std::vector<double>& y_pred,
                double threshold) {
    if (y_true.empty() || y_true.size() != y_pred.size())
        throw DataError("accuracy: empty input or length mismatch");
    double hits = 0.0;
    for (size_t i = 0; i < y_true.size(); ++i) {
        const double cls = y_pred[i] >= threshold ? 1.0 : 0.0;
        hits += cls == y_true[i] ? 1.0 : 0.0;
    }
    return hits / static_cast<double>(y_true.size());
}

double mse_decrease(double ours, double best_baseline) {
    if (best_baseline <= 0.0) throw DataError("mse_decrease: baseline must be > 0");
    return 1.0 - ours / best_baseline;
}

namespace {

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

FoldResult run_one_fold(const DatasetManifest& manifest, const Fold& fold, int fold_id,
                        const TrainConfig& base_config, const std::string& checkpoint_dir) {
    const auto train_ptrs = manifest.clips_of(fold.train_episodes);
    const auto val_ptrs = manifest.clips_of(fold.val_episodes);
    const auto test_ptrs = manifest.clips_of(fold.test_episodes);
    if (train_ptrs.empty()) throw DataError("fold " + std::to_string(fold_id) + ": no train clips");
    if (val_ptrs.empty()) throw DataError("fold " + std::to_string(fold_id) + ": no val clips");
    if (test_ptrs.empty()) throw DataError("fold " + std::to_string(fold_id) + ": no test clips");

    // Meta normalization is fitted on the training fold only.
    const MetaNormalizer norm = MetaNormalizer::fit(train_ptrs);
    auto materialize = [&norm](const std::vector<const FeatureClip*>& ptrs) {
        std::vector<FeatureClip> out;
        out.reserve(ptrs.size());
        for (const auto* c : ptrs) out.push_back(norm.apply(*c));
        return out;
    };
    const auto train_clips = materialize(train_ptrs);
    const auto val_clips = materialize(val_ptrs);
    const auto test_clips = materialize(test_ptrs);
    auto pointers = [](const std::vector<FeatureClip>& clips) {
        std::vector<const FeatureClip*> out;
        for (const auto& c : clips) out.push_back(&c);
        return out;
    };

    TrainConfig config = base_config;
    config.task = manifest.task;
    config.seed = Rng(base_config.seed).derive("fold", static_cast<uint64_t>(fold_id)).next_u64();

    ParamStore store;
    const TrainOutput out = train(config, manifest.d_acoustic, manifest.d_visual,
                                  manifest.d_language, pointers(train_clips),
                                  pointers(val_clips), store);
    const FusionModel model(out.model_config);

    FoldResult result;
    result.fold_id = fold_id;
    result.n_test = static_cast<int>(test_clips.size());
    result.final_weights = out.weights.w;
    result.history = out.history;

    const auto test_pointers = pointers(test_clips);
    result.y_pred = predict(store, model, test_pointers, out.weights.w);
    for (const auto& clip : test_clips) {
        result.clip_ids.push_back(clip.clip_id);
        result.y_true.push_back(clip.label);
    }
    result.test_metric = manifest.task == Task::IPP ? mse(result.y_true, result.y_pred)
                                                    : accuracy(result.y_true, result.y_pred);

    if (!checkpoint_dir.empty()) {
        std::filesystem::create_directories(checkpoint_dir);
        nlohmann::json header;
        header["fold"] = fold_id;
        header["task"] = task_name(manifest.task);
        header["d_A"] = manifest.d_acoustic;
        header["d_V"] = manifest.d_visual;
        header["d_L"] = manifest.d_language;
        header["seed"] = config.seed;
        header["weights"] = {out.weights.w[0], out.weights.w[1], out.weights.w[2]};
        const auto path = std::filesystem::path(checkpoint_dir) /
                          ("checkpoint_fold" + std::to_string(fold_id) + ".bin");
        save_checkpoint(path.string(), store, header.dump());
    }

    // Temporal attention on the test clips (eval mode).
    Graph g(store, Mode::eval);
    const auto nodes = model.build_forward(g, test_pointers, out.weights.w);
    model.bind_batch(g, test_pointers);
    g.run();
    result.attention.resize(test_clips.size());
    for (int m = 0; m < 3; ++m) {
        if (nodes.attention[m].empty()) continue;
        for (size_t i = 0; i < test_clips.size(); ++i)
            result.attention[i][m] = extract_attention(g, nodes.attention[m][i]).aggregated;
    }
    return result;
}

}  // namespace

FoldReport run_folds(const DatasetManifest& manifest, const FoldPlan& plan,
                     const TrainConfig& config, int threads,
                     const std::string& checkpoint_dir) {
    if (plan.folds.empty()) throw DataError("run_folds: empty fold plan");
    FoldReport report;
    report.task = manifest.task;
    report.folds.resize(plan.folds.size());

    const int workers =
        std::max(1, std::min<int>(threads, static_cast<int>(plan.folds.size())));
    if (workers == 1) {
        for (size_t i = 0; i < plan.folds.size(); ++i)
            report.folds[i] = run_one_fold(manifest, plan.folds[i], static_cast<int>(i), config,
                                           checkpoint_dir);
    } else {
        std::atomic<size_t> next{0};
        std::vector<std::thread> pool;
        std::vector<std::exception_ptr> errors(workers);
        for (int w = 0; w < workers; ++w) {
            pool.emplace_back([&, w]() {
                try {
                    for (;;) {
                        const size_t i = next.fetch_add(1);
                        if (i >= plan.folds.size()) break;
                        report.folds[i] = run_one_fold(manifest, plan.folds[i],
                                                       static_cast<int>(i), config,
                                                       checkpoint_dir);
                    }
                } catch (...) {
                    errors[w] = std::current_exception();
                }
            });
        }
        for (auto& t : pool) t.join();
        for (const auto& e : errors)
            if (e) std::rethrow_exception(e);
    }

    double sum = 0.0;
    for (const auto& fold : report.folds) sum += fold.test_metric;
    report.aggregate_mean = sum / static_cast<double>(report.folds.size());
    return report;
}

void export_diagnostics(const FoldReport& report, const std::string& out_dir) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    const auto path = [&out_dir](const char* name) { return (fs::path(out_dir) / name).string(); };

    {
        std::ofstream out(path("report.csv"), std::ios::binary);
        out << "fold,test_metric,n_test\n";
        int total = 0;
        for (const auto& fold : report.folds) {
            out << fold.fold_id << "," << fmt(fold.test_metric) << "," << fold.n_test << "\n";
            total += fold.n_test;
        }
        out << "mean," << fmt(report.aggregate_mean) << "," << total << "\n";
    }
    {
        std::ofstream out(path("weights.csv"), std::ios::binary);
        out << "fold,w_A,w_V,w_L\n";
        for (const auto& fold : report.folds)
            out << fold.fold_id << "," << fmt(fold.final_weights[0]) << ","
                << fmt(fold.final_weights[1]) << "," << fmt(fold.final_weights[2]) << "\n";
    }
    {
        std::ofstream out(path("history.csv"), std::ios::binary);
        out << "fold,epoch,loss_total,loss_pers,loss_align,val_metric,w_A,w_V,w_L,"
               "ref_loss_A,ref_loss_V,ref_loss_L\n";
        for (const auto& fold : report.folds)
            for (size_t e = 0; e < fold.history.epochs.size(); ++e) {
                const EpochStats& s = fold.history.epochs[e];
                out << fold.fold_id << "," << e << "," << fmt(s.loss_total) << ","
                    << fmt(s.loss_pers) << "," << fmt(s.loss_align) << "," << fmt(s.val_metric)
                    << "," << fmt(s.weights[0]) << "," << fmt(s.weights[1]) << ","
                    << fmt(s.weights[2]) << "," << fmt(s.ref_losses[0]) << ","
                    << fmt(s.ref_losses[1]) << "," << fmt(s.ref_losses[2]) << "\n";
            }
    }
    {
        std::ofstream out(path("predictions.csv"), std::ios::binary);
        out << "fold,clip_id,y_true,y_pred\n";
        for (const auto& fold : report.folds)
            for (size_t i = 0; i < fold.clip_ids.size(); ++i)
                out << fold.fold_id << "," << fold.clip_ids[i] << "," << fmt(fold.y_true[i])
                    << "," << fmt(fold.y_pred[i]) << "\n";
    }
    {
        using nlohmann::json;
        json arr = json::array();
        static const char* modality_names[3] = {"A", "V", "L"};
        for (const auto& fold : report.folds)
            for (size_t i = 0; i < fold.clip_ids.size(); ++i)
                for (int m = 0; m < 3; ++m) {
                    if (fold.attention[i][m].data.empty()) continue;
                    json entry;
                    entry["clip_id"] = fold.clip_ids[i];
                    entry["modality"] = modality_names[m];
                    entry["a"] = fold.attention[i][m].data;
                    arr.push_back(std::move(entry));
                }
        std::ofstream out(path("attention.json"), std::ios::binary);
        out << arr.dump(2) << "\n";
    }
}

std::vector<SensitivityEntry> sensitivity_sweep(const TrainConfig& base,
                                                const DatasetManifest& manifest,
                                                const FoldPlan& plan, double delta,
                                                int threads) {
    const FoldReport baseline = run_folds(manifest, plan, base, threads);
    std::vector<SensitivityEntry> entries;
    static const char* params[3] = {"alpha", "beta", "gamma"};
    for (int p = 0; p < 3; ++p) {
        for (const double sign : {+1.0, -1.0}) {
            TrainConfig config = base;
            const double factor = 1.0 + sign * delta;
            if (p == 0) config.alpha *= factor;
            if (p == 1) config.beta *= factor;
            if (p == 2) config.gamma *= factor;
            const FoldReport run = run_folds(manifest, plan, config, threads);
            SensitivityEntry entry;
            entry.param = params[p];
            entry.delta = sign * delta;
            entry.metric = run.aggregate_mean;
            entry.relative_change = baseline.aggregate_mean == 0.0
                                        ? 0.0
                                        : run.aggregate_mean / baseline.aggregate_mean - 1.0;
            entries.push_back(std::move(entry));
        }
    }
    return entries;
}

}  // namespace adafuse
