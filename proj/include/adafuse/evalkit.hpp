#pragma once

#include <array>
#include <string>
#include <vector>

#include "adafuse/datamodel.hpp"
#include "adafuse/stats.hpp"
#include "adafuse/trainer.hpp"

namespace adafuse {

// Metrics compare in the original label space (IPP predictions are unmapped
// from sigmoid space before they reach these).
double mse(const std::vector<double>& y_true, const std::vector<double>& y_pred);

// Threshold rule: y_pred >= threshold predicts class 1 (ties go to 1).
double accuracy(const std::vector<double>& y_true, const std::vector<double>& y_pred,
                double threshold = 0.5);

// 1 - ours/baseline.
double mse_decrease(double ours, double best_baseline);

struct FoldResult {
    int fold_id = 0;
    double test_metric = 0.0;
    int n_test = 0;
    std::vector<std::string> clip_ids;
    std::vector<double> y_true;
    std::vector<double> y_pred;
    std::array<double, 3> final_weights{};
    TrainHistory history;
    // a_t per test clip per modality; empty tensors for unimodal ablations.
    std::vector<std::array<Tensor, 3>> attention;
};

struct FoldReport {
    Task task = Task::IPP;
    std::vector<FoldResult> folds;
    double aggregate_mean = 0.0;  // arithmetic mean of per-fold metrics
};

// Per fold: normalize meta on the training episodes, train, evaluate on the
// test episodes. Fold cells are independent; threads > 1 runs them in
// parallel with per-fold seeds (results do not depend on scheduling). A
// nonempty checkpoint_dir gets one checkpoint_fold<i>.bin per fold.
FoldReport run_folds(const DatasetManifest& manifest, const FoldPlan& plan,
                     const TrainConfig& config, int threads = 1,
                     const std::string& checkpoint_dir = "");

// weights.csv, history.csv, report.csv, predictions.csv, attention.json.
void export_diagnostics(const FoldReport& report, const std::string& out_dir);

struct SensitivityEntry {
    std::string param;       // "alpha", "beta" or "gamma"
    double delta = 0.0;      // signed relative perturbation
    double metric = 0.0;     // aggregate test metric at the perturbed value
    double relative_change = 0.0;
};

// Perturbs alpha, beta and gamma by +-delta one at a time, retrains, and
// reports relative changes against the unperturbed aggregate metric.
std::vector<SensitivityEntry> sensitivity_sweep(const TrainConfig& base,
                                                const DatasetManifest& manifest,
                                                const FoldPlan& plan, double delta = 0.05,
                                                int threads = 1);

}  // namespace adafuse
