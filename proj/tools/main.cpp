// adafuse: adaptive multimodal fusion experiments on precomputed feature
// sequences. Subcommands cover synthetic data generation, fold training,
// gradient checking, grid search and hyperparameter sensitivity.
//
// Exit codes: 0 ok, 1 data error, 2 config error, 3 divergence, 4 gradcheck
// failure.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "adafuse/checkpoint.hpp"
#include "adafuse/errors.hpp"
#include "adafuse/evalkit.hpp"
#include "adafuse/synthgen.hpp"

using namespace adafuse;
using nlohmann::json;

namespace {

json load_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config '" + path + "'");
    try {
        json j;
        in >> j;
        return j;
    } catch (const json::exception& e) {
        throw ConfigError("config '" + path + "': " + e.what());
    }
}

void reject_unknown(const json& j, const std::vector<std::string>& known,
                    const std::string& where) {
    for (const auto& [key, value] : j.items()) {
        (void)value;
        if (std::find(known.begin(), known.end(), key) == known.end())
            throw ConfigError(where + ": unknown key '" + key + "'");
    }
}

SynthConfig parse_synth_config(const json& j) {
    reject_unknown(j, {"n_episodes", "clips_per_episode", "seq_len_acoustic", "seq_len_visual",
                       "seq_len_language", "d_A", "d_V", "d_L", "shared_dim", "noise",
                       "alignment_strength", "task", "seed"},
                   "generate config");
    SynthConfig c;
    try {
        if (j.count("n_episodes")) c.n_episodes = j.at("n_episodes").get<int>();
        if (j.count("clips_per_episode")) c.clips_per_episode = j.at("clips_per_episode").get<int>();
        const auto range = [&](const char* key, std::array<int, 2>& out) {
            if (!j.count(key)) return;
            const auto v = j.at(key).get<std::vector<int>>();
            if (v.size() != 2) throw ConfigError(std::string(key) + " must be [lo, hi]");
            out = {v[0], v[1]};
        };
        range("seq_len_acoustic", c.seq_len_acoustic);
        range("seq_len_visual", c.seq_len_visual);
        range("seq_len_language", c.seq_len_language);
        if (j.count("d_A")) c.d_acoustic = j.at("d_A").get<int>();
        if (j.count("d_V")) c.d_visual = j.at("d_V").get<int>();
        if (j.count("d_L")) c.d_language = j.at("d_L").get<int>();
        if (j.count("shared_dim")) c.shared_dim = j.at("shared_dim").get<int>();
        if (j.count("noise")) {
            const auto v = j.at("noise").get<std::vector<double>>();
            if (v.size() != 3) throw ConfigError("noise must be [sigma_A, sigma_V, sigma_L]");
            c.noise = {v[0], v[1], v[2]};
        }
        if (j.count("alignment_strength"))
            c.alignment_strength = j.at("alignment_strength").get<double>();
        if (j.count("task")) c.task = task_from_name(j.at("task").get<std::string>());
        if (j.count("seed")) c.seed = j.at("seed").get<uint64_t>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("generate config: ") + e.what());
    } catch (const DataError& e) {
        throw ConfigError(e.what());
    }
    c.validate();
    return c;
}

struct RunConfig {
    TrainConfig train;
    std::string fold_scheme = "rolling";
    int n_folds = 10;
    int threads = 1;
};

int parse_unimodal(const std::string& name) {
    if (name == "off") return -1;
    if (name == "A") return 0;
    if (name == "V") return 1;
    if (name == "L") return 2;
    throw ConfigError("ablation.unimodal must be off, A, V or L");
}

RunConfig parse_run_config(const json& j) {
    reject_unknown(j, {"seed", "lr", "weight_decay", "master_epochs", "slave_epochs", "gamma",
                       "alpha", "beta", "batch_size", "ref_train_on", "positional_encoding",
                       "dropout", "patience", "ablation", "folds", "threads"},
                   "run config");
    RunConfig c;
    try {
        TrainConfig& t = c.train;
        if (j.count("seed")) t.seed = j.at("seed").get<uint64_t>();
        if (j.count("lr")) t.lr = j.at("lr").get<double>();
        if (j.count("weight_decay")) t.weight_decay = j.at("weight_decay").get<double>();
        if (j.count("master_epochs")) t.master_epochs = j.at("master_epochs").get<int>();
        if (j.count("slave_epochs")) t.slave_epochs = j.at("slave_epochs").get<int>();
        if (j.count("gamma")) t.gamma = j.at("gamma").get<double>();
        if (j.count("alpha")) t.alpha = j.at("alpha").get<double>();
        if (j.count("beta")) t.beta = j.at("beta").get<double>();
        if (j.count("batch_size")) t.batch_size = j.at("batch_size").get<int>();
        if (j.count("ref_train_on")) {
            const auto v = j.at("ref_train_on").get<std::string>();
            if (v == "train") t.ref_train_on = TrainConfig::RefTrainOn::train;
            else if (v == "val") t.ref_train_on = TrainConfig::RefTrainOn::val;
            else throw ConfigError("ref_train_on must be train or val");
        }
        if (j.count("positional_encoding"))
            t.positional_encoding = j.at("positional_encoding").get<bool>();
        if (j.count("dropout")) t.dropout = j.at("dropout").get<double>();
        if (j.count("patience")) t.patience = j.at("patience").get<int>();
        if (j.count("ablation")) {
            const json& a = j.at("ablation");
            reject_unknown(a, {"no_alignment", "no_da_loss", "equal_weights", "unimodal"},
                           "run config ablation");
            if (a.count("no_alignment")) t.ablation.no_alignment = a.at("no_alignment").get<bool>();
            if (a.count("no_da_loss")) t.ablation.no_da_loss = a.at("no_da_loss").get<bool>();
            if (a.count("equal_weights")) t.ablation.equal_weights = a.at("equal_weights").get<bool>();
            if (a.count("unimodal")) t.ablation.unimodal = parse_unimodal(a.at("unimodal").get<std::string>());
        }
        if (j.count("folds")) {
            const json& f = j.at("folds");
            reject_unknown(f, {"scheme", "n_folds"}, "run config folds");
            if (f.count("scheme")) {
                c.fold_scheme = f.at("scheme").get<std::string>();
                if (c.fold_scheme != "rolling" && c.fold_scheme != "cv")
                    throw ConfigError("folds.scheme must be rolling or cv");
            }
            if (f.count("n_folds")) c.n_folds = f.at("n_folds").get<int>();
        }
        if (j.count("threads")) c.threads = j.at("threads").get<int>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("run config: ") + e.what());
    }
    c.train.validate();
    if (c.threads < 1) throw ConfigError("run config: threads must be >= 1");
    return c;
}

json echo_config(const RunConfig& c) {
    const TrainConfig& t = c.train;
    json j;
    j["seed"] = t.seed;
    j["lr"] = t.lr;
    j["weight_decay"] = t.weight_decay;
    j["master_epochs"] = t.master_epochs;
    j["slave_epochs"] = t.slave_epochs;
    j["gamma"] = t.gamma;
    j["alpha"] = t.alpha;
    j["beta"] = t.beta;
    j["batch_size"] = t.batch_size;
    j["ref_train_on"] = t.ref_train_on == TrainConfig::RefTrainOn::val ? "val" : "train";
    j["positional_encoding"] = t.positional_encoding;
    j["dropout"] = t.dropout;
    j["patience"] = t.patience;
    j["ablation"] = {{"no_alignment", t.ablation.no_alignment},
                     {"no_da_loss", t.ablation.no_da_loss},
                     {"equal_weights", t.ablation.equal_weights},
                     {"unimodal", t.ablation.unimodal < 0
                                      ? "off"
                                      : std::string(1, "AVL"[t.ablation.unimodal])}};
    j["folds"] = {{"scheme", c.fold_scheme}, {"n_folds", c.n_folds}};
    j["threads"] = c.threads;
    return j;
}

int capped_threads(int requested) {
    if (const char* env = std::getenv("ADAFUSE_THREADS")) {
        const int cap = std::atoi(env);
        if (cap >= 1) return std::min(requested, cap);
    }
    return requested;
}

FoldPlan plan_for(const RunConfig& config, const DatasetManifest& manifest) {
    return config.fold_scheme == "rolling"
               ? make_rolling_folds(manifest, config.n_folds)
               : make_cross_validation_folds(manifest, config.n_folds);
}

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

int cmd_generate(const std::string& config_path, const std::string& out_path) {
    const SynthConfig config = parse_synth_config(load_json_file(config_path));
    save_manifest(generate(config), out_path);
    std::cout << "wrote " << out_path << "\n";
    return 0;
}

int cmd_train(const std::string& data_path, const std::string& config_path,
              const std::string& out_dir, const std::string& ablation_flag, int seed_override,
              int epochs_override) {
    RunConfig config = parse_run_config(load_json_file(config_path));
    if (!ablation_flag.empty()) {
        if (ablation_flag == "no_alignment") config.train.ablation.no_alignment = true;
        else if (ablation_flag == "no_da_loss") config.train.ablation.no_da_loss = true;
        else if (ablation_flag == "equal_weights") config.train.ablation.equal_weights = true;
        else if (ablation_flag.rfind("unimodal:", 0) == 0)
            config.train.ablation.unimodal = parse_unimodal(ablation_flag.substr(9));
        else throw ConfigError("unknown --ablation value '" + ablation_flag + "'");
    }
    if (seed_override >= 0) config.train.seed = static_cast<uint64_t>(seed_override);
    if (epochs_override >= 0) config.train.master_epochs = epochs_override;

    const DatasetManifest manifest = load_manifest(data_path);
    config.train.task = manifest.task;
    const FoldPlan plan = plan_for(config, manifest);

    const FoldReport report =
        run_folds(manifest, plan, config.train, capped_threads(config.threads), out_dir);
    export_diagnostics(report, out_dir);
    {
        std::ofstream out(std::filesystem::path(out_dir) / "config.json", std::ios::binary);
        out << echo_config(config).dump(2) << "\n";
    }
    std::cout << "folds: " << report.folds.size() << "\n"
              << (manifest.task == Task::IPP ? "mean test MSE: " : "mean test accuracy: ")
              << fmt(report.aggregate_mean) << "\n"
              << "outputs in " << out_dir << "\n";
    return 0;
}

int cmd_gradcheck(double eps, double tol, uint64_t seed, bool corrupt) {
    const auto result = full_model_grad_check(eps, tol, seed, corrupt ? 1.1 : 1.0);
    std::cout << "probe " << result.probe_index << ", kink margin " << fmt(result.margin)
              << "\nchecked " << result.report.checked << " elements ("
              << result.report.skipped_nonsmooth << " non-smooth windows skipped)\n"
              << "max relative error " << fmt(result.report.max_rel_err) << " at '"
              << result.report.worst_param << "'\n";
    if (!result.report.passed(tol)) {
        std::cout << "FAIL (tol " << fmt(tol) << ")\n";
        return 4;
    }
    std::cout << "PASS (tol " << fmt(tol) << ")\n";
    return 0;
}

int cmd_sweep(const std::string& grid_path, const std::string& data_path,
              const std::string& config_path, const std::string& out_dir) {
    const RunConfig config = parse_run_config(load_json_file(config_path));
    const json gj = load_json_file(grid_path);
    reject_unknown(gj, {"lr", "gamma", "alpha", "beta"}, "grid");
    GridSpec grid;
    try {
        // a key that is present but empty is a config error; an absent key
        // pins that hyperparameter at its run-config value
        const auto axis = [&](const char* key, std::vector<double>& out, double fallback) {
            if (gj.count(key)) {
                out = gj.at(key).get<std::vector<double>>();
                if (out.empty()) throw ConfigError(std::string("grid: '") + key + "' is empty");
            } else {
                out = {fallback};
            }
        };
        axis("lr", grid.lr, config.train.lr);
        axis("gamma", grid.gamma, config.train.gamma);
        axis("alpha", grid.alpha, config.train.alpha);
        axis("beta", grid.beta, config.train.beta);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("grid: ") + e.what());
    }

    const DatasetManifest manifest = load_manifest(data_path);
    TrainConfig base = config.train;
    base.task = manifest.task;
    const FoldPlan plan = plan_for(config, manifest);
    const GridResult result = grid_search(base, grid, manifest, plan);

    std::filesystem::create_directories(out_dir);
    {
        std::ofstream out(std::filesystem::path(out_dir) / "sweep.csv", std::ios::binary);
        out << "lr,gamma,alpha,beta,mean_val_metric\n";
        for (const auto& cell : result.table)
            out << fmt(cell.lr) << "," << fmt(cell.gamma) << "," << fmt(cell.alpha) << ","
                << fmt(cell.beta) << "," << fmt(cell.mean_val_metric) << "\n";
    }
    {
        json best;
        best["lr"] = result.best.lr;
        best["gamma"] = result.best.gamma;
        best["alpha"] = result.best.alpha;
        best["beta"] = result.best.beta;
        std::ofstream out(std::filesystem::path(out_dir) / "best_config.json", std::ios::binary);
        out << best.dump(2) << "\n";
    }
    std::cout << "sweep table: " << result.table.size() << " rows -> " << out_dir
              << "/sweep.csv\n";
    return 0;
}

int cmd_sensitivity(const std::string& config_path, const std::string& data_path,
                    const std::string& out_dir, double delta) {
    const RunConfig config = parse_run_config(load_json_file(config_path));
    const DatasetManifest manifest = load_manifest(data_path);
    TrainConfig base = config.train;
    base.task = manifest.task;
    const FoldPlan plan = plan_for(config, manifest);
    const auto entries =
        sensitivity_sweep(base, manifest, plan, delta, capped_threads(config.threads));
    std::filesystem::create_directories(out_dir);
    std::ofstream out(std::filesystem::path(out_dir) / "sensitivity.csv", std::ios::binary);
    out << "param,delta,metric,relative_change\n";
    for (const auto& e : entries)
        out << e.param << "," << fmt(e.delta) << "," << fmt(e.metric) << ","
            << fmt(e.relative_change) << "\n";
    std::cout << "sensitivity table: " << entries.size() << " rows -> " << out_dir
              << "/sensitivity.csv\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"adafuse: adaptive multimodal fusion experiments"};
    app.require_subcommand(1);

    std::string config_path, data_path, out_path, grid_path, ablation_flag;
    int seed_override = -1, epochs_override = -1;
    double eps = 1e-3, tol = 1e-4, delta = 0.05;
    uint64_t gc_seed = 1;
    bool corrupt = false;

    auto* generate_cmd = app.add_subcommand("generate", "write a synthetic JSONL dataset");
    generate_cmd->add_option("--config", config_path, "synth config JSON")->required();
    generate_cmd->add_option("--out", out_path, "output JSONL path")->required();

    auto* train_cmd = app.add_subcommand("train", "train and evaluate over folds");
    train_cmd->add_option("--data", data_path, "dataset JSONL")->required();
    train_cmd->add_option("--config", config_path, "run config JSON")->required();
    train_cmd->add_option("--out", out_path, "output directory")->required();
    train_cmd->add_option("--ablation", ablation_flag,
                          "no_alignment | no_da_loss | equal_weights | unimodal:A|V|L");
    train_cmd->add_option("--seed", seed_override, "override the config seed");
    train_cmd->add_option("--epochs", epochs_override, "override master epochs");

    auto* gradcheck_cmd = app.add_subcommand("gradcheck", "finite-difference check of the full model");
    gradcheck_cmd->add_option("--eps", eps, "finite-difference step (default 1e-3)");
    gradcheck_cmd->add_option("--tol", tol, "max relative error tolerance (default 1e-4)");
    gradcheck_cmd->add_option("--seed", gc_seed, "probe seed");
    gradcheck_cmd->add_flag("--corrupt-gradient", corrupt,
                            "debug fault injection: corrupts one gradient by 10%");

    auto* sweep_cmd = app.add_subcommand("sweep", "grid search over lr/gamma/alpha/beta");
    sweep_cmd->add_option("--grid", grid_path, "grid JSON")->required();
    sweep_cmd->add_option("--data", data_path, "dataset JSONL")->required();
    sweep_cmd->add_option("--config", config_path, "run config JSON")->required();
    sweep_cmd->add_option("--out", out_path, "output directory")->required();

    auto* sens_cmd = app.add_subcommand("sensitivity", "+-delta sweep of alpha/beta/gamma");
    sens_cmd->add_option("--config", config_path, "run config JSON")->required();
    sens_cmd->add_option("--data", data_path, "dataset JSONL")->required();
    sens_cmd->add_option("--out", out_path, "output directory")->required();
    sens_cmd->add_option("--delta", delta, "relative perturbation (default 0.05)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);  // exits 0
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (generate_cmd->parsed()) return cmd_generate(config_path, out_path);
        if (train_cmd->parsed())
            return cmd_train(data_path, config_path, out_path, ablation_flag, seed_override,
                             epochs_override);
        if (gradcheck_cmd->parsed()) return cmd_gradcheck(eps, tol, gc_seed, corrupt);
        if (sweep_cmd->parsed()) return cmd_sweep(grid_path, data_path, config_path, out_path);
        if (sens_cmd->parsed()) return cmd_sensitivity(config_path, data_path, out_path, delta);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const DivergenceError& e) {
        std::cerr << "divergence: " << e.what() << "\n";
        return 3;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 1;
    } catch (const GraphError& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
