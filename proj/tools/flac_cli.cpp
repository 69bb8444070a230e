// flac_cli: dataset generation, training, the Vanilla-vs-FLAC protocol,
// ablation suites, checkpoint evaluation and the alpha grid search.
//
// Exit codes: 0 success, 2 configuration error, 3 training divergence,
// 4 I/O failure, 1 anything else.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "flac/experiment.hpp"

namespace fs = std::filesystem;
using namespace flac;

namespace {

enum Exit { kOk = 0, kOther = 1, kConfig = 2, kDiverged = 3, kIo = 4 };

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    bool json = false;
};

void add_common(CLI::App* cmd, Common& c, bool needs_config = true) {
    auto* opt = cmd->add_option("--config", c.config, "experiment config (INI)");
    if (needs_config) opt->required();
    cmd->add_option("--seed", c.seed, "base seed override");
    cmd->add_option("--out", c.out, "output directory");
    cmd->add_flag("--json", c.json, "machine-readable output on stdout");
}

ExperimentConfig load(const Common& c) {
    ExperimentConfig cfg = load_config(c.config);
    if (c.seed) cfg.base_seed = *c.seed;
    return cfg;
}

fs::path out_dir(const Common& c, const ExperimentConfig& cfg) { return c.out.empty() ? cfg.output_dir : fs::path(c.out); }

RunOptions progress_options(const fs::path& dir) {
    RunOptions o;
    o.output_dir = dir;
    const auto start = std::chrono::steady_clock::now();
    o.progress = [start](const std::string& m) {
        const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        std::cerr << "[" << static_cast<long>(s) << "s] " << m << '\n';
    };
    return o;
}

void report_record(const RunRecord& record, const fs::path& dir, bool json) {
    persist(record, dir);
    const auto rows = summarize(record);
    if (json) {
        std::cout << nlohmann::json{{"output_dir", dir.string()}, {"summary", to_json(rows)}}.dump(2) << '\n';
    } else {
        write_summary_text(std::cout, rows);
        std::cout << "written to " << dir.string() << '\n';
    }
}

int cmd_generate(const Common& c) {
    ExperimentConfig cfg = load(c);
    if (c.seed) cfg.dataset.seed = *c.seed;
    const fs::path dir = c.out.empty() ? fs::path("data") : fs::path(c.out);
    fs::create_directories(dir);
    const auto splits = split_for_protocol(cfg.dataset, cfg.splits);
    const auto& d = cfg.dataset;
    const std::vector<std::pair<std::string, const Dataset*>> parts{{"train", &splits.train},
                                                                    {"test_unbiased", &splits.test_unbiased},
                                                                    {"test_bias_conflict", &splits.test_bias_conflict},
                                                                    {"bias_train", &splits.bias_train}};
    nlohmann::json summary = nlohmann::json::object();
    for (const auto& [name, data] : parts) {
        save_dataset(dir / (name + ".cgrd"), *data, d.grid, d.n_classes);
        std::ofstream manifest(dir / (name + "_manifest.csv"));
        if (!manifest) throw IoError("cannot write manifest in " + dir.string());
        write_manifest_csv(manifest, *data);
        summary[name] = {{"samples", data->size()}, {"bias_ratio", empirical_bias_ratio(*data)}};
    }
    if (c.json) {
        std::cout << summary.dump(2) << '\n';
    } else {
        for (const auto& [name, data] : parts) {
            std::cout << name << ": " << data->size() << " samples, aligned fraction "
                      << empirical_bias_ratio(*data) << '\n';
        }
    }
    return kOk;
}

int cmd_train(const Common& c) {
    const ExperimentConfig cfg = load(c);
    const fs::path dir = out_dir(c, cfg);
    fs::create_directories(dir);
    const auto splits = split_for_protocol(cfg.dataset, cfg.splits);
    const std::uint64_t seed = cfg.seed_for(0);
    std::optional<FrozenEncoder> encoder;
    if (cfg.train.alpha > 0.0) {
        std::cerr << "training bias-capturing encoder (" << bias_mode_name(cfg.bias_mode) << ")\n";
        encoder = train_bias_capturing(cfg.bias_mode, splits.train, splits.bias_train, cfg.dataset.n_classes,
                                       bias_train_config(cfg, seed), cfg.bias_features);
    }
    TrainConfig tc = cfg.train;
    tc.seed = seed;
    const EvalSplits eval{splits.test_unbiased, splits.test_bias_conflict};
    const auto trained = train_main(tc, splits.train, cfg.dataset.n_classes, encoder ? &*encoder : nullptr, &eval);
    {
        std::ofstream hist(dir / "history.csv");
        if (!hist) throw IoError("cannot write " + (dir / "history.csv").string());
        write_history_csv(hist, trained.history);
    }
    save_checkpoint(dir / "model.flck", trained.model);
    detail::write_text_file(dir / "config.ini", config_echo(cfg));
    const auto ub = evaluate(trained.model, splits.test_unbiased, eval_options(cfg, seed));
    const auto cf = evaluate(trained.model, splits.test_bias_conflict, eval_options(cfg, seed));
    if (c.json) {
        std::cout << nlohmann::json{{"seed", seed}, {"unbiased", to_json(ub)}, {"bias_conflict", to_json(cf)}}.dump(2)
                  << '\n';
    } else {
        std::cout << "unbiased accuracy " << ub.acc_unbiased << ", bias-conflict accuracy " << cf.acc_overall
                  << ", qmi " << ub.qmi << "\nwritten to " << dir.string() << '\n';
    }
    return kOk;
}

int cmd_run(const Common& c) {
    const ExperimentConfig cfg = load(c);
    const fs::path dir = out_dir(c, cfg);
    report_record(run_protocol(cfg, progress_options(dir)), dir, c.json);
    return kOk;
}

int cmd_ablate(const Common& c, const std::string& suite) {
    const ExperimentConfig cfg = load(c);
    const fs::path dir = out_dir(c, cfg) / suite;
    report_record(ablate(cfg, suite, progress_options(dir)), dir, c.json);
    return kOk;
}

int cmd_eval(const Common& c, const std::string& checkpoint, const std::string& data) {
    const Mlp model = load_checkpoint(checkpoint);
    const auto loaded = load_dataset(data);
    if (loaded.samples.empty()) throw IoError("dataset " + data + " is empty");
    if (static_cast<int>(loaded.samples[0].pixels.size()) != model.config.input_dim) {
        throw IoError("dataset pixel size does not match the checkpoint's input_dim");
    }
    EvalOptions opts;
    opts.n_classes = loaded.n_classes;
    opts.n_colors = loaded.n_classes;
    opts.seed = c.seed.value_or(0);
    if (!c.config.empty()) opts.qmi_max_samples = load_config(c.config).qmi_max_samples;
    const auto r = evaluate(model, loaded.samples, opts);
    if (c.json) {
        std::cout << to_json(r).dump(2) << '\n';
    } else {
        using detail::format_double;
        std::cout << "acc_overall,acc_unbiased,acc_bias_conflict,qmi,p_rule,dfpr,dfnr,mistreatment\n"
                  << format_double(r.acc_overall) << ',' << format_double(r.acc_unbiased) << ','
                  << format_double(r.acc_bias_conflict) << ',' << format_double(r.qmi) << ','
                  << format_double(r.p_rule) << ',' << format_double(r.dfpr) << ',' << format_double(r.dfnr) << ','
                  << format_double(r.mistreatment) << '\n';
    }
    return kOk;
}

int cmd_gridsearch(const Common& c) {
    const ExperimentConfig cfg = load(c);
    const auto result = gridsearch_alpha(cfg, [](const std::string& m) { std::cerr << m << '\n'; });
    std::ostringstream csv;
    write_gridsearch_csv(csv, result);
    if (!c.out.empty()) {
        fs::create_directories(c.out);
        detail::write_text_file(fs::path(c.out) / "gridsearch.csv", csv.str());
    }
    if (c.json) {
        std::cout << nlohmann::json{{"alphas", result.alphas},
                                    {"validation_unbiased_acc", result.validation_acc},
                                    {"best_alpha", result.best_alpha}}
                         .dump(2)
                  << '\n';
    } else {
        std::cout << csv.str() << "best alpha " << detail::format_double(result.best_alpha) << '\n';
    }
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"FLAC fairness toolkit: synthetic biased data, FLAC training and fairness diagnostics"};
    app.require_subcommand(1);

    Common common;
    std::string suite, checkpoint, data;

    auto* gen = app.add_subcommand("generate", "write the protocol splits to dataset files");
    add_common(gen, common);
    auto* train = app.add_subcommand("train", "train one model (FLAC when alpha > 0) and evaluate it");
    add_common(train, common);
    auto* run = app.add_subcommand("run", "Vanilla vs FLAC over the configured repetitions");
    add_common(run, common);
    auto* abl = app.add_subcommand("ablate", "run an ablation suite");
    add_common(abl, common);
    abl->add_option("--suite", suite, "condition_terms | kernels | divergences | alpha_grid | q_sweep")->required();
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset file");
    add_common(ev, common, false);
    ev->add_option("--checkpoint", checkpoint, "model checkpoint (.flck)")->required();
    ev->add_option("--data", data, "dataset file (.cgrd)")->required();
    auto* grid = app.add_subcommand("gridsearch-alpha", "pick alpha on an unbiased validation split");
    add_common(grid, common);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kConfig;
    }

    try {
        if (*gen) return cmd_generate(common);
        if (*train) return cmd_train(common);
        if (*run) return cmd_run(common);
        if (*abl) return cmd_ablate(common, suite);
        if (*ev) return cmd_eval(common, checkpoint, data);
        if (*grid) return cmd_gridsearch(common);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kConfig;
    } catch (const TrainingDiverged& e) {
        std::cerr << "training diverged: " << e.what() << '\n';
        return kDiverged;
    } catch (const RunFailure& e) {
        std::cerr << (e.diverged ? "training diverged: " : "run failed: ") << e.what() << '\n';
        return e.diverged ? kDiverged : kOther;
    } catch (const IoError& e) {
        std::cerr << "i/o error: " << e.what() << '\n';
        return kIo;
    } catch (const fs::filesystem_error& e) {
        std::cerr << "i/o error: " << e.what() << '\n';
        return kIo;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kOther;
    }
    return kOther;
}
