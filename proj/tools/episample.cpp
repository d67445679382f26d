// episample: dataset generation, training, evaluation and analysis.
//
// Every command reads one JSON experiment config (--config). Scalar leaves
// can be overridden with dotted flags, e.g. `--train.batch_size 32`.

#include <cstdio>
#include <iostream>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>

#include "episample/experiment.hpp"

namespace es = episample;
namespace fs = std::filesystem;

namespace {

using Overrides = std::vector<std::pair<std::string, std::string>>;

// Pulls `--a.b value` / `--a.b=value` out of argv; none of the named options contain a dot.
Overrides extract_overrides(int argc, char** argv, std::vector<std::string>& rest) {
    Overrides out;
    rest.push_back(argv[0]);
    for (int i = 1; i < argc; ++i) {
        std::string a = argv[i];
        const bool dotted = a.rfind("--", 0) == 0 && a.find('.') != std::string::npos &&
                            a.find('.') < a.find('=');
        if (!dotted) {
            rest.push_back(std::move(a));
            continue;
        }
        const auto eq = a.find('=');
        if (eq != std::string::npos) {
            out.emplace_back(a.substr(2, eq - 2), a.substr(eq + 1));
        } else if (i + 1 < argc) {
            out.emplace_back(a.substr(2), argv[++i]);
        } else {
            throw es::ConfigError("override " + a + " has no value");
        }
    }
    return out;
}

void write_error(const fs::path& dir, const std::string& command, const std::string& message) {
    try {
        es::io::write_file(dir / "error.json", es::error_record(command, message).dump(2) + "\n");
    } catch (...) {
    }
}

std::vector<es::SchemeKind> parse_schemes(const std::vector<std::string>& names) {
    std::vector<es::SchemeKind> out;
    for (const auto& n : names) {
        out.push_back(es::scheme_from_string(n));
    }
    return out;
}

const es::BaseDataset& pick_split(const std::array<es::BaseDataset, 3>& splits, const std::string& name) {
    if (name == "train") return splits[0];
    if (name == "val") return splits[1];
    if (name == "test") return splits[2];
    throw es::ConfigError("--split must be train, val or test, got '" + name + "'");
}

} // namespace

int main(int argc, char** argv) {
    std::vector<std::string> args;
    Overrides overrides;
    try {
        overrides = extract_overrides(argc, argv, args);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }

    CLI::App app{"Importance-sampled episodic training for few-shot learners"};
    app.require_subcommand(1);
    std::string config_path;
    std::string output_dir;

    auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset and its train/val/test splits");
    bool force = false;
    gen->add_flag("--force", force, "overwrite an existing dataset directory");

    auto* tr = app.add_subcommand("train", "train one learner under one sampling scheme");

    auto* ev = app.add_subcommand("evaluate", "evaluate a checkpoint on freshly sampled episodes");
    std::string eval_checkpoint;
    std::size_t eval_episodes = 0;
    std::string eval_split = "test";
    ev->add_option("--checkpoint", eval_checkpoint, "checkpoint stem or .json path")->required();
    ev->add_option("--episodes", eval_episodes, "episode count (default: train.test_episodes)");
    ev->add_option("--split", eval_split, "train, val or test");

    auto* cmp = app.add_subcommand("compare-schemes", "one training run per scheme, summarized in comparison.csv");
    std::vector<std::string> scheme_names;
    cmp->add_option("--schemes", scheme_names, "schemes to compare")->required()->delimiter(',');

    auto* an = app.add_subcommand("analyze", "difficulty analyses on a shared episode file");
    es::AnalyzeOptions ao;
    std::string an_checkpoint, an_episode_file, an_split = "test";
    std::vector<std::string> an_spearman, an_extremes, an_dispersion;
    an->add_option("--checkpoint", an_checkpoint, "checkpoint scored by --normality, --qq and --extremes");
    an->add_option("--episodes", ao.episodes, "episodes to sample when no --episode-file is given");
    an->add_option("--episode-file", an_episode_file, "reuse a saved episode file");
    an->add_option("--split", an_split, "split to sample episodes from");
    an->add_flag("--normality", ao.normality, "Shapiro-Wilk rejection rate over random subsamples");
    an->add_flag("--qq", ao.qq, "density histogram and normal Q-Q table");
    an->add_option("--bins", ao.bins, "histogram bins");
    an->add_option("--spearman", an_spearman, "two checkpoints to correlate")->expected(2);
    an->add_option("--extremes", an_extremes, "checkpoints at which to track the easiest/hardest episodes");
    an->add_option("--extremes-m", ao.extremes_m, "size of each extreme group");
    an->add_option("--dispersion", an_dispersion, "run directories whose weighted-loss dispersion to compare");
    an->add_option("--subsample", ao.subsample, "Shapiro-Wilk subsample size");
    an->add_option("--repetitions", ao.repetitions, "Shapiro-Wilk repetitions");

    for (auto* sub : {gen, tr, ev, cmp, an}) {
        sub->add_option("--config", config_path, "experiment config (JSON)")->required();
        sub->add_option("--output-dir", output_dir, "overrides output_dir");
    }

    std::vector<char*> cargs;
    for (auto& a : args) {
        cargs.push_back(a.data());
    }
    try {
        app.parse(static_cast<int>(cargs.size()), cargs.data());
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    es::ExperimentConfig config;
    try {
        if (!output_dir.empty()) {
            overrides.emplace_back("output_dir", es::json(output_dir).dump());
        }
        config = es::load_experiment(config_path, overrides);
    } catch (const std::exception& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    }
    const fs::path out = es::resolve_output(config.output_dir);
    std::string command = "episample";

    try {
        if (gen->parsed()) {
            command = "gen-data";
            const auto dir = es::cmd_gen_data(config, force);
            std::cout << "wrote dataset splits to " << dir.string() << "\n";
        } else if (tr->parsed()) {
            command = "train";
            const auto splits = es::resolve_splits(config);
            const auto run = es::cmd_train(config, out, splits);
            std::cout << "best iteration " << run.train.best_iteration << ", test accuracy "
                      << es::io::format_double(run.test.mean) << " +- " << es::io::format_double(run.test.ci95)
                      << "\n";
        } else if (ev->parsed()) {
            command = "evaluate";
            const auto splits = es::resolve_splits(config);
            const auto e = es::cmd_evaluate(config, eval_checkpoint, pick_split(splits, eval_split),
                                            eval_episodes ? std::optional<std::size_t>(eval_episodes) : std::nullopt);
            const es::json j = {{"checkpoint", eval_checkpoint},
                                {"split", eval_split},
                                {"episodes", e.accuracies.size()},
                                {"accuracy_mean", e.mean},
                                {"accuracy_ci95", e.ci95}};
            es::io::write_file(out / "evaluation.json", j.dump(2) + "\n");
            std::cout << es::io::format_double(e.mean) << " +- " << es::io::format_double(e.ci95) << "\n";
        } else if (cmp->parsed()) {
            command = "compare-schemes";
            const auto splits = es::resolve_splits(config);
            es::cmd_compare_schemes(config, parse_schemes(scheme_names), out, splits);
            std::cout << es::io::read_file(out / "comparison.csv");
        } else if (an->parsed()) {
            command = "analyze";
            if (!an_checkpoint.empty()) ao.checkpoint = an_checkpoint;
            if (!an_episode_file.empty()) ao.episode_file = an_episode_file;
            if (an_spearman.size() == 2) ao.spearman = std::make_pair(fs::path(an_spearman[0]), fs::path(an_spearman[1]));
            for (const auto& s : an_extremes) ao.extremes.emplace_back(s);
            for (const auto& s : an_dispersion) ao.dispersion.emplace_back(s);
            const bool needs_data = ao.normality || ao.qq || ao.spearman || !ao.extremes.empty();
            std::array<es::BaseDataset, 3> splits;
            if (needs_data) {
                splits = es::resolve_splits(config);
            }
            const auto res = es::cmd_analyze(config, ao, needs_data ? pick_split(splits, an_split) : splits[2], out);
            for (const auto& f : res.files) {
                std::cout << "wrote " << f.string() << "\n";
            }
        }
    } catch (const es::ConfigError& e) {
        std::cerr << command << ": " << e.what() << "\n";
        write_error(out, command, e.what());
        return 2;
    } catch (const std::exception& e) {
        std::cerr << command << ": " << e.what() << "\n";
        write_error(out, command, e.what());
        return 1;
    }
    return 0;
}
