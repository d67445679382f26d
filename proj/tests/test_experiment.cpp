#include <gtest/gtest.h>

#include <filesystem>

#include "episample/experiment.hpp"

using namespace episample;
using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

json tiny_doc() {
    return json::parse(R"({
      "seed": 5,
      "dataset": {"generator": {"num_classes": 20, "samples_per_class": 15, "feature_dim": 4,
                                "class_separation": 3.0, "noise_scale": 1.0},
                  "split_ratios": [10, 5, 5]},
      "learner": {"algorithm": "proto_euclidean", "widths": [8]},
      "train": {"iterations": 6, "batch_size": 3, "validation_interval": 3, "validation_episodes": 4,
                "test_episodes": 6, "way": 3, "shot": 1, "query": 2},
      "scheme": {"kind": "baseline", "warmup_iterations": 1}
    })");
}

class TempDir {
public:
    explicit TempDir(const std::string& name) : path_(fs::temp_directory_path() / ("episample_" + name)) {
        fs::remove_all(path_);
        fs::create_directories(path_);
    }
    ~TempDir() { fs::remove_all(path_); }
    const fs::path& path() const { return path_; }

private:
    fs::path path_;
};

std::string config_error(const json& doc) {
    try {
        (void)parse_experiment(doc);
    } catch (const ConfigError& e) {
        return e.what();
    }
    return "";
}

} // namespace

TEST(Config, ParsesAndFillsDefaults) {
    const auto c = parse_experiment(tiny_doc());
    EXPECT_EQ(c.seed, 5u);
    EXPECT_EQ(c.train.iterations, 6u);
    EXPECT_EQ(c.train.learning_rate, 1e-3);
    EXPECT_EQ(c.learner.way, 3u);
    EXPECT_EQ(c.scheme.lambda, 0.9);
    EXPECT_EQ(c.dataset_seed(), 5u);
    const auto round = parse_experiment(experiment_to_json(c));
    EXPECT_EQ(experiment_to_json(round), experiment_to_json(c));
}

TEST(Config, UnknownKeysRejected) {
    auto doc = tiny_doc();
    doc["train"]["batchsize"] = 4;
    EXPECT_NE(config_error(doc).find("train.batchsize"), std::string::npos) << config_error(doc);
    doc = tiny_doc();
    doc["extra"] = 1;
    EXPECT_NE(config_error(doc).find("extra"), std::string::npos);
}

TEST(Config, MissingFeatureDimNamesKey) {
    auto doc = tiny_doc();
    doc["dataset"]["generator"].erase("feature_dim");
    EXPECT_NE(config_error(doc).find("feature_dim"), std::string::npos) << config_error(doc);
}

TEST(Config, OfflineNeedsProposal) {
    auto doc = tiny_doc();
    doc["scheme"]["mode"] = "offline";
    EXPECT_NE(config_error(doc).find("proposal_checkpoint"), std::string::npos);
    doc["scheme"]["proposal_checkpoint"] = "runs/x/best";
    EXPECT_EQ(config_error(doc), "");
}

TEST(Config, ValueErrors) {
    auto doc = tiny_doc();
    doc["train"]["validation_interval"] = 4;
    EXPECT_NE(config_error(doc), "");
    doc = tiny_doc();
    doc["scheme"]["kind"] = "medium";
    EXPECT_NE(config_error(doc), "");
    doc = tiny_doc();
    doc["train"]["batch_size"] = -1;
    EXPECT_NE(config_error(doc), "");
    doc = tiny_doc();
    doc["dataset"]["split_ratios"] = json::array({1, 2});
    EXPECT_NE(config_error(doc), "");
    doc = tiny_doc();
    doc.erase("dataset");
    EXPECT_NE(config_error(doc), "");
}

TEST(Config, DottedOverrides) {
    auto doc = tiny_doc();
    apply_override(doc, "train.batch_size", "32");
    apply_override(doc, "scheme.kind", "uniform");
    apply_override(doc, "learner.widths", "[4,4]");
    const auto c = parse_experiment(doc);
    EXPECT_EQ(c.train.batch_size, 32u);
    EXPECT_EQ(c.scheme.kind, SchemeKind::uniform);
    EXPECT_EQ(c.learner.widths, (std::vector<std::size_t>{4, 4}));
    EXPECT_THROW(apply_override(doc, "train", "3"), ConfigError);
    EXPECT_THROW(apply_override(doc, "train.", "3"), ConfigError);
}

TEST(GenData, ForceAndDeterminism) {
    TempDir tmp("gen_data");
    auto doc = tiny_doc();
    doc["dataset"]["path"] = (tmp.path() / "a").string();
    const auto c = parse_experiment(doc);
    const auto dir = cmd_gen_data(c, false);
    EXPECT_THROW(cmd_gen_data(c, false), Error);
    const auto first = io::read_file(dir / "train" / "data.csv");
    EXPECT_NO_THROW(cmd_gen_data(c, true));
    EXPECT_EQ(io::read_file(dir / "train" / "data.csv"), first);
    doc["dataset"]["path"] = (tmp.path() / "b").string();
    const auto other = cmd_gen_data(parse_experiment(doc), false);
    for (const char* s : {"train", "val", "test"}) {
        EXPECT_EQ(io::read_file(other / s / "data.csv"), io::read_file(dir / s / "data.csv"));
    }
    const auto loaded = resolve_splits(c);
    EXPECT_EQ(loaded[0], build_splits(c)[0]);
}

TEST(Train, WritesArtifacts) {
    TempDir tmp("train_artifacts");
    const auto c = parse_experiment(tiny_doc());
    const auto out = cmd_train(c, tmp.path(), build_splits(c));
    for (const char* f : {"config.json", "history.csv", "episodes.csv", "result.json", "best.json", "best.csv",
                          "checkpoints/iter_0000003.json", "checkpoints/iter_0000006.csv"}) {
        EXPECT_TRUE(fs::exists(tmp.path() / f)) << f;
    }
    EXPECT_FALSE(fs::exists(tmp.path() / "error.json"));
    const auto result = read_json(tmp.path() / "result.json");
    EXPECT_NO_THROW(check_result_schema(result));
    EXPECT_EQ(result["test_accuracy_mean"].get<double>(), out.test.mean);
    const auto lines = io::lines_of(io::read_file(tmp.path() / "history.csv"));
    for (std::size_t i = 1; i < lines.size(); ++i) {
        if (lines[i].empty()) continue;
        EXPECT_EQ(io::split_csv_line(lines[i])[2], "3") << lines[i]; // ess == |B|
    }
    // The best checkpoint evaluates to the recorded test accuracy.
    const auto e = cmd_evaluate(c, tmp.path() / "best.json", build_splits(c)[2]);
    EXPECT_EQ(e.mean, out.test.mean);
}

TEST(Train, SeedChangesHistory) {
    TempDir tmp("train_seed");
    auto doc = tiny_doc();
    const auto a = parse_experiment(doc);
    doc["seed"] = 6;
    doc["dataset"]["seed"] = 5;
    const auto b = parse_experiment(doc);
    const auto splits = build_splits(a);
    EXPECT_EQ(build_splits(b)[0], splits[0]);
    cmd_train(a, tmp.path() / "a", splits);
    cmd_train(b, tmp.path() / "b", splits);
    EXPECT_NE(io::read_file(tmp.path() / "a" / "history.csv"), io::read_file(tmp.path() / "b" / "history.csv"));
    EXPECT_EQ(io::lines_of(io::read_file(tmp.path() / "a" / "history.csv"))[0],
              io::lines_of(io::read_file(tmp.path() / "b" / "history.csv"))[0]);
}

TEST(Train, OfflineWithMissingCheckpointWritesError) {
    TempDir tmp("train_error");
    auto doc = tiny_doc();
    doc["scheme"]["mode"] = "offline";
    doc["scheme"]["proposal_checkpoint"] = (tmp.path() / "nope" / "best").string();
    const auto c = parse_experiment(doc);
    EXPECT_THROW(cmd_train(c, tmp.path() / "run", build_splits(c)), Error);
    const auto err = read_json(tmp.path() / "run" / "error.json");
    EXPECT_EQ(err["error"], "train");
    EXPECT_FALSE(fs::exists(tmp.path() / "run" / "result.json"));
}

TEST(Train, OfflineWithProposal) {
    TempDir tmp("train_offline");
    auto doc = tiny_doc();
    const auto base = parse_experiment(doc);
    const auto splits = build_splits(base);
    cmd_train(base, tmp.path() / "baseline", splits);
    doc["scheme"] = {{"kind", "uniform"}, {"mode", "offline"}, {"offline_episodes", 20},
                     {"proposal_checkpoint", (tmp.path() / "baseline" / "best").string()}};
    const auto c = parse_experiment(doc);
    const auto out = cmd_train(c, tmp.path() / "offline", splits);
    EXPECT_EQ(out.result["mode"], "offline");
}

TEST(CompareSchemes, RowsAndDeterminism) {
    TempDir tmp("compare");
    const auto c = parse_experiment(tiny_doc());
    const auto splits = build_splits(c);
    EXPECT_THROW(cmd_compare_schemes(c, {SchemeKind::uniform}, tmp.path(), splits), ConfigError);
    cmd_compare_schemes(c, {SchemeKind::baseline, SchemeKind::uniform}, tmp.path() / "two", splits);
    auto lines = io::lines_of(io::read_file(tmp.path() / "two" / "comparison.csv"));
    while (!lines.empty() && lines.back().empty()) lines.pop_back();
    ASSERT_EQ(lines.size(), 3u);
    EXPECT_EQ(lines[0], "scheme,test_mean,ci95,best_iteration");
    EXPECT_EQ(lines[1].rfind("baseline,", 0), 0u);

    cmd_compare_schemes(c, {SchemeKind::hard, SchemeKind::hard}, tmp.path() / "same", splits);
    lines = io::lines_of(io::read_file(tmp.path() / "same" / "comparison.csv"));
    EXPECT_EQ(lines[1], lines[2]);
    EXPECT_TRUE(fs::exists(tmp.path() / "same" / "00_hard" / "result.json"));
    EXPECT_TRUE(fs::exists(tmp.path() / "same" / "01_hard" / "result.json"));
}

TEST(Analyze, RowCounts) {
    TempDir tmp("analyze");
    auto c = parse_experiment(tiny_doc());
    const auto splits = build_splits(c);
    cmd_train(c, tmp.path() / "run", splits);
    const auto best = tmp.path() / "run" / "best";

    AnalyzeOptions o;
    o.checkpoint = best;
    o.episodes = 300;
    o.normality = true;
    o.qq = true;
    o.bins = 20;
    o.spearman = std::make_pair(best, tmp.path() / "run" / "checkpoints" / "iter_0000003");
    o.extremes = {tmp.path() / "run" / "checkpoints" / "iter_0000003", best};
    o.extremes_m = 10;
    o.dispersion = {tmp.path() / "run"};
    o.subsample = 30;
    o.repetitions = 10;
    const auto res = cmd_analyze(c, o, splits[2], tmp.path() / "out");
    auto rows = [&](const char* f) {
        auto l = io::lines_of(io::read_file(tmp.path() / "out" / f));
        while (!l.empty() && l.back().empty()) l.pop_back();
        return l.size() - 1;
    };
    EXPECT_EQ(rows("density.csv"), 20u);
    EXPECT_EQ(rows("qq.csv"), 300u);
    EXPECT_EQ(rows("spearman.csv"), 1u);
    EXPECT_EQ(rows("normality.csv"), 1u);
    EXPECT_EQ(rows("extremes.csv"), 2u);
    EXPECT_EQ(rows("dispersion.csv"), 1u);
    ASSERT_TRUE(res.rejection);
    EXPECT_GE(res.rejection->rate, 0.0);
    EXPECT_LE(res.rejection->rate, 1.0);
    ASSERT_TRUE(res.rho);

    // Reusing the saved episode file reproduces the correlation.
    AnalyzeOptions again;
    again.episode_file = tmp.path() / "out" / "episodes.csv";
    again.spearman = o.spearman;
    EXPECT_EQ(*cmd_analyze(c, again, splits[2], tmp.path() / "out2").rho, *res.rho);

    AnalyzeOptions none;
    EXPECT_THROW(cmd_analyze(c, none, splits[2], tmp.path() / "out3"), ConfigError);
    AnalyzeOptions few;
    few.checkpoint = best;
    few.episodes = 10;
    few.normality = true;
    EXPECT_THROW(cmd_analyze(c, few, splits[2], tmp.path() / "out4"), ConfigError);
}

TEST(Analyze, IncompatibleCheckpoint) {
    TempDir tmp("analyze_incompatible");
    auto c = parse_experiment(tiny_doc());
    cmd_train(c, tmp.path() / "run", build_splits(c));
    auto doc = tiny_doc();
    doc["dataset"]["generator"]["feature_dim"] = 5;
    const auto other = parse_experiment(doc);
    AnalyzeOptions o;
    o.checkpoint = tmp.path() / "run" / "best";
    o.episodes = 60;
    o.qq = true;
    EXPECT_THROW(cmd_analyze(other, o, build_splits(other)[2], tmp.path() / "out"), ShapeError);
}

TEST(Output, EnvironmentRoot) {
    ::setenv(kOutputRootEnv, "/tmp/episample_root", 1);
    EXPECT_EQ(resolve_output("runs/x"), fs::path("/tmp/episample_root/runs/x"));
    EXPECT_EQ(resolve_output("/abs"), fs::path("/abs"));
    EXPECT_EQ(resolve_output(""), fs::path("/tmp/episample_root/runs"));
    ::unsetenv(kOutputRootEnv);
    EXPECT_EQ(resolve_output(""), fs::path("runs"));
}
