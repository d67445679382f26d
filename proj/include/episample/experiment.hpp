#ifndef EPISAMPLE_EXPERIMENT_HPP
#define EPISAMPLE_EXPERIMENT_HPP

#include <array>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "datagen.hpp"
#include "error.hpp"
#include "io.hpp"
#include "learners.hpp"
#include "sampler.hpp"
#include "stats.hpp"
#include "trainer.hpp"

namespace episample {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr const char* kOutputRootEnv = "EPISAMPLE_OUTPUT_ROOT";

// Stream indices derived from the experiment seed.
inline constexpr std::uint64_t kInitStream = 0;
inline constexpr std::uint64_t kTestStream = 3;
inline constexpr std::uint64_t kAnalysisEpisodeStream = 5;
inline constexpr std::uint64_t kAnalysisSubsampleStream = 6;

struct DatasetBlock {
    std::optional<std::string> path;           // directory holding train/, val/, test/
    std::optional<GeneratorParams> generator;  // seed filled from dataset.seed or the experiment seed
    std::array<double, 3> split_ratios{64, 16, 20};
    std::optional<std::uint64_t> seed;
};

struct SchemeBlock {
    SchemeKind kind = SchemeKind::baseline;
    EstimationMode mode = EstimationMode::online;
    double lambda = 0.9;
    std::size_t warmup_iterations = 100;
    std::optional<std::string> proposal_checkpoint;
    std::size_t offline_episodes = 1000;
};

struct ExperimentConfig {
    DatasetBlock dataset;
    LearnerConfig learner;
    TrainConfig train;
    SchemeBlock scheme;
    std::string output_dir;
    std::uint64_t seed = 0;

    std::uint64_t dataset_seed() const { return dataset.seed.value_or(seed); }

    /// TrainConfig with scheme and seed folded in.
    TrainConfig train_config() const {
        TrainConfig t = train;
        t.scheme.kind = scheme.kind;
        t.scheme.mode = scheme.mode;
        t.lambda = scheme.lambda;
        t.warmup_iterations = scheme.warmup_iterations;
        t.seed = seed;
        return t;
    }
};

namespace detail {

/// Strict reader over one JSON object: every key must be consumed.
class Block {
public:
    Block(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) {
            throw ConfigError(where() + "must be an object");
        }
    }

    bool has(const std::string& key) {
        seen_.insert(key);
        return j_.contains(key) && !j_.at(key).is_null();
    }

    const json& raw(const std::string& key) {
        seen_.insert(key);
        if (!j_.contains(key)) {
            throw ConfigError(name(key) + ": missing required key");
        }
        return j_.at(key);
    }

    std::size_t count(const std::string& key) {
        const auto& v = raw(key);
        if (!v.is_number_integer() || v.get<std::int64_t>() < 0) {
            throw ConfigError(name(key) + ": expected a non-negative integer");
        }
        return v.get<std::size_t>();
    }
    std::size_t count(const std::string& key, std::size_t fallback) {
        return has(key) ? count(key) : fallback;
    }

    std::uint64_t u64(const std::string& key) {
        const auto& v = raw(key);
        if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0)) {
            throw ConfigError(name(key) + ": expected a non-negative 64-bit integer");
        }
        return v.get<std::uint64_t>();
    }

    double real(const std::string& key) {
        const auto& v = raw(key);
        if (!v.is_number()) {
            throw ConfigError(name(key) + ": expected a number");
        }
        return v.get<double>();
    }
    double real(const std::string& key, double fallback) {
        return has(key) ? real(key) : fallback;
    }

    std::string text(const std::string& key) {
        const auto& v = raw(key);
        if (!v.is_string()) {
            throw ConfigError(name(key) + ": expected a string");
        }
        return v.get<std::string>();
    }
    std::string text(const std::string& key, const std::string& fallback) {
        return has(key) ? text(key) : fallback;
    }

    Block child(const std::string& key) { return Block(raw(key), name(key)); }

    std::string name(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

    void finish() const {
        for (const auto& [k, v] : j_.items()) {
            if (!seen_.count(k)) {
                throw ConfigError(name(k) + ": unknown key");
            }
        }
    }

private:
    std::string where() const { return path_.empty() ? "config " : path_ + ": "; }

    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

inline void require_positive(std::size_t v, const std::string& key) {
    if (v == 0) {
        throw ConfigError(key + ": must be positive");
    }
}

} // namespace detail

inline ExperimentConfig parse_experiment(const json& doc) {
    ExperimentConfig c;
    detail::Block root(doc, "");
    c.seed = root.has("seed") ? root.u64("seed") : 0;
    c.output_dir = root.text("output_dir", "");

    if (root.has("dataset")) {
        auto d = root.child("dataset");
        if (d.has("path")) {
            c.dataset.path = d.text("path");
        }
        if (d.has("seed")) {
            c.dataset.seed = d.u64("seed");
        }
        if (d.has("generator")) {
            auto g = d.child("generator");
            GeneratorParams p;
            p.num_classes = g.count("num_classes");
            p.samples_per_class = g.count("samples_per_class");
            p.feature_dim = g.count("feature_dim");
            p.class_separation = g.real("class_separation");
            p.noise_scale = g.real("noise_scale");
            g.finish();
            c.dataset.generator = p;
        }
        if (d.has("split_ratios")) {
            const auto& r = d.raw("split_ratios");
            if (!r.is_array() || r.size() != 3 || !std::all_of(r.begin(), r.end(), [](const json& x) { return x.is_number(); })) {
                throw ConfigError(d.name("split_ratios") + ": expected three numbers (train, val, test)");
            }
            for (std::size_t i = 0; i < 3; ++i) {
                c.dataset.split_ratios[i] = r[i].get<double>();
            }
        }
        d.finish();
    }
    if (!c.dataset.path && !c.dataset.generator) {
        throw ConfigError("dataset: needs a 'path' or a 'generator' block");
    }

    if (root.has("learner")) {
        auto l = root.child("learner");
        c.learner.algorithm = algorithm_from_string(l.text("algorithm", to_string(c.learner.algorithm)));
        if (l.has("widths")) {
            const auto& w = l.raw("widths");
            if (!w.is_array() || w.empty() ||
                !std::all_of(w.begin(), w.end(), [](const json& x) { return x.is_number_integer() && x.get<std::int64_t>() > 0; })) {
                throw ConfigError(l.name("widths") + ": expected a non-empty list of positive integers");
            }
            c.learner.widths = w.get<std::vector<std::size_t>>();
        }
        if (l.has("adaptation_rate")) {
            c.learner.adaptation_rate = l.real("adaptation_rate");
            if (!(*c.learner.adaptation_rate > 0.0)) {
                throw ConfigError(l.name("adaptation_rate") + ": must be positive");
            }
        }
        c.learner.adaptation_steps = l.count("adaptation_steps", c.learner.adaptation_steps);
        detail::require_positive(c.learner.adaptation_steps, "learner.adaptation_steps");
        c.learner.cosine_scale = l.real("cosine_scale", c.learner.cosine_scale);
        if (!(c.learner.cosine_scale > 0.0)) {
            throw ConfigError("learner.cosine_scale: must be positive");
        }
        l.finish();
    }

    if (root.has("train")) {
        auto t = root.child("train");
        auto& tc = c.train;
        tc.iterations = t.count("iterations", tc.iterations);
        tc.batch_size = t.count("batch_size", tc.batch_size);
        tc.learning_rate = t.real("learning_rate", tc.learning_rate);
        tc.validation_interval = t.count("validation_interval", tc.validation_interval);
        tc.validation_episodes = t.count("validation_episodes", tc.validation_episodes);
        tc.test_episodes = t.count("test_episodes", tc.test_episodes);
        tc.way = t.count("way", tc.way);
        tc.shot = t.count("shot", tc.shot);
        tc.query = t.count("query", tc.query);
        tc.workers = t.count("workers", tc.workers);
        t.finish();
    }

    if (root.has("scheme")) {
        auto s = root.child("scheme");
        c.scheme.kind = scheme_from_string(s.text("kind", to_string(c.scheme.kind)));
        c.scheme.mode = mode_from_string(s.text("mode", to_string(c.scheme.mode)));
        c.scheme.lambda = s.real("lambda", c.scheme.lambda);
        c.scheme.warmup_iterations = s.count("warmup_iterations", c.scheme.warmup_iterations);
        if (s.has("proposal_checkpoint")) {
            c.scheme.proposal_checkpoint = s.text("proposal_checkpoint");
        }
        c.scheme.offline_episodes = s.count("offline_episodes", c.scheme.offline_episodes);
        s.finish();
    }
    root.finish();

    validate(c.train);
    if (!(c.scheme.lambda >= 0.0 && c.scheme.lambda <= 1.0)) {
        throw ConfigError("scheme.lambda: must lie in [0, 1]");
    }
    if (c.scheme.mode == EstimationMode::offline) {
        if (!c.scheme.proposal_checkpoint) {
            throw ConfigError("scheme.proposal_checkpoint: offline mode requires a proposal checkpoint");
        }
        if (c.scheme.offline_episodes < 2) {
            throw ConfigError("scheme.offline_episodes: need at least 2 episodes");
        }
    }
    if (c.scheme.kind == SchemeKind::curriculum && c.train.iterations == 0) {
        throw ConfigError("train.iterations: curriculum needs the total iteration count");
    }
    c.learner.way = c.train.way;
    return c;
}

inline json experiment_to_json(const ExperimentConfig& c) {
    json j;
    json d = json::object();
    if (c.dataset.path) {
        d["path"] = *c.dataset.path;
    }
    if (c.dataset.generator) {
        const auto& g = *c.dataset.generator;
        d["generator"] = {{"num_classes", g.num_classes},
                          {"samples_per_class", g.samples_per_class},
                          {"feature_dim", g.feature_dim},
                          {"class_separation", g.class_separation},
                          {"noise_scale", g.noise_scale}};
    }
    d["split_ratios"] = c.dataset.split_ratios;
    if (c.dataset.seed) {
        d["seed"] = *c.dataset.seed;
    }
    j["dataset"] = d;
    json l = {{"algorithm", to_string(c.learner.algorithm)},
              {"widths", c.learner.widths},
              {"adaptation_steps", c.learner.adaptation_steps},
              {"cosine_scale", c.learner.cosine_scale}};
    if (c.learner.adaptation_rate) {
        l["adaptation_rate"] = *c.learner.adaptation_rate;
    }
    j["learner"] = l;
    const auto& t = c.train;
    j["train"] = {{"iterations", t.iterations},
                  {"batch_size", t.batch_size},
                  {"learning_rate", t.learning_rate},
                  {"validation_interval", t.validation_interval},
                  {"validation_episodes", t.validation_episodes},
                  {"test_episodes", t.test_episodes},
                  {"way", t.way},
                  {"shot", t.shot},
                  {"query", t.query},
                  {"workers", t.workers}};
    json s = {{"kind", to_string(c.scheme.kind)},
              {"mode", to_string(c.scheme.mode)},
              {"lambda", c.scheme.lambda},
              {"warmup_iterations", c.scheme.warmup_iterations},
              {"offline_episodes", c.scheme.offline_episodes}};
    if (c.scheme.proposal_checkpoint) {
        s["proposal_checkpoint"] = *c.scheme.proposal_checkpoint;
    }
    j["scheme"] = s;
    j["output_dir"] = c.output_dir;
    j["seed"] = c.seed;
    return j;
}

/// Sets a dotted path (`train.batch_size`) to a value parsed as JSON when
/// possible (`32`, `true`, `[1,2]`) and as a plain string otherwise.
inline void apply_override(json& doc, const std::string& dotted, const std::string& value) {
    if (dotted.empty() || dotted.front() == '.' || dotted.back() == '.') {
        throw ConfigError("override '" + dotted + "': malformed key");
    }
    json* node = &doc;
    std::size_t start = 0;
    while (true) {
        const auto dot = dotted.find('.', start);
        const auto key = dotted.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (!node->is_object()) {
            throw ConfigError("override '" + dotted + "': '" + key + "' is not inside an object");
        }
        if (dot == std::string::npos) {
            if (node->contains(key) && (*node)[key].is_object()) {
                throw ConfigError("override '" + dotted + "': only scalar leaves can be overridden");
            }
            json parsed = json::parse(value, nullptr, false);
            (*node)[key] = parsed.is_discarded() ? json(value) : parsed;
            return;
        }
        if (!node->contains(key)) {
            (*node)[key] = json::object();
        }
        node = &(*node)[key];
        start = dot + 1;
    }
}

inline json read_json(const fs::path& path) {
    const auto text = io::read_file(path);
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        throw ParseError(path.string(), 0, e.what());
    }
}

inline ExperimentConfig load_experiment(const fs::path& path, const std::vector<std::pair<std::string, std::string>>& overrides = {}) {
    json doc = read_json(path);
    for (const auto& [k, v] : overrides) {
        apply_override(doc, k, v);
    }
    return parse_experiment(doc);
}

/// Relative output paths resolve against $EPISAMPLE_OUTPUT_ROOT when set.
inline fs::path resolve_output(const std::string& dir) {
    const char* root = std::getenv(kOutputRootEnv);
    const std::string base = dir.empty() ? "runs" : dir;
    fs::path p(base);
    if (p.is_relative() && root != nullptr && *root != '\0') {
        return fs::path(root) / p;
    }
    return p;
}

/// Strips a trailing `.json` / `.csv` so either file of a checkpoint pair names it.
inline fs::path checkpoint_stem(const fs::path& p) {
    if (p.extension() == ".json" || p.extension() == ".csv") {
        auto s = p;
        return s.replace_extension();
    }
    return p;
}

// ---------------------------------------------------------------------------
// Datasets

inline GeneratorParams generator_of(const ExperimentConfig& c) {
    GeneratorParams g = *c.dataset.generator;
    g.seed = c.dataset_seed();
    return g;
}

inline std::array<BaseDataset, 3> build_splits(const ExperimentConfig& c) {
    const auto ds = generate_synthetic(generator_of(c));
    return split_classes(ds, c.dataset.split_ratios, c.dataset_seed());
}

/// Loads `dataset.path` when given, otherwise generates the splits in memory.
inline std::array<BaseDataset, 3> resolve_splits(const ExperimentConfig& c) {
    if (c.dataset.path) {
        const fs::path root(*c.dataset.path);
        if (!fs::exists(root / "train" / "manifest.json")) {
            if (!c.dataset.generator) {
                throw ConfigError("dataset.path: no dataset at '" + root.string() + "'");
            }
            return build_splits(c);
        }
        return load_splits(root);
    }
    return build_splits(c);
}

/// gen-data: writes <dir>/{train,val,test}. Refuses to overwrite unless forced.
inline fs::path cmd_gen_data(const ExperimentConfig& c, bool force) {
    if (!c.dataset.generator) {
        throw ConfigError("dataset.generator: gen-data needs generator parameters");
    }
    const fs::path dir = c.dataset.path ? fs::path(*c.dataset.path) : resolve_output(c.output_dir) / "data";
    if (fs::exists(dir) && !fs::is_empty(dir) && !force) {
        throw Error("gen-data: '" + dir.string() + "' exists; pass --force to overwrite");
    }
    if (force && fs::exists(dir)) {
        for (const char* s : {"train", "val", "test"}) {
            fs::remove_all(dir / s);
        }
    }
    save_splits(build_splits(c), dir);
    return dir;
}

// ---------------------------------------------------------------------------
// Training runs

inline const char* kResultKeys[] = {"algorithm",          "scheme",          "mode",
                                    "seed",               "best_iteration",  "test_accuracy_mean",
                                    "test_accuracy_ci95"};

/// Structural check mirroring schemas/result.schema.json.
inline void check_result_schema(const json& r) {
    if (!r.is_object() || r.size() != std::size(kResultKeys)) {
        throw ValidationError("result.json: expected exactly the documented keys");
    }
    for (const char* k : kResultKeys) {
        if (!r.contains(k)) {
            throw ValidationError(std::string("result.json: missing ") + k);
        }
    }
    (void)algorithm_from_string(r["algorithm"].get<std::string>());
    (void)scheme_from_string(r["scheme"].get<std::string>());
    (void)mode_from_string(r["mode"].get<std::string>());
    if (!r["seed"].is_number_unsigned() || !r["best_iteration"].is_number_unsigned()) {
        throw ValidationError("result.json: seed and best_iteration must be non-negative integers");
    }
    const double m = r["test_accuracy_mean"].get<double>();
    const double ci = r["test_accuracy_ci95"].get<double>();
    if (!(m >= 0.0 && m <= 1.0) || !(ci >= 0.0)) {
        throw ValidationError("result.json: accuracy mean must lie in [0, 1] and ci95 be non-negative");
    }
}

struct RunOutcome {
    fs::path dir;
    TrainResult train;
    Evaluation test;
    json result;
};

inline json error_record(const std::string& kind, const std::string& message) {
    return {{"error", kind}, {"message", message}};
}

inline LearnerParams initial_params(const ExperimentConfig& c, std::size_t input_dim) {
    LearnerConfig lc = c.learner;
    lc.input_dim = input_dim;
    lc.way = c.train.way;
    RandomStream rng = RandomStream(c.seed).split(kInitStream);
    return init_learner(lc, rng);
}

inline void check_compatible(const LearnerParams& p, const BaseDataset& ds, std::size_t way) {
    if (p.input_dim() != ds.feature_dim) {
        throw ShapeError("checkpoint expects " + std::to_string(p.input_dim()) + "-dimensional inputs but dataset '" +
                         ds.split + "' has feature_dim " + std::to_string(ds.feature_dim));
    }
    if (p.head && p.head->weight.shape[0] != way) {
        throw ShapeError("checkpoint head is " + std::to_string(p.head->weight.shape[0]) + "-way, episodes are " +
                         std::to_string(way) + "-way");
    }
}

/// train: trains into `dir`, evaluates the best checkpoint on the test split
/// and writes checkpoints/, best.{json,csv}, history.csv, episodes.csv,
/// config.json and result.json. On failure writes error.json and rethrows.
inline RunOutcome cmd_train(const ExperimentConfig& c, const fs::path& dir, const std::array<BaseDataset, 3>& splits) {
    fs::create_directories(dir);
    fs::remove(dir / "error.json");
    io::write_file(dir / "config.json", experiment_to_json(c).dump(2) + "\n");
    try {
        const auto tc = c.train_config();
        LearnerParams init = initial_params(c, splits[0].feature_dim);
        std::optional<LearnerParams> proposal;
        if (c.scheme.mode == EstimationMode::offline) {
            proposal = load_checkpoint(checkpoint_stem(*c.scheme.proposal_checkpoint));
            check_compatible(*proposal, splits[0], tc.way);
        }
        const DifficultyModel model0 =
            initial_model(tc, proposal ? &*proposal : nullptr, splits[0], c.scheme.offline_episodes);

        TrainOptions opts;
        opts.proposal = proposal;
        const json meta = {{"scheme", to_string(c.scheme.kind)}, {"mode", to_string(c.scheme.mode)}, {"seed", c.seed}};
        opts.on_validation = [&](std::size_t t, const LearnerParams& p, double acc) {
            json extra = meta;
            extra["iteration"] = t;
            extra["val_accuracy"] = acc;
            char name[32];
            std::snprintf(name, sizeof name, "iter_%07zu", t);
            save_checkpoint(p, dir / "checkpoints" / name, extra);
        };

        RunOutcome out;
        out.dir = dir;
        out.train = train(tc, std::move(init), splits[0], splits[1], model0, opts);
        io::write_file(dir / "history.csv", history_csv(out.train.history));
        io::write_file(dir / "episodes.csv", episodes_csv(out.train.history));
        json best_meta = meta;
        best_meta["iteration"] = out.train.best_iteration;
        save_checkpoint(out.train.best, dir / "best", best_meta);
        if (out.train.aborted) {
            throw DomainError("training aborted: " + out.train.diagnostic +
                              "; best checkpoint so far written to best.json");
        }

        RandomStream test_rng = RandomStream(c.seed).split(kTestStream);
        out.test = evaluate(out.train.best, splits[2], tc.way, tc.shot, tc.query, tc.test_episodes, test_rng);
        out.result = {{"algorithm", to_string(c.learner.algorithm)},
                      {"scheme", to_string(c.scheme.kind)},
                      {"mode", to_string(c.scheme.mode)},
                      {"seed", c.seed},
                      {"best_iteration", out.train.best_iteration},
                      {"test_accuracy_mean", out.test.mean},
                      {"test_accuracy_ci95", out.test.ci95}};
        check_result_schema(out.result);
        io::write_file(dir / "result.json", out.result.dump(2) + "\n");
        return out;
    } catch (const std::exception& e) {
        io::write_file(dir / "error.json", error_record("train", e.what()).dump(2) + "\n");
        throw;
    }
}

inline Evaluation cmd_evaluate(const ExperimentConfig& c, const fs::path& checkpoint, const BaseDataset& split,
                               std::optional<std::size_t> episodes = std::nullopt) {
    const auto p = load_checkpoint(checkpoint_stem(checkpoint));
    check_compatible(p, split, c.train.way);
    RandomStream rng = RandomStream(c.seed).split(kTestStream);
    return evaluate(p, split, c.train.way, c.train.shot, c.train.query, episodes.value_or(c.train.test_episodes), rng);
}

/// compare-schemes: one run per scheme (same remaining config and seed) in
/// <dir>/NN_<scheme>/, and <dir>/comparison.csv rewritten after every run so
/// a failure keeps the finished rows.
inline std::vector<RunOutcome> cmd_compare_schemes(const ExperimentConfig& base, const std::vector<SchemeKind>& schemes,
                                                   const fs::path& dir, const std::array<BaseDataset, 3>& splits) {
    if (schemes.size() < 2) {
        throw ConfigError("compare-schemes: need at least 2 schemes");
    }
    fs::create_directories(dir);
    std::vector<RunOutcome> runs;
    std::string csv = "scheme,test_mean,ci95,best_iteration\n";
    io::write_file(dir / "comparison.csv", csv);
    for (std::size_t i = 0; i < schemes.size(); ++i) {
        ExperimentConfig c = base;
        c.scheme.kind = schemes[i];
        char name[64];
        std::snprintf(name, sizeof name, "%02zu_%s", i, to_string(schemes[i]).c_str());
        runs.push_back(cmd_train(c, dir / name, splits));
        const auto& r = runs.back();
        csv += to_string(schemes[i]) + "," + io::format_double(r.test.mean) + "," + io::format_double(r.test.ci95) + "," +
               std::to_string(r.train.best_iteration) + "\n";
        io::write_file(dir / "comparison.csv", csv);
    }
    return runs;
}

// ---------------------------------------------------------------------------
// Analysis

struct AnalyzeOptions {
    std::optional<fs::path> checkpoint;              // scores --normality / --qq, selects extremes
    std::size_t episodes = 10000;
    std::optional<fs::path> episode_file;            // reuse an existing shared episode file
    bool normality = false;
    bool qq = false;
    std::size_t bins = 50;
    std::optional<std::pair<fs::path, fs::path>> spearman;
    std::vector<fs::path> extremes;                  // checkpoints tracked over training
    std::size_t extremes_m = 50;
    std::vector<fs::path> dispersion;                // run directories holding episodes.csv
    std::size_t subsample = 50;
    std::size_t repetitions = 100;
};

struct AnalyzeOutputs {
    std::optional<RejectionRate> rejection;
    std::optional<double> rho;
    std::vector<ExtremesRow> extremes;
    std::vector<double> dispersion;
    std::vector<fs::path> files;
};

inline std::vector<double> score_with(const fs::path& checkpoint, const BaseDataset& split, std::size_t way,
                                      const std::vector<Episode>& episodes) {
    const auto p = load_checkpoint(checkpoint_stem(checkpoint));
    check_compatible(p, split, way);
    return score_episodes(p, episodes);
}

/// analyze: scores one shared episode file (sampled from the test split and
/// saved to <out>/episodes.csv unless given) and writes one CSV per protocol.
inline AnalyzeOutputs cmd_analyze(const ExperimentConfig& c, const AnalyzeOptions& o, const BaseDataset& split,
                                  const fs::path& out) {
    const bool needs_episodes = o.normality || o.qq || o.spearman || !o.extremes.empty();
    if ((o.normality || o.qq || !o.extremes.empty()) && !o.checkpoint) {
        throw ConfigError("analyze: --normality, --qq and --extremes need --checkpoint");
    }
    if (!needs_episodes && o.dispersion.empty()) {
        throw ConfigError("analyze: no protocol selected");
    }
    fs::create_directories(out);
    AnalyzeOutputs res;
    const std::size_t n = c.train.way, k = c.train.shot, q = c.train.query;

    std::vector<Episode> episodes;
    if (needs_episodes) {
        if (o.episode_file) {
            episodes = load_episodes(split, *o.episode_file);
        } else {
            RandomStream rng = RandomStream(c.seed).split(kAnalysisEpisodeStream);
            for (std::size_t e = 0; e < o.episodes; ++e) {
                episodes.push_back(sample_episode(split, n, k, q, rng));
            }
            save_episodes(episodes, out / "episodes.csv");
            res.files.push_back(out / "episodes.csv");
        }
        std::size_t minimum = 2;
        if (o.normality) minimum = std::max(minimum, o.subsample);
        if (!o.extremes.empty()) minimum = std::max(minimum, 2 * o.extremes_m);
        if (episodes.size() < minimum) {
            throw ConfigError("analyze: " + std::to_string(episodes.size()) + " episodes, the selected protocols need at least " +
                              std::to_string(minimum));
        }
    }

    std::vector<double> omegas;
    if (o.checkpoint && needs_episodes) {
        omegas = score_with(*o.checkpoint, split, n, episodes);
    }
    if (o.normality) {
        RandomStream rng = RandomStream(c.seed).split(kAnalysisSubsampleStream);
        res.rejection = normality_rejection_rate(omegas, rng, o.subsample, o.repetitions);
        io::write_file(out / "normality.csv",
                       "episodes,subsample,repetitions,rejection_rate,degenerate\n" + std::to_string(omegas.size()) + "," +
                           std::to_string(o.subsample) + "," + std::to_string(o.repetitions) + "," +
                           io::format_double(res.rejection->rate) + "," + std::to_string(res.rejection->degenerate) + "\n");
        res.files.push_back(out / "normality.csv");
    }
    if (o.qq) {
        const auto d = export_density_and_qq(omegas, o.bins);
        io::write_file(out / "density.csv", histogram_csv(d.histogram));
        io::write_file(out / "qq.csv", qq_csv(d.qq));
        res.files.push_back(out / "density.csv");
        res.files.push_back(out / "qq.csv");
    }
    if (o.spearman) {
        const auto a = score_with(o.spearman->first, split, n, episodes);
        const auto b = score_with(o.spearman->second, split, n, episodes);
        res.rho = spearman(a, b);
        io::write_file(out / "spearman.csv", "episodes,rho\n" + std::to_string(episodes.size()) + "," +
                                                 io::format_double(*res.rho) + "\n");
        res.files.push_back(out / "spearman.csv");
    }
    if (!o.extremes.empty()) {
        std::vector<std::vector<double>> per;
        std::vector<std::string> labels;
        for (const auto& ck : o.extremes) {
            per.push_back(score_with(ck, split, n, episodes));
            labels.push_back(checkpoint_stem(ck).filename().string());
        }
        res.extremes = track_extremes(omegas, per, o.extremes_m);
        io::write_file(out / "extremes.csv", extremes_csv(res.extremes, labels));
        res.files.push_back(out / "extremes.csv");
    }
    if (!o.dispersion.empty()) {
        std::vector<WeightedLossRun> runs;
        std::vector<std::string> ids;
        for (const auto& d : o.dispersion) {
            runs.push_back(load_weighted_losses(d / "episodes.csv"));
            ids.push_back(d.filename().empty() ? d.parent_path().filename().string() : d.filename().string());
        }
        res.dispersion = weighted_loss_std(runs);
        io::write_file(out / "dispersion.csv", dispersion_csv(ids, res.dispersion));
        res.files.push_back(out / "dispersion.csv");
    }
    return res;
}

} // namespace episample

#endif
