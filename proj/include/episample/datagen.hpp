#ifndef EPISAMPLE_DATAGEN_HPP
#define EPISAMPLE_DATAGEN_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "autodiff.hpp"
#include "error.hpp"
#include "io.hpp"
#include "rng.hpp"

namespace episample {

struct GeneratorParams {
    std::size_t num_classes = 100;
    std::size_t samples_per_class = 60;
    std::size_t feature_dim = 8;
    double class_separation = 3.0;
    double noise_scale = 1.0;
    std::uint64_t seed = 0;

    friend bool operator==(const GeneratorParams&, const GeneratorParams&) = default;
};

struct ClassRecord {
    std::int64_t id = 0;
    std::size_t count = 0;
    std::vector<double> features; // count x feature_dim, row-major

    std::span<const double> sample(std::size_t i, std::size_t dim) const {
        return {features.data() + i * dim, dim};
    }

    friend bool operator==(const ClassRecord&, const ClassRecord&) = default;
};

/// A set of classes with their feature vectors. `split` is one of
/// "train", "val", "test", or "all" for an unsplit dataset.
struct BaseDataset {
    std::size_t feature_dim = 0;
    std::string split = "all";
    std::vector<ClassRecord> classes;
    std::optional<GeneratorParams> generator;

    std::size_t num_classes() const noexcept { return classes.size(); }

    const ClassRecord& class_by_id(std::int64_t id) const {
        for (const auto& c : classes) {
            if (c.id == id) {
                return c;
            }
        }
        throw Error("dataset split '" + split + "' has no class " + std::to_string(id));
    }

    friend bool operator==(const BaseDataset&, const BaseDataset&) = default;
};

inline GeneratorParams validated(const GeneratorParams& p) {
    if (p.num_classes == 0 || p.samples_per_class == 0) {
        throw DomainError("generate_synthetic: num_classes and samples_per_class must be positive");
    }
    if (p.feature_dim < 2) {
        throw DomainError("generate_synthetic: feature_dim must be at least 2 for sphere sampling, got " +
                          std::to_string(p.feature_dim));
    }
    if (!(p.class_separation >= 0.0) || !(p.noise_scale >= 0.0)) {
        throw DomainError("generate_synthetic: class_separation and noise_scale must be non-negative");
    }
    return p;
}

/// Class c's mean is uniform on the sphere of radius class_separation; its
/// samples are mean + N(0, noise_scale^2 I). Class c draws from stream
/// split(c) of the seed, so classes are generated independently.
inline BaseDataset generate_synthetic(const GeneratorParams& params) {
    const auto p = validated(params);
    BaseDataset ds;
    ds.feature_dim = p.feature_dim;
    ds.generator = p;
    const RandomStream root(p.seed);
    for (std::size_t c = 0; c < p.num_classes; ++c) {
        RandomStream rng = root.split(c);
        std::vector<double> mean(p.feature_dim);
        double norm = 0.0;
        do {
            norm = 0.0;
            for (auto& m : mean) {
                m = rng.normal();
                norm += m * m;
            }
            norm = std::sqrt(norm);
        } while (norm == 0.0);
        for (auto& m : mean) {
            m *= p.class_separation / norm;
        }
        ClassRecord rec;
        rec.id = static_cast<std::int64_t>(c);
        rec.count = p.samples_per_class;
        rec.features.resize(p.samples_per_class * p.feature_dim);
        for (std::size_t i = 0; i < p.samples_per_class; ++i) {
            for (std::size_t j = 0; j < p.feature_dim; ++j) {
                rec.features[i * p.feature_dim + j] = mean[j] + p.noise_scale * rng.normal();
            }
        }
        ds.classes.push_back(std::move(rec));
    }
    return ds;
}

/// Partitions classes by explicit id lists (train, val, test).
inline std::array<BaseDataset, 3> split_by_ids(const BaseDataset& ds,
                                               const std::array<std::vector<std::int64_t>, 3>& ids) {
    static const std::array<std::string, 3> names{"train", "val", "test"};
    std::set<std::int64_t> seen;
    std::array<BaseDataset, 3> out;
    for (std::size_t s = 0; s < 3; ++s) {
        if (ids[s].empty()) {
            throw DomainError("split_classes: split '" + names[s] + "' is empty");
        }
        out[s].feature_dim = ds.feature_dim;
        out[s].split = names[s];
        out[s].generator = ds.generator;
        auto sorted = ids[s];
        std::sort(sorted.begin(), sorted.end());
        for (auto id : sorted) {
            if (!seen.insert(id).second) {
                throw DomainError("split_classes: class " + std::to_string(id) + " requested by more than one split");
            }
            out[s].classes.push_back(ds.class_by_id(id));
        }
    }
    return out;
}

/// Random disjoint partition with sizes round(ratio_i / sum * C).
inline std::array<BaseDataset, 3> split_classes(const BaseDataset& ds, const std::array<double, 3>& ratios,
                                                std::uint64_t seed) {
    double total = 0.0;
    for (double r : ratios) {
        if (!(r > 0.0)) {
            throw DomainError("split_classes: ratios must be positive");
        }
        total += r;
    }
    const auto n = ds.num_classes();
    std::array<std::size_t, 3> counts{};
    std::size_t assigned = 0;
    for (std::size_t s = 0; s < 3; ++s) {
        counts[s] = static_cast<std::size_t>(std::llround(ratios[s] / total * static_cast<double>(n)));
        if (counts[s] == 0) {
            throw DomainError("split_classes: split " + std::to_string(s) + " would be empty");
        }
        assigned += counts[s];
    }
    if (assigned != n) {
        throw DomainError("split_classes: rounded split sizes sum to " + std::to_string(assigned) + ", not " +
                          std::to_string(n) + " classes");
    }
    std::vector<std::int64_t> order;
    for (const auto& c : ds.classes) {
        order.push_back(c.id);
    }
    RandomStream rng(seed, 0x5b1175ull);
    rng.shuffle(std::span<std::int64_t>(order));
    std::array<std::vector<std::int64_t>, 3> ids;
    std::size_t pos = 0;
    for (std::size_t s = 0; s < 3; ++s) {
        ids[s].assign(order.begin() + static_cast<std::ptrdiff_t>(pos),
                      order.begin() + static_cast<std::ptrdiff_t>(pos + counts[s]));
        pos += counts[s];
    }
    return split_by_ids(ds, ids);
}

// ---------------------------------------------------------------------------
// Episodes

struct SampleRef {
    std::int64_t class_id = 0;
    std::size_t index = 0;

    friend bool operator==(const SampleRef&, const SampleRef&) = default;
};

/// One n-way k-shot task. Classes are sorted by id; label i refers to
/// classes[i]. Support and query rows are grouped by label in that order.
struct Episode {
    std::size_t way = 0;
    std::size_t shot = 0;
    std::size_t query_shot = 0;
    std::vector<std::int64_t> classes;
    Tensor support;
    std::vector<std::size_t> support_labels;
    Tensor query;
    std::vector<std::size_t> query_labels;
    std::vector<SampleRef> support_refs;
    std::vector<SampleRef> query_refs;
};

/// Builds an episode from explicit sample references (class-major, sorted class order).
inline Episode materialize_episode(const BaseDataset& ds, std::size_t n, std::size_t k, std::size_t q,
                                   std::vector<SampleRef> support_refs, std::vector<SampleRef> query_refs) {
    if (support_refs.size() != n * k || query_refs.size() != n * q) {
        throw DomainError("materialize_episode: reference counts do not match the n-way k-shot protocol");
    }
    Episode ep;
    ep.way = n;
    ep.shot = k;
    ep.query_shot = q;
    for (std::size_t c = 0; c < n; ++c) {
        ep.classes.push_back(support_refs[c * k].class_id);
    }
    if (!std::is_sorted(ep.classes.begin(), ep.classes.end()) ||
        std::adjacent_find(ep.classes.begin(), ep.classes.end()) != ep.classes.end()) {
        throw DomainError("materialize_episode: episode classes must be distinct and sorted");
    }
    const auto d = ds.feature_dim;
    auto fill = [&](const std::vector<SampleRef>& refs, std::size_t per_class, Tensor& x,
                    std::vector<std::size_t>& labels) {
        std::vector<double> data;
        data.reserve(refs.size() * d);
        for (std::size_t r = 0; r < refs.size(); ++r) {
            const std::size_t label = r / per_class;
            if (refs[r].class_id != ep.classes[label]) {
                throw DomainError("materialize_episode: reference " + std::to_string(r) +
                                  " is out of class-major order");
            }
            const auto& cls = ds.class_by_id(refs[r].class_id);
            if (refs[r].index >= cls.count) {
                throw DomainError("materialize_episode: class " + std::to_string(cls.id) + " has no sample " +
                                  std::to_string(refs[r].index));
            }
            const auto row = cls.sample(refs[r].index, d);
            data.insert(data.end(), row.begin(), row.end());
            labels.push_back(label);
        }
        x = Tensor({refs.size(), d}, std::move(data));
    };
    fill(support_refs, k, ep.support, ep.support_labels);
    fill(query_refs, q, ep.query, ep.query_labels);
    ep.support_refs = std::move(support_refs);
    ep.query_refs = std::move(query_refs);
    return ep;
}

/// Classes uniformly without replacement, then k + q samples per class
/// uniformly without replacement (first k to the support set).
inline Episode sample_episode(const BaseDataset& ds, std::size_t n, std::size_t k, std::size_t q,
                              RandomStream& rng) {
    if (n == 0 || k == 0 || q == 0) {
        throw DomainError("sample_episode: way, shot and query shot must be positive");
    }
    if (ds.num_classes() < n) {
        throw DomainError("sample_episode: split '" + ds.split + "' has " + std::to_string(ds.num_classes()) +
                          " classes, " + std::to_string(n) + "-way episodes need " +
                          std::to_string(n - ds.num_classes()) + " more");
    }
    auto picked = rng.sample_without_replacement(ds.num_classes(), n);
    std::sort(picked.begin(), picked.end(),
              [&](std::size_t a, std::size_t b) { return ds.classes[a].id < ds.classes[b].id; });
    std::vector<SampleRef> support, query;
    for (auto ci : picked) {
        const auto& cls = ds.classes[ci];
        if (cls.count < k + q) {
            throw DomainError("sample_episode: class " + std::to_string(cls.id) + " has " +
                              std::to_string(cls.count) + " samples, needs " + std::to_string(k + q) + " (" +
                              std::to_string(k + q - cls.count) + " short)");
        }
        const auto idx = rng.sample_without_replacement(cls.count, k + q);
        for (std::size_t i = 0; i < k + q; ++i) {
            (i < k ? support : query).push_back(SampleRef{cls.id, idx[i]});
        }
    }
    return materialize_episode(ds, n, k, q, std::move(support), std::move(query));
}

// ---------------------------------------------------------------------------
// Persistence: <dir>/manifest.json + <dir>/data.csv

inline nlohmann::json generator_to_json(const GeneratorParams& g) {
    return {{"num_classes", g.num_classes},           {"samples_per_class", g.samples_per_class},
            {"feature_dim", g.feature_dim},           {"class_separation", g.class_separation},
            {"noise_scale", g.noise_scale},           {"seed", g.seed}};
}

inline GeneratorParams generator_from_json(const nlohmann::json& j) {
    GeneratorParams g;
    g.num_classes = j.at("num_classes").get<std::size_t>();
    g.samples_per_class = j.at("samples_per_class").get<std::size_t>();
    g.feature_dim = j.at("feature_dim").get<std::size_t>();
    g.class_separation = j.at("class_separation").get<double>();
    g.noise_scale = j.at("noise_scale").get<double>();
    g.seed = j.at("seed").get<std::uint64_t>();
    return g;
}

inline void save_dataset(const BaseDataset& ds, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    nlohmann::json manifest;
    manifest["feature_dim"] = ds.feature_dim;
    manifest["split"] = ds.split;
    std::vector<std::int64_t> ids;
    std::vector<std::size_t> counts;
    for (const auto& c : ds.classes) {
        ids.push_back(c.id);
        counts.push_back(c.count);
    }
    manifest["class_ids"] = ids;
    manifest["class_counts"] = counts;
    manifest["generator"] = ds.generator ? generator_to_json(*ds.generator) : nlohmann::json(nullptr);
    manifest["seed"] = ds.generator ? nlohmann::json(ds.generator->seed) : nlohmann::json(nullptr);
    io::write_file(dir / "manifest.json", manifest.dump(2) + "\n");

    std::string csv = "class_id";
    for (std::size_t j = 0; j < ds.feature_dim; ++j) {
        csv += ",f" + std::to_string(j);
    }
    csv += '\n';
    for (const auto& c : ds.classes) {
        for (std::size_t i = 0; i < c.count; ++i) {
            csv += std::to_string(c.id);
            for (double v : c.sample(i, ds.feature_dim)) {
                csv += ',';
                csv += io::format_double(v);
            }
            csv += '\n';
        }
    }
    io::write_file(dir / "data.csv", csv);
}

inline BaseDataset load_dataset(const std::filesystem::path& dir) {
    const auto manifest_path = (dir / "manifest.json").string();
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(io::read_file(dir / "manifest.json"));
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(manifest_path, 0, e.what());
    }
    BaseDataset ds;
    std::vector<std::int64_t> ids;
    std::vector<std::size_t> counts;
    try {
        ds.feature_dim = manifest.at("feature_dim").get<std::size_t>();
        ds.split = manifest.at("split").get<std::string>();
        ids = manifest.at("class_ids").get<std::vector<std::int64_t>>();
        counts = manifest.at("class_counts").get<std::vector<std::size_t>>();
        if (manifest.contains("generator") && !manifest["generator"].is_null()) {
            ds.generator = generator_from_json(manifest["generator"]);
        }
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(manifest_path, 0, std::string("manifest field: ") + e.what());
    }
    if (ids.size() != counts.size()) {
        throw ValidationError(manifest_path + ": class_ids and class_counts differ in length");
    }

    const auto data_path = (dir / "data.csv").string();
    const auto lines = io::lines_of(io::read_file(dir / "data.csv"));
    if (lines.empty()) {
        throw ParseError(data_path, 1, "missing header");
    }
    const auto header = io::split_csv_line(lines[0]);
    if (header.size() != ds.feature_dim + 1 || header[0] != "class_id") {
        throw ParseError(data_path, 1,
                         "header has " + std::to_string(header.size()) + " columns, expected " +
                             std::to_string(ds.feature_dim + 1));
    }
    std::map<std::int64_t, std::size_t> position;
    for (std::size_t line_no = 2; line_no <= lines.size(); ++line_no) {
        const auto& line = lines[line_no - 1];
        if (line.empty()) {
            continue;
        }
        const auto fields = io::split_csv_line(line);
        if (fields.size() != ds.feature_dim + 1) {
            throw ParseError(data_path, line_no,
                             "row has " + std::to_string(fields.size()) + " columns, expected " +
                                 std::to_string(ds.feature_dim + 1));
        }
        const auto id = io::parse_int<std::int64_t>(fields[0], data_path, line_no);
        auto it = position.find(id);
        if (it == position.end()) {
            it = position.emplace(id, ds.classes.size()).first;
            ds.classes.push_back(ClassRecord{id, 0, {}});
        }
        auto& rec = ds.classes[it->second];
        for (std::size_t j = 1; j < fields.size(); ++j) {
            rec.features.push_back(io::parse_double(fields[j], data_path, line_no));
        }
        ++rec.count;
    }
    if (ds.classes.size() != ids.size()) {
        throw ValidationError(dir.string() + ": manifest lists " + std::to_string(ids.size()) +
                              " classes but data.csv holds " + std::to_string(ds.classes.size()));
    }
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ds.classes[i].id != ids[i] || ds.classes[i].count != counts[i]) {
            throw ValidationError(dir.string() + ": class " + std::to_string(ids[i]) +
                                  " disagrees between manifest and data.csv");
        }
    }
    return ds;
}

/// Dataset root layout: <root>/{train,val,test}/.
inline void save_splits(const std::array<BaseDataset, 3>& splits, const std::filesystem::path& root) {
    for (const auto& s : splits) {
        save_dataset(s, root / s.split);
    }
}

inline std::array<BaseDataset, 3> load_splits(const std::filesystem::path& root) {
    std::array<BaseDataset, 3> out{load_dataset(root / "train"), load_dataset(root / "val"),
                                   load_dataset(root / "test")};
    std::set<std::int64_t> seen;
    for (const auto& s : out) {
        if (s.feature_dim != out[0].feature_dim) {
            throw ValidationError(root.string() + ": splits disagree on feature_dim");
        }
        for (const auto& c : s.classes) {
            if (!seen.insert(c.id).second) {
                throw ValidationError(root.string() + ": class " + std::to_string(c.id) +
                                      " appears in more than one split");
            }
        }
    }
    return out;
}

/// Episode file: CSV `episode,role,class_id,sample_index`, role in {support, query}.
inline void save_episodes(const std::vector<Episode>& episodes, const std::filesystem::path& path) {
    std::string csv = "episode,role,class_id,sample_index\n";
    for (std::size_t e = 0; e < episodes.size(); ++e) {
        for (const auto& r : episodes[e].support_refs) {
            csv += std::to_string(e) + ",support," + std::to_string(r.class_id) + "," + std::to_string(r.index) + "\n";
        }
        for (const auto& r : episodes[e].query_refs) {
            csv += std::to_string(e) + ",query," + std::to_string(r.class_id) + "," + std::to_string(r.index) + "\n";
        }
    }
    io::write_file(path, csv);
}

inline std::vector<Episode> load_episodes(const BaseDataset& ds, const std::filesystem::path& path) {
    const auto file = path.string();
    const auto lines = io::lines_of(io::read_file(path));
    if (lines.empty() || lines[0] != "episode,role,class_id,sample_index") {
        throw ParseError(file, 1, "unexpected header");
    }
    std::vector<std::pair<std::vector<SampleRef>, std::vector<SampleRef>>> refs;
    for (std::size_t line_no = 2; line_no <= lines.size(); ++line_no) {
        const auto& line = lines[line_no - 1];
        if (line.empty()) {
            continue;
        }
        const auto f = io::split_csv_line(line);
        if (f.size() != 4) {
            throw ParseError(file, line_no, "expected 4 columns");
        }
        const auto e = io::parse_int<std::size_t>(f[0], file, line_no);
        if (e != refs.size() && e + 1 != refs.size()) {
            throw ParseError(file, line_no, "episode ids must be consecutive");
        }
        if (e == refs.size()) {
            refs.emplace_back();
        }
        SampleRef r{io::parse_int<std::int64_t>(f[2], file, line_no), io::parse_int<std::size_t>(f[3], file, line_no)};
        if (f[1] == "support") {
            refs[e].first.push_back(r);
        } else if (f[1] == "query") {
            refs[e].second.push_back(r);
        } else {
            throw ParseError(file, line_no, "role must be support or query");
        }
    }
    std::vector<Episode> episodes;
    for (auto& [support, query] : refs) {
        std::set<std::int64_t> classes;
        for (const auto& r : support) {
            classes.insert(r.class_id);
        }
        const auto n = classes.size();
        if (n == 0 || support.size() % n != 0 || query.size() % n != 0) {
            throw ValidationError(file + ": episode with unbalanced class counts");
        }
        const auto k = support.size() / n, q = query.size() / n;
        episodes.push_back(materialize_episode(ds, n, k, q, std::move(support), std::move(query)));
    }
    return episodes;
}

} // namespace episample

#endif
