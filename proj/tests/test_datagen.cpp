#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <map>
#include <set>

#include "episample/datagen.hpp"

using namespace episample;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const auto p = fs::temp_directory_path() / ("episample_datagen_" + name);
    fs::remove_all(p);
    return p;
}

GeneratorParams small(std::uint64_t seed = 1) {
    GeneratorParams g;
    g.num_classes = 20;
    g.samples_per_class = 25;
    g.feature_dim = 4;
    g.seed = seed;
    return g;
}

double norm_of(std::span<const double> v) {
    double s = 0;
    for (double x : v) {
        s += x * x;
    }
    return std::sqrt(s);
}

} // namespace

TEST(Generate, ZeroNoiseGivesClassMeansOnSphere) {
    auto g = small();
    g.noise_scale = 0.0;
    g.class_separation = 2.5;
    const auto ds = generate_synthetic(g);
    ASSERT_EQ(ds.num_classes(), 20u);
    for (const auto& c : ds.classes) {
        const auto first = c.sample(0, 4);
        EXPECT_NEAR(norm_of(first), 2.5, 1e-12);
        for (std::size_t i = 1; i < c.count; ++i) {
            const auto s = c.sample(i, 4);
            EXPECT_TRUE(std::equal(s.begin(), s.end(), first.begin()));
        }
    }
}

TEST(Generate, ZeroSeparationPutsMeansAtOrigin) {
    auto g = small();
    g.class_separation = 0.0;
    g.samples_per_class = 2000;
    g.num_classes = 3;
    const auto ds = generate_synthetic(g);
    for (const auto& c : ds.classes) {
        for (std::size_t j = 0; j < 4; ++j) {
            double m = 0;
            for (std::size_t i = 0; i < c.count; ++i) {
                m += c.sample(i, 4)[j];
            }
            EXPECT_NEAR(m / static_cast<double>(c.count), 0.0, 0.1);
        }
    }
}

TEST(Generate, NoiseHasRequestedScale) {
    auto g = small();
    g.noise_scale = 0.5;
    g.samples_per_class = 4000;
    g.num_classes = 2;
    const auto ds = generate_synthetic(g);
    const auto& c = ds.classes[0];
    std::vector<double> mean(4, 0.0);
    for (std::size_t i = 0; i < c.count; ++i) {
        for (std::size_t j = 0; j < 4; ++j) mean[j] += c.sample(i, 4)[j] / static_cast<double>(c.count);
    }
    double var = 0;
    for (std::size_t i = 0; i < c.count; ++i) {
        for (std::size_t j = 0; j < 4; ++j) var += std::pow(c.sample(i, 4)[j] - mean[j], 2);
    }
    var /= static_cast<double>(c.count * 4 - 4);
    EXPECT_NEAR(std::sqrt(var), 0.5, 0.01);
    EXPECT_NEAR(norm_of(mean), 3.0, 0.05);
}

TEST(Generate, SameSeedIsByteIdentical) {
    const auto a = scratch("seed_a"), b = scratch("seed_b");
    save_dataset(generate_synthetic(small(7)), a);
    save_dataset(generate_synthetic(small(7)), b);
    EXPECT_EQ(io::read_file(a / "data.csv"), io::read_file(b / "data.csv"));
    EXPECT_EQ(io::read_file(a / "manifest.json"), io::read_file(b / "manifest.json"));
    EXPECT_NE(generate_synthetic(small(7)), generate_synthetic(small(8)));
    fs::remove_all(a);
    fs::remove_all(b);
}

TEST(Generate, RejectsDegenerateDimension) {
    auto g = small();
    g.feature_dim = 1;
    EXPECT_THROW(generate_synthetic(g), DomainError);
    g = small();
    g.num_classes = 0;
    EXPECT_THROW(generate_synthetic(g), DomainError);
    g = small();
    g.class_separation = -1;
    EXPECT_THROW(generate_synthetic(g), DomainError);
}

TEST(Split, PaperProportions) {
    GeneratorParams g;
    g.samples_per_class = 2;
    const auto splits = split_classes(generate_synthetic(g), {64, 16, 20}, 0);
    EXPECT_EQ(splits[0].num_classes(), 64u);
    EXPECT_EQ(splits[1].num_classes(), 16u);
    EXPECT_EQ(splits[2].num_classes(), 20u);
    std::set<std::int64_t> ids;
    for (const auto& s : splits) {
        for (const auto& c : s.classes) {
            EXPECT_TRUE(ids.insert(c.id).second);
        }
    }
    EXPECT_EQ(ids.size(), 100u);
    EXPECT_EQ(splits[0].split, "train");
    EXPECT_EQ(splits[2].split, "test");
}

TEST(Split, ThreeSingletons) {
    auto g = small();
    g.num_classes = 3;
    const auto splits = split_classes(generate_synthetic(g), {1, 1, 1}, 5);
    for (const auto& s : splits) {
        EXPECT_EQ(s.num_classes(), 1u);
    }
}

TEST(Split, DeterministicGivenSeed) {
    const auto ds = generate_synthetic(small());
    EXPECT_EQ(split_classes(ds, {10, 5, 5}, 3), split_classes(ds, {10, 5, 5}, 3));
    EXPECT_NE(split_classes(ds, {10, 5, 5}, 3)[0], split_classes(ds, {10, 5, 5}, 4)[0]);
}

TEST(Split, Errors) {
    const auto ds = generate_synthetic(small());
    EXPECT_THROW(split_by_ids(ds, {{{0, 1}, {1, 2}, {3}}}), DomainError);
    EXPECT_THROW(split_by_ids(ds, {{{0, 1}, {}, {3}}}), DomainError);
    EXPECT_THROW(split_classes(ds, {1, 0, 1}, 0), DomainError);
    EXPECT_THROW(split_classes(ds, {100, 1, 1}, 0), DomainError);  // rounds to an empty split
    auto g = small();
    g.num_classes = 10;
    EXPECT_THROW(split_classes(generate_synthetic(g), {1, 1, 1}, 0), DomainError); // 3+3+3 != 10
}

TEST(Episode, ProtocolSizes) {
    const auto ds = generate_synthetic(small());
    RandomStream r(1);
    const auto ep = sample_episode(ds, 5, 1, 15, r);
    EXPECT_EQ(ep.support.rows(), 5u);
    EXPECT_EQ(ep.query.rows(), 75u);
    EXPECT_EQ(ep.support.cols(), 4u);
    EXPECT_EQ(ep.classes.size(), 5u);
}

TEST(Episode, FullClassSet) {
    auto g = small();
    g.num_classes = 6;
    const auto ds = generate_synthetic(g);
    RandomStream r(1);
    const auto ep = sample_episode(ds, 6, 2, 3, r);
    EXPECT_EQ(ep.classes, (std::vector<std::int64_t>{0, 1, 2, 3, 4, 5}));
}

TEST(Episode, InvariantsHoldOverManySamplings) {
    const auto ds = generate_synthetic(small());
    RandomStream r(2);
    for (int trial = 0; trial < 10000; ++trial) {
        const std::size_t n = 2 + r.below(6), k = 1 + r.below(5), q = 1 + r.below(10);
        const auto ep = sample_episode(ds, n, k, q, r);
        ASSERT_EQ(ep.classes.size(), n);
        ASSERT_TRUE(std::is_sorted(ep.classes.begin(), ep.classes.end()));
        ASSERT_EQ(std::set<std::int64_t>(ep.classes.begin(), ep.classes.end()).size(), n);
        std::map<std::size_t, std::size_t> support_count, query_count;
        for (auto l : ep.support_labels) ++support_count[l];
        for (auto l : ep.query_labels) ++query_count[l];
        ASSERT_EQ(support_count.size(), n);
        ASSERT_EQ(query_count.size(), n);
        for (std::size_t c = 0; c < n; ++c) {
            ASSERT_EQ(support_count[c], k);
            ASSERT_EQ(query_count[c], q);
        }
        std::set<std::pair<std::int64_t, std::size_t>> used;
        for (const auto& s : ep.support_refs) ASSERT_TRUE(used.insert({s.class_id, s.index}).second);
        for (const auto& s : ep.query_refs) ASSERT_TRUE(used.insert({s.class_id, s.index}).second);
        for (std::size_t i = 0; i < ep.support_refs.size(); ++i) {
            ASSERT_EQ(ep.support_refs[i].class_id, ep.classes[ep.support_labels[i]]);
        }
    }
}

// Chi-square against the uniform class marginal.
TEST(Episode, ClassMarginalIsUniform) {
    auto g = small();
    g.samples_per_class = 16;
    const auto ds = generate_synthetic(g);
    RandomStream r(3);
    std::vector<double> counts(20, 0.0);
    const int episodes = 100000;
    for (int e = 0; e < episodes; ++e) {
        for (auto id : sample_episode(ds, 5, 1, 15, r).classes) {
            counts[static_cast<std::size_t>(id)] += 1;
        }
    }
    const double expected = episodes * 5.0 / 20.0;
    double chi2 = 0;
    for (double c : counts) {
        chi2 += (c - expected) * (c - expected) / expected;
    }
    EXPECT_LT(chi2, 36.191); // 19 dof, p = 0.01
}

TEST(Episode, PureFunctionOfRngState) {
    const auto ds = generate_synthetic(small());
    RandomStream a(9), b(9);
    for (int i = 0; i < 20; ++i) {
        const auto ea = sample_episode(ds, 5, 2, 3, a);
        const auto eb = sample_episode(ds, 5, 2, 3, b);
        EXPECT_EQ(ea.support, eb.support);
        EXPECT_EQ(ea.query_refs, eb.query_refs);
    }
}

TEST(Episode, DeficitsAreNamed) {
    const auto ds = generate_synthetic(small());
    RandomStream r(1);
    try {
        sample_episode(ds, 23, 1, 1, r);
        FAIL();
    } catch (const DomainError& e) {
        EXPECT_NE(std::string(e.what()).find("3 more"), std::string::npos) << e.what();
    }
    try {
        sample_episode(ds, 5, 10, 20, r);
        FAIL();
    } catch (const DomainError& e) {
        EXPECT_NE(std::string(e.what()).find("5 short"), std::string::npos) << e.what();
    }
}

TEST(Persistence, RoundTripIsBitExact) {
    const auto dir = scratch("roundtrip");
    const auto splits = split_classes(generate_synthetic(small(11)), {10, 5, 5}, 11);
    save_splits(splits, dir);
    EXPECT_EQ(load_splits(dir), splits);
    fs::remove_all(dir);
}

TEST(Persistence, WrongColumnCountIsParseError) {
    const auto dir = scratch("columns");
    save_dataset(generate_synthetic(small()), dir);
    auto text = io::read_file(dir / "data.csv");
    std::size_t end_of_third = 0;
    for (int i = 0; i < 3; ++i) end_of_third = text.find('\n', end_of_third + (i > 0));
    text.insert(end_of_third, ",1.0");
    io::write_file(dir / "data.csv", text);
    try {
        load_dataset(dir);
        FAIL();
    } catch (const ParseError& e) {
        EXPECT_EQ(e.line(), 3u);
    }
    fs::remove_all(dir);
}

TEST(Persistence, ManifestMismatchIsValidationError) {
    const auto dir = scratch("manifest");
    save_dataset(generate_synthetic(small()), dir);
    auto m = nlohmann::json::parse(io::read_file(dir / "manifest.json"));
    m["class_counts"][0] = 24;
    io::write_file(dir / "manifest.json", m.dump());
    EXPECT_THROW(load_dataset(dir), ValidationError);
    m["class_counts"][0] = 25;
    m["class_ids"].push_back(99);
    m["class_counts"].push_back(25);
    io::write_file(dir / "manifest.json", m.dump());
    EXPECT_THROW(load_dataset(dir), ValidationError);
    fs::remove_all(dir);
}

TEST(Persistence, EpisodeFileRoundTrip) {
    const auto dir = scratch("episodes");
    const auto ds = generate_synthetic(small());
    RandomStream r(4);
    std::vector<Episode> eps;
    for (int i = 0; i < 10; ++i) {
        eps.push_back(sample_episode(ds, 5, 2, 3, r));
    }
    save_episodes(eps, dir / "episodes.csv");
    const auto back = load_episodes(ds, dir / "episodes.csv");
    ASSERT_EQ(back.size(), eps.size());
    for (std::size_t i = 0; i < eps.size(); ++i) {
        EXPECT_EQ(back[i].support, eps[i].support);
        EXPECT_EQ(back[i].query, eps[i].query);
        EXPECT_EQ(back[i].query_labels, eps[i].query_labels);
        EXPECT_EQ(back[i].shot, 2u);
        EXPECT_EQ(back[i].query_shot, 3u);
    }
    fs::remove_all(dir);
}
