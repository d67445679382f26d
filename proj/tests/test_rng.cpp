#include <gtest/gtest.h>

#include <algorithm>
#include <set>

#include "episample/rng.hpp"

using namespace episample;

// Known-answer vectors from the Random123 distribution (kat_vectors, philox4x32_10).
TEST(Philox, KnownAnswerVectors) {
    using A4 = std::array<std::uint32_t, 4>;
    EXPECT_EQ(philox4x32_10({0, 0, 0, 0}, {0, 0}), (A4{0x6627e8d5u, 0xe169c58du, 0xbc57ac4cu, 0x9b00dbd8u}));
    EXPECT_EQ(philox4x32_10({0xffffffffu, 0xffffffffu, 0xffffffffu, 0xffffffffu}, {0xffffffffu, 0xffffffffu}),
              (A4{0x408f276du, 0x41c83b0eu, 0xa20bc7c6u, 0x6d5451fdu}));
    EXPECT_EQ(philox4x32_10({0x243f6a88u, 0x85a308d3u, 0x13198a2eu, 0x03707344u}, {0xa4093822u, 0x299f31d0u}),
              (A4{0xd16cfe09u, 0x94fdccebu, 0x5001e420u, 0x24126ea1u}));
}

TEST(RandomStream, FirstWordsComeFromBlockZero) {
    RandomStream r(0, 0);
    const auto block = philox4x32_10({0, 0, 0, 0}, {0, 0});
    EXPECT_EQ(r(), (std::uint64_t{block[1]} << 32) | block[0]);
    EXPECT_EQ(r(), (std::uint64_t{block[3]} << 32) | block[2]);
}

TEST(RandomStream, SameSeedSameSequence) {
    RandomStream a(42), b(42), c(43);
    bool differs = false;
    for (int i = 0; i < 100; ++i) {
        const auto x = a();
        EXPECT_EQ(x, b());
        differs = differs || x != c();
    }
    EXPECT_TRUE(differs);
}

TEST(RandomStream, SplitStreamsAreDistinctAndPure) {
    const RandomStream root(7);
    auto s1 = root.split(1), s1b = root.split(1), s2 = root.split(2);
    EXPECT_EQ(s1.stream_id(), s1b.stream_id());
    EXPECT_NE(s1.stream_id(), s2.stream_id());
    EXPECT_NE(s1.stream_id(), root.stream_id());
    EXPECT_EQ(s1(), s1b());
    EXPECT_NE(root.split(1).split(2).stream_id(), root.split(2).split(1).stream_id());
}

TEST(RandomStream, UniformMomentsAndRange) {
    RandomStream r(3);
    double s = 0, s2 = 0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
        const double u = r.uniform();
        ASSERT_GE(u, 0.0);
        ASSERT_LT(u, 1.0);
        s += u;
        s2 += u * u;
    }
    EXPECT_NEAR(s / n, 0.5, 0.005);
    EXPECT_NEAR(s2 / n - (s / n) * (s / n), 1.0 / 12.0, 0.002);
}

TEST(RandomStream, NormalMoments) {
    RandomStream r(5);
    double s = 0, s2 = 0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
        const double z = r.normal();
        s += z;
        s2 += z * z;
    }
    EXPECT_NEAR(s / n, 0.0, 0.01);
    EXPECT_NEAR(s2 / n, 1.0, 0.02);
}

TEST(RandomStream, BelowIsUnbiasedOverSmallRange) {
    RandomStream r(9);
    std::array<int, 7> counts{};
    const int n = 70000;
    for (int i = 0; i < n; ++i) {
        ++counts[r.below(7)];
    }
    double chi2 = 0;
    for (int c : counts) {
        chi2 += (c - n / 7.0) * (c - n / 7.0) / (n / 7.0);
    }
    EXPECT_LT(chi2, 22.46); // 6 dof, p = 0.001
    EXPECT_THROW(r.below(0), DomainError);
}

TEST(RandomStream, SampleWithoutReplacement) {
    RandomStream r(11);
    for (int trial = 0; trial < 200; ++trial) {
        const auto idx = r.sample_without_replacement(30, 12);
        ASSERT_EQ(idx.size(), 12u);
        std::set<std::size_t> uniq(idx.begin(), idx.end());
        ASSERT_EQ(uniq.size(), 12u);
        ASSERT_LT(*uniq.rbegin(), 30u);
    }
    const auto all = r.sample_without_replacement(5, 5);
    EXPECT_TRUE(std::is_permutation(all.begin(), all.end(), std::vector<std::size_t>{0, 1, 2, 3, 4}.begin()));
    EXPECT_THROW(r.sample_without_replacement(3, 4), DomainError);
}

TEST(RandomStream, ShuffleIsPermutation) {
    RandomStream r(1);
    std::vector<int> v{1, 2, 3, 4, 5, 6, 7, 8};
    auto w = v;
    r.shuffle(std::span<int>(w));
    EXPECT_TRUE(std::is_permutation(v.begin(), v.end(), w.begin()));
}
