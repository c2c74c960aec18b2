#include <gtest/gtest.h>

#include <cmath>
#include <set>
#include <vector>

#include "fedquad/rng.hpp"

using fedquad::RngStream;

TEST(Rng, FirstDrawMatchesReferenceSplitMix64) {
    // Reference SplitMix64 (state starts at 0, first output) = 0xE220A8397B1DCDAF.
    RngStream r(0);
    EXPECT_EQ(r.next_u64(), 0xE220A8397B1DCDAFULL);
    EXPECT_EQ(r.next_u64(), 0x6E789E6AA1B965F4ULL);
}

TEST(Rng, SameSeedSameSequence) {
    RngStream a(42), b(42);
    for (int i = 0; i < 1000; ++i) ASSERT_EQ(a.next_u64(), b.next_u64());
}

TEST(Rng, DifferentSeedsDiffer) {
    RngStream a(1), b(2);
    int same = 0;
    for (int i = 0; i < 100; ++i) same += a.next_u64() == b.next_u64();
    EXPECT_EQ(same, 0);
}

TEST(Rng, CounterRepositionsStream) {
    RngStream a(7);
    for (int i = 0; i < 10; ++i) a.next_u64();
    RngStream b(7, a.counter());
    for (int i = 0; i < 10; ++i) ASSERT_EQ(a.next_u64(), b.next_u64());
}

TEST(Rng, UniformInUnitInterval) {
    RngStream r(3);
    double sum = 0.0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) {
        const double u = r.uniform();
        ASSERT_GE(u, 0.0);
        ASSERT_LT(u, 1.0);
        sum += u;
    }
    EXPECT_NEAR(sum / n, 0.5, 0.005);
}

TEST(Rng, NormalMoments) {
    RngStream r(11);
    const int n = 200000;
    double s = 0.0, s2 = 0.0;
    for (int i = 0; i < n; ++i) {
        const double x = r.normal();
        s += x;
        s2 += x * x;
    }
    EXPECT_NEAR(s / n, 0.0, 0.01);
    EXPECT_NEAR(s2 / n, 1.0, 0.015);
}

TEST(Rng, GammaMomentsMatchShape) {
    for (double shape : {0.3, 1.0, 2.5, 10.0}) {
        RngStream r(static_cast<std::uint64_t>(shape * 100));
        const int n = 100000;
        double s = 0.0, s2 = 0.0;
        for (int i = 0; i < n; ++i) {
            const double x = r.gamma(shape);
            ASSERT_GT(x, 0.0);
            s += x;
            s2 += x * x;
        }
        const double mean = s / n;
        const double var = s2 / n - mean * mean;
        EXPECT_NEAR(mean, shape, 0.03 * shape + 0.01) << "shape " << shape;
        EXPECT_NEAR(var, shape, 0.08 * shape + 0.01) << "shape " << shape;
    }
}

TEST(Rng, GammaRejectsNonPositiveShape) {
    RngStream r(1);
    EXPECT_THROW(r.gamma(0.0), std::invalid_argument);
    EXPECT_THROW(r.gamma(-1.0), std::invalid_argument);
}

TEST(Rng, BelowStaysInRangeAndCoversIt) {
    RngStream r(5);
    std::set<std::uint64_t> seen;
    for (int i = 0; i < 1000; ++i) {
        const auto v = r.below(7);
        ASSERT_LT(v, 7u);
        seen.insert(v);
    }
    EXPECT_EQ(seen.size(), 7u);
    EXPECT_THROW(r.below(0), std::invalid_argument);
}

TEST(Rng, ForkIsDeterministicAndDoesNotAdvanceParent) {
    RngStream parent(99);
    const auto before = parent.counter();
    RngStream c1 = parent.fork(3);
    RngStream c2 = parent.fork(3);
    RngStream c3 = parent.fork(4);
    EXPECT_EQ(parent.counter(), before);
    for (int i = 0; i < 50; ++i) ASSERT_EQ(c1.next_u64(), c2.next_u64());
    RngStream c4 = parent.fork(3);
    int same = 0;
    for (int i = 0; i < 50; ++i) same += c4.next_u64() == c3.next_u64();
    EXPECT_EQ(same, 0);
}

TEST(Rng, ForkIgnoresParentPosition) {
    RngStream a(5);
    RngStream b(5);
    b.next_u64();
    RngStream fa = a.fork(1), fb = b.fork(1);
    EXPECT_EQ(fa.next_u64(), fb.next_u64());
}
