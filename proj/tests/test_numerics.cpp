#include "cgpso/numerics.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace cgpso;
using namespace cgpso::numerics;

namespace {

Mat random_spd(Index n, RngStream& rng) {
    Mat a(n, n);
    for (Index i = 0; i < n; ++i)
        for (Index j = 0; j < n; ++j) a(i, j) = rng.normal();
    return a * a.transpose() + Mat::Identity(n, n) * 0.5;
}

}  // namespace

TEST(Cholesky, FactorReproducesMatrix) {
    Mat a(2, 2);
    a << 4, 2, 2, 3;
    const CholFactor f = cholesky_psd(a, 0.0);
    EXPECT_EQ(f.jitter_used, 0.0);
    EXPECT_LT((f.lower * f.lower.transpose() - a).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Cholesky, IdentityHasZeroLogdet) {
    const CholFactor f = cholesky_psd(Mat::Identity(5, 5));
    EXPECT_NEAR(logdet(f), 0.0, 1e-15);
}

TEST(Cholesky, SingularMatrixNeedsJitter) {
    Mat a = Mat::Ones(3, 3);
    const CholFactor f = cholesky_psd(a);
    EXPECT_GT(f.jitter_used, 0.0);
    EXPECT_LE(f.jitter_used, default_jitter(a) * 1e6);
}

TEST(Cholesky, IndefiniteThrows) {
    Mat a(2, 2);
    a << 1, 0, 0, -1;
    EXPECT_THROW(cholesky_psd(a), NotPositiveDefinite);
    EXPECT_THROW(cholesky_psd(Mat(2, 3)), DimensionMismatch);
}

TEST(Cholesky, Deterministic) {
    RngStream rng(3, 0);
    const Mat a = random_spd(12, rng);
    const CholFactor f1 = cholesky_psd(a);
    const CholFactor f2 = cholesky_psd(a);
    EXPECT_TRUE((f1.lower.array() == f2.lower.array()).all());
}

TEST(Solve, SmallCases) {
    const CholFactor id = cholesky_psd(Mat::Identity(3, 3));
    Vec b(3);
    b << 1, -2, 3;
    EXPECT_LT((solve_psd(id, b) - b).norm(), 1e-15);

    Mat d = Mat::Zero(2, 2);
    d.diagonal() << 2, 4;
    Vec b2(2);
    b2 << 2, 4;
    EXPECT_LT((solve_psd(cholesky_psd(d, 0.0), b2) - Vec::Ones(2)).norm(), 1e-14);

    Mat a(2, 2);
    a << 4, 2, 2, 3;
    Vec b3(2);
    b3 << 6, 5;
    EXPECT_LT((solve_psd(cholesky_psd(a, 0.0), b3) - Vec::Ones(2)).norm(), 1e-14);
}

TEST(Solve, DimensionMismatchThrows) {
    const CholFactor f = cholesky_psd(Mat::Identity(3, 3));
    EXPECT_THROW(solve_psd(f, Vec::Ones(4)), DimensionMismatch);
}

TEST(SolveProperty, ResidualAndLogdetOnRandomSpd) {
    RngStream rng(11, 1);
    for (int trial = 0; trial < 50; ++trial) {
        const Index n = 1 + static_cast<Index>(rng.below(20));
        const Mat a = random_spd(n, rng);
        Vec b(n);
        for (Index i = 0; i < n; ++i) b[i] = rng.normal();
        const CholFactor f = cholesky_psd(a, 0.0);
        const Vec x = solve_psd(f, b);
        EXPECT_LT((a * x - b).norm() / b.norm(), 1e-8);
        const double lu = std::log(std::abs(a.fullPivLu().determinant()));
        EXPECT_NEAR(logdet(f), lu, 1e-8 * std::max(1.0, std::abs(lu)));
    }
}

TEST(FdGradient, Examples) {
    const auto sq = [](const Vec& x) { return x[0] * x[0]; };
    EXPECT_NEAR(fd_gradient(sq, Vec::Constant(1, 3.0), 1e-5)[0], 6.0, 1e-8);

    const auto c = [](const Vec&) { return 4.0; };
    EXPECT_EQ(fd_gradient(c, Vec::Ones(3), 1e-5), Vec::Zero(3));

    const auto prod = [](const Vec& x) { return x[0] * x[1]; };
    Vec p(2);
    p << 2, 5;
    const Vec g = fd_gradient(prod, p, 1e-6);
    EXPECT_NEAR(g[0], 5.0, 1e-8);
    EXPECT_NEAR(g[1], 2.0, 1e-8);
}

TEST(FdGradient, NonFiniteThrows) {
    const auto bad = [](const Vec& x) { return x[0] > 0 ? INFINITY : 0.0; };
    EXPECT_THROW(fd_gradient(bad, Vec::Zero(1), 1e-3), NonFiniteValue);
}

TEST(Rng, EqualSeedsEqualDraws) {
    RngStream a(42, 7), b(42, 7), c(42, 8);
    bool differs = false;
    for (int i = 0; i < 10000; ++i) {
        const auto x = a.next_u64();
        ASSERT_EQ(x, b.next_u64());
        differs |= x != c.next_u64();
    }
    EXPECT_TRUE(differs);
}

TEST(Rng, UniformRangeAndMoments) {
    RngStream r(1, 0);
    double sum = 0, sum2 = 0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
        const double u = r.uniform();
        ASSERT_GE(u, 0.0);
        ASSERT_LT(u, 1.0);
        sum += u;
    }
    EXPECT_NEAR(sum / n, 0.5, 5e-3);
    sum = 0;
    for (int i = 0; i < n; ++i) {
        const double z = r.normal();
        sum += z;
        sum2 += z * z;
    }
    EXPECT_NEAR(sum / n, 0.0, 1e-2);
    EXPECT_NEAR(sum2 / n, 1.0, 2e-2);
}

TEST(Rng, PermutationIsPermutation) {
    RngStream r(5, 0);
    auto p = r.permutation(50);
    std::sort(p.begin(), p.end());
    for (Index i = 0; i < 50; ++i) EXPECT_EQ(p[static_cast<std::size_t>(i)], i);
    EXPECT_EQ(r.below(1), 0u);
}
