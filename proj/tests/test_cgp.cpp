#include "cgpso/cgp.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

using namespace cgpso;
using namespace cgpso::cgp;
using numerics::RngStream;

namespace {

Dataset single_block(const Mat& X, const Vec& y) { return Dataset(static_cast<int>(X.cols()), {{X, y}}); }

Vec row(std::initializer_list<double> v) {
    Vec r(static_cast<Index>(v.size()));
    Index i = 0;
    for (double x : v) r[i++] = x;
    return r;
}

}  // namespace

TEST(Layout, DimensionAndRoundTrip) {
    const KernelConfig c{3, 2, 2};
    EXPECT_EQ(c.dimension(), 2 * 2 + 2 * 3 + 2 + 2 * 3 + 2);
    RngStream rng(1, 0);
    const Hyperparameters h = oracle::random_theta(c, rng, 0.1, 3.0);
    const Vec flat = h.flatten();
    EXPECT_EQ(flat.size(), c.dimension());
    EXPECT_EQ(Hyperparameters::unflatten(c, flat).flatten(), flat);
    EXPECT_THROW(Hyperparameters::unflatten(c, Vec::Ones(3)), DimensionMismatch);
}

TEST(Layout, ParamClasses) {
    const KernelConfig c{2, 2, 1};
    const ParamLayout L(c);
    EXPECT_EQ(L.param_class(L.nu(1, 0)), 0);
    EXPECT_EQ(L.param_class(L.alpha(1, 1)), 1);
    EXPECT_EQ(L.param_class(L.upsilon(0)), 0);
    EXPECT_EQ(L.param_class(L.beta(0, 1)), 1);
    EXPECT_EQ(L.param_class(L.sigma2(1)), 2);
}

TEST(CrossCov, UnitHyperparametersAtZeroDistance) {
    const KernelConfig c{1, 1, 1};
    const Hyperparameters h = Hyperparameters::filled(c, 1.0);
    const Vec x = row({0.3});
    EXPECT_NEAR(cross_cov(x, x, 0, 0, h, c), 1.0 / std::sqrt(2 * std::numbers::pi * 3.0), 1e-15);
}

TEST(CrossCov, DecaysWithDistanceAndIsSymmetric) {
    const KernelConfig c{2, 2, 2};
    RngStream rng(2, 0);
    const Hyperparameters h = oracle::random_theta(c, rng, 0.2, 2.0);
    double prev = INFINITY;
    for (double r = 0; r < 10; r += 0.5) {
        const double k = cross_cov(row({0, 0}), row({r, r}), 0, 1, h, c);
        EXPECT_LT(k, prev);
        prev = k;
    }
    for (int t = 0; t < 100; ++t) {
        const Vec a = row({rng.normal(), rng.normal()});
        const Vec b = row({rng.normal(), rng.normal()});
        EXPECT_EQ(cross_cov(a, b, 0, 1, h, c), cross_cov(b, a, 1, 0, h, c));
    }
}

TEST(Kyy, OnePointAndTwoOutputSymmetry) {
    const KernelConfig c{1, 1, 1};
    Hyperparameters h = Hyperparameters::filled(c, 1.0);
    h.sigma2[0] = 0.25;
    const Dataset d = single_block(Mat::Constant(1, 1, 0.4), Vec::Constant(1, 1.0));
    const Mat K = build_K_yy(d, h, c);
    ASSERT_EQ(K.rows(), 1);
    EXPECT_NEAR(K(0, 0), 1.0 / std::sqrt(2 * std::numbers::pi * 3.0) + 0.25, 1e-15);

    const KernelConfig c2{1, 2, 1};
    RngStream rng(3, 0);
    const Hyperparameters h2 = oracle::random_theta(c2, rng, 0.5, 2.0);
    const Dataset d2(1, {{Mat::Constant(1, 1, 0.1), Vec::Ones(1)}, {Mat::Constant(1, 1, -0.2), Vec::Ones(1)}});
    const Mat K2 = build_K_yy(d2, h2, c2);
    EXPECT_EQ(K2(0, 1), K2(1, 0));
}

TEST(Kyy, MatchesScalarLoopOracle) {
    RngStream rng(4, 0);
    for (int t = 0; t < 20; ++t) {
        const auto p = oracle::random_problem(2, 1 + t % 2, 1 + t % 3, 12, rng);
        const Mat K = build_K_yy(p.train, p.theta, p.cfg);
        const Mat ref = oracle::covariance(p.train, p.theta);
        EXPECT_LT((K - ref).cwiseAbs().maxCoeff(), 1e-12);
    }
}

TEST(Kyy, SymmetricPsdOnLogUniformTheta) {
    RngStream rng(5, 0);
    for (int t = 0; t < 100; ++t) {
        const KernelConfig c{1 + t % 3, 1 + t % 2, 1};
        std::vector<Index> sizes(static_cast<std::size_t>(c.M), 1 + static_cast<Index>(rng.below(15 / c.M)));
        const Dataset d = oracle::random_dataset(c.n, sizes, rng);
        Vec flat(c.dimension());
        for (Index k = 0; k < flat.size(); ++k) flat[k] = std::pow(10.0, rng.uniform(-3.0, 2.0));
        const Mat K = build_K_yy(d, Hyperparameters::unflatten(c, flat), c);
        EXPECT_EQ((K - K.transpose()).cwiseAbs().maxCoeff(), 0.0);
        EXPECT_NO_THROW(numerics::cholesky_psd(K));
    }
}

TEST(Kcross, NoiseOnlyOnKyyAndEmptyQuery) {
    RngStream rng(6, 0);
    const auto p = oracle::random_problem(2, 1, 2, 8, rng);
    const Mat Kyy = build_K_yy(p.train, p.theta, p.cfg);
    const Mat Ks = build_K_cross(p.train.block(1).X, 1, p.train, p.theta, p.cfg);
    const Index off = p.train.offsets()[1];
    EXPECT_NEAR(Ks(0, off), Kyy(off, off) - p.theta.sigma2[1], 1e-15);
    EXPECT_EQ(build_K_cross(Mat(0, 2), 0, p.train, p.theta, p.cfg).rows(), 0);
    EXPECT_EQ(build_K_cross(Mat(0, 2), 0, p.train, p.theta, p.cfg).cols(), p.train.size());
}

TEST(Kcross, MatchesOracle) {
    RngStream rng(7, 0);
    const KernelConfig c{2, 1, 1};
    const Dataset train = oracle::random_dataset(2, {3}, rng);
    const Hyperparameters h = oracle::random_theta(c, rng, 0.5, 2.0);
    Mat Q(2, 2);
    Q << 0.1, 0.2, -0.5, 0.7;
    const Mat Ks = build_K_cross(Q, 0, train, h, c);
    for (Index i = 0; i < 2; ++i)
        for (Index j = 0; j < 3; ++j)
            EXPECT_NEAR(Ks(i, j), oracle::kernel_entry(Q.row(i).transpose(), train.block(0).X.row(j).transpose(), 0, 0, h), 1e-14);
}

TEST(SeReduction, SingleOutputIsSquaredExponential) {
    RngStream rng(8, 0);
    for (int t = 0; t < 50; ++t) {
        const KernelConfig c{1 + t % 3, 1, 1};
        const Hyperparameters h = oracle::random_theta(c, rng, 0.1, 5.0);
        Vec s(c.n);
        double det = 1;
        for (int i = 0; i < c.n; ++i) {
            s[i] = 2.0 / h.alpha(0, i) + 1.0 / h.beta(0, i);
            det *= s[i];
        }
        const double var = h.nu(0, 0) * h.nu(0, 0) * h.upsilon[0] *
                           std::pow(2 * std::numbers::pi, -c.n / 2.0) / std::sqrt(det);
        Vec x(c.n), x2(c.n);
        for (int i = 0; i < c.n; ++i) {
            x[i] = rng.uniform(-2, 2);
            x2[i] = rng.uniform(-2, 2);
        }
        EXPECT_NEAR(cross_cov(x, x2, 0, 0, h, c), oracle::se_kernel(x, x2, var, s), 1e-12);
    }
}

TEST(Predict, InterpolatesWithPinnedNoise) {
    RngStream rng(9, 0);
    const KernelConfig c{1, 1, 1};
    const Dataset d = oracle::random_dataset(1, {6}, rng);
    Hyperparameters h = Hyperparameters::filled(c, 1.0);
    h.alpha(0, 0) = 20.0;
    h.beta(0, 0) = 20.0;
    h.sigma2[0] = 1e-12;
    const TrainedModel m(c, h, d);
    const Prediction p = predict(m, d.block(0).X, 0);
    EXPECT_LT((p.mean - d.block(0).y).cwiseAbs().maxCoeff(), 1e-6);
    EXPECT_LT(p.variance.maxCoeff(), 1e-6);
    EXPECT_GE(p.min_raw_variance, -1e-8);
}

TEST(Predict, MatchesDenseFormula) {
    RngStream rng(10, 0);
    const KernelConfig c{1, 1, 1};
    const Dataset d = oracle::random_dataset(1, {3}, rng);
    const Hyperparameters h = oracle::random_theta(c, rng, 0.5, 2.0);
    const TrainedModel m(c, h, d);
    Mat Q(2, 1);
    Q << 0.05, -0.4;
    const Prediction p = predict(m, Q, 0);
    const Mat Kinv = oracle::covariance(d, h).inverse();
    for (Index i = 0; i < 2; ++i) {
        Vec k(3);
        for (Index j = 0; j < 3; ++j) k[j] = oracle::kernel_entry(Q.row(i).transpose(), d.block(0).X.row(j).transpose(), 0, 0, h);
        const double kss = oracle::kernel_entry(Q.row(i).transpose(), Q.row(i).transpose(), 0, 0, h);
        EXPECT_NEAR(p.mean[i], k.dot(Kinv * d.block(0).y), 1e-12);
        EXPECT_NEAR(p.variance[i], kss - k.dot(Kinv * k), 1e-12);
    }
}

TEST(Predict, EmptyBlockFallsBackToPriorMean) {
    const KernelConfig c{1, 2, 1};
    Hyperparameters h = Hyperparameters::filled(c, 1.0);
    h.nu(1, 0) = 1e-8;
    const Dataset d(1, {{Mat::Constant(2, 1, 0.3), Vec::Constant(2, 5.0)}, {Mat(0, 1), Vec(0)}});
    Mat X(2, 1);
    X << 0.3, 0.35;
    d.block(0);
    Mat Xs(1, 1);
    Xs << 0.31;
    Dataset one(1, {{X.topRows(1), Vec::Constant(1, 5.0)}, {Mat(0, 1), Vec(0)}});
    const TrainedModel m(c, h, one);
    EXPECT_NEAR(predict(m, Xs, 1).mean[0], 0.0, 1e-6);
}

TEST(Predict, VarianceNonNegativeProperty) {
    RngStream rng(11, 0);
    for (int t = 0; t < 50; ++t) {
        const auto p = oracle::random_problem(1 + t % 2, 1, 1 + t % 3, 14, rng);
        const TrainedModel m(p.cfg, p.theta, p.train);
        for (int d = 0; d < p.cfg.M; ++d) {
            Mat Q(20, p.cfg.n);
            for (Index i = 0; i < Q.size(); ++i) Q(i) = rng.uniform(-1.5, 1.5);
            const Prediction pr = predict(m, Q, d);
            EXPECT_GE(pr.min_raw_variance, -1e-8);
            EXPECT_GE(pr.variance.minCoeff(), 0.0);
        }
    }
}

TEST(Nll, ScalarCases) {
    const KernelConfig c{1, 1, 1};
    Hyperparameters h = Hyperparameters::filled(c, 1.0);
    h.sigma2[0] = 0.5;
    const double k = 1.0 / std::sqrt(2 * std::numbers::pi * 3.0);
    const Dataset zero = single_block(Mat::Zero(1, 1), Vec::Zero(1));
    EXPECT_NEAR(nll(zero, h, c), 0.5 * std::log(k + 0.5) + 0.5 * std::log(2 * std::numbers::pi), 1e-14);

    const Dataset one = single_block(Mat::Zero(1, 1), Vec::Constant(1, 0.8));
    const double s = k + 0.5;
    const Vec g = nll_grad(one, h, c);
    EXPECT_NEAR(g[ParamLayout(c).sigma2(0)], 0.5 / s - 0.5 * 0.64 / (s * s), 1e-14);
}

TEST(Nll, MatchesExplicitInverse) {
    RngStream rng(12, 0);
    for (int t = 0; t < 20; ++t) {
        const auto p = oracle::random_problem(1 + t % 2, 1 + t % 2, 1 + t % 3, 10, rng);
        EXPECT_NEAR(nll(p.train, p.theta, p.cfg), oracle::nll(p.train, p.theta), 1e-8);
    }
}

TEST(Gradients, MatchFiniteDifferences) {
    RngStream rng(13, 0);
    for (int t = 0; t < 20; ++t) {
        const auto p = oracle::random_problem(1 + t % 2, 1 + (t / 2) % 2, 1 + t % 3, 15, rng);
        const Vec th = p.theta.flatten();
        const auto f_nll = [&](const Vec& v) { return nll(p.train, Hyperparameters::unflatten(p.cfg, v), p.cfg); };
        const Vec g = nll_grad(p.train, p.theta, p.cfg);
        EXPECT_LT(oracle::gradient_error(g, oracle::fd_scaled(f_nll, th, 1e-5)), 1e-5) << "nll trial " << t;

        const auto f_mse = [&](const Vec& v) {
            return mse(p.eval, TrainedModel(p.cfg, Hyperparameters::unflatten(p.cfg, v), p.train));
        };
        const Vec gm = mse_grad(p.eval, TrainedModel(p.cfg, p.theta, p.train));
        EXPECT_LT(oracle::gradient_error(gm, oracle::fd_scaled(f_mse, th, 1e-5)), 1e-5) << "mse trial " << t;
    }
}

TEST(Mse, DefinitionCases) {
    RngStream rng(14, 0);
    const auto p = oracle::random_problem(2, 1, 2, 10, rng);
    const TrainedModel m(p.cfg, p.theta, p.train);
    std::vector<OutputBlock> blocks;
    for (int d = 0; d < 2; ++d) {
        const Prediction pr = predict(m, p.eval.block(d).X, d);
        blocks.push_back({p.eval.block(d).X, pr.mean});
    }
    const Dataset exact(2, blocks);
    EXPECT_LT(mse(exact, m), 1e-28);
    EXPECT_LT(mse_grad(exact, m).cwiseAbs().maxCoeff(), 1e-12);
    for (auto& b : blocks) b.y.array() += 0.3;
    EXPECT_NEAR(mse(Dataset(2, blocks), m), 0.09, 1e-12);
    EXPECT_NEAR(mse(p.eval, m), oracle::mse(p.train, p.eval, p.theta), 1e-10);
    EXPECT_THROW(mse(Dataset(2, {{Mat(0, 2), Vec(0)}, {Mat(0, 2), Vec(0)}}), m), EmptyEvalSet);
}

TEST(Mse, NoiseGradientVanishesFarAway) {
    RngStream rng(15, 0);
    const auto p = oracle::random_problem(1, 1, 1, 8, rng);
    const TrainedModel m(p.cfg, p.theta, p.train);
    const Dataset far = single_block(Mat::Constant(1, 1, 50.0), Vec::Constant(1, 1.0));
    EXPECT_LT(std::abs(mse_grad(far, m)[ParamLayout(p.cfg).sigma2(0)]), 1e-12);
}

TEST(Objectives, InfOnInvalidThetaAndAgreeWithFreeFunctions) {
    RngStream rng(16, 0);
    const auto p = oracle::random_problem(2, 1, 2, 10, rng);
    const NllObjective fn(p.cfg, p.train);
    const MseObjective fm(p.cfg, p.train, p.eval);
    const Vec th = p.theta.flatten();
    Vec g;
    EXPECT_DOUBLE_EQ(fn(th), nll(p.train, p.theta, p.cfg));
    EXPECT_DOUBLE_EQ(fn.value_and_gradient(th, g), fn(th));
    EXPECT_LT((g - nll_grad(p.train, p.theta, p.cfg)).cwiseAbs().maxCoeff(), 1e-12);
    const TrainedModel m(p.cfg, p.theta, p.train);
    EXPECT_DOUBLE_EQ(fm(th), mse(p.eval, m));
    EXPECT_DOUBLE_EQ(fm.value_and_gradient(th, g), fm(th));
    EXPECT_LT((g - mse_grad(p.eval, m)).cwiseAbs().maxCoeff(), 1e-12);

    Vec bad = th;
    bad[0] = -1.0;
    EXPECT_TRUE(std::isinf(fn(bad)));
    EXPECT_TRUE(std::isinf(fm(bad)));
    EXPECT_THROW(fn(Vec::Ones(3)), DimensionMismatch);
}

TEST(MsePerOutput, SplitsPooledValue) {
    RngStream rng(17, 0);
    const auto p = oracle::random_problem(2, 1, 1, 10, rng);
    const TrainedModel m(p.cfg, p.theta, p.train);
    const Vec per = mse_per_output(p.eval, m);
    const double pooled = (per[0] * p.eval.block(0).y.size() + per[1] * p.eval.block(1).y.size()) /
                          static_cast<double>(p.eval.size());
    EXPECT_NEAR(pooled, mse(p.eval, m), 1e-12);
}
