#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace cgpso {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using Index = Eigen::Index;

struct NotPositiveDefinite : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DimensionMismatch : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct NonFiniteValue : std::runtime_error {
    using std::runtime_error::runtime_error;
};

namespace numerics {

/// Lower Cholesky factor of `A + jitter_used * I`.
struct CholFactor {
    Mat lower;
    double jitter_used = 0.0;

    Index size() const { return lower.rows(); }
};

/// Scale-aware base jitter: 1e-10 times the mean diagonal magnitude.
inline double default_jitter(const Mat& a) {
    if (a.rows() == 0) return 1e-10;
    double mean_diag = a.diagonal().cwiseAbs().mean();
    if (!(mean_diag > 0.0) || !std::isfinite(mean_diag)) mean_diag = 1.0;
    return 1e-10 * mean_diag;
}

/// Factorizes `a + c I` for the smallest c in {0, base, 10 base, ..., 1e6 base}
/// that succeeds.
inline CholFactor cholesky_psd(const Mat& a, double base_jitter) {
    if (a.rows() != a.cols() || a.rows() == 0)
        throw DimensionMismatch("cholesky_psd: matrix must be square and non-empty");
    if (!(base_jitter >= 0.0)) throw std::invalid_argument("cholesky_psd: negative jitter");
    if (!a.allFinite()) throw NotPositiveDefinite("cholesky_psd: non-finite entries");

    Eigen::LLT<Mat> llt;
    double scale = 1.0;
    for (int attempt = -1; attempt <= 6; ++attempt) {
        double c = 0.0;
        if (attempt >= 0) {
            if (base_jitter == 0.0) break;
            c = base_jitter * scale;
            scale *= 10.0;
        }
        Mat m = a;
        m.diagonal().array() += c;
        llt.compute(m);
        if (llt.info() != Eigen::Success) continue;
        Mat l = llt.matrixL();
        const auto diag = l.diagonal();
        if (diag.allFinite() && (diag.array() > 0.0).all()) return {std::move(l), c};
    }
    throw NotPositiveDefinite("cholesky_psd: factorization failed after jitter escalation");
}

inline CholFactor cholesky_psd(const Mat& a) { return cholesky_psd(a, default_jitter(a)); }

inline double logdet(const CholFactor& f) {
    return 2.0 * f.lower.diagonal().array().log().sum();
}

/// Solves (L L^T) x = b for a vector or matrix right-hand side.
template <typename Derived>
typename Derived::PlainObject solve_psd(const CholFactor& f, const Eigen::MatrixBase<Derived>& b) {
    if (b.rows() != f.size())
        throw DimensionMismatch("solve_psd: right-hand side has " + std::to_string(b.rows()) +
                                " rows, factor has " + std::to_string(f.size()));
    typename Derived::PlainObject x = f.lower.template triangularView<Eigen::Lower>().solve(b);
    f.lower.transpose().template triangularView<Eigen::Upper>().solveInPlace(x);
    return x;
}

/// Forward substitution only: L^{-1} b.
template <typename Derived>
typename Derived::PlainObject solve_lower(const CholFactor& f, const Eigen::MatrixBase<Derived>& b) {
    if (b.rows() != f.size()) throw DimensionMismatch("solve_lower: dimension mismatch");
    return f.lower.template triangularView<Eigen::Lower>().solve(b);
}

inline Mat inverse_psd(const CholFactor& f) {
    return solve_psd(f, Mat::Identity(f.size(), f.size()).eval());
}

/// Central-difference gradient of a scalar function.
inline Vec fd_gradient(const std::function<double(const Vec&)>& f, const Vec& x, double h) {
    Vec g(x.size());
    Vec probe = x;
    for (Index i = 0; i < x.size(); ++i) {
        probe[i] = x[i] + h;
        const double up = f(probe);
        probe[i] = x[i] - h;
        const double down = f(probe);
        probe[i] = x[i];
        if (!std::isfinite(up) || !std::isfinite(down))
            throw NonFiniteValue("fd_gradient: non-finite function value at coordinate " +
                                 std::to_string(i));
        g[i] = (up - down) / (2.0 * h);
    }
    return g;
}

/// Seeded random stream. Equal (seed, stream_id) pairs yield equal draws on every
/// platform: the engine and the mapping to doubles are both fixed here rather than
/// delegated to implementation-defined std distributions.
class RngStream {
public:
    RngStream(std::uint64_t seed, std::uint64_t stream_id) : seed_(seed), stream_id_(stream_id) {
        std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                          static_cast<std::uint32_t>(stream_id),
                          static_cast<std::uint32_t>(stream_id >> 32), 0x9e3779b9u};
        engine_.seed(seq);
    }

    std::uint64_t seed() const { return seed_; }
    std::uint64_t stream_id() const { return stream_id_; }

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform on [0, 1).
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double phi = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(phi);
        has_spare_ = true;
        return r * std::cos(phi);
    }

    /// Uniform integer in [0, n) by rejection.
    std::uint64_t below(std::uint64_t n) {
        if (n <= 1) return 0;
        const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
        std::uint64_t r;
        do {
            r = engine_();
        } while (r >= limit);
        return r % n;
    }

    std::vector<Index> permutation(Index n) {
        std::vector<Index> idx(static_cast<std::size_t>(n));
        for (Index i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
        for (Index i = n - 1; i > 0; --i) {
            const auto j = static_cast<Index>(below(static_cast<std::uint64_t>(i + 1)));
            std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
        }
        return idx;
    }

private:
    std::uint64_t seed_;
    std::uint64_t stream_id_;
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace numerics
}  // namespace cgpso
