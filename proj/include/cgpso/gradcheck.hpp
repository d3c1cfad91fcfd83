#pragma once

#include "cgpso/cgp.hpp"
#include "cgpso/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <vector>

namespace cgpso::gradcheck {

struct Row {
    Index index = 0;
    int param_class = 0;
    double analytic = 0.0;
    double fd = 0.0;
    double error = 0.0;
};

struct Result {
    std::vector<Row> rows;
    double max_error = 0.0;

    bool passed(double tol) const { return max_error < tol; }
};

/// Relative error per coordinate; where the analytic value is below `tiny` the
/// finite difference only has to be below `tiny_fd`.
inline double coordinate_error(double analytic, double fd, double tiny = 1e-8, double tiny_fd = 1e-6) {
    if (std::abs(analytic) < tiny)
        return std::abs(fd) < tiny_fd ? 0.0 : std::numeric_limits<double>::infinity();
    return std::abs(analytic - fd) / std::abs(analytic);
}

/// Central differences with step rel * max(1, |x_i|) against an analytic gradient.
inline Result compare(const std::function<double(const Vec&)>& f, const Vec& analytic,
                      const Vec& x, const cgp::KernelConfig& cfg, double rel = 1e-5) {
    const cgp::ParamLayout L(cfg);
    Result r;
    Vec p = x;
    for (Index i = 0; i < x.size(); ++i) {
        const double h = rel * std::max(1.0, std::abs(x[i]));
        p[i] = x[i] + h;
        const double up = f(p);
        p[i] = x[i] - h;
        const double dn = f(p);
        p[i] = x[i];
        Row row{i, L.param_class(i), analytic[i], (up - dn) / (2.0 * h), 0.0};
        row.error = std::isfinite(row.fd) ? coordinate_error(row.analytic, row.fd)
                                          : std::numeric_limits<double>::infinity();
        r.max_error = std::max(r.max_error, row.error);
        r.rows.push_back(row);
    }
    return r;
}

inline Result check_nll(const cgp::Dataset& data, const cgp::KernelConfig& cfg, const Vec& theta) {
    const auto f = [&](const Vec& t) {
        return cgp::nll(data, cgp::Hyperparameters::unflatten(cfg, t), cfg);
    };
    return compare(f, cgp::nll_grad(data, cgp::Hyperparameters::unflatten(cfg, theta), cfg), theta, cfg);
}

inline Result check_mse(const cgp::Dataset& train, const cgp::Dataset& eval,
                        const cgp::KernelConfig& cfg, const Vec& theta) {
    const auto f = [&](const Vec& t) {
        return cgp::mse(eval, cgp::TrainedModel(cfg, cgp::Hyperparameters::unflatten(cfg, t), train));
    };
    const cgp::TrainedModel m(cfg, cgp::Hyperparameters::unflatten(cfg, theta), train);
    return compare(f, cgp::mse_grad(eval, m), theta, cfg);
}

/// Hyperparameters drawn the way the property suites draw them: scales and
/// precisions in [0.5, 2], noise variances in [0.05, 0.5].
inline Vec random_theta(const cgp::KernelConfig& cfg, numerics::RngStream& rng) {
    const cgp::ParamLayout L(cfg);
    Vec t(L.size());
    for (Index i = 0; i < t.size(); ++i)
        t[i] = L.param_class(i) == 2 ? rng.uniform(0.05, 0.5) : rng.uniform(0.5, 2.0);
    return t;
}

}  // namespace cgpso::gradcheck
