#pragma once

#include "cgpso/cgp.hpp"
#include "cgpso/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <memory>
#include <array>
#include <numbers>
#include <ostream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace cgpso::systems {

struct NonFiniteState : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct SimRecord {
    long k = 0;
    double t = 0.0;
    Vec u;
    Vec x;
    Vec y;
    Vec noise;  // measurement noise added to y (empty when none)
};

using Trajectory = std::vector<SimRecord>;

namespace detail {

inline void require_finite(const SimRecord& r, const char* who) {
    if (!r.u.allFinite() || !r.x.allFinite() || !r.y.allFinite())
        throw NonFiniteState(std::string(who) + ": trajectory diverged at k=" + std::to_string(r.k));
}

}  // namespace detail

/// Writes `k,t,u_1..,x_1..,y_1..`.
inline void write_trajectory_csv(std::ostream& os, const Trajectory& tr) {
    if (tr.empty()) return;
    os << "k,t";
    for (Index i = 0; i < tr.front().u.size(); ++i) os << ",u_" << i + 1;
    for (Index i = 0; i < tr.front().x.size(); ++i) os << ",x_" << i + 1;
    for (Index i = 0; i < tr.front().y.size(); ++i) os << ",y_" << i + 1;
    os << '\n';
    char buf[40];
    const auto put = [&](double v) {
        std::snprintf(buf, sizeof buf, "%.17g", v);
        os << ',' << buf;
    };
    for (const auto& r : tr) {
        os << r.k;
        put(r.t);
        for (Index i = 0; i < r.u.size(); ++i) put(r.u[i]);
        for (Index i = 0; i < r.x.size(); ++i) put(r.x[i]);
        for (Index i = 0; i < r.y.size(); ++i) put(r.y[i]);
        os << '\n';
    }
}

// ---------------------------------------------------------------- NARX

/// Records k = 0..steps-1 of
/// y(k) = 0.893 y(k-1) + 0.037 y(k-1)^2 - 0.05 y(k-2) + 0.157 u(k-1) - 0.05 u(k-1) y(k-1)
/// with y(0) = y(-1) = 0.
inline Trajectory simulate_narx(const std::vector<double>& u, int steps) {
    if (steps < 0 || static_cast<int>(u.size()) < steps)
        throw std::invalid_argument("simulate_narx: input sequence shorter than steps");
    Trajectory tr;
    tr.reserve(static_cast<std::size_t>(steps));
    double y1 = 0.0, y2 = 0.0;  // y(k-1), y(k-2)
    for (int k = 0; k < steps; ++k) {
        double y = 0.0;
        if (k > 0) {
            const double uk = u[static_cast<std::size_t>(k - 1)];
            y = 0.893 * y1 + 0.037 * y1 * y1 - 0.05 * y2 + 0.157 * uk - 0.05 * uk * y1;
        }
        SimRecord r{k, static_cast<double>(k), Vec::Constant(1, u[static_cast<std::size_t>(k)]),
                    Vec(0), Vec::Constant(1, y), Vec(0)};
        detail::require_finite(r, "simulate_narx");
        tr.push_back(std::move(r));
        y2 = k > 0 ? y1 : 0.0;
        y1 = y;
    }
    return tr;
}

/// Inputs and trajectory for `rows` regression rows (k = 1..rows).
inline Trajectory narx_trajectory(int rows, double u_lo, double u_hi, std::uint64_t seed) {
    numerics::RngStream rng(seed, 11);
    std::vector<double> u(static_cast<std::size_t>(rows) + 1);
    for (auto& v : u) v = rng.uniform(u_lo, u_hi);
    return simulate_narx(u, rows + 1);
}

/// Rows [u(k-1), y(k-1), y(k-2)] -> y(k), k = 1..n_total.
inline cgp::Dataset make_narx_dataset(int n_total = 1000, double u_lo = -2.0, double u_hi = 4.0,
                                      std::uint64_t seed = 0) {
    if (n_total < 1) throw std::invalid_argument("make_narx_dataset: n_total must be >= 1");
    const Trajectory tr = narx_trajectory(n_total, u_lo, u_hi, seed);
    cgp::OutputBlock b{Mat(n_total, 3), Vec(n_total)};
    for (int k = 1; k <= n_total; ++k) {
        const auto& prev = tr[static_cast<std::size_t>(k - 1)];
        b.X(k - 1, 0) = prev.u[0];
        b.X(k - 1, 1) = prev.y[0];
        b.X(k - 1, 2) = k >= 2 ? tr[static_cast<std::size_t>(k - 2)].y[0] : 0.0;
        b.y[k - 1] = tr[static_cast<std::size_t>(k)].y[0];
    }
    return cgp::Dataset(3, {std::move(b)});
}

enum class SecondOutput { linear, nonlinear };

/// Adds y2 = -y1 (linear) or exp(y1) (nonlinear) on the same regressors.
inline cgp::Dataset derive_second_output(const cgp::Dataset& ds, SecondOutput kind) {
    if (ds.num_outputs() != 1)
        throw std::invalid_argument("derive_second_output: single-output dataset required");
    cgp::OutputBlock first = ds.block(0);
    cgp::OutputBlock second{first.X, kind == SecondOutput::linear
                                         ? Vec(-first.y)
                                         : Vec(first.y.array().exp().matrix())};
    return cgp::Dataset(ds.input_dim(), {std::move(first), std::move(second)});
}

// ---------------------------------------------------------------- LTV

struct LtvMatrices {
    static Mat A(double t) {
        const double g1 = std::sin(10.0 * t), g2 = std::cos(10.0 * t);
        Mat a(3, 3);
        a << 0.3 - 0.9 * g1, 0.1, 0.7 * g2,  //
            0.6 * g1, 0.3 - 0.8 * g2, 0.01,  //
            0.5, 0.15, 0.6 - 0.9 * g1;
        return a;
    }
    static Mat B() {
        Mat b(3, 2);
        b << 1, 0, 1, -1, 0, 1;
        return b;
    }
    static Mat C() {
        Mat c(2, 3);
        c << 1, 0, 1, 1, -1, 0;
        return c;
    }
    static Mat D() { return 0.1 * Mat::Identity(2, 2); }
    static Vec u(double t) {
        Vec v(2);
        v << 0.5 * std::sin(12.0 * t), std::cos(7.0 * t);
        return v;
    }
};

/// Samples t = 0, dt, ..., (count-1) dt with count = round(t_end / dt), integrating
/// with classical RK4 at step dt / substeps from a zero state. Optional gaussian
/// output noise of standard deviation noise_std.
inline Trajectory simulate_ltv(double t_end = 10.0, double dt = 0.05, std::uint64_t seed = 0,
                               int substeps = 1, double noise_std = 0.0) {
    if (!(dt > 0.0) || substeps < 1) throw std::invalid_argument("simulate_ltv: dt > 0 required");
    const auto count = static_cast<long>(std::llround(t_end / dt));
    const Mat B = LtvMatrices::B(), C = LtvMatrices::C(), D = LtvMatrices::D();
    const auto f = [&](double t, const Vec& x) -> Vec {
        return LtvMatrices::A(t) * x + B * LtvMatrices::u(t);
    };
    numerics::RngStream rng(seed, 31);
    const double h = dt / substeps;
    Trajectory tr;
    tr.reserve(static_cast<std::size_t>(std::max(0L, count)));
    Vec x = Vec::Zero(3);
    for (long k = 0; k < count; ++k) {
        const double t = static_cast<double>(k) * dt;
        if (k > 0) {
            const double t0 = static_cast<double>(k - 1) * dt;
            for (int s = 0; s < substeps; ++s) {
                const double ts = t0 + s * h;
                const Vec k1 = f(ts, x);
                const Vec k2 = f(ts + 0.5 * h, x + 0.5 * h * k1);
                const Vec k3 = f(ts + 0.5 * h, x + 0.5 * h * k2);
                const Vec k4 = f(ts + h, x + h * k3);
                x += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            }
        }
        SimRecord r{k, t, LtvMatrices::u(t), x, Vec(), Vec()};
        r.y = C * x + D * r.u;
        if (noise_std > 0.0) {
            r.noise = Vec(2);
            r.noise << noise_std * rng.normal(), noise_std * rng.normal();
            r.y += r.noise;
        }
        detail::require_finite(r, "simulate_ltv");
        tr.push_back(std::move(r));
    }
    return tr;
}

// ---------------------------------------------------------------- NLTV

enum class Reference { step, curve };

inline std::pair<double, double> reference_trajectory(Reference kind, long k) {
    if (kind == Reference::curve) {
        const double a = std::numbers::pi * static_cast<double>(k);
        return {0.75 * std::sin(a / 8.0) + 0.5 * std::cos(a / 4.0),
                0.5 * std::cos(a / 8.0) + 0.5 * std::sin(a / 4.0)};
    }
    const double y1 = k <= 500 ? 0.4 : (k <= 1000 ? 0.7 : 0.5);
    const double y2 = k <= 300 ? 0.6 : (k <= 700 ? 0.8 : (k <= 1200 ? 0.7 : 0.5));
    return {y1, y2};
}

inline double nltv_a(long k) {
    return 1.0 + 0.1 * std::sin(2.0 * std::numbers::pi * static_cast<double>(k) / 1500.0);
}
inline double nltv_b(long k) {
    return 1.0 + 0.1 * std::cos(2.0 * std::numbers::pi * static_cast<double>(k) / 1500.0);
}

/// One plant step: x(k+1) from x(k) = (x11, x12, x21, x22) and u(k).
inline Vec nltv_step(const Vec& x, const Vec& u, long k) {
    const double x11 = x[0], x12 = x[1], x21 = x[2], x22 = x[3];
    Vec n(4);
    n[0] = x11 * x11 / (1.0 + x11 * x11) + 0.3 * x12;
    n[1] = x11 * x11 / (1.0 + x12 * x12 + x21 * x21 + x22 * x22) + nltv_a(k) * u[0];
    n[2] = x21 * x21 / (1.0 + x21 * x21) + 0.2 * x22;
    n[3] = x21 * x21 / (1.0 + x11 * x11 + x12 * x12 + x22 * x22) + nltv_b(k) * u[1];
    return n;
}

enum class NoiseKind { none, uniform, gaussian };

struct NoiseSpec {
    NoiseKind kind = NoiseKind::uniform;
    double scale = 0.005;
};

/// Chooses u(k) from the state x(k) and the input-free part of x(k+1) (its x11 and
/// x21 entries do not depend on u(k)).
using InputPolicy = std::function<Vec(long k, const Vec& x_now, const Vec& x_next)>;

/// Records k = 1..steps. x(1) = x(2) = (0.5, 0, 0.5, 0), u(1) = u(2) = 0; u(k) for
/// k >= 3 comes from `u` (indexed by k) or from `policy` when given. Outputs are
/// y_d(k) = x_d1(k) + noise.
inline Trajectory simulate_nltv(const std::vector<Vec>& u, long steps, const NoiseSpec& noise = {},
                                std::uint64_t seed = 0, const InputPolicy& policy = {}) {
    if (steps < 2) throw std::invalid_argument("simulate_nltv: steps must be >= 2");
    if (!policy && static_cast<long>(u.size()) < steps + 1)
        throw std::invalid_argument("simulate_nltv: need u(k) for k = 0..steps");
    numerics::RngStream rng(seed, 41);
    Vec x0(4);
    x0 << 0.5, 0.0, 0.5, 0.0;
    std::vector<Vec> xs(static_cast<std::size_t>(steps) + 2);
    std::vector<Vec> us(static_cast<std::size_t>(steps) + 1, Vec::Zero(2));
    xs[1] = x0;
    xs[2] = x0;
    for (long k = 2; k < steps; ++k) {
        // u(k) acts on x(k+1); u(1) = u(2) = 0.
        if (k >= 3) {
            const Vec& xk = xs[static_cast<std::size_t>(k)];
            us[static_cast<std::size_t>(k)] =
                policy ? policy(k, xk, nltv_step(xk, Vec::Zero(2), k))
                       : u[static_cast<std::size_t>(k)];
        }
        xs[static_cast<std::size_t>(k + 1)] =
            nltv_step(xs[static_cast<std::size_t>(k)], us[static_cast<std::size_t>(k)], k);
    }
    if (steps >= 3) {
        // u(steps) is recorded but never reaches a sampled state.
        const Vec& xk = xs[static_cast<std::size_t>(steps)];
        us[static_cast<std::size_t>(steps)] =
            policy ? policy(steps, xk, nltv_step(xk, Vec::Zero(2), steps))
                   : u[static_cast<std::size_t>(steps)];
    }
    Trajectory tr;
    tr.reserve(static_cast<std::size_t>(steps));
    for (long k = 1; k <= steps; ++k) {
        const Vec& x = xs[static_cast<std::size_t>(k)];
        SimRecord r{k, static_cast<double>(k), us[static_cast<std::size_t>(k)], x, Vec(2), Vec()};
        r.y << x[0], x[2];
        if (noise.kind != NoiseKind::none) {
            r.noise = Vec(2);
            for (int d = 0; d < 2; ++d)
                r.noise[d] = noise.scale *
                             (noise.kind == NoiseKind::uniform ? rng.uniform() : rng.normal());
            r.y += r.noise;
        }
        detail::require_finite(r, "simulate_nltv");
        tr.push_back(std::move(r));
    }
    return tr;
}

// ---------------------------------------------------------------- regressors

/// Lags per signal. u_lags[j] lists the lags of input j; y_lags[d] those of output d.
struct RegressorSpec {
    std::vector<std::vector<int>> u_lags;
    std::vector<std::vector<int>> y_lags;

    int width() const {
        int w = 0;
        for (const auto& l : u_lags) w += static_cast<int>(l.size());
        for (const auto& l : y_lags) w += static_cast<int>(l.size());
        return w;
    }

    /// Largest lag; rows start this many records into a trajectory.
    int max_lag() const {
        int m = 0;
        for (const auto& l : u_lags)
            for (int v : l) m = std::max(m, v);
        for (const auto& l : y_lags)
            for (int v : l) m = std::max(m, v);
        return m;
    }

    void validate(Index n_u, Index n_y, bool allow_input_lag0) const {
        if (static_cast<Index>(u_lags.size()) > n_u || static_cast<Index>(y_lags.size()) > n_y)
            throw std::invalid_argument("RegressorSpec: more signals than the system provides");
        for (const auto& l : u_lags)
            for (int v : l)
                if (v < (allow_input_lag0 ? 0 : 1))
                    throw std::invalid_argument("RegressorSpec: input lag out of range");
        for (const auto& l : y_lags)
            for (int v : l)
                if (v < 1) throw std::invalid_argument("RegressorSpec: output lags must be >= 1");
        if (width() == 0) throw std::invalid_argument("RegressorSpec: no regressors");
    }
};

/// One regression row per record k >= max_lag; every output gets the same rows.
inline cgp::Dataset regress(const Trajectory& tr, const RegressorSpec& spec, int outputs) {
    const int lag = spec.max_lag();
    const auto rows = static_cast<Index>(tr.size()) - lag;
    if (rows < 1) throw std::invalid_argument("regress: trajectory shorter than the lags");
    const int n = spec.width();
    Mat X(rows, n);
    Mat Y(rows, outputs);
    for (Index r = 0; r < rows; ++r) {
        const auto k = static_cast<std::size_t>(r + lag);
        int c = 0;
        for (std::size_t j = 0; j < spec.u_lags.size(); ++j)
            for (int l : spec.u_lags[j]) X(r, c++) = tr[k - static_cast<std::size_t>(l)].u[static_cast<Index>(j)];
        for (std::size_t d = 0; d < spec.y_lags.size(); ++d)
            for (int l : spec.y_lags[d]) X(r, c++) = tr[k - static_cast<std::size_t>(l)].y[static_cast<Index>(d)];
        for (int d = 0; d < outputs; ++d) Y(r, d) = tr[k].y[d];
    }
    std::vector<cgp::OutputBlock> blocks;
    for (int d = 0; d < outputs; ++d) blocks.push_back({X, Y.col(d)});
    return cgp::Dataset(n, std::move(blocks));
}

inline RegressorSpec ltv_default_regressors() { return {{{0}, {0}}, {{1}, {1}}}; }

/// `records` rows [u1(k), u2(k), y1(k-1), y2(k-1)] -> (y1(k), y2(k)) by default.
inline cgp::Dataset make_ltv_dataset(int records = 200, double dt = 0.05, std::uint64_t seed = 0,
                                     const RegressorSpec& spec = ltv_default_regressors(),
                                     double noise_std = 0.0) {
    spec.validate(2, 2, true);
    const Trajectory tr = simulate_ltv((records + spec.max_lag()) * dt, dt, seed, 1, noise_std);
    return regress(tr, spec, 2);
}

/// u(k-1) cannot reach y(k), and two output lags recover the hidden states
/// x12(k-2) and x22(k-2); with u(k-2) these determine y(k) up to the slow gains.
inline RegressorSpec nltv_default_regressors() { return {{{2}, {2}}, {{1, 2}, {1, 2}}}; }

enum class Excitation { uniform, tracking, adaptive };

struct ExcitationSpec {
    Excitation kind = Excitation::uniform;
    double lo = 0.0;  // uniform input range
    double hi = 1.0;
    double dither = 0.05;  // tracking, adaptive: uniform perturbation half-width
    // adaptive: step size, input-change penalty, estimator step and regularizer
    double rho = 0.5, lambda = 0.1, eta = 0.5, mu = 1.0;
};

/// Steers x_d1(k+2) to the reference by inverting the plant one step ahead, plus dither.
inline InputPolicy tracking_policy(Reference ref, double dither, numerics::RngStream& rng) {
    return [ref, dither, &rng](long k, const Vec& x, const Vec& xn) {
        const auto [r1, r2] = reference_trajectory(ref, k + 2);
        const double g1 = xn[0] * xn[0] / (1.0 + xn[0] * xn[0]);
        const double g2 = xn[2] * xn[2] / (1.0 + xn[2] * xn[2]);
        const double want12 = (r1 - g1) / 0.3;
        const double want22 = (r2 - g2) / 0.2;
        const double h12 = x[0] * x[0] / (1.0 + x[1] * x[1] + x[2] * x[2] + x[3] * x[3]);
        const double h22 = x[2] * x[2] / (1.0 + x[0] * x[0] + x[1] * x[1] + x[3] * x[3]);
        Vec u(2);
        u[0] = std::clamp((want12 - h12) / nltv_a(k), -2.0, 2.0) + dither * rng.uniform(-1, 1);
        u[1] = std::clamp((want22 - h22) / nltv_b(k), -2.0, 2.0) + dither * rng.uniform(-1, 1);
        return u;
    };
}

/// Model-free adaptive tracking, one decoupled loop per output: a scalar
/// pseudo-gradient phi_d is estimated from input/output increments and drives
/// u_d(k) = u_d(k-1) + rho phi_d (r_d(k+1) - y_d(k)) / (lambda + phi_d^2).
/// Settles over tens of steps, so the record holds a real transient.
inline InputPolicy adaptive_policy(Reference ref, const ExcitationSpec& ex, numerics::RngStream& rng) {
    struct Loop {
        double u = 0, y = 0.5, du = 0, phi = 0.5;
    };
    auto loops = std::make_shared<std::array<Loop, 2>>();
    return [ref, ex, &rng, loops](long k, const Vec& x, const Vec&) {
        const auto [r1, r2] = reference_trajectory(ref, k + 1);
        const double r[2] = {r1, r2};
        Vec u(2);
        for (int d = 0; d < 2; ++d) {
            Loop& l = (*loops)[static_cast<std::size_t>(d)];
            const double y = x[2 * d];
            l.phi += ex.eta * l.du * ((y - l.y) - l.phi * l.du) / (ex.mu + l.du * l.du);
            if (std::abs(l.phi) < 1e-5 || l.phi < 0) l.phi = 0.5;
            const double next = std::clamp(l.u + ex.rho * l.phi * (r[d] - y) / (ex.lambda + l.phi * l.phi),
                                           -2.0, 2.0);
            l.du = next - l.u;
            l.u = next;
            l.y = y;
            u[d] = next + ex.dither * rng.uniform(-1, 1);
        }
        return u;
    };
}

inline Trajectory nltv_trajectory(Reference ref, long steps, const ExcitationSpec& ex,
                                  const NoiseSpec& noise, std::uint64_t seed) {
    numerics::RngStream rng(seed, 43);
    if (ex.kind == Excitation::tracking) {
        const InputPolicy pol = tracking_policy(ref, ex.dither, rng);
        return simulate_nltv({}, steps, noise, seed, pol);
    }
    if (ex.kind == Excitation::adaptive) {
        const InputPolicy pol = adaptive_policy(ref, ex, rng);
        return simulate_nltv({}, steps, noise, seed, pol);
    }
    std::vector<Vec> u(static_cast<std::size_t>(steps) + 1, Vec::Zero(2));
    for (long k = 3; k <= steps; ++k) {
        u[static_cast<std::size_t>(k)] = Vec(2);
        u[static_cast<std::size_t>(k)] << rng.uniform(ex.lo, ex.hi), rng.uniform(ex.lo, ex.hi);
    }
    return simulate_nltv(u, steps, noise, seed);
}

inline long nltv_default_records(Reference ref) { return ref == Reference::step ? 200 : 1500; }

/// `records` regression rows (200 for step, 1500 for curve by default).
inline cgp::Dataset make_nltv_dataset(Reference ref, const ExcitationSpec& ex = {},
                                      long records = 0, std::uint64_t seed = 0,
                                      const RegressorSpec& spec = nltv_default_regressors(),
                                      const NoiseSpec& noise = {}) {
    spec.validate(2, 2, false);
    if (records <= 0) records = nltv_default_records(ref);
    const Trajectory tr = nltv_trajectory(ref, records + spec.max_lag(), ex, noise, seed);
    return regress(tr, spec, 2);
}

}  // namespace cgpso::systems
