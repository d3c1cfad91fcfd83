#pragma once

#include "cgpso/numerics.hpp"

#include <cassert>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <ostream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace cgpso::optim {

struct NoProgress : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct MissingGradient : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

inline constexpr double kInf = std::numeric_limits<double>::infinity();

struct Bounds {
    Vec lo;
    Vec hi;

    Index size() const { return lo.size(); }

    void validate() const {
        if (lo.size() != hi.size()) throw DimensionMismatch("Bounds: lo/hi size mismatch");
        for (Index i = 0; i < lo.size(); ++i)
            if (!(lo[i] < hi[i]))
                throw std::invalid_argument("Bounds: lo must be < hi in coordinate " +
                                            std::to_string(i));
    }

    Vec clamp(const Vec& x) const { return x.cwiseMax(lo).cwiseMin(hi); }

    bool contains(const Vec& x) const {
        return (x.array() >= lo.array()).all() && (x.array() <= hi.array()).all();
    }

    static Bounds uniform(Index dim, double lo, double hi) {
        return {Vec::Constant(dim, lo), Vec::Constant(dim, hi)};
    }
};

/// Box-bounded minimization problem. `gradient` returns the objective value and
/// writes the gradient; it may be empty.
struct FitnessProblem {
    std::function<double(const Vec&)> objective;
    std::function<double(const Vec&, Vec&)> gradient;
    Bounds bounds;

    Index dimension() const { return bounds.size(); }
    bool has_gradient() const { return static_cast<bool>(gradient); }
};

struct LocalConfig {
    int max_iters = 50;
    double grad_tol = 1e-6;
};

struct PsoConfig {
    int Np = 20;
    int Tmax = 500;
    double c1 = 1.5;
    double c2 = 1.5;
    double omega_start = 0.4;
    double omega_end = 0.9;
    double k = 0.8;
    double xi = -kInf;  // target fitness; -inf disables early exit
    double eta = 1e-5;  // stagnation tolerance
    int N_G = 10;       // stagnation patience
    double tau = 0.5;   // hybrid switch fraction
    std::uint64_t seed = 0;
    LocalConfig refine{};

    void validate() const {
        if (Np < 1) throw std::invalid_argument("PsoConfig: Np must be >= 1");
        if (Tmax < 1) throw std::invalid_argument("PsoConfig: Tmax must be >= 1");
        if (!(c1 >= 0.0) || !(c2 >= 0.0))
            throw std::invalid_argument("PsoConfig: c1, c2 must be non-negative");
        if (N_G < 1) throw std::invalid_argument("PsoConfig: N_G must be >= 1");
        if (!(tau >= 0.0 && tau <= 1.0)) throw std::invalid_argument("PsoConfig: tau in [0,1]");
        if (!(eta >= 0.0)) throw std::invalid_argument("PsoConfig: eta must be >= 0");
    }
};

enum class TraceEvent { none, restart, refine };

inline std::string_view to_string(TraceEvent e) {
    switch (e) {
        case TraceEvent::restart: return "restart";
        case TraceEvent::refine: return "refine";
        default: return "none";
    }
}

struct TraceRow {
    int t = 0;
    double gbest = kInf;
    long evals = 0;
    double elapsed_ms = 0.0;
    TraceEvent event = TraceEvent::none;
};

struct RunTrace {
    std::vector<TraceRow> rows;

    /// Equality of everything except wall-clock.
    bool same_trajectory(const RunTrace& other) const {
        if (rows.size() != other.rows.size()) return false;
        for (std::size_t i = 0; i < rows.size(); ++i) {
            const auto& a = rows[i];
            const auto& b = other.rows[i];
            if (a.t != b.t || a.evals != b.evals || a.event != b.event) return false;
            if (!(a.gbest == b.gbest) && !(std::isnan(a.gbest) && std::isnan(b.gbest)))
                return false;
        }
        return true;
    }

    bool non_increasing() const {
        for (std::size_t i = 1; i < rows.size(); ++i)
            if (rows[i].gbest > rows[i - 1].gbest) return false;
        return true;
    }

    std::size_t count(TraceEvent e) const {
        std::size_t c = 0;
        for (const auto& r : rows) c += r.event == e ? 1 : 0;
        return c;
    }

    void write_csv(std::ostream& os, bool with_time = true) const {
        os << "t,gbest_fitness,evals,elapsed_ms,event\n";
        char buf[64];
        for (const auto& r : rows) {
            std::snprintf(buf, sizeof buf, "%.17g", r.gbest);
            os << r.t << ',' << buf << ',' << r.evals << ',';
            if (with_time) {
                std::snprintf(buf, sizeof buf, "%.3f", r.elapsed_ms);
                os << buf;
            } else {
                os << 0;
            }
            os << ',' << to_string(r.event) << '\n';
        }
    }
};

struct SwarmState {
    Mat x;  // Np x D positions
    Mat v;  // Np x D velocities
    Mat pbest;
    Vec pbest_value;
    Vec gbest;
    double gbest_value = kInf;
    int stagnation = 0;
    int t = 0;

    int size() const { return static_cast<int>(x.rows()); }
};

struct RunResult {
    Vec best;
    double value = kInf;
    RunTrace trace;
    long evaluations = 0;
};

struct LocalResult {
    Vec x;
    double f = kInf;
    int iterations = 0;
    long evaluations = 0;
    bool line_search_failed = false;
};

/// omega(t) = omega_end + (omega_start - omega_end) exp(-k t / Tmax)
inline double inertia(int t, const PsoConfig& cfg) {
    return cfg.omega_end + (cfg.omega_start - cfg.omega_end) *
                               std::exp(-cfg.k * static_cast<double>(t) / cfg.Tmax);
}

inline double velocity_update(double v, double x, double p, double g, double omega, double c1,
                              double c2, double lambda1, double lambda2) {
    return omega * v + c1 * lambda1 * (p - x) + c2 * lambda2 * (g - x);
}

/// New velocity of particle i along dimension d. Draws lambda1 then lambda2.
inline double step_velocity(const SwarmState& s, int i, Index d, const PsoConfig& cfg,
                            numerics::RngStream& rng) {
    const double l1 = rng.uniform();
    const double l2 = rng.uniform();
    return velocity_update(s.v(i, d), s.x(i, d), s.pbest(i, d), s.gbest[d], inertia(s.t, cfg),
                           cfg.c1, cfg.c2, l1, l2);
}

/// x += v, clamped into the box; a clamped coordinate loses its velocity.
inline void step_position(SwarmState& s, int i, const Bounds& b) {
    for (Index d = 0; d < s.x.cols(); ++d) {
        double x = s.x(i, d) + s.v(i, d);
        if (x < b.lo[d]) {
            x = b.lo[d];
            s.v(i, d) = 0.0;
        } else if (x > b.hi[d]) {
            x = b.hi[d];
            s.v(i, d) = 0.0;
        }
        s.x(i, d) = x;
    }
}

/// Personal bests replaced on ties; global best only on strict improvement.
/// Applied in particle-index order.
inline void update_bests(SwarmState& s, const Vec& fitness) {
    for (int i = 0; i < s.size(); ++i) {
        const double f = std::isnan(fitness[i]) ? kInf : fitness[i];
        if (f <= s.pbest_value[i]) {
            s.pbest.row(i) = s.x.row(i);
            s.pbest_value[i] = f;
        }
    }
    for (int i = 0; i < s.size(); ++i) {
        if (s.pbest_value[i] < s.gbest_value) {
            s.gbest = s.pbest.row(i).transpose();
            s.gbest_value = s.pbest_value[i];
        }
    }
}

namespace detail {

inline double safe_eval(const std::function<double(const Vec&)>& f, const Vec& x) {
    const double v = f(x);
    return std::isnan(v) ? kInf : v;
}

/// Zeroes gradient components that push against an active bound.
inline Vec projected_gradient(const Vec& x, const Vec& g, const Bounds& b) {
    Vec pg = g;
    for (Index i = 0; i < x.size(); ++i)
        if ((x[i] <= b.lo[i] && g[i] > 0.0) || (x[i] >= b.hi[i] && g[i] < 0.0)) pg[i] = 0.0;
    return pg;
}

struct LineSearchResult {
    bool ok = false;
    double step = 0.0;
    Vec x;
    double f = kInf;
};

/// Armijo backtracking (c = 1e-4, halving, at most 40 halvings) along the projected
/// path x(a) = clamp(x + a d). With `interpolate`, one quadratic-interpolation trial
/// is made from the first probe and kept if better; it is exact on quadratics.
/// Otherwise the interpolated step is only tried when the first probe fails.
inline LineSearchResult armijo_search(const FitnessProblem& p, const Vec& x, double f,
                                      const Vec& g, const Vec& d, double step0, long& evals,
                                      bool interpolate = true) {
    constexpr double c = 1e-4;
    const auto probe = [&](double a, Vec& xa, double& fa) {
        xa = p.bounds.clamp(x + a * d);
        fa = safe_eval(p.objective, xa);
        ++evals;
        const double decrease = g.dot(xa - x);
        const bool moved = (xa - x).cwiseAbs().maxCoeff() > 0.0;
        return moved && std::isfinite(fa) && decrease < 0.0 && fa <= f + c * decrease;
    };

    LineSearchResult r;
    Vec x0;
    double f0 = kInf;
    const bool ok0 = probe(step0, x0, f0);
    if (ok0 && !interpolate) return {true, step0, std::move(x0), f0};
    const double slope = g.dot(d);
    if (std::isfinite(f0)) {
        const double curv = f0 - f - slope * step0;
        if (curv > 0.0) {
            double aq = -slope * step0 * step0 / (2.0 * curv);
            aq = std::min(std::max(aq, 1e-3 * step0), 10.0 * step0);
            if (aq != step0) {
                Vec xq;
                double fq = kInf;
                if (probe(aq, xq, fq) && (!ok0 || fq < f0)) return {true, aq, std::move(xq), fq};
            }
        }
    }
    if (ok0) return {true, step0, std::move(x0), f0};

    double a = step0;
    for (int h = 0; h < 40; ++h) {
        a *= 0.5;
        Vec xa;
        double fa = kInf;
        if (probe(a, xa, fa)) return {true, a, std::move(xa), fa};
    }
    return r;
}

inline double initial_step(const Vec& d, const Bounds& b) {
    const double dmax = d.cwiseAbs().maxCoeff();
    const double width = (b.hi - b.lo).maxCoeff();
    if (!(dmax > 0.0)) return 1.0;
    return std::min(1.0, width / dmax);
}

/// Largest step keeping x + a d inside the box, ignoring coordinates already on
/// the bound they move towards.
inline double feasible_step(const Vec& x, const Vec& d, const Bounds& b) {
    double a = kInf;
    for (Index i = 0; i < x.size(); ++i) {
        if (d[i] > 0.0 && x[i] < b.hi[i]) a = std::min(a, (b.hi[i] - x[i]) / d[i]);
        if (d[i] < 0.0 && x[i] > b.lo[i]) a = std::min(a, (b.lo[i] - x[i]) / d[i]);
    }
    return a;
}

/// Trial step, shortened to stay inside the box unless that would make it tiny.
inline double first_trial(const Vec& x, const Vec& d, const Bounds& b, double step) {
    const double room = feasible_step(x, d, b);
    return room >= 1e-3 * step ? std::min(step, room) : step;
}

}  // namespace detail

/// Projected nonlinear conjugate gradient (Polak-Ribiere+, restarted every D
/// iterations) with Armijo backtracking.
inline LocalResult cg_minimize(const FitnessProblem& p, const Vec& theta0, int max_iters,
                               double grad_tol) {
    if (!p.has_gradient()) throw MissingGradient("cg_minimize: problem has no gradient");
    p.bounds.validate();
    const Index D = p.dimension();
    LocalResult r;
    r.x = p.bounds.clamp(theta0);
    Vec g(D);
    r.f = p.gradient(r.x, g);
    r.evaluations = 1;
    if (!std::isfinite(r.f) || !g.allFinite()) {
        r.f = std::isnan(r.f) ? kInf : r.f;
        r.line_search_failed = true;
        return r;
    }
    Vec pg = detail::projected_gradient(r.x, g, p.bounds);
    if (pg.cwiseAbs().maxCoeff() < grad_tol) return r;

    Vec dir = -pg;
    double step = detail::initial_step(dir, p.bounds);
    double prev_slope = 0.0;
    for (int it = 0; it < max_iters; ++it) {
        double slope = pg.dot(dir);
        if (!(slope < 0.0)) {
            dir = -pg;
            slope = pg.dot(dir);
        }
        if (it > 0 && prev_slope < 0.0) step = std::min(step * prev_slope / slope, 1e3 * step);
        step = std::min(step, detail::initial_step(dir, p.bounds));
        step = detail::first_trial(r.x, dir, p.bounds, step);
        auto ls = detail::armijo_search(p, r.x, r.f, g, dir, step, r.evaluations);
        if (!ls.ok) {
            r.line_search_failed = true;
            break;
        }
        ++r.iterations;
        Vec g_new(D);
        const double f_new = p.gradient(ls.x, g_new);
        ++r.evaluations;
        if (!std::isfinite(f_new) || !g_new.allFinite()) {
            r.line_search_failed = true;
            break;
        }
        r.x = std::move(ls.x);
        r.f = f_new;
        const Vec pg_new = detail::projected_gradient(r.x, g_new, p.bounds);
        if (pg_new.cwiseAbs().maxCoeff() < grad_tol) break;

        double beta = pg_new.dot(pg_new - pg) / pg.squaredNorm();
        if (!(beta > 0.0) || (it + 1) % D == 0) beta = 0.0;
        prev_slope = slope;
        step = ls.step;
        dir = -pg_new + beta * dir;
        g = std::move(g_new);
        pg = pg_new;
    }
    return r;
}

/// Inverse-Hessian BFGS update; after it, H y = s.
inline void bfgs_update(Mat& H, const Vec& s, const Vec& y) {
    const double rho = 1.0 / s.dot(y);
    const Vec Hy = H * y;
    const double yHy = y.dot(Hy);
    H.noalias() += (rho * rho * yHy + rho) * (s * s.transpose());
    H.noalias() -= rho * (Hy * s.transpose() + s * Hy.transpose());
}

/// Dense BFGS with Armijo backtracking; the update is skipped when s^T y <= 1e-10.
inline LocalResult bfgs_minimize(const FitnessProblem& p, const Vec& theta0, int max_iters,
                                 double grad_tol) {
    if (!p.has_gradient()) throw MissingGradient("bfgs_minimize: problem has no gradient");
    p.bounds.validate();
    const Index D = p.dimension();
    LocalResult r;
    r.x = p.bounds.clamp(theta0);
    Vec g(D);
    r.f = p.gradient(r.x, g);
    r.evaluations = 1;
    if (!std::isfinite(r.f) || !g.allFinite()) {
        r.f = std::isnan(r.f) ? kInf : r.f;
        r.line_search_failed = true;
        return r;
    }
    Vec pg = detail::projected_gradient(r.x, g, p.bounds);
    if (pg.cwiseAbs().maxCoeff() < grad_tol) return r;

    Mat H = Mat::Identity(D, D);
    bool scaled = false;
    for (int it = 0; it < max_iters; ++it) {
        Vec dir = -(H * pg);
        if (!(pg.dot(dir) < 0.0)) {
            H.setIdentity();
            dir = -pg;
        }
        const double step =
            detail::first_trial(r.x, dir, p.bounds, detail::initial_step(dir, p.bounds));
        auto ls = detail::armijo_search(p, r.x, r.f, g, dir, step, r.evaluations, false);
        if (!ls.ok) {
            r.line_search_failed = true;
            break;
        }
        ++r.iterations;
        Vec g_new(D);
        const double f_new = p.gradient(ls.x, g_new);
        ++r.evaluations;
        if (!std::isfinite(f_new) || !g_new.allFinite()) {
            r.line_search_failed = true;
            break;
        }
        const Vec s = ls.x - r.x;
        const Vec y = g_new - g;
        r.x = std::move(ls.x);
        r.f = f_new;
        g = std::move(g_new);
        pg = detail::projected_gradient(r.x, g, p.bounds);
        if (pg.cwiseAbs().maxCoeff() < grad_tol) break;
        const double sy = s.dot(y);
        if (sy > 1e-10) {
            if (!scaled) {
                H = Mat::Identity(D, D) * (sy / y.squaredNorm());
                scaled = true;
            }
            bfgs_update(H, s, y);
        }
    }
    return r;
}

enum class LocalMethod { cg, bfgs };

struct RestartConfig {
    int restarts = 2000;
    LocalConfig local{};
    long max_evals = 0;  // 0: unlimited; otherwise stop starting new runs once reached
};

/// Best of `restarts` local runs from uniform starting points.
inline RunResult restarted_local(const FitnessProblem& p, LocalMethod method,
                                 const RestartConfig& cfg, numerics::RngStream& rng) {
    if (cfg.restarts < 1) throw std::invalid_argument("restarted_local: restarts must be >= 1");
    p.bounds.validate();
    const auto start = std::chrono::steady_clock::now();
    RunResult out;
    out.best = p.bounds.lo;
    for (int r = 0; r < cfg.restarts; ++r) {
        if (cfg.max_evals > 0 && out.evaluations >= cfg.max_evals) break;
        Vec x0(p.dimension());
        for (Index d = 0; d < x0.size(); ++d) x0[d] = rng.uniform(p.bounds.lo[d], p.bounds.hi[d]);
        const LocalResult lr = method == LocalMethod::cg
                                   ? cg_minimize(p, x0, cfg.local.max_iters, cfg.local.grad_tol)
                                   : bfgs_minimize(p, x0, cfg.local.max_iters, cfg.local.grad_tol);
        out.evaluations += lr.evaluations;
        if (lr.f < out.value || (r == 0 && !std::isfinite(out.value))) {
            out.best = lr.x;
            out.value = lr.f;
        }
        const double ms =
            std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start)
                .count();
        out.trace.rows.push_back({r + 1, out.value, out.evaluations, ms, TraceEvent::none});
    }
    return out;
}

enum class Variant { standard, multistart, gradient, hybrid };

inline std::string_view to_string(Variant v) {
    switch (v) {
        case Variant::multistart: return "multistart";
        case Variant::gradient: return "gradient";
        case Variant::hybrid: return "hybrid";
        default: return "standard";
    }
}

/// Local refinement used by the gradient and hybrid variants; defaults to cg_minimize.
using Refiner = std::function<LocalResult(const FitnessProblem&, const Vec&)>;

namespace detail {

inline void scatter(SwarmState& s, const Bounds& b, numerics::RngStream& rng) {
    for (int i = 0; i < s.size(); ++i)
        for (Index d = 0; d < s.x.cols(); ++d) s.x(i, d) = rng.uniform(b.lo[d], b.hi[d]);
    s.v.setZero();
}

inline Vec evaluate_all(const FitnessProblem& p, const SwarmState& s, long& evals) {
    Vec f(s.size());
    for (int i = 0; i < s.size(); ++i) f[i] = safe_eval(p.objective, s.x.row(i).transpose());
    evals += s.size();
    return f;
}

/// Fresh positions become the personal bests; the global best is kept unless beaten.
inline void reset_bests(SwarmState& s, const Vec& f) {
    s.pbest = s.x;
    s.pbest_value = f;
    for (int i = 0; i < s.size(); ++i)
        if (s.pbest_value[i] < s.gbest_value) {
            s.gbest = s.pbest.row(i).transpose();
            s.gbest_value = s.pbest_value[i];
        }
}

}  // namespace detail

/// Shared swarm loop. On stagnation (N_eta == N_G) the variant decides between
/// reinitializing every particle and refining the global best locally.
inline RunResult run_swarm(const FitnessProblem& p, const PsoConfig& cfg, Variant variant,
                           Refiner refiner = {}) {
    cfg.validate();
    p.bounds.validate();
    const bool needs_gradient = variant == Variant::gradient || variant == Variant::hybrid;
    if (needs_gradient && !refiner && !p.has_gradient())
        throw MissingGradient("run_swarm: gradient-based variants need problem.gradient");
    if (!refiner)
        refiner = [&cfg](const FitnessProblem& prob, const Vec& x0) {
            return cg_minimize(prob, x0, cfg.refine.max_iters, cfg.refine.grad_tol);
        };

    const Index D = p.dimension();
    const auto start = std::chrono::steady_clock::now();
    numerics::RngStream rng(cfg.seed, 0);

    SwarmState s;
    s.x.resize(cfg.Np, D);
    s.v = Mat::Zero(cfg.Np, D);
    s.gbest = p.bounds.lo;
    long evals = 0;
    detail::scatter(s, p.bounds, rng);
    detail::reset_bests(s, detail::evaluate_all(p, s, evals));
    if (!std::isfinite(s.gbest_value)) s.gbest = s.pbest.row(0).transpose();

    RunResult out;
    const auto elapsed = [&] {
        return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start)
            .count();
    };
    out.trace.rows.push_back({0, s.gbest_value, evals, elapsed(), TraceEvent::none});

    double prev = s.gbest_value;
    while (s.t < cfg.Tmax) {
        TraceEvent event = TraceEvent::none;
        if (variant != Variant::standard && s.stagnation == cfg.N_G) {
            const bool restart =
                variant == Variant::multistart ||
                (variant == Variant::hybrid && s.t <= cfg.tau * static_cast<double>(cfg.Tmax));
            if (restart) {
                detail::scatter(s, p.bounds, rng);
                detail::reset_bests(s, detail::evaluate_all(p, s, evals));
                event = TraceEvent::restart;
            } else {
                const LocalResult lr = refiner(p, s.gbest);
                evals += lr.evaluations;
                if (lr.f <= s.gbest_value) {
                    s.gbest = p.bounds.clamp(lr.x);
                    s.gbest_value = lr.f;
                }
                event = TraceEvent::refine;
            }
            s.stagnation = 0;
        } else {
            if (s.gbest_value <= cfg.xi) break;
            for (int i = 0; i < cfg.Np; ++i) {
                for (Index d = 0; d < D; ++d) s.v(i, d) = step_velocity(s, i, d, cfg, rng);
                step_position(s, i, p.bounds);
            }
            assert((s.x.rowwise() - p.bounds.lo.transpose()).minCoeff() >= 0.0);
            assert((p.bounds.hi.transpose().replicate(cfg.Np, 1) - s.x).minCoeff() >= 0.0);
            update_bests(s, detail::evaluate_all(p, s, evals));
            if (std::abs(s.gbest_value - prev) <= cfg.eta)
                ++s.stagnation;
            else
                s.stagnation = 0;
        }
        prev = s.gbest_value;
        ++s.t;
        out.trace.rows.push_back({s.t, s.gbest_value, evals, elapsed(), event});
    }
    if (!std::isfinite(s.gbest_value))
        throw NoProgress("swarm found no finite objective value");
    out.best = s.gbest;
    out.value = s.gbest_value;
    out.evaluations = evals;
    return out;
}

inline RunResult run_standard(const FitnessProblem& p, const PsoConfig& cfg) {
    return run_swarm(p, cfg, Variant::standard);
}

inline RunResult run_multistart(const FitnessProblem& p, const PsoConfig& cfg) {
    return run_swarm(p, cfg, Variant::multistart);
}

inline RunResult run_gradient(const FitnessProblem& p, const PsoConfig& cfg, Refiner r = {}) {
    return run_swarm(p, cfg, Variant::gradient, std::move(r));
}

inline RunResult run_hybrid(const FitnessProblem& p, const PsoConfig& cfg, Refiner r = {}) {
    return run_swarm(p, cfg, Variant::hybrid, std::move(r));
}

}  // namespace cgpso::optim
