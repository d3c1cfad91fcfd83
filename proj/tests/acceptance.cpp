// Acceptance runner. Prints one "PASS criterion N: ..." or "FAIL criterion N: ..."
// line per criterion and exits 1 if any evaluated criterion failed.
//
//   acceptance [--criterion N]... [--config-dir DIR] [--out DIR] [--jobs J]

#include "cgpso/cgp.hpp"
#include "cgpso/gradcheck.hpp"
#include "cgpso/harness.hpp"
#include "cgpso/optim.hpp"
#include "oracles.hpp"

#include "CLI11.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <numbers>
#include <sstream>
#include <string>

#ifndef CGPSO_CONFIG_DIR
#define CGPSO_CONFIG_DIR "configs"
#endif

using namespace cgpso;
using numerics::RngStream;
namespace fs = std::filesystem;
namespace h = cgpso::harness;

namespace {

struct Verdict {
    bool pass = false;
    std::string detail;
};

struct Context {
    std::string config_dir = CGPSO_CONFIG_DIR;
    std::string out_dir = "acceptance_out";
    int jobs = 1;
};

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

std::string sci(double v) { return fmt("%.3g", v); }

h::ExperimentConfig load(const Context& ctx, const std::string& name) {
    return h::load_config((fs::path(ctx.config_dir) / name).string());
}

h::ExperimentReport run(const Context& ctx, const h::ExperimentConfig& cfg) {
    const auto progress = [](std::size_t done, std::size_t total, const h::CellResult&) {
        if (done % 10 == 0 || done == total) std::fprintf(stderr, "  %s: %zu/%zu cells\n", "grid", done, total);
    };
    h::ExperimentReport rep = h::run_experiment(cfg, ctx.jobs, progress);
    const fs::path dir = fs::path(ctx.out_dir) / cfg.name;
    fs::remove_all(dir);
    h::write_outputs(rep, dir.string());
    return rep;
}

const h::AggregateRow* find(const h::ExperimentReport& rep, h::Optimizer o, h::Fitness f, double sweep = 0.0) {
    for (const auto& a : rep.aggregates)
        if (a.optimizer == o && a.fitness == f && a.sweep_value == sweep) return &a;
    return nullptr;
}

double median_mse(const h::ExperimentReport& rep, h::Optimizer o, h::Fitness f, double sweep = 0.0) {
    const auto* a = find(rep, o, f, sweep);
    return a && a->n_ok > 0 ? a->test_mse.median : optim::kInf;
}

int failed_cells(const h::ExperimentReport& rep) {
    int n = 0;
    for (const auto& c : rep.cells) n += c.ok ? 0 : 1;
    return n;
}

// ---------------------------------------------------------------- 1-6

Verdict gradients(const Context&) {
    const auto start = std::chrono::steady_clock::now();
    RngStream rng(101, 0);
    double worst = 0.0;
    for (int t = 0; t < 20; ++t) {
        const int M = 1 + t % 2, n = 1 + (t / 2) % 3;
        const auto p = oracle::random_problem(M, 1, n, 15, rng);
        const Vec theta = p.theta.flatten();
        worst = std::max(worst, gradcheck::check_nll(p.train, p.cfg, theta).max_error);
        worst = std::max(worst, gradcheck::check_mse(p.train, p.eval, p.cfg, theta).max_error);
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return {worst < 1e-5 && secs < 30.0,
            "max relative error " + sci(worst) + " over 20 problems in " + fmt("%.2f", secs) + " s"};
}

Verdict se_reduction(const Context&) {
    const auto start = std::chrono::steady_clock::now();
    RngStream rng(102, 0);
    double worst = 0.0;
    for (int t = 0; t < 1000; ++t) {
        const cgp::KernelConfig c{1 + t % 3, 1, 1};
        const cgp::Hyperparameters th = oracle::random_theta(c, rng, 0.1, 5.0);
        Vec s(c.n), x(c.n), x2(c.n);
        double det = 1.0;
        for (int i = 0; i < c.n; ++i) {
            s[i] = 2.0 / th.alpha(0, i) + 1.0 / th.beta(0, i);
            det *= s[i];
            x[i] = rng.uniform(-2, 2);
            x2[i] = rng.uniform(-2, 2);
        }
        const double var = th.nu(0, 0) * th.nu(0, 0) * th.upsilon[0] *
                           std::pow(2 * std::numbers::pi, -c.n / 2.0) / std::sqrt(det);
        worst = std::max(worst, std::abs(cgp::cross_cov(x, x2, 0, 0, th, c) - oracle::se_kernel(x, x2, var, s)));
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return {worst < 1e-12 && secs < 5.0, "max abs difference " + sci(worst) + " on 1000 pairs"};
}

Verdict covariance(const Context&) {
    const auto start = std::chrono::steady_clock::now();
    RngStream rng(103, 0);
    double worst = 0.0;
    for (int t = 0; t < 50; ++t) {
        const auto p = oracle::random_problem(2, 1 + t % 2, 1 + t % 3, 12, rng);
        const Mat K = cgp::build_K_yy(p.train, p.theta, p.cfg);
        worst = std::max(worst, (K - oracle::covariance(p.train, p.theta)).cwiseAbs().maxCoeff());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return {worst < 1e-12 && secs < 5.0, "max abs difference " + sci(worst) + " on 50 two-output datasets"};
}

// Inputs at least `gap` apart across all outputs, so the pinned-noise system stays
// well conditioned.
cgp::Dataset separated_dataset(int n, int M, Index per_output, double gap, RngStream& rng) {
    std::vector<Vec> pts;
    std::vector<cgp::OutputBlock> blocks;
    for (int d = 0; d < M; ++d) {
        cgp::OutputBlock b{Mat(per_output, n), Vec(per_output)};
        for (Index r = 0; r < per_output; ++r) {
            Vec x(n);
            bool ok = false;
            while (!ok) {
                for (int i = 0; i < n; ++i) x[i] = rng.uniform(-3.0, 3.0);
                ok = true;
                for (const auto& q : pts) ok = ok && (q - x).norm() >= gap;
            }
            pts.push_back(x);
            b.X.row(r) = x.transpose();
            b.y[r] = std::sin(2.0 * x[0]) + 0.3 * rng.normal();
        }
        blocks.push_back(std::move(b));
    }
    return cgp::Dataset(n, std::move(blocks));
}

Verdict interpolation(const Context&) {
    RngStream rng(104, 0);
    double mean_err = 0.0, var_max = 0.0;
    for (int t = 0; t < 20; ++t) {
        const int M = 1 + t % 2, n = 1 + t % 3;
        const cgp::KernelConfig c{n, M, 1};
        const cgp::Dataset d = separated_dataset(n, M, 6, 0.3, rng);
        cgp::Hyperparameters th = cgp::Hyperparameters::filled(c, 1.0);
        for (int k = 0; k < M; ++k)
            for (int i = 0; i < n; ++i) th.alpha(k, i) = 100.0;
        for (int i = 0; i < n; ++i) th.beta(0, i) = 100.0;
        for (int k = 0; k < M; ++k) th.sigma2[k] = 1e-12;
        const cgp::TrainedModel m(c, th, d);
        for (int k = 0; k < M; ++k) {
            const cgp::Prediction p = cgp::predict(m, d.block(k).X, k);
            mean_err = std::max(mean_err, (p.mean - d.block(k).y).cwiseAbs().maxCoeff());
            var_max = std::max(var_max, p.variance.maxCoeff());
        }
    }
    return {mean_err < 1e-6 && var_max < 1e-6,
            "max |mean - y| " + sci(mean_err) + ", max variance " + sci(var_max) + " on 20 datasets"};
}

optim::FitnessProblem rastrigin(Index D) {
    optim::FitnessProblem p;
    p.objective = [](const Vec& x) {
        double s = 10.0 * static_cast<double>(x.size());
        for (Index i = 0; i < x.size(); ++i) s += x[i] * x[i] - 10.0 * std::cos(2 * std::numbers::pi * x[i]);
        return s;
    };
    p.gradient = [f = p.objective](const Vec& x, Vec& g) {
        g.resize(x.size());
        for (Index i = 0; i < x.size(); ++i) g[i] = 2 * x[i] + 20 * std::numbers::pi * std::sin(2 * std::numbers::pi * x[i]);
        return f(x);
    };
    p.bounds = optim::Bounds::uniform(D, -5.12, 5.12);
    return p;
}

// A small NLL problem so the optimizer checks also cover the real objective.
struct NllProblem {
    cgp::KernelConfig cfg{1, 2, 1};
    cgp::NllObjective obj;
    optim::FitnessProblem p;

    explicit NllProblem(RngStream& rng)
        : obj(cfg, oracle::random_dataset(1, {8, 8}, rng)) {
        p.objective = [this](const Vec& x) { return obj(x); };
        p.gradient = [this](const Vec& x, Vec& g) { return obj.value_and_gradient(x, g); };
        p.bounds = h::make_bounds(cfg, h::RangeSpec{});
    }
};

Verdict degeneracies(const Context&) {
    RngStream rng(105, 0);
    NllProblem nllp(rng);
    int checks = 0, bad = 0;
    for (std::uint64_t seed = 0; seed < 6; ++seed) {
        const bool use_nll = seed % 2 == 1;
        const optim::FitnessProblem p = use_nll ? nllp.p : rastrigin(3);
        optim::PsoConfig c;
        c.Tmax = use_nll ? 40 : 120;
        c.N_G = 4;
        c.seed = seed;
        optim::PsoConfig h0 = c, h1 = c, never = c;
        h0.tau = 0.0;
        h1.tau = 1.0;
        never.N_G = c.Tmax + 1;
        const bool eqs[] = {
            optim::run_hybrid(p, h0).trace.same_trajectory(optim::run_gradient(p, c).trace),
            optim::run_hybrid(p, h1).trace.same_trajectory(optim::run_multistart(p, c).trace),
            optim::run_multistart(p, never).trace.same_trajectory(optim::run_standard(p, c).trace)};
        for (bool e : eqs) {
            ++checks;
            bad += e ? 0 : 1;
        }
    }
    return {bad == 0, std::to_string(checks - bad) + "/" + std::to_string(checks) + " trace equalities hold"};
}

Verdict monotone(const Context&) {
    RngStream rng(106, 0);
    NllProblem nllp(rng);
    int traces = 0, bad_traces = 0;
    for (std::uint64_t seed = 0; seed < 4; ++seed) {
        const optim::FitnessProblem p = seed % 2 ? nllp.p : rastrigin(4);
        optim::PsoConfig c;
        c.Tmax = 60;
        c.N_G = 5;
        c.seed = seed;
        for (const auto& r : {optim::run_standard(p, c), optim::run_multistart(p, c), optim::run_gradient(p, c),
                              optim::run_hybrid(p, c)}) {
            ++traces;
            bad_traces += r.trace.non_increasing() ? 0 : 1;
        }
    }
    double worst = 0.0;
    for (int t = 0; t < 40; ++t) {
        const Index D = 1 + static_cast<Index>(rng.below(8));
        Mat a(D, D);
        for (Index i = 0; i < a.size(); ++i) a(i) = rng.normal();
        const Mat A = a * a.transpose() + Mat::Identity(D, D);
        optim::FitnessProblem q;
        q.objective = [A](const Vec& x) { return 0.5 * x.dot(A * x); };
        q.gradient = [A](const Vec& x, Vec& g) {
            g = A * x;
            return 0.5 * x.dot(g);
        };
        q.bounds = optim::Bounds::uniform(D, -10, 10);
        Vec x0(D);
        for (Index i = 0; i < D; ++i) x0[i] = rng.uniform(-5, 5);
        for (int method = 0; method < 2; ++method) {
            const optim::LocalResult r =
                method == 0 ? optim::cg_minimize(q, x0, 500, 1e-9) : optim::bfgs_minimize(q, x0, 500, 1e-9);
            Vec g;
            q.gradient(r.x, g);
            worst = std::max(worst, g.cwiseAbs().maxCoeff());
        }
    }
    return {bad_traces == 0 && worst < 1e-8,
            std::to_string(traces - bad_traces) + "/" + std::to_string(traces) +
                " traces non-increasing; worst local |grad|_inf " + sci(worst)};
}

// ---------------------------------------------------------------- 7-12

Verdict population(const Context& ctx) {
    h::ExperimentConfig cfg = load(ctx, "narx_population.json");
    cfg.fitness = {h::Fitness::mse};
    const auto rep = run(ctx, cfg);
    std::string d;
    bool mono = true;
    double prev = optim::kInf;
    for (double np : cfg.sweep.values) {
        const double m = median_mse(rep, h::Optimizer::pso_standard, h::Fitness::mse, np);
        d += "Np=" + fmt("%g", np) + " " + sci(m) + "; ";
        mono = mono && m <= prev;
        prev = m;
    }
    const double at20 = median_mse(rep, h::Optimizer::pso_standard, h::Fitness::mse, 20);
    return {mono && at20 < 0.05, d + "median test MSE non-increasing: " + (mono ? "yes" : "no")};
}

Verdict two_output(const Context& ctx) {
    bool pass = true;
    std::string d;
    for (const char* name : {"narx2_linear.json", "narx2_nonlinear.json"}) {
        h::ExperimentConfig cfg = load(ctx, name);
        cfg.optimizers = {h::Optimizer::pso_standard, h::Optimizer::pso_hybrid};
        const auto rep = run(ctx, cfg);
        double best = optim::kInf;
        std::string best_name;
        for (h::Optimizer o : cfg.optimizers) {
            const auto* a = find(rep, o, h::Fitness::mse);
            if (!a || a->n_ok == 0) continue;
            double worst_out = 0.0;
            for (const auto& s : a->mse_out) worst_out = std::max(worst_out, s.median);
            if (worst_out < best) {
                best = worst_out;
                best_name = h::to_string(o);
            }
        }
        pass = pass && best < 1e-4;
        d += cfg.name + ": " + best_name + " worst per-output median " + sci(best) + "; ";
    }
    return {pass, d};
}

Verdict variant_order(const Context& ctx) {
    h::ExperimentConfig cfg = load(ctx, "ltv_variants.json");
    cfg.fitness = {h::Fitness::mse};
    const auto rep = run(ctx, cfg);
    std::map<h::Optimizer, double> m;
    std::string d;
    for (h::Optimizer o : cfg.optimizers) {
        m[o] = median_mse(rep, o, h::Fitness::mse);
        d += h::to_string(o) + " " + sci(m[o]) + "; ";
    }
    using O = h::Optimizer;
    bool pass = m[O::pso_hybrid] <= m[O::pso_gradient] && m[O::pso_hybrid] <= m[O::pso_multistart] &&
                m[O::pso_hybrid] < m[O::pso_standard];
    for (O o : {O::pso_multistart, O::pso_gradient, O::pso_hybrid})
        pass = pass && m[o] <= m[O::cg_restarts] && m[o] <= m[O::bfgs_restarts];
    return {pass, d};
}

Verdict search_range(const Context& ctx) {
    const h::ExperimentConfig cfg = load(ctx, "narx_search_range.json");
    const auto rep = run(ctx, cfg);
    using O = h::Optimizer;
    std::string d;
    bool small_ok = true;
    for (O o : {O::pso_standard, O::cg_restarts, O::bfgs_restarts}) {
        const double v = median_mse(rep, o, h::Fitness::mse, 1);
        small_ok = small_ok && v < 1e-4;
        d += "[0,1] " + h::to_string(o) + " " + sci(v) + "; ";
    }
    const double pso = median_mse(rep, O::pso_standard, h::Fitness::mse, 100);
    const double local = std::min(median_mse(rep, O::cg_restarts, h::Fitness::mse, 100),
                                  median_mse(rep, O::bfgs_restarts, h::Fitness::mse, 100));
    d += "[0,100] pso " + sci(pso) + " vs best restarted local " + sci(local);
    return {small_ok && pso * 10.0 <= local, d};
}

Verdict training_size(const Context& ctx) {
    const h::ExperimentConfig cfg = load(ctx, "nltv_step_sizes.json");
    const auto rep = run(ctx, cfg);
    bool dec = true, slower = true;
    std::string d;
    for (std::size_t i = 0; i < rep.sizes.size(); ++i) {
        const auto& r = rep.sizes[i];
        d += std::to_string(r.size) + ": " + sci(r.median_mse) + " " + fmt("%.0f", r.median_wall_ms) + " ms; ";
        if (i > 0) {
            dec = dec && r.median_mse < rep.sizes[i - 1].median_mse;
            slower = slower && r.median_wall_ms > rep.sizes[i - 1].median_wall_ms;
        }
    }
    const double ratio = rep.sizes.empty() ? 0.0 : rep.sizes.front().median_mse / rep.sizes.back().median_mse;
    d += "ratio " + fmt("%.1f", ratio) + "x; strictly decreasing " + (dec ? "yes" : "no") +
         "; wall-clock strictly increasing " + (slower ? "yes" : "no");
    return {!rep.sizes.empty() && dec && slower && ratio >= 100.0 && failed_cells(rep) == 0, d};
}

Verdict nll_vs_mse(const Context& ctx) {
    const h::ExperimentConfig cfg = load(ctx, "nll_vs_mse.json");
    const auto rep = run(ctx, cfg);
    if (rep.nll_vs_mse.empty()) return {false, "no summary produced"};
    const auto& s = rep.nll_vs_mse.front();
    const std::string d = "[0," + fmt("%g", s.range_a) + "] NLL " + sci(s.median_nll_a) + " MSE " + sci(s.median_mse_a) +
                          "; [0," + fmt("%g", s.range_b) + "] NLL " + sci(s.median_nll_b) + " MSE " +
                          sci(s.median_mse_b) + "; orderings disagree on " + std::to_string(s.disagreements) + "/" +
                          std::to_string(s.seeds.size()) + " seeds";
    const bool shows_both = !s.seeds.empty() && std::isfinite(s.median_nll_a) && std::isfinite(s.median_nll_b);
    return {shows_both && s.range_b == 1.0 && s.median_mse_b < s.median_mse_a, d};
}

// ---------------------------------------------------------------- 13

std::string raw_bytes(const h::ExperimentConfig& cfg, int jobs) {
    const h::ExperimentReport rep = h::run_experiment(cfg, jobs);
    std::ostringstream os;
    h::write_raw_csv(os, rep.cells, rep.outputs);
    return os.str();
}

Verdict determinism(const Context& ctx) {
    int same = 0, total = 0;
    std::string bad;
    for (const auto& entry : fs::directory_iterator(ctx.config_dir)) {
        if (entry.path().extension() != ".json") continue;
        h::ExperimentConfig cfg = h::load_config(entry.path().string());
        // Shrunk so every bundled config fits in a few seconds.
        cfg.n_seeds = 2;
        cfg.pso.Tmax = 12;
        cfg.pso.Np = std::min(cfg.pso.Np, 6);
        cfg.pso.N_G = 3;
        if (cfg.sweep.param == "Np" || cfg.sweep.param == "Tmax")
            for (std::size_t i = 0; i < cfg.sweep.values.size(); ++i) cfg.sweep.values[i] = 4.0 + static_cast<double>(i);
        if (cfg.optimizers.size() > 3) cfg.optimizers.resize(3);
        cfg.validate();
        const std::string a = raw_bytes(cfg, 1), b = raw_bytes(cfg, 3), c = raw_bytes(cfg, 1);
        ++total;
        if (a == b && a == c && !a.empty()) ++same;
        else bad += entry.path().filename().string() + " ";
    }
    return {total > 0 && same == total,
            std::to_string(same) + "/" + std::to_string(total) +
                " configs give byte-identical raw.csv for jobs 1, 3 and a repeat" +
                (bad.empty() ? "" : "; differing: " + bad)};
}

}  // namespace

int main(int argc, char** argv) {
    h::tune_allocator();
    CLI::App app{"acceptance criteria"};
    Context ctx;
    std::vector<int> which;
    app.add_option("--criterion", which, "Criteria to run (default: all)")->check(CLI::Range(1, 13));
    app.add_option("--config-dir", ctx.config_dir, "Bundled experiment configs");
    app.add_option("--out", ctx.out_dir, "Directory for experiment outputs");
    app.add_option("--jobs", ctx.jobs, "Concurrent grid cells")->check(CLI::Range(1, 1024));
    CLI11_PARSE(app, argc, argv);

    const std::vector<std::function<Verdict(const Context&)>> criteria{
        gradients,     se_reduction, covariance,   interpolation, degeneracies, monotone,   population,
        two_output,    variant_order, search_range, training_size, nll_vs_mse,  determinism};
    if (which.empty())
        for (int i = 1; i <= 13; ++i) which.push_back(i);

    bool all = true;
    for (int n : which) {
        const auto start = std::chrono::steady_clock::now();
        Verdict v;
        try {
            v = criteria[static_cast<std::size_t>(n - 1)](ctx);
        } catch (const std::exception& e) {
            v = {false, std::string("error: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        std::printf("%s criterion %d: %s (%.1f s)\n", v.pass ? "PASS" : "FAIL", n, v.detail.c_str(), secs);
        std::fflush(stdout);
        all = all && v.pass;
    }
    return all ? 0 : 1;
}
