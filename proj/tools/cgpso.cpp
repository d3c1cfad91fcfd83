// cgpso: simulate benchmark systems, train and evaluate convolved-GP models, check
// gradients and run experiment grids.
//
// Exit codes: 0 success, 1 runtime or convergence failure, 2 usage or config error.

#include "cgpso/cgp.hpp"
#include "cgpso/cgp_io.hpp"
#include "cgpso/gradcheck.hpp"
#include "cgpso/harness.hpp"
#include "cgpso/optim.hpp"
#include "cgpso/systems.hpp"

#include "CLI11.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

using namespace cgpso;
namespace fs = std::filesystem;

namespace {

constexpr int kOk = 0;
constexpr int kFailure = 1;
constexpr int kUsage = 2;

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Globals {
    std::uint64_t seed = 0;
    bool seed_given = false;
    std::string out;
    int jobs = 1;
    bool force = false;
};

std::pair<double, double> parse_range(const std::string& s, const std::string& flag) {
    const auto colon = s.find(':');
    if (colon == std::string::npos) throw UsageError(flag + ": expected lo:hi, got '" + s + "'");
    try {
        std::size_t a = 0, b = 0;
        const std::string lo_s = s.substr(0, colon), hi_s = s.substr(colon + 1);
        const double lo = std::stod(lo_s, &a), hi = std::stod(hi_s, &b);
        if (a != lo_s.size() || b != hi_s.size()) throw std::invalid_argument(s);
        if (!(lo < hi)) throw UsageError(flag + ": need lo < hi");
        return {lo, hi};
    } catch (const UsageError&) {
        throw;
    } catch (const std::exception&) {
        throw UsageError(flag + ": expected lo:hi, got '" + s + "'");
    }
}

// ---------------------------------------------------------------- simulate

struct SimulateArgs {
    std::string system;
    int n = 0;
    double t_end = 10.0;
    double dt = 0.05;
    std::string u_range = "-2:4";
    std::string excitation = "uniform";
    std::string noise = "default";
    double noise_level = -1.0;
};

int cmd_simulate(const SimulateArgs& a, const Globals& g) {
    const auto kind = harness::parse_name(harness::system_names(), a.system);
    if (!kind) throw UsageError("simulate: unknown system '" + a.system + "'");
    harness::SystemSpec spec;
    spec.kind = *kind;
    spec.dt = a.dt;
    std::tie(spec.u_lo, spec.u_hi) = parse_range(a.u_range, "--u-range");
    if (spec.kind == harness::SystemKind::ltv) {
        if (!(a.dt > 0) || !(a.t_end > 0)) throw UsageError("simulate: --t-end and --dt must be > 0");
        spec.records = a.n > 0 ? a.n : static_cast<int>(std::lround(a.t_end / a.dt));
        spec.noise = {systems::NoiseKind::none, 0.0};
    } else {
        spec.records = a.n;
        if (spec.kind == harness::SystemKind::nltv_step || spec.kind == harness::SystemKind::nltv_curve)
            spec.noise = systems::NoiseSpec{};
    }
    if (spec.records < 0) throw UsageError("simulate: --n must be >= 1");
    if (a.excitation == "tracking") spec.excitation.kind = systems::Excitation::tracking;
    else if (a.excitation == "adaptive") spec.excitation.kind = systems::Excitation::adaptive;
    else if (a.excitation != "uniform") throw UsageError("simulate: --excitation uniform|tracking|adaptive");
    if (a.noise == "none") spec.noise.kind = systems::NoiseKind::none;
    else if (a.noise == "uniform") spec.noise.kind = systems::NoiseKind::uniform;
    else if (a.noise == "gaussian") spec.noise.kind = systems::NoiseKind::gaussian;
    else if (a.noise != "default") throw UsageError("simulate: --noise none|uniform|gaussian");
    if (spec.kind == harness::SystemKind::ltv && spec.noise.kind == systems::NoiseKind::uniform)
        throw UsageError("simulate: ltv noise is gaussian");
    if (a.noise_level >= 0) spec.noise.scale = a.noise_level;
    if (spec.kind == harness::SystemKind::ltv && a.noise == "gaussian" && a.noise_level < 0)
        spec.noise.scale = 0.01;

    const cgp::Dataset ds = harness::make_system_dataset(spec, g.seed);
    if (g.out.empty() || g.out == "-") {
        io::write_dataset_csv(std::cout, ds);
        std::cerr << "records: " << ds.block(0).X.rows() << '\n';
    } else {
        io::save_dataset(g.out, ds);
        std::cout << "records: " << ds.block(0).X.rows() << '\n';
    }
    return kOk;
}

// ---------------------------------------------------------------- train

struct TrainArgs {
    std::string data;
    std::string opt = "hybrid";
    std::string fitness = "mse";
    std::string range = "0:1";
    std::string val;
    double val_fraction = 0.2;
    int restarts = 2000;
    int np = 20;
    int tmax = 500;
    int q = 1;
    std::string trace;
};

harness::Optimizer optimizer_from(const std::string& s) {
    for (const auto& [name, o] : harness::optimizer_names())
        if (s == name || "pso_" + s == name) return o;
    if (s == "cg") return harness::Optimizer::cg_restarts;
    if (s == "bfgs") return harness::Optimizer::bfgs_restarts;
    throw UsageError("train: unknown optimizer '" + s +
                     "' (standard, multistart, gradient, hybrid, cg, bfgs)");
}

int cmd_train(const TrainArgs& a, const Globals& g) {
    const harness::Optimizer opt = optimizer_from(a.opt);
    const auto fit = harness::parse_name(harness::fitness_names(), a.fitness);
    if (!fit) throw UsageError("train: --fitness nll|mse");
    const auto [lo, hi] = parse_range(a.range, "--range");
    if (lo < 0) throw UsageError("--range: lower bound must be >= 0");
    if (a.q < 1 || a.np < 1 || a.tmax < 1 || a.restarts < 1)
        throw UsageError("train: --q, --np, --tmax and --restarts must be >= 1");
    if (!(a.val_fraction > 0 && a.val_fraction < 1)) throw UsageError("train: --val-fraction in (0,1)");

    const cgp::Dataset all = io::load_dataset(a.data);
    cgp::Dataset train = all, val;
    if (*fit == harness::Fitness::mse) {
        if (!a.val.empty()) {
            val = io::load_dataset(a.val, all.num_outputs());
        } else {
            // Seeded split of each output's rows.
            numerics::RngStream rng(g.seed, 61);
            std::vector<std::vector<Index>> tr, va;
            for (int d = 0; d < all.num_outputs(); ++d) {
                const Index n = all.block(d).X.rows();
                const auto perm = rng.permutation(n);
                const auto nv = static_cast<Index>(std::lround(a.val_fraction * static_cast<double>(n)));
                if (n >= 2 && (nv < 1 || nv >= n))
                    throw UsageError("train: --val-fraction leaves an empty part");
                va.emplace_back(perm.begin(), perm.begin() + nv);
                tr.emplace_back(perm.begin() + nv, perm.end());
            }
            train = all.select(tr);
            val = all.select(va);
        }
    }
    const cgp::KernelConfig kc{train.input_dim(), train.num_outputs(), a.q};

    harness::ExperimentConfig cfg;
    cfg.pso.Np = a.np;
    cfg.pso.Tmax = a.tmax;
    cfg.local.restarts = a.restarts;
    cfg.local.match_budget = false;
    for (int c = 0; c < 3; ++c) {
        cfg.range.lo[c] = lo;
        cfg.range.hi[c] = hi;
    }
    optim::FitnessProblem p;
    p.bounds = harness::make_bounds(kc, cfg.range);
    std::optional<cgp::NllObjective> nll;
    std::optional<cgp::MseObjective> mse;
    if (*fit == harness::Fitness::nll) {
        nll.emplace(kc, train);
        p.objective = [&](const Vec& x) { return (*nll)(x); };
        p.gradient = [&](const Vec& x, Vec& gr) { return nll->value_and_gradient(x, gr); };
    } else {
        mse.emplace(kc, train, val);
        p.objective = [&](const Vec& x) { return (*mse)(x); };
        p.gradient = [&](const Vec& x, Vec& gr) { return mse->value_and_gradient(x, gr); };
    }
    const optim::RunResult r = harness::run_optimizer(opt, p, cfg, g.seed);
    if (!std::isfinite(r.value)) throw optim::NoProgress("no finite objective value found");

    const std::string model_path = g.out.empty() ? "model.txt" : g.out;
    io::save_model(model_path, kc, r.best, train);
    const std::string trace_path = a.trace.empty() ? model_path + ".trace.csv" : a.trace;
    {
        std::ofstream os(trace_path);
        if (!os) throw std::runtime_error("cannot write " + trace_path);
        r.trace.write_csv(os, false);
    }
    const cgp::TrainedModel m(kc, cgp::Hyperparameters::unflatten(kc, r.best), train);
    const Vec per = cgp::mse_per_output(train, m);
    std::printf("final fitness (%s): %.10g\n", a.fitness.c_str(), r.value);
    for (Index d = 0; d < per.size(); ++d) std::printf("train mse y%ld: %.6e\n", static_cast<long>(d + 1), per[d]);
    std::printf("evaluations: %ld\nmodel: %s\ntrace: %s\n", r.evaluations, model_path.c_str(), trace_path.c_str());
    return kOk;
}

// ---------------------------------------------------------------- evaluate

int cmd_evaluate(const std::string& model_path, const std::string& data_path, const Globals& g) {
    const io::ModelDocument doc = io::load_model(model_path);
    const cgp::Dataset data = io::load_dataset(data_path, doc.cfg.M);
    if (data.input_dim() != doc.cfg.n || data.num_outputs() != doc.cfg.M) {
        std::cerr << "error: data has n=" << data.input_dim() << ", M=" << data.num_outputs()
                  << " but the model expects n=" << doc.cfg.n << ", M=" << doc.cfg.M << '\n';
        return kFailure;
    }
    const cgp::Hyperparameters th = cgp::Hyperparameters::unflatten(doc.cfg, doc.theta);
    const cgp::TrainedModel m(doc.cfg, th, doc.train);
    const Vec per = cgp::mse_per_output(data, m);
    const double nll = cgp::nll(data, th, doc.cfg);
    std::ostringstream csv;
    csv << "output_index,mse,n_points\n";
    for (int d = 0; d < doc.cfg.M; ++d)
        csv << d << ',' << io::fmt17(per[d]) << ',' << data.block(d).X.rows() << '\n';
    if (!g.out.empty()) {
        std::ofstream os(g.out);
        if (!os) throw std::runtime_error("cannot write " + g.out);
        os << csv.str();
    }
    std::cout << csv.str();
    std::printf("nll: %.10g\n", nll);
    return kOk;
}

// ---------------------------------------------------------------- gradcheck

int cmd_gradcheck(const std::string& data_path, const std::string& objective, int q, const Globals& g) {
    if (objective != "nll" && objective != "mse" && objective != "both")
        throw UsageError("gradcheck: --objective nll|mse|both");
    const cgp::Dataset data = io::load_dataset(data_path);
    if (data.size() > 20)
        throw UsageError("gradcheck: dataset has " + std::to_string(data.size()) +
                         " rows; at most 20 are allowed");
    const cgp::KernelConfig kc{data.input_dim(), data.num_outputs(), q};
    numerics::RngStream rng(g.seed, 71);
    const Vec theta = gradcheck::random_theta(kc, rng);
    constexpr double tol = 1e-5;
    bool ok = true;
    const auto report = [&](const char* name, const gradcheck::Result& r) {
        std::printf("%s: max relative error %.3e (%s)\n", name, r.max_error, r.passed(tol) ? "pass" : "FAIL");
        if (r.passed(tol)) return;
        ok = false;
        std::printf("%6s %6s %16s %16s %12s\n", "index", "class", "analytic", "fd", "error");
        for (const auto& row : r.rows)
            std::printf("%6ld %6d %16.8e %16.8e %12.3e\n", static_cast<long>(row.index), row.param_class,
                        row.analytic, row.fd, row.error);
    };
    if (objective != "mse") report("nll_grad", gradcheck::check_nll(data, kc, theta));
    if (objective != "nll") report("mse_grad", gradcheck::check_mse(data, data, kc, theta));
    return ok ? kOk : kFailure;
}

// ---------------------------------------------------------------- experiment

int cmd_experiment(const std::string& config_path, int seeds, const Globals& g) {
    harness::ExperimentConfig cfg;
    try {
        cfg = harness::load_config(config_path);
        if (seeds > 0) cfg.n_seeds = seeds;
        if (g.seed_given) cfg.seed = g.seed;
        cfg.validate();
    } catch (const harness::ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kUsage;
    }
    const std::string dir = !g.out.empty() ? g.out : (!cfg.output_dir.empty() ? cfg.output_dir : "results/" + cfg.name);
    if (!harness::directory_is_empty(dir) && !g.force) {
        std::cerr << "error: output directory " << dir << " is not empty (use --force)\n";
        return kFailure;
    }
    if (g.force && fs::exists(dir)) {
        for (const char* f : {"raw.csv", "aggregate.csv", "timing.csv", "config.json", "report.txt"})
            fs::remove(fs::path(dir) / f);
        fs::remove_all(fs::path(dir) / "traces");
    }
    const auto progress = [](std::size_t done, std::size_t total, const harness::CellResult& c) {
        std::fprintf(stderr, "[%zu/%zu] %s %s seed %llu: %s\n", done, total,
                     harness::to_string(c.optimizer).c_str(), harness::to_string(c.fitness).c_str(),
                     static_cast<unsigned long long>(c.seed),
                     c.ok ? ("test mse " + std::to_string(c.test_mse)).c_str() : c.reason.c_str());
    };
    const harness::ExperimentReport rep = harness::run_experiment(cfg, g.jobs, progress);
    harness::write_outputs(rep, dir);
    harness::write_report_txt(std::cout, rep);
    std::cout << "\nwrote " << dir << '\n';
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    harness::tune_allocator();
    CLI::App app{"cgpso: convolved-GP models trained by particle swarms"};
    app.require_subcommand(1);
    app.fallthrough();
    Globals g;
    app.add_option("--seed", g.seed, "Random seed")->each([&](const std::string&) { g.seed_given = true; });
    app.add_option("--out", g.out, "Output file or directory");
    app.add_option("--jobs", g.jobs, "Concurrent grid cells")->check(CLI::Range(1, 1024));
    app.add_flag("--force", g.force, "Overwrite a non-empty output directory");

    SimulateArgs sim;
    auto* s = app.add_subcommand("simulate", "Simulate a benchmark system and write a dataset CSV");
    s->add_option("system", sim.system, "narx | narx2-linear | narx2-nonlinear | ltv | nltv-step | nltv-curve")
        ->required();
    s->add_option("--n", sim.n, "Number of regression rows");
    s->add_option("--t-end", sim.t_end, "LTV horizon");
    s->add_option("--dt", sim.dt, "LTV sampling period");
    s->add_option("--u-range", sim.u_range, "NARX input range lo:hi");
    s->add_option("--excitation", sim.excitation, "NLTV input: uniform | tracking | adaptive");
    s->add_option("--noise", sim.noise, "none | uniform | gaussian");
    s->add_option("--noise-level", sim.noise_level, "Noise scale");

    TrainArgs tr;
    auto* t = app.add_subcommand("train", "Learn hyperparameters for a dataset");
    t->add_option("data", tr.data, "Dataset CSV")->required();
    t->add_option("--opt", tr.opt, "standard | multistart | gradient | hybrid | cg | bfgs");
    t->add_option("--fitness", tr.fitness, "nll | mse");
    t->add_option("--range", tr.range, "Search range lo:hi for every hyperparameter");
    t->add_option("--val", tr.val, "Validation CSV for the mse fitness");
    t->add_option("--val-fraction", tr.val_fraction, "Held-out fraction when --val is absent");
    t->add_option("--restarts", tr.restarts, "Local-search restarts for cg and bfgs");
    t->add_option("--np", tr.np, "Swarm size");
    t->add_option("--tmax", tr.tmax, "Swarm iterations");
    t->add_option("--q", tr.q, "Latent functions");
    t->add_option("--trace", tr.trace, "Trace CSV path");

    std::string model_path, eval_data;
    auto* e = app.add_subcommand("evaluate", "Per-output MSE and NLL of a model on a dataset");
    e->add_option("model", model_path, "Model file")->required();
    e->add_option("data", eval_data, "Dataset CSV")->required();

    std::string gc_data, gc_objective = "both";
    int gc_q = 1;
    auto* gc = app.add_subcommand("gradcheck", "Compare analytic gradients with finite differences");
    gc->add_option("data", gc_data, "Dataset CSV with at most 20 rows")->required();
    gc->add_option("--objective", gc_objective, "nll | mse | both");
    gc->add_option("--q", gc_q, "Latent functions");

    std::string config_path;
    int seeds = 0;
    auto* x = app.add_subcommand("experiment", "Run an experiment grid from a JSON config");
    x->add_option("config", config_path, "Experiment config")->required();
    x->add_option("--seeds", seeds, "Override the number of seeds")->check(CLI::PositiveNumber);

    try {
        app.parse(argc, argv);
    } catch (const CLI::Success& ex) {
        return app.exit(ex);
    } catch (const CLI::ParseError& ex) {
        app.exit(ex);
        return kUsage;
    }

    try {
        if (*s) return cmd_simulate(sim, g);
        if (*t) return cmd_train(tr, g);
        if (*e) return cmd_evaluate(model_path, eval_data, g);
        if (*gc) return cmd_gradcheck(gc_data, gc_objective, gc_q, g);
        if (*x) return cmd_experiment(config_path, seeds, g);
    } catch (const UsageError& ex) {
        std::cerr << "usage error: " << ex.what() << "\n\n" << app.help();
        return kUsage;
    } catch (const optim::NoProgress& ex) {
        std::cerr << "error: " << ex.what() << '\n';
        return kFailure;
    } catch (const std::exception& ex) {
        std::cerr << "error: " << ex.what() << '\n';
        return kFailure;
    }
    return kUsage;
}
