#pragma once

// Experiment grids: (sweep value x optimizer x fitness x seed) cells, each of which
// generates its data, optimizes the hyperparameters and scores the final model on a
// held-out split. Everything that reaches raw.csv is a pure function of the config.

#include "cgpso/cgp.hpp"
#include "cgpso/cgp_io.hpp"
#include "cgpso/optim.hpp"
#include "cgpso/systems.hpp"

#include "json.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace cgpso::harness {

using json = nlohmann::json;

/// Kernel matrices are allocated and freed on every objective evaluation. Keeping
/// them on the heap instead of fresh mmap pages roughly halves grid runtimes.
inline void tune_allocator() {
#if defined(__GLIBC__)
    mallopt(M_MMAP_THRESHOLD, 512 << 20);
    mallopt(M_TRIM_THRESHOLD, 512 << 20);
    mallopt(M_TOP_PAD, 64 << 20);
#endif
}

/// Schema violation; the message starts with the offending field path.
struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// ---------------------------------------------------------------- config

enum class SystemKind { narx, narx2_linear, narx2_nonlinear, ltv, nltv_step, nltv_curve };
enum class Fitness { nll, mse };
enum class Optimizer { pso_standard, pso_multistart, pso_gradient, pso_hybrid, cg_restarts, bfgs_restarts };
enum class ExperimentKind { grid, nll_vs_mse, training_size, convergence };

inline const std::vector<std::pair<std::string, SystemKind>>& system_names() {
    static const std::vector<std::pair<std::string, SystemKind>> v{
        {"narx", SystemKind::narx},           {"narx2-linear", SystemKind::narx2_linear},
        {"narx2-nonlinear", SystemKind::narx2_nonlinear}, {"ltv", SystemKind::ltv},
        {"nltv-step", SystemKind::nltv_step}, {"nltv-curve", SystemKind::nltv_curve}};
    return v;
}

inline const std::vector<std::pair<std::string, Optimizer>>& optimizer_names() {
    static const std::vector<std::pair<std::string, Optimizer>> v{
        {"pso_standard", Optimizer::pso_standard}, {"pso_multistart", Optimizer::pso_multistart},
        {"pso_gradient", Optimizer::pso_gradient}, {"pso_hybrid", Optimizer::pso_hybrid},
        {"cg_restarts", Optimizer::cg_restarts},   {"bfgs_restarts", Optimizer::bfgs_restarts}};
    return v;
}

inline const std::vector<std::pair<std::string, Fitness>>& fitness_names() {
    static const std::vector<std::pair<std::string, Fitness>> v{{"nll", Fitness::nll},
                                                                {"mse", Fitness::mse}};
    return v;
}

inline const std::vector<std::pair<std::string, ExperimentKind>>& kind_names() {
    static const std::vector<std::pair<std::string, ExperimentKind>> v{
        {"grid", ExperimentKind::grid},
        {"nll_vs_mse", ExperimentKind::nll_vs_mse},
        {"training_size", ExperimentKind::training_size},
        {"convergence", ExperimentKind::convergence}};
    return v;
}

template <typename E>
std::string name_of(const std::vector<std::pair<std::string, E>>& table, E e) {
    for (const auto& [n, v] : table)
        if (v == e) return n;
    return "?";
}

template <typename E>
std::optional<E> parse_name(const std::vector<std::pair<std::string, E>>& table,
                            const std::string& s) {
    for (const auto& [n, v] : table)
        if (n == s) return v;
    return std::nullopt;
}

inline std::string to_string(SystemKind k) { return name_of(system_names(), k); }
inline std::string to_string(Optimizer o) { return name_of(optimizer_names(), o); }
inline std::string to_string(Fitness f) { return name_of(fitness_names(), f); }
inline std::string to_string(ExperimentKind k) { return name_of(kind_names(), k); }

inline bool is_swarm(Optimizer o) {
    return o != Optimizer::cg_restarts && o != Optimizer::bfgs_restarts;
}

struct SystemSpec {
    SystemKind kind = SystemKind::narx;
    int records = 0;  // 0: per-system default
    double u_lo = -2.0, u_hi = 4.0;  // NARX input range
    double dt = 0.05;                // LTV sampling period
    systems::NoiseSpec noise{systems::NoiseKind::none, 0.0};
    systems::ExcitationSpec excitation{};
    std::optional<systems::RegressorSpec> regressors;

    int outputs() const {
        return kind == SystemKind::narx ? 1 : 2;
    }

    int default_records() const {
        switch (kind) {
            case SystemKind::ltv: return 200;
            case SystemKind::nltv_step: return 200;
            case SystemKind::nltv_curve: return 1500;
            default: return 1000;
        }
    }

    int effective_records() const { return records > 0 ? records : default_records(); }
};

enum class Holdout { split, rerun };

/// Row counts per output. With `split`, test rows come first in the shuffled order,
/// so growing `train` never changes the test set, and `test = 0` takes whatever is
/// left. With `rerun`, validation and test rows come from two further simulations
/// of the same system under other seeds, and `test = 0` takes a whole run.
struct SplitSpec {
    int train = 200;
    int val = 50;
    int test = 0;
    bool test_on_all = false;  // score on every record (train and val included)
    Holdout holdout = Holdout::split;
    bool train_in_time_order = false;  // rerun: first `train` records instead of a random draw
};

struct RangeSpec {
    double lo[3] = {0.0, 0.0, 0.0};  // coefficient, precision, noise
    double hi[3] = {1.0, 1.0, 1.0};
};

struct LocalSpec {
    int restarts = 2000;
    optim::LocalConfig local{};
    bool match_budget = true;  // cap at the swarm's Np * (Tmax + 1) evaluations
};

struct SweepSpec {
    std::string param;  // empty: no sweep
    std::vector<double> values;
};

struct ExperimentConfig {
    std::string name = "experiment";
    ExperimentKind kind = ExperimentKind::grid;
    SystemSpec system{};
    SplitSpec split{};
    int Q = 1;
    std::vector<Fitness> fitness{Fitness::mse};
    std::vector<Optimizer> optimizers{Optimizer::pso_standard};
    optim::PsoConfig pso{};
    LocalSpec local{};
    RangeSpec range{};
    SweepSpec sweep{};
    int n_seeds = 10;
    std::uint64_t seed = 0;
    bool traces = false;
    std::string output_dir;

    void validate() const;
};

inline constexpr double kBoundFloor = 1e-8;
inline const char* const kClassNames[3] = {"coefficient", "precision", "noise"};
inline const std::vector<std::string> kSweepParams{"Np", "Tmax", "N_G", "tau", "train_size",
                                                   "range_hi"};

/// Config with one sweep value substituted.
inline ExperimentConfig apply_sweep(ExperimentConfig cfg, double value) {
    const std::string& p = cfg.sweep.param;
    if (p == "Np") cfg.pso.Np = static_cast<int>(value);
    else if (p == "Tmax") cfg.pso.Tmax = static_cast<int>(value);
    else if (p == "N_G") cfg.pso.N_G = static_cast<int>(value);
    else if (p == "tau") cfg.pso.tau = value;
    else if (p == "train_size") cfg.split.train = static_cast<int>(value);
    else if (p == "range_hi")
        for (double& h : cfg.range.hi) h = value;
    return cfg;
}

inline void check_split(const ExperimentConfig& c, const std::string& where) {
    const int n = c.system.effective_records();
    const auto& s = c.split;
    if (s.train < 1) throw ConfigError(where + "split.train: must be >= 1");
    if (s.val < 0 || s.test < 0) throw ConfigError(where + "split: sizes must be >= 0");
    if (s.holdout == Holdout::rerun) {
        if (s.test_on_all) throw ConfigError(where + "split: test_on_all needs holdout split");
        if (s.train_in_time_order && s.train > n)
            throw ConfigError(where + "split.train: exceeds the records");
        if (s.train > n || s.val > n || s.test > n)
            throw ConfigError(where + "split: a part exceeds the " + std::to_string(n) + " records");
        return;
    }
    if (s.train_in_time_order) throw ConfigError(where + "split: train_in_time_order needs holdout rerun");
    const int used = s.train + s.val + (s.test_on_all ? 0 : s.test);
    if (used > n)
        throw ConfigError(where + "split: train + val + test = " + std::to_string(used) +
                          " exceeds the " + std::to_string(n) + " records");
    if (!s.test_on_all && s.test == 0 && used == n)
        throw ConfigError(where + "split: no records left for testing");
}

inline void ExperimentConfig::validate() const {
    if (n_seeds < 1) throw ConfigError("n_seeds: must be >= 1");
    if (Q < 1) throw ConfigError("kernel.Q: must be >= 1");
    if (fitness.empty()) throw ConfigError("fitness: at least one entry required");
    if (optimizers.empty()) throw ConfigError("optimizers: at least one entry required");
    for (Fitness f : fitness)
        if (f == Fitness::mse && split.val < 1)
            throw ConfigError("split.val: mse fitness needs a validation split");
    try {
        pso.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("pso: ") + e.what());
    }
    if (local.restarts < 1) throw ConfigError("local.restarts: must be >= 1");
    if (local.local.max_iters < 1) throw ConfigError("local.max_iters: must be >= 1");
    for (int c = 0; c < 3; ++c)
        if (!(range.lo[c] >= 0.0) || !(range.hi[c] > std::max(range.lo[c], kBoundFloor)))
            throw ConfigError(std::string("range.") + kClassNames[c] +
                              ": need 0 <= lo < hi");
    if (system.u_lo >= system.u_hi) throw ConfigError("system.u_range: need lo < hi");
    if (!(system.dt > 0)) throw ConfigError("system.dt: must be > 0");
    if (system.excitation.lo >= system.excitation.hi)
        throw ConfigError("system.excitation.range: need lo < hi");
    if (system.regressors) {
        if (system.kind != SystemKind::ltv && system.kind != SystemKind::nltv_step &&
            system.kind != SystemKind::nltv_curve)
            throw ConfigError("system.regressors: only ltv and nltv systems take regressors");
        try {
            system.regressors->validate(2, 2, system.kind == SystemKind::ltv);
        } catch (const std::invalid_argument& e) {
            throw ConfigError(std::string("system.regressors: ") + e.what());
        }
    }
    if (system.kind == SystemKind::ltv && system.noise.kind == systems::NoiseKind::uniform)
        throw ConfigError("system.noise.kind: ltv supports none or gaussian");
    if (!sweep.param.empty()) {
        if (std::find(kSweepParams.begin(), kSweepParams.end(), sweep.param) == kSweepParams.end())
            throw ConfigError("sweep.param: unknown parameter '" + sweep.param + "'");
        if (sweep.values.empty()) throw ConfigError("sweep.values: at least one value required");
        std::set<double> seen;
        for (double v : sweep.values)
            if (!seen.insert(v).second) throw ConfigError("sweep.values: duplicate value");
        for (std::size_t i = 0; i < sweep.values.size(); ++i) {
            const ExperimentConfig c = apply_sweep(*this, sweep.values[i]);
            const std::string where = "sweep.values[" + std::to_string(i) + "]: ";
            try {
                c.pso.validate();
            } catch (const std::invalid_argument& e) {
                throw ConfigError(where + e.what());
            }
            if (sweep.param == "range_hi" && !(sweep.values[i] > kBoundFloor))
                throw ConfigError(where + "range upper bound must be positive");
            check_split(c, where);
        }
    } else {
        check_split(*this, "");
    }
    if (kind == ExperimentKind::nll_vs_mse &&
        (sweep.param != "range_hi" || sweep.values.size() != 2))
        throw ConfigError("sweep: nll_vs_mse needs param range_hi with two values");
    if (kind == ExperimentKind::training_size && sweep.param != "train_size")
        throw ConfigError("sweep.param: training_size needs train_size");
    if (kind == ExperimentKind::convergence)
        for (Optimizer o : optimizers)
            if (!is_swarm(o)) throw ConfigError("optimizers: convergence runs are swarm-only");
}

// ---------------------------------------------------------------- JSON

namespace detail {

/// Object reader that remembers which keys were consumed, so leftovers can be
/// reported as unknown fields.
class Fields {
public:
    Fields(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(where() + "expected an object");
    }

    std::string where(const std::string& key = "") const {
        std::string p = path_;
        if (!key.empty()) p += (p.empty() ? "" : ".") + key;
        return p.empty() ? "" : p + ": ";
    }

    std::string child(const std::string& key) const {
        return path_.empty() ? key : path_ + "." + key;
    }

    const json* find(const std::string& key) {
        seen_.insert(key);
        const auto it = j_.find(key);
        return it == j_.end() ? nullptr : &*it;
    }

    double number(const std::string& key, double def) {
        const json* v = find(key);
        if (!v) return def;
        if (!v->is_number()) throw ConfigError(where(key) + "expected a number");
        return v->get<double>();
    }

    long integer(const std::string& key, long def) {
        const json* v = find(key);
        if (!v) return def;
        if (!v->is_number_integer()) throw ConfigError(where(key) + "expected an integer");
        return v->get<long>();
    }

    bool boolean(const std::string& key, bool def) {
        const json* v = find(key);
        if (!v) return def;
        if (!v->is_boolean()) throw ConfigError(where(key) + "expected true or false");
        return v->get<bool>();
    }

    std::string string(const std::string& key, const std::string& def) {
        const json* v = find(key);
        if (!v) return def;
        if (!v->is_string()) throw ConfigError(where(key) + "expected a string");
        return v->get<std::string>();
    }

    std::pair<double, double> pair(const std::string& key, std::pair<double, double> def) {
        const json* v = find(key);
        if (!v) return def;
        return as_pair(*v, child(key));
    }

    static std::pair<double, double> as_pair(const json& v, const std::string& path) {
        if (!v.is_array() || v.size() != 2 || !v[0].is_number() || !v[1].is_number())
            throw ConfigError(path + ": expected [lo, hi]");
        return {v[0].get<double>(), v[1].get<double>()};
    }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!seen_.count(it.key())) throw ConfigError(where(it.key()) + "unknown field");
    }

private:
    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

template <typename E>
E enum_field(const std::vector<std::pair<std::string, E>>& table, const json& v,
             const std::string& path) {
    if (!v.is_string()) throw ConfigError(path + ": expected a string");
    const auto e = parse_name(table, v.get<std::string>());
    if (!e) {
        std::string opts;
        for (const auto& [n, _] : table) opts += (opts.empty() ? "" : ", ") + n;
        throw ConfigError(path + ": unknown value '" + v.get<std::string>() + "' (one of " +
                          opts + ")");
    }
    return *e;
}

template <typename E>
std::vector<E> enum_list(const std::vector<std::pair<std::string, E>>& table, const json& v,
                         const std::string& path) {
    std::vector<E> out;
    if (v.is_string()) return {enum_field(table, v, path)};
    if (!v.is_array()) throw ConfigError(path + ": expected a string or a list of strings");
    for (std::size_t i = 0; i < v.size(); ++i) {
        const E e = enum_field(table, v[i], path + "[" + std::to_string(i) + "]");
        if (std::find(out.begin(), out.end(), e) != out.end())
            throw ConfigError(path + ": duplicate entry");
        out.push_back(e);
    }
    return out;
}

inline std::vector<std::vector<int>> lag_lists(const json& v, const std::string& path) {
    if (!v.is_array()) throw ConfigError(path + ": expected a list of lag lists");
    std::vector<std::vector<int>> out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        const std::string p = path + "[" + std::to_string(i) + "]";
        if (!v[i].is_array()) throw ConfigError(p + ": expected a list of integers");
        std::vector<int> lags;
        for (const auto& l : v[i]) {
            if (!l.is_number_integer()) throw ConfigError(p + ": expected a list of integers");
            lags.push_back(l.get<int>());
        }
        out.push_back(std::move(lags));
    }
    return out;
}

inline void parse_system(const json& j, SystemSpec& s) {
    Fields f(j, "system");
    const json* kind = f.find("kind");
    if (!kind) throw ConfigError("system.kind: required");
    s.kind = enum_field(system_names(), *kind, "system.kind");
    s.records = static_cast<int>(f.integer("records", 0));
    if (s.records < 0) throw ConfigError("system.records: must be >= 0");
    std::tie(s.u_lo, s.u_hi) = f.pair("u_range", {s.u_lo, s.u_hi});
    s.dt = f.number("dt", s.dt);
    if (s.kind == SystemKind::nltv_step || s.kind == SystemKind::nltv_curve)
        s.noise = systems::NoiseSpec{};
    if (const json* n = f.find("noise")) {
        Fields nf(*n, "system.noise");
        const std::string k = nf.string("kind", "none");
        if (k == "none") s.noise.kind = systems::NoiseKind::none;
        else if (k == "uniform") s.noise.kind = systems::NoiseKind::uniform;
        else if (k == "gaussian") s.noise.kind = systems::NoiseKind::gaussian;
        else throw ConfigError("system.noise.kind: one of none, uniform, gaussian");
        s.noise.scale = nf.number("level", s.noise.scale);
        if (!(s.noise.scale >= 0)) throw ConfigError("system.noise.scale: must be >= 0");
        nf.finish();
    }
    if (const json* e = f.find("excitation")) {
        Fields ef(*e, "system.excitation");
        const std::string k = ef.string("kind", "uniform");
        if (k == "uniform") s.excitation.kind = systems::Excitation::uniform;
        else if (k == "tracking") s.excitation.kind = systems::Excitation::tracking;
        else if (k == "adaptive") s.excitation.kind = systems::Excitation::adaptive;
        else throw ConfigError("system.excitation.kind: one of uniform, tracking, adaptive");
        std::tie(s.excitation.lo, s.excitation.hi) =
            ef.pair("range", {s.excitation.lo, s.excitation.hi});
        s.excitation.dither = ef.number("dither", s.excitation.dither);
        s.excitation.rho = ef.number("rho", s.excitation.rho);
        s.excitation.lambda = ef.number("lambda", s.excitation.lambda);
        s.excitation.eta = ef.number("eta", s.excitation.eta);
        s.excitation.mu = ef.number("mu", s.excitation.mu);
        ef.finish();
    }
    if (const json* r = f.find("regressors")) {
        Fields rf(*r, "system.regressors");
        systems::RegressorSpec spec;
        if (const json* u = rf.find("u_lags")) spec.u_lags = lag_lists(*u, "system.regressors.u_lags");
        if (const json* y = rf.find("y_lags")) spec.y_lags = lag_lists(*y, "system.regressors.y_lags");
        rf.finish();
        s.regressors = spec;
    }
    f.finish();
}

inline void parse_pso(const json& j, optim::PsoConfig& p) {
    Fields f(j, "pso");
    p.Np = static_cast<int>(f.integer("Np", p.Np));
    p.Tmax = static_cast<int>(f.integer("Tmax", p.Tmax));
    p.c1 = f.number("c1", p.c1);
    p.c2 = f.number("c2", p.c2);
    p.omega_start = f.number("omega_start", p.omega_start);
    p.omega_end = f.number("omega_end", p.omega_end);
    p.k = f.number("k", p.k);
    if (const json* xi = f.find("xi")) {
        if (xi->is_null()) p.xi = -optim::kInf;
        else if (xi->is_number()) p.xi = xi->get<double>();
        else throw ConfigError("pso.xi: expected a number or null");
    }
    p.eta = f.number("eta", p.eta);
    p.N_G = static_cast<int>(f.integer("N_G", p.N_G));
    p.tau = f.number("tau", p.tau);
    if (const json* r = f.find("refine")) {
        Fields rf(*r, "pso.refine");
        p.refine.max_iters = static_cast<int>(rf.integer("max_iters", p.refine.max_iters));
        p.refine.grad_tol = rf.number("grad_tol", p.refine.grad_tol);
        rf.finish();
    }
    f.finish();
}

inline void parse_range(const json& j, RangeSpec& r) {
    if (j.is_array()) {
        const auto [lo, hi] = Fields::as_pair(j, "range");
        for (int c = 0; c < 3; ++c) {
            r.lo[c] = lo;
            r.hi[c] = hi;
        }
        return;
    }
    Fields f(j, "range");
    for (int c = 0; c < 3; ++c) std::tie(r.lo[c], r.hi[c]) = f.pair(kClassNames[c], {r.lo[c], r.hi[c]});
    f.finish();
}

}  // namespace detail

inline ExperimentConfig parse_config(const json& j) {
    ExperimentConfig c;
    detail::Fields f(j, "");
    c.name = f.string("name", c.name);
    if (const json* k = f.find("kind")) c.kind = detail::enum_field(kind_names(), *k, "kind");
    const json* sys = f.find("system");
    if (!sys) throw ConfigError("system: required");
    detail::parse_system(*sys, c.system);
    if (const json* s = f.find("split")) {
        detail::Fields sf(*s, "split");
        c.split.train = static_cast<int>(sf.integer("train", c.split.train));
        c.split.val = static_cast<int>(sf.integer("val", c.split.val));
        c.split.test = static_cast<int>(sf.integer("test", c.split.test));
        c.split.test_on_all = sf.boolean("test_on_all", c.split.test_on_all);
        if (const json* h = sf.find("holdout")) {
            if (*h == "split") c.split.holdout = Holdout::split;
            else if (*h == "rerun") c.split.holdout = Holdout::rerun;
            else throw ConfigError("split.holdout: one of split, rerun");
        }
        c.split.train_in_time_order = sf.boolean("train_in_time_order", c.split.train_in_time_order);
        sf.finish();
    }
    if (const json* k = f.find("kernel")) {
        detail::Fields kf(*k, "kernel");
        c.Q = static_cast<int>(kf.integer("Q", c.Q));
        kf.finish();
    }
    if (const json* v = f.find("fitness")) c.fitness = detail::enum_list(fitness_names(), *v, "fitness");
    if (const json* v = f.find("optimizers"))
        c.optimizers = detail::enum_list(optimizer_names(), *v, "optimizers");
    if (const json* p = f.find("pso")) detail::parse_pso(*p, c.pso);
    if (const json* l = f.find("local")) {
        detail::Fields lf(*l, "local");
        c.local.restarts = static_cast<int>(lf.integer("restarts", c.local.restarts));
        c.local.local.max_iters = static_cast<int>(lf.integer("max_iters", c.local.local.max_iters));
        c.local.local.grad_tol = lf.number("grad_tol", c.local.local.grad_tol);
        c.local.match_budget = lf.boolean("match_budget", c.local.match_budget);
        lf.finish();
    }
    if (const json* r = f.find("range")) detail::parse_range(*r, c.range);
    if (const json* s = f.find("sweep")) {
        detail::Fields sf(*s, "sweep");
        c.sweep.param = sf.string("param", "");
        if (const json* v = sf.find("values")) {
            if (!v->is_array()) throw ConfigError("sweep.values: expected a list of numbers");
            for (const auto& x : *v) {
                if (!x.is_number()) throw ConfigError("sweep.values: expected a list of numbers");
                c.sweep.values.push_back(x.get<double>());
            }
        }
        sf.finish();
    }
    const long seeds = f.integer("n_seeds", c.n_seeds);
    if (seeds < 1 || seeds > 100000) throw ConfigError("n_seeds: must be in [1, 100000]");
    c.n_seeds = static_cast<int>(seeds);
    const long seed = f.integer("seed", 0);
    if (seed < 0) throw ConfigError("seed: must be >= 0");
    c.seed = static_cast<std::uint64_t>(seed);
    c.traces = f.boolean("traces", c.traces);
    c.output_dir = f.string("output_dir", "");
    f.finish();
    c.validate();
    return c;
}

inline ExperimentConfig parse_config(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config: invalid JSON: ") + e.what());
    }
    return parse_config(j);
}

inline ExperimentConfig parse_config(const char* text) { return parse_config(std::string(text)); }

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot read " + path);
    std::stringstream ss;
    ss << is.rdbuf();
    return parse_config(ss.str());
}

/// Fully resolved config, defaults included; parse_config(to_json(c)) == c.
inline json to_json(const ExperimentConfig& c) {
    json j;
    j["name"] = c.name;
    j["kind"] = to_string(c.kind);
    json sys{{"kind", to_string(c.system.kind)},
             {"records", c.system.records},
             {"u_range", {c.system.u_lo, c.system.u_hi}},
             {"dt", c.system.dt}};
    const char* nk[] = {"none", "uniform", "gaussian"};
    sys["noise"] = {{"kind", nk[static_cast<int>(c.system.noise.kind)]},
                    {"level", c.system.noise.scale}};
    const char* ek[] = {"uniform", "tracking", "adaptive"};
    const auto& ex = c.system.excitation;
    sys["excitation"] = {{"kind", ek[static_cast<int>(ex.kind)]},
                         {"range", {ex.lo, ex.hi}},
                         {"dither", ex.dither},
                         {"rho", ex.rho},
                         {"lambda", ex.lambda},
                         {"eta", ex.eta},
                         {"mu", ex.mu}};
    if (c.system.regressors)
        sys["regressors"] = {{"u_lags", c.system.regressors->u_lags},
                             {"y_lags", c.system.regressors->y_lags}};
    j["system"] = sys;
    j["split"] = {{"train", c.split.train},
                  {"val", c.split.val},
                  {"test", c.split.test},
                  {"test_on_all", c.split.test_on_all},
                  {"holdout", c.split.holdout == Holdout::rerun ? "rerun" : "split"},
                  {"train_in_time_order", c.split.train_in_time_order}};
    j["kernel"] = {{"Q", c.Q}};
    j["fitness"] = json::array();
    for (Fitness f : c.fitness) j["fitness"].push_back(to_string(f));
    j["optimizers"] = json::array();
    for (Optimizer o : c.optimizers) j["optimizers"].push_back(to_string(o));
    const auto& p = c.pso;
    j["pso"] = {{"Np", p.Np},       {"Tmax", p.Tmax},
                {"c1", p.c1},       {"c2", p.c2},
                {"omega_start", p.omega_start}, {"omega_end", p.omega_end},
                {"k", p.k},         {"eta", p.eta},
                {"N_G", p.N_G},     {"tau", p.tau},
                {"refine", {{"max_iters", p.refine.max_iters}, {"grad_tol", p.refine.grad_tol}}}};
    j["pso"]["xi"] = std::isfinite(p.xi) ? json(p.xi) : json(nullptr);
    j["local"] = {{"restarts", c.local.restarts},
                  {"max_iters", c.local.local.max_iters},
                  {"grad_tol", c.local.local.grad_tol},
                  {"match_budget", c.local.match_budget}};
    for (int k = 0; k < 3; ++k) j["range"][kClassNames[k]] = {c.range.lo[k], c.range.hi[k]};
    if (!c.sweep.param.empty()) j["sweep"] = {{"param", c.sweep.param}, {"values", c.sweep.values}};
    j["n_seeds"] = c.n_seeds;
    j["seed"] = c.seed;
    j["traces"] = c.traces;
    if (!c.output_dir.empty()) j["output_dir"] = c.output_dir;
    return j;
}

// ---------------------------------------------------------------- data

struct CellData {
    cgp::Dataset train, val, test;
};

/// Full dataset of a system for one seed.
inline cgp::Dataset make_system_dataset(const SystemSpec& s, std::uint64_t seed) {
    const int records = s.effective_records();
    switch (s.kind) {
        case SystemKind::narx: return systems::make_narx_dataset(records, s.u_lo, s.u_hi, seed);
        case SystemKind::narx2_linear:
            return systems::derive_second_output(
                systems::make_narx_dataset(records, s.u_lo, s.u_hi, seed), systems::SecondOutput::linear);
        case SystemKind::narx2_nonlinear:
            return systems::derive_second_output(
                systems::make_narx_dataset(records, s.u_lo, s.u_hi, seed),
                systems::SecondOutput::nonlinear);
        case SystemKind::ltv: {
            const double sd = s.noise.kind == systems::NoiseKind::gaussian ? s.noise.scale : 0.0;
            return systems::make_ltv_dataset(records, s.dt, seed,
                                             s.regressors.value_or(systems::ltv_default_regressors()), sd);
        }
        case SystemKind::nltv_step:
        case SystemKind::nltv_curve: {
            const auto ref = s.kind == SystemKind::nltv_step ? systems::Reference::step
                                                             : systems::Reference::curve;
            return systems::make_nltv_dataset(ref, s.excitation, records, seed,
                                              s.regressors.value_or(systems::nltv_default_regressors()),
                                              s.noise);
        }
    }
    throw std::logic_error("make_system_dataset: unknown system");
}

/// Seeded split of one dataset; every output uses the same record indices.
inline CellData split_dataset(const cgp::Dataset& ds, const SplitSpec& s, std::uint64_t seed) {
    const Index n = ds.block(0).X.rows();
    numerics::RngStream rng(seed, 51);
    const std::vector<Index> perm = rng.permutation(n);
    const Index n_test = s.test_on_all ? 0 : (s.test > 0 ? s.test : n - s.train - s.val);
    if (n_test + s.val + s.train > n) throw std::invalid_argument("split_dataset: not enough records");
    const auto take = [&](Index from, Index count) {
        std::vector<Index> idx(perm.begin() + from, perm.begin() + from + count);
        return ds.select(std::vector<std::vector<Index>>(static_cast<std::size_t>(ds.num_outputs()), idx));
    };
    CellData out;
    out.test = s.test_on_all ? ds : take(0, n_test);
    out.val = take(n_test, s.val);
    out.train = take(n_test + s.val, s.train);
    return out;
}

/// Seed of the r-th independent rerun (r >= 1) belonging to `seed`.
inline std::uint64_t rerun_seed(std::uint64_t seed, int r) {
    return seed * 0x9e3779b97f4a7c15ULL + static_cast<std::uint64_t>(r) * 0xbf58476d1ce4e5b9ULL + 1;
}

inline cgp::Dataset random_rows(const cgp::Dataset& ds, Index count, std::uint64_t seed) {
    const Index n = ds.block(0).X.rows();
    if (count <= 0 || count >= n) return ds;
    numerics::RngStream rng(seed, 51);
    const std::vector<Index> perm = rng.permutation(n);
    std::vector<Index> idx(perm.begin(), perm.begin() + count);
    return ds.select(std::vector<std::vector<Index>>(static_cast<std::size_t>(ds.num_outputs()), idx));
}

inline CellData make_cell_data(const ExperimentConfig& cfg, std::uint64_t seed) {
    if (cfg.split.holdout == Holdout::split)
        return split_dataset(make_system_dataset(cfg.system, seed), cfg.split, seed);
    CellData out;
    const cgp::Dataset primary = make_system_dataset(cfg.system, seed);
    if (cfg.split.train_in_time_order) {
        std::vector<Index> idx(static_cast<std::size_t>(cfg.split.train));
        std::iota(idx.begin(), idx.end(), Index{0});
        out.train = primary.select(
            std::vector<std::vector<Index>>(static_cast<std::size_t>(primary.num_outputs()), idx));
    } else {
        out.train = random_rows(primary, cfg.split.train, seed);
    }
    const std::uint64_t sv = rerun_seed(seed, 1), st = rerun_seed(seed, 2);
    out.val = cfg.split.val > 0 ? random_rows(make_system_dataset(cfg.system, sv), cfg.split.val, sv)
                                : out.train.select(std::vector<std::vector<Index>>(
                                      static_cast<std::size_t>(out.train.num_outputs())));
    out.test = random_rows(make_system_dataset(cfg.system, st), cfg.split.test, st);
    return out;
}

inline optim::Bounds make_bounds(const cgp::KernelConfig& kc, const RangeSpec& r) {
    const cgp::ParamLayout L(kc);
    optim::Bounds b{Vec(L.size()), Vec(L.size())};
    for (Index k = 0; k < L.size(); ++k) {
        const int c = L.param_class(k);
        b.lo[k] = std::max(r.lo[c], kBoundFloor);
        b.hi[k] = r.hi[c];
    }
    return b;
}

// ---------------------------------------------------------------- cells

struct CellKey {
    std::size_t sweep_index = 0;
    Optimizer optimizer = Optimizer::pso_standard;
    Fitness fitness = Fitness::mse;
    int seed_index = 0;
};

struct CellResult {
    std::string sweep_param;
    double sweep_value = 0.0;
    Optimizer optimizer = Optimizer::pso_standard;
    Fitness fitness = Fitness::mse;
    std::uint64_t seed = 0;
    bool ok = false;
    std::string reason;
    double final_fitness = optim::kInf;
    double test_mse = optim::kInf;
    Vec mse_out;
    double train_nll = optim::kInf;
    long evaluations = 0;
    Vec theta;
    double wall_ms = 0.0;  // never written to raw.csv
};

/// Optimizer run for an already prepared problem.
inline optim::RunResult run_optimizer(Optimizer o, const optim::FitnessProblem& p,
                                      const ExperimentConfig& cfg, std::uint64_t seed) {
    optim::PsoConfig pc = cfg.pso;
    pc.seed = seed;
    switch (o) {
        case Optimizer::pso_standard: return optim::run_standard(p, pc);
        case Optimizer::pso_multistart: return optim::run_multistart(p, pc);
        case Optimizer::pso_gradient: return optim::run_gradient(p, pc);
        case Optimizer::pso_hybrid: return optim::run_hybrid(p, pc);
        case Optimizer::cg_restarts:
        case Optimizer::bfgs_restarts: {
            optim::RestartConfig rc;
            rc.restarts = cfg.local.restarts;
            rc.local = cfg.local.local;
            rc.max_evals = cfg.local.match_budget
                               ? static_cast<long>(pc.Np) * (static_cast<long>(pc.Tmax) + 1)
                               : 0;
            numerics::RngStream rng(seed, 7);
            return optim::restarted_local(
                p, o == Optimizer::cg_restarts ? optim::LocalMethod::cg : optim::LocalMethod::bfgs,
                rc, rng);
        }
    }
    throw std::logic_error("run_optimizer: unknown optimizer");
}

/// Scores θ on the cell's data: test MSE overall and per output, and training NLL.
inline void score(CellResult& r, const cgp::KernelConfig& kc, const CellData& data) {
    const cgp::TrainedModel m(kc, cgp::Hyperparameters::unflatten(kc, r.theta), data.train);
    r.test_mse = cgp::mse(data.test, m);
    r.mse_out = cgp::mse_per_output(data.test, m);
    r.train_nll = cgp::nll(data.train, m.theta(), kc);
}

inline CellResult run_cell(const ExperimentConfig& base, const CellKey& key,
                           optim::RunTrace* trace = nullptr) {
    const bool swept = !base.sweep.param.empty();
    const ExperimentConfig cfg = swept ? apply_sweep(base, base.sweep.values[key.sweep_index]) : base;
    CellResult r;
    r.sweep_param = base.sweep.param;
    r.sweep_value = swept ? base.sweep.values[key.sweep_index] : 0.0;
    r.optimizer = key.optimizer;
    r.fitness = key.fitness;
    r.seed = base.seed + static_cast<std::uint64_t>(key.seed_index);
    r.mse_out = Vec::Constant(base.system.outputs(), optim::kInf);
    const auto start = std::chrono::steady_clock::now();
    try {
        const CellData data = make_cell_data(cfg, r.seed);
        const cgp::KernelConfig kc{data.train.input_dim(), data.train.num_outputs(), cfg.Q};
        optim::FitnessProblem p;
        p.bounds = make_bounds(kc, cfg.range);
        std::optional<cgp::NllObjective> nll;
        std::optional<cgp::MseObjective> mse;
        if (key.fitness == Fitness::nll) {
            nll.emplace(kc, data.train);
            p.objective = [&](const Vec& x) { return (*nll)(x); };
            p.gradient = [&](const Vec& x, Vec& g) { return nll->value_and_gradient(x, g); };
        } else {
            mse.emplace(kc, data.train, data.val);
            p.objective = [&](const Vec& x) { return (*mse)(x); };
            p.gradient = [&](const Vec& x, Vec& g) { return mse->value_and_gradient(x, g); };
        }
        optim::RunResult run = run_optimizer(key.optimizer, p, cfg, r.seed);
        r.final_fitness = run.value;
        r.evaluations = run.evaluations;
        r.theta = run.best;
        if (trace) *trace = std::move(run.trace);
        if (!std::isfinite(run.value)) throw optim::NoProgress("no finite objective value found");
        score(r, kc, data);
        if (!std::isfinite(r.test_mse)) throw std::runtime_error("non-finite test MSE");
        r.ok = true;
    } catch (const std::exception& e) {
        r.ok = false;
        r.reason = e.what();
        for (char& ch : r.reason)
            if (ch == ',' || ch == '\n' || ch == '\r') ch = ' ';
    }
    r.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    return r;
}

/// Cells in output order: sweep value, optimizer, fitness, seed.
inline std::vector<CellKey> enumerate_cells(const ExperimentConfig& cfg) {
    std::vector<CellKey> keys;
    const std::size_t sweeps = cfg.sweep.param.empty() ? 1 : cfg.sweep.values.size();
    for (std::size_t s = 0; s < sweeps; ++s)
        for (Optimizer o : cfg.optimizers)
            for (Fitness f : cfg.fitness)
                for (int k = 0; k < cfg.n_seeds; ++k) keys.push_back({s, o, f, k});
    return keys;
}

// ---------------------------------------------------------------- aggregates

struct Stat {
    double median = optim::kInf, mean = optim::kInf, min = optim::kInf;
};

inline double median_of(std::vector<double> v) {
    if (v.empty()) return optim::kInf;
    std::sort(v.begin(), v.end());
    const std::size_t h = v.size() / 2;
    return v.size() % 2 ? v[h] : 0.5 * (v[h - 1] + v[h]);
}

inline Stat stat_of(const std::vector<double>& v) {
    Stat s;
    if (v.empty()) return s;
    s.median = median_of(v);
    double sum = 0.0;
    for (double x : v) sum += x;
    s.mean = sum / static_cast<double>(v.size());
    s.min = *std::min_element(v.begin(), v.end());
    return s;
}

struct AggregateRow {
    std::string sweep_param;
    double sweep_value = 0.0;
    Optimizer optimizer = Optimizer::pso_standard;
    Fitness fitness = Fitness::mse;
    int n_ok = 0, n_failed = 0;
    Stat test_mse;
    std::vector<Stat> mse_out;
    Stat final_fitness, train_nll, evaluations;
    Stat wall_ms;  // timing.csv only
};

/// Groups consecutive cells with the same (sweep value, optimizer, fitness); failed
/// cells are counted but excluded from the statistics.
inline std::vector<AggregateRow> aggregate(const std::vector<CellResult>& cells, int outputs) {
    std::vector<AggregateRow> rows;
    std::size_t i = 0;
    while (i < cells.size()) {
        const CellResult& h = cells[i];
        std::size_t j = i;
        std::vector<double> mse, fit, nll, evals, wall;
        std::vector<std::vector<double>> per(static_cast<std::size_t>(outputs));
        AggregateRow a;
        a.sweep_param = h.sweep_param;
        a.sweep_value = h.sweep_value;
        a.optimizer = h.optimizer;
        a.fitness = h.fitness;
        for (; j < cells.size() && cells[j].sweep_value == h.sweep_value &&
               cells[j].optimizer == h.optimizer && cells[j].fitness == h.fitness;
             ++j) {
            const CellResult& c = cells[j];
            if (!c.ok) {
                ++a.n_failed;
                continue;
            }
            ++a.n_ok;
            mse.push_back(c.test_mse);
            fit.push_back(c.final_fitness);
            nll.push_back(c.train_nll);
            evals.push_back(static_cast<double>(c.evaluations));
            wall.push_back(c.wall_ms);
            for (int d = 0; d < outputs && d < c.mse_out.size(); ++d)
                per[static_cast<std::size_t>(d)].push_back(c.mse_out[d]);
        }
        a.test_mse = stat_of(mse);
        for (const auto& v : per) a.mse_out.push_back(stat_of(v));
        a.final_fitness = stat_of(fit);
        a.train_nll = stat_of(nll);
        a.evaluations = stat_of(evals);
        a.wall_ms = stat_of(wall);
        rows.push_back(std::move(a));
        i = j;
    }
    return rows;
}

// ---------------------------------------------------------------- CSV

inline std::string fmt_value(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

inline void write_raw_csv(std::ostream& os, const std::vector<CellResult>& cells, int outputs) {
    os << "sweep_param,sweep_value,optimizer,fitness,seed,status,final_fitness,test_mse";
    for (int d = 0; d < outputs; ++d) os << ",mse_out_" << d + 1;
    os << ",train_nll,evaluations,theta,reason\n";
    for (const auto& c : cells) {
        os << c.sweep_param << ',' << (c.sweep_param.empty() ? "" : fmt_value(c.sweep_value)) << ','
           << to_string(c.optimizer) << ',' << to_string(c.fitness) << ',' << c.seed << ','
           << (c.ok ? "ok" : "failed") << ',' << io::fmt17(c.final_fitness) << ','
           << io::fmt17(c.test_mse);
        for (int d = 0; d < outputs; ++d)
            os << ',' << io::fmt17(d < c.mse_out.size() ? c.mse_out[d] : optim::kInf);
        os << ',' << io::fmt17(c.train_nll) << ',' << c.evaluations << ',';
        for (Index k = 0; k < c.theta.size(); ++k) os << (k ? ";" : "") << io::fmt17(c.theta[k]);
        os << ',' << c.reason << '\n';
    }
}

/// Inverse of write_raw_csv (wall-clock is not stored and reads back as 0).
inline std::vector<CellResult> read_raw_csv(std::istream& is, int& outputs) {
    std::string line;
    if (!std::getline(is, line)) throw io::FormatError("raw csv: empty input");
    const auto header = io::split(line, ',');
    outputs = 0;
    for (const auto& h : header) outputs += h.rfind("mse_out_", 0) == 0 ? 1 : 0;
    const std::size_t want = 12 + static_cast<std::size_t>(outputs);
    std::vector<CellResult> cells;
    long lineno = 1;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        const auto f = io::split(line, ',');
        const std::string where = "raw csv line " + std::to_string(lineno);
        if (f.size() != want) throw io::FormatError(where + ": wrong field count");
        CellResult c;
        c.sweep_param = f[0];
        c.sweep_value = f[1].empty() ? 0.0 : io::parse_double(f[1], where);
        const auto o = parse_name(optimizer_names(), f[2]);
        const auto fit = parse_name(fitness_names(), f[3]);
        if (!o || !fit) throw io::FormatError(where + ": unknown optimizer or fitness");
        c.optimizer = *o;
        c.fitness = *fit;
        c.seed = static_cast<std::uint64_t>(io::parse_long(f[4], where));
        c.ok = f[5] == "ok";
        c.final_fitness = io::parse_double(f[6], where);
        c.test_mse = io::parse_double(f[7], where);
        c.mse_out.resize(outputs);
        for (int d = 0; d < outputs; ++d) c.mse_out[d] = io::parse_double(f[8 + static_cast<std::size_t>(d)], where);
        std::size_t k = 8 + static_cast<std::size_t>(outputs);
        c.train_nll = io::parse_double(f[k++], where);
        c.evaluations = io::parse_long(f[k++], where);
        if (!f[k].empty()) {
            const auto th = io::split(f[k], ';');
            c.theta.resize(static_cast<Index>(th.size()));
            for (std::size_t t = 0; t < th.size(); ++t) c.theta[static_cast<Index>(t)] = io::parse_double(th[t], where);
        }
        c.reason = f[k + 1];
        cells.push_back(std::move(c));
    }
    return cells;
}

inline void write_aggregate_csv(std::ostream& os, const std::vector<AggregateRow>& rows, int outputs) {
    const auto head = [&](const std::string& m) {
        os << ",median_" << m << ",mean_" << m << ",min_" << m;
    };
    os << "sweep_param,sweep_value,optimizer,fitness,n_ok,n_failed";
    head("test_mse");
    for (int d = 0; d < outputs; ++d) head("mse_out_" + std::to_string(d + 1));
    head("final_fitness");
    head("train_nll");
    head("evaluations");
    os << '\n';
    const auto put = [&](const Stat& s) {
        os << ',' << io::fmt17(s.median) << ',' << io::fmt17(s.mean) << ',' << io::fmt17(s.min);
    };
    for (const auto& a : rows) {
        os << a.sweep_param << ',' << (a.sweep_param.empty() ? "" : fmt_value(a.sweep_value)) << ','
           << to_string(a.optimizer) << ',' << to_string(a.fitness) << ',' << a.n_ok << ','
           << a.n_failed;
        put(a.test_mse);
        for (int d = 0; d < outputs; ++d)
            put(d < static_cast<int>(a.mse_out.size()) ? a.mse_out[static_cast<std::size_t>(d)] : Stat{});
        put(a.final_fitness);
        put(a.train_nll);
        put(a.evaluations);
        os << '\n';
    }
}

inline void write_timing_csv(std::ostream& os, const std::vector<CellResult>& cells) {
    os << "sweep_param,sweep_value,optimizer,fitness,seed,wall_ms\n";
    char buf[40];
    for (const auto& c : cells) {
        std::snprintf(buf, sizeof buf, "%.3f", c.wall_ms);
        os << c.sweep_param << ',' << (c.sweep_param.empty() ? "" : fmt_value(c.sweep_value)) << ','
           << to_string(c.optimizer) << ',' << to_string(c.fitness) << ',' << c.seed << ',' << buf
           << '\n';
    }
}

/// Per-t median of gbest over traces; shorter traces are extended with their last value.
inline std::vector<std::pair<int, double>> median_trace(const std::vector<const optim::RunTrace*>& traces) {
    std::size_t len = 0;
    for (const auto* t : traces) len = std::max(len, t->rows.size());
    std::vector<std::pair<int, double>> out;
    for (std::size_t i = 0; i < len; ++i) {
        std::vector<double> v;
        int t = static_cast<int>(i);
        for (const auto* tr : traces) {
            if (tr->rows.empty()) continue;
            const auto& row = tr->rows[std::min(i, tr->rows.size() - 1)];
            if (i < tr->rows.size()) t = row.t;
            v.push_back(row.gbest);
        }
        out.emplace_back(t, median_of(v));
    }
    return out;
}

// ---------------------------------------------------------------- grid

struct NllMseSeedRow {
    std::uint64_t seed = 0;
    double nll_a = 0, mse_a = 0, nll_b = 0, mse_b = 0;
    bool disagree = false;
};

/// Two models per seed (first and second range upper bound), both trained on NLL.
struct NllMseSummary {
    Optimizer optimizer = Optimizer::pso_standard;
    double range_a = 0, range_b = 0;
    std::vector<NllMseSeedRow> seeds;
    double median_nll_a = 0, median_mse_a = 0, median_nll_b = 0, median_mse_b = 0;
    int disagreements = 0;
};

struct SizeRow {
    int size = 0;
    Optimizer optimizer = Optimizer::pso_standard;
    Fitness fitness = Fitness::mse;
    double median_mse = 0;
    std::vector<double> median_mse_out;
    double median_wall_ms = 0;
};

struct ExperimentReport {
    ExperimentConfig config;
    int outputs = 1;
    std::vector<CellResult> cells;
    std::vector<optim::RunTrace> traces;  // parallel to cells
    std::vector<AggregateRow> aggregates;
    std::vector<NllMseSummary> nll_vs_mse;
    std::vector<SizeRow> sizes;
};

using Progress = std::function<void(std::size_t done, std::size_t total, const CellResult&)>;

/// Runs every cell on up to `jobs` threads. Results land at their cell index, so
/// the output does not depend on scheduling.
inline ExperimentReport run_grid(const ExperimentConfig& cfg, int jobs = 1, Progress progress = {}) {
    cfg.validate();
    const std::vector<CellKey> keys = enumerate_cells(cfg);
    ExperimentReport rep;
    rep.config = cfg;
    rep.outputs = cfg.system.outputs();
    rep.cells.resize(keys.size());
    rep.traces.resize(keys.size());
    std::atomic<std::size_t> next{0};
    std::size_t done = 0;
    std::mutex mu;
    const auto worker = [&] {
        for (std::size_t i = next++; i < keys.size(); i = next++) {
            rep.cells[i] = run_cell(cfg, keys[i], &rep.traces[i]);
            if (progress) {
                std::lock_guard<std::mutex> lock(mu);
                progress(++done, keys.size(), rep.cells[i]);
            }
        }
    };
    const int n = std::max(1, std::min<int>(jobs, static_cast<int>(keys.size())));
    if (n == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < n; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    rep.aggregates = aggregate(rep.cells, rep.outputs);
    return rep;
}

inline std::vector<NllMseSummary> summarize_nll_vs_mse(const ExperimentReport& rep) {
    const auto& cfg = rep.config;
    std::vector<NllMseSummary> out;
    if (cfg.sweep.param != "range_hi" || cfg.sweep.values.size() != 2) return out;
    const auto find = [&](double v, Optimizer o, std::uint64_t seed) -> const CellResult* {
        for (const auto& c : rep.cells)
            if (c.sweep_value == v && c.optimizer == o && c.fitness == Fitness::nll && c.seed == seed)
                return &c;
        return nullptr;
    };
    for (Optimizer o : cfg.optimizers) {
        NllMseSummary s;
        s.optimizer = o;
        s.range_a = cfg.sweep.values[0];
        s.range_b = cfg.sweep.values[1];
        std::vector<double> na, ma, nb, mb;
        for (int k = 0; k < cfg.n_seeds; ++k) {
            const std::uint64_t seed = cfg.seed + static_cast<std::uint64_t>(k);
            const CellResult* a = find(s.range_a, o, seed);
            const CellResult* b = find(s.range_b, o, seed);
            if (!a || !b || !a->ok || !b->ok) continue;
            NllMseSeedRow r{seed, a->train_nll, a->test_mse, b->train_nll, b->test_mse, false};
            r.disagree = (r.nll_a < r.nll_b) != (r.mse_a < r.mse_b);
            s.disagreements += r.disagree ? 1 : 0;
            na.push_back(r.nll_a);
            ma.push_back(r.mse_a);
            nb.push_back(r.nll_b);
            mb.push_back(r.mse_b);
            s.seeds.push_back(r);
        }
        s.median_nll_a = median_of(na);
        s.median_mse_a = median_of(ma);
        s.median_nll_b = median_of(nb);
        s.median_mse_b = median_of(mb);
        out.push_back(std::move(s));
    }
    return out;
}

inline std::vector<SizeRow> summarize_sizes(const ExperimentReport& rep) {
    std::vector<SizeRow> out;
    if (rep.config.sweep.param != "train_size") return out;
    for (const auto& a : rep.aggregates) {
        SizeRow r;
        r.size = static_cast<int>(a.sweep_value);
        r.optimizer = a.optimizer;
        r.fitness = a.fitness;
        r.median_mse = a.test_mse.median;
        for (const auto& s : a.mse_out) r.median_mse_out.push_back(s.median);
        r.median_wall_ms = a.wall_ms.median;
        out.push_back(std::move(r));
    }
    return out;
}

/// NLL-trained models on two search ranges, compared by NLL and by test MSE.
inline ExperimentReport nll_vs_mse_demo(ExperimentConfig cfg, int jobs = 1, Progress progress = {}) {
    cfg.kind = ExperimentKind::nll_vs_mse;
    cfg.fitness = {Fitness::nll};
    if (cfg.sweep.param.empty()) cfg.sweep = {"range_hi", {100.0, 1.0}};
    ExperimentReport rep = run_grid(cfg, jobs, std::move(progress));
    rep.nll_vs_mse = summarize_nll_vs_mse(rep);
    return rep;
}

inline std::vector<double> default_sizes(SystemKind k) {
    if (k == SystemKind::nltv_curve) return {25, 50, 75, 100};
    return {20, 40, 100, 200};
}

inline ExperimentReport training_size_sweep(ExperimentConfig cfg, int jobs = 1, Progress progress = {}) {
    cfg.kind = ExperimentKind::training_size;
    if (cfg.sweep.param.empty()) cfg.sweep = {"train_size", default_sizes(cfg.system.kind)};
    ExperimentReport rep = run_grid(cfg, jobs, std::move(progress));
    rep.sizes = summarize_sizes(rep);
    return rep;
}

inline ExperimentReport convergence_traces(ExperimentConfig cfg, int jobs = 1, Progress progress = {}) {
    cfg.kind = ExperimentKind::convergence;
    cfg.traces = true;
    return run_grid(cfg, jobs, std::move(progress));
}

inline ExperimentReport run_experiment(const ExperimentConfig& cfg, int jobs = 1, Progress progress = {}) {
    switch (cfg.kind) {
        case ExperimentKind::nll_vs_mse: return nll_vs_mse_demo(cfg, jobs, std::move(progress));
        case ExperimentKind::training_size: return training_size_sweep(cfg, jobs, std::move(progress));
        case ExperimentKind::convergence: return convergence_traces(cfg, jobs, std::move(progress));
        default: return run_grid(cfg, jobs, std::move(progress));
    }
}

// ---------------------------------------------------------------- report

inline std::string group_label(const std::string& param, double value, Optimizer o, Fitness f) {
    std::string s = to_string(o) + "_" + to_string(f);
    if (!param.empty()) s = param + "-" + fmt_value(value) + "_" + s;
    return s;
}

inline void write_report_txt(std::ostream& os, const ExperimentReport& rep) {
    const auto& cfg = rep.config;
    char buf[256];
    int failed = 0;
    for (const auto& c : rep.cells) failed += c.ok ? 0 : 1;
    os << "experiment: " << cfg.name << " (" << to_string(cfg.kind) << ")\n";
    os << "system: " << to_string(cfg.system.kind) << ", records " << cfg.system.effective_records()
       << ", split train " << cfg.split.train << " / val " << cfg.split.val << " / test "
       << (cfg.split.test_on_all ? std::string("all") : std::to_string(cfg.split.test)) << '\n';
    os << "seeds: " << cfg.n_seeds << " from " << cfg.seed << "; cells: " << rep.cells.size()
       << ", failed: " << failed << "\n\n";
    std::snprintf(buf, sizeof buf, "%-36s %5s %12s %12s %12s", "group", "ok", "median_mse",
                  "mean_mse", "median_ms");
    os << buf;
    for (int d = 0; d < rep.outputs; ++d) {
        std::snprintf(buf, sizeof buf, " %12s", ("median_y" + std::to_string(d + 1)).c_str());
        os << buf;
    }
    os << '\n';
    for (const auto& a : rep.aggregates) {
        std::snprintf(buf, sizeof buf, "%-36s %2d/%-2d %12.4e %12.4e %12.1f",
                      group_label(a.sweep_param, a.sweep_value, a.optimizer, a.fitness).c_str(),
                      a.n_ok, a.n_ok + a.n_failed, a.test_mse.median, a.test_mse.mean, a.wall_ms.median);
        os << buf;
        for (const auto& s : a.mse_out) {
            std::snprintf(buf, sizeof buf, " %12.4e", s.median);
            os << buf;
        }
        os << '\n';
    }
    for (const auto& s : rep.nll_vs_mse) {
        os << "\nNLL vs MSE (" << to_string(s.optimizer) << ", NLL fitness): model A range [0,"
           << fmt_value(s.range_a) << "], model B range [0," << fmt_value(s.range_b) << "]\n";
        std::snprintf(buf, sizeof buf, "%6s %14s %12s %14s %12s %s\n", "seed", "nll_A", "mse_A",
                      "nll_B", "mse_B", "orderings");
        os << buf;
        for (const auto& r : s.seeds) {
            std::snprintf(buf, sizeof buf, "%6llu %14.6g %12.4e %14.6g %12.4e %s\n",
                          static_cast<unsigned long long>(r.seed), r.nll_a, r.mse_a, r.nll_b, r.mse_b,
                          r.disagree ? "disagree" : "agree");
            os << buf;
        }
        std::snprintf(buf, sizeof buf, "median %14.6g %12.4e %14.6g %12.4e\n", s.median_nll_a,
                      s.median_mse_a, s.median_nll_b, s.median_mse_b);
        os << buf;
        os << "lower median MSE: model " << (s.median_mse_b < s.median_mse_a ? "B" : "A")
           << "; lower median NLL: model " << (s.median_nll_b < s.median_nll_a ? "B" : "A")
           << "; per-seed disagreements: " << s.disagreements << " of " << s.seeds.size() << '\n';
    }
    if (!rep.sizes.empty()) {
        os << "\ntraining size sweep\n";
        for (const auto& r : rep.sizes) {
            std::snprintf(buf, sizeof buf, "%-28s size %5d  median_mse %12.4e  median_ms %10.1f\n",
                          (to_string(r.optimizer) + "_" + to_string(r.fitness)).c_str(), r.size,
                          r.median_mse, r.median_wall_ms);
            os << buf;
        }
    }
}

/// True when `dir` is missing or empty.
inline bool directory_is_empty(const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    return !fs::exists(dir) || (fs::is_directory(dir) && fs::is_empty(dir));
}

/// raw.csv, aggregate.csv, timing.csv, config.json, report.txt and, when traces are
/// enabled, traces/<group>_seed<k>.csv plus traces/median_<group>.csv.
inline void write_outputs(const ExperimentReport& rep, const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    const auto open = [](const fs::path& p) {
        std::ofstream os(p, std::ios::binary);
        if (!os) throw std::runtime_error("cannot write " + p.string());
        return os;
    };
    {
        auto os = open(dir / "raw.csv");
        write_raw_csv(os, rep.cells, rep.outputs);
    }
    {
        auto os = open(dir / "aggregate.csv");
        write_aggregate_csv(os, rep.aggregates, rep.outputs);
    }
    {
        auto os = open(dir / "timing.csv");
        write_timing_csv(os, rep.cells);
    }
    {
        auto os = open(dir / "config.json");
        os << to_json(rep.config).dump(2) << '\n';
    }
    {
        auto os = open(dir / "report.txt");
        write_report_txt(os, rep);
    }
    if (!rep.config.traces) return;
    fs::create_directories(dir / "traces");
    std::map<std::string, std::vector<const optim::RunTrace*>> groups;
    std::vector<std::string> order;
    for (std::size_t i = 0; i < rep.cells.size(); ++i) {
        const auto& c = rep.cells[i];
        const std::string g = group_label(c.sweep_param, c.sweep_value, c.optimizer, c.fitness);
        auto os = open(dir / "traces" / (g + "_seed" + std::to_string(c.seed) + ".csv"));
        rep.traces[i].write_csv(os);
        if (!groups.count(g)) order.push_back(g);
        if (!rep.traces[i].rows.empty()) groups[g].push_back(&rep.traces[i]);
    }
    for (const auto& g : order) {
        auto os = open(dir / "traces" / ("median_" + g + ".csv"));
        os << "t,median_gbest_fitness\n";
        for (const auto& [t, v] : median_trace(groups[g])) os << t << ',' << io::fmt17(v) << '\n';
    }
}

}  // namespace cgpso::harness
