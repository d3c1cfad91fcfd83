#pragma once

#include "cgpso/cgp.hpp"

#include <cstdio>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace cgpso::io {

struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline std::string fmt17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream is(s);
    while (std::getline(is, cur, sep)) out.push_back(cur);
    if (!s.empty() && s.back() == sep) out.emplace_back();
    return out;
}

inline std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

inline double parse_double(const std::string& s, const std::string& where) {
    try {
        std::size_t used = 0;
        const double v = std::stod(trim(s), &used);
        if (used != trim(s).size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw FormatError(where + ": not a number: '" + s + "'");
    }
}

inline long parse_long(const std::string& s, const std::string& where) {
    try {
        std::size_t used = 0;
        const long v = std::stol(trim(s), &used);
        if (used != trim(s).size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw FormatError(where + ": not an integer: '" + s + "'");
    }
}

// ---------------------------------------------------------------- dataset CSV

/// `output_index,x_1..x_n,y`, rows grouped by output in block order.
inline void write_dataset_csv(std::ostream& os, const cgp::Dataset& ds) {
    os << "output_index";
    for (int i = 0; i < ds.input_dim(); ++i) os << ",x_" << i + 1;
    os << ",y\n";
    for (int d = 0; d < ds.num_outputs(); ++d) {
        const auto& b = ds.block(d);
        for (Index r = 0; r < b.X.rows(); ++r) {
            os << d;
            for (int i = 0; i < ds.input_dim(); ++i) os << ',' << fmt17(b.X(r, i));
            os << ',' << fmt17(b.y[r]) << '\n';
        }
    }
}

/// Inverse of write_dataset_csv. `min_outputs` keeps trailing empty outputs.
inline cgp::Dataset read_dataset_csv(std::istream& is, int min_outputs = 1) {
    std::string line;
    if (!std::getline(is, line)) throw FormatError("dataset: empty input");
    const auto header = split(trim(line), ',');
    if (header.size() < 3 || trim(header.front()) != "output_index" || trim(header.back()) != "y")
        throw FormatError("dataset: header must be output_index,x_1..x_n,y");
    const int n = static_cast<int>(header.size()) - 2;
    std::vector<std::vector<std::vector<double>>> rows;
    long lineno = 1;
    while (std::getline(is, line)) {
        ++lineno;
        if (trim(line).empty()) continue;
        const auto f = split(trim(line), ',');
        const std::string where = "dataset line " + std::to_string(lineno);
        if (static_cast<int>(f.size()) != n + 2) throw FormatError(where + ": wrong field count");
        const long d = parse_long(f[0], where);
        if (d < 0 || d > 1000) throw FormatError(where + ": bad output index");
        if (static_cast<long>(rows.size()) <= d) rows.resize(static_cast<std::size_t>(d) + 1);
        std::vector<double> v;
        for (int i = 1; i <= n + 1; ++i) v.push_back(parse_double(f[static_cast<std::size_t>(i)], where));
        rows[static_cast<std::size_t>(d)].push_back(std::move(v));
    }
    if (static_cast<int>(rows.size()) < min_outputs) rows.resize(static_cast<std::size_t>(min_outputs));
    if (rows.empty()) throw FormatError("dataset: no rows");
    std::vector<cgp::OutputBlock> blocks;
    for (const auto& rs : rows) {
        cgp::OutputBlock b{Mat(static_cast<Index>(rs.size()), n), Vec(static_cast<Index>(rs.size()))};
        for (std::size_t r = 0; r < rs.size(); ++r) {
            for (int i = 0; i < n; ++i) b.X(static_cast<Index>(r), i) = rs[r][static_cast<std::size_t>(i)];
            b.y[static_cast<Index>(r)] = rs[r][static_cast<std::size_t>(n)];
        }
        blocks.push_back(std::move(b));
    }
    return cgp::Dataset(n, std::move(blocks));
}

inline void save_dataset(const std::string& path, const cgp::Dataset& ds) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path);
    write_dataset_csv(os, ds);
}

inline cgp::Dataset load_dataset(const std::string& path, int min_outputs = 1) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot read " + path);
    return read_dataset_csv(is, min_outputs);
}

// ---------------------------------------------------------------- model document

struct ModelDocument {
    cgp::KernelConfig cfg;
    Vec theta;
    cgp::Dataset train;
};

/// Flat `key = value` text: n, M, Q, theta (comma separated), train_rows and one
/// `row.<i> = d,x_1..x_n,y` line per training row.
inline void write_model(std::ostream& os, const cgp::KernelConfig& cfg, const Vec& theta,
                        const cgp::Dataset& train) {
    os << "# cgpso model\n";
    os << "n = " << cfg.n << "\nM = " << cfg.M << "\nQ = " << cfg.Q << "\ntheta = ";
    for (Index k = 0; k < theta.size(); ++k) os << (k ? "," : "") << fmt17(theta[k]);
    os << "\ntrain_rows = " << train.size() << '\n';
    Index i = 0;
    for (int d = 0; d < train.num_outputs(); ++d) {
        const auto& b = train.block(d);
        for (Index r = 0; r < b.X.rows(); ++r, ++i) {
            os << "row." << i << " = " << d;
            for (Index c = 0; c < b.X.cols(); ++c) os << ',' << fmt17(b.X(r, c));
            os << ',' << fmt17(b.y[r]) << '\n';
        }
    }
}

inline ModelDocument read_model(std::istream& is) {
    std::map<std::string, std::string> kv;
    std::string line;
    while (std::getline(is, line)) {
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        const auto eq = t.find('=');
        if (eq == std::string::npos) throw FormatError("model: expected key = value, got '" + t + "'");
        kv[trim(t.substr(0, eq))] = trim(t.substr(eq + 1));
    }
    const auto need = [&](const std::string& k) -> const std::string& {
        const auto it = kv.find(k);
        if (it == kv.end()) throw FormatError("model: missing key '" + k + "'");
        return it->second;
    };
    ModelDocument doc;
    doc.cfg.n = static_cast<int>(parse_long(need("n"), "model n"));
    doc.cfg.M = static_cast<int>(parse_long(need("M"), "model M"));
    doc.cfg.Q = static_cast<int>(parse_long(need("Q"), "model Q"));
    try {
        doc.cfg.validate();
    } catch (const std::invalid_argument& e) {
        throw FormatError(std::string("model: ") + e.what());
    }
    const auto th = split(need("theta"), ',');
    if (static_cast<Index>(th.size()) != doc.cfg.dimension())
        throw FormatError("model: theta has " + std::to_string(th.size()) + " values, expected " +
                          std::to_string(doc.cfg.dimension()));
    doc.theta.resize(static_cast<Index>(th.size()));
    for (std::size_t k = 0; k < th.size(); ++k) doc.theta[static_cast<Index>(k)] = parse_double(th[k], "model theta");
    const long rows = parse_long(need("train_rows"), "model train_rows");
    std::ostringstream csv;
    csv << "output_index";
    for (int i = 0; i < doc.cfg.n; ++i) csv << ",x_" << i + 1;
    csv << ",y\n";
    for (long r = 0; r < rows; ++r) csv << need("row." + std::to_string(r)) << '\n';
    std::istringstream in(csv.str());
    doc.train = read_dataset_csv(in, doc.cfg.M);
    if (doc.train.num_outputs() != doc.cfg.M) throw FormatError("model: output index exceeds M");
    return doc;
}

inline void save_model(const std::string& path, const cgp::KernelConfig& cfg, const Vec& theta,
                       const cgp::Dataset& train) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path);
    write_model(os, cfg, theta, train);
}

inline ModelDocument load_model(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot read " + path);
    return read_model(is);
}

}  // namespace cgpso::io
