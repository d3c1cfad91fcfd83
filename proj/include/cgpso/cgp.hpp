#pragma once

// Convolved Gaussian-process model with Gaussian smoothing kernels and Gaussian
// latent covariances, diagonal precisions, one smoothing kernel per latent group.
//
// For outputs d, d' the noise-free covariance is
//
//   k(x, x') = sum_q nu[d,q] nu[d',q] upsilon[q] (2 pi)^{-n/2} |P|^{-1/2}
//              exp(-1/2 (x - x')^T P^{-1} (x - x'))
//
// with P = diag(1/alpha[d,:] + 1/alpha[d',:] + 1/beta[q,:]). Noise variance
// sigma2[d] is added on the diagonal of the (d, d) block of K_yy only.

#include "cgpso/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace cgpso {

struct EmptyEvalSet : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

namespace cgp {

struct KernelConfig {
    int n = 1;  // input dimension
    int M = 1;  // outputs
    int Q = 1;  // latent groups

    void validate() const {
        if (n < 1 || M < 1 || Q < 1)
            throw std::invalid_argument("KernelConfig: n, M and Q must all be >= 1");
    }

    Index dimension() const {
        return static_cast<Index>(M) * Q + static_cast<Index>(M) * n + Q +
               static_cast<Index>(Q) * n + M;
    }

    friend bool operator==(const KernelConfig&, const KernelConfig&) = default;
};

/// Position of each hyperparameter in the flattened vector:
/// [nu[0,:], alpha[0,:], ..., nu[M-1,:], alpha[M-1,:],
///  upsilon[0], beta[0,:], ..., upsilon[Q-1], beta[Q-1,:], sigma2[:]].
class ParamLayout {
public:
    explicit ParamLayout(const KernelConfig& c) : n_(c.n), M_(c.M), Q_(c.Q) {}

    Index nu(int d, int q) const { return static_cast<Index>(d) * (Q_ + n_) + q; }
    Index alpha(int d, int i) const { return static_cast<Index>(d) * (Q_ + n_) + Q_ + i; }
    Index upsilon(int q) const { return latent_base() + static_cast<Index>(q) * (1 + n_); }
    Index beta(int q, int i) const { return upsilon(q) + 1 + i; }
    Index sigma2(int d) const { return latent_base() + static_cast<Index>(Q_) * (1 + n_) + d; }
    Index size() const { return sigma2(M_); }

    /// Parameter class of a flat index: 0 coefficient (nu, upsilon), 1 precision
    /// element (alpha, beta), 2 noise variance.
    int param_class(Index k) const {
        if (k >= sigma2(0)) return 2;
        if (k < latent_base()) return (k % (Q_ + n_)) < Q_ ? 0 : 1;
        return ((k - latent_base()) % (1 + n_)) == 0 ? 0 : 1;
    }

private:
    Index latent_base() const { return static_cast<Index>(M_) * (Q_ + n_); }

    int n_, M_, Q_;
};

struct Hyperparameters {
    Mat nu;       // M x Q
    Mat alpha;    // M x n, diagonal of the smoothing-kernel precision
    Vec upsilon;  // Q
    Mat beta;     // Q x n, diagonal of the latent precision
    Vec sigma2;   // M

    static Hyperparameters filled(const KernelConfig& c, double value) {
        return {Mat::Constant(c.M, c.Q, value), Mat::Constant(c.M, c.n, value),
                Vec::Constant(c.Q, value), Mat::Constant(c.Q, c.n, value),
                Vec::Constant(c.M, value)};
    }

    bool matches(const KernelConfig& c) const {
        return nu.rows() == c.M && nu.cols() == c.Q && alpha.rows() == c.M &&
               alpha.cols() == c.n && upsilon.size() == c.Q && beta.rows() == c.Q &&
               beta.cols() == c.n && sigma2.size() == c.M;
    }

    bool strictly_positive() const {
        return (nu.array() > 0).all() && (alpha.array() > 0).all() &&
               (upsilon.array() > 0).all() && (beta.array() > 0).all() &&
               (sigma2.array() > 0).all();
    }

    Vec flatten() const {
        const KernelConfig c{static_cast<int>(alpha.cols()), static_cast<int>(nu.rows()),
                             static_cast<int>(nu.cols())};
        const ParamLayout L(c);
        Vec out(L.size());
        for (int d = 0; d < c.M; ++d) {
            for (int q = 0; q < c.Q; ++q) out[L.nu(d, q)] = nu(d, q);
            for (int i = 0; i < c.n; ++i) out[L.alpha(d, i)] = alpha(d, i);
        }
        for (int q = 0; q < c.Q; ++q) {
            out[L.upsilon(q)] = upsilon[q];
            for (int i = 0; i < c.n; ++i) out[L.beta(q, i)] = beta(q, i);
        }
        for (int d = 0; d < c.M; ++d) out[L.sigma2(d)] = sigma2[d];
        return out;
    }

    static Hyperparameters unflatten(const KernelConfig& c, const Vec& flat) {
        const ParamLayout L(c);
        if (flat.size() != L.size())
            throw DimensionMismatch("Hyperparameters::unflatten: expected " +
                                    std::to_string(L.size()) + " values, got " +
                                    std::to_string(flat.size()));
        Hyperparameters h = filled(c, 0.0);
        for (int d = 0; d < c.M; ++d) {
            for (int q = 0; q < c.Q; ++q) h.nu(d, q) = flat[L.nu(d, q)];
            for (int i = 0; i < c.n; ++i) h.alpha(d, i) = flat[L.alpha(d, i)];
        }
        for (int q = 0; q < c.Q; ++q) {
            h.upsilon[q] = flat[L.upsilon(q)];
            for (int i = 0; i < c.n; ++i) h.beta(q, i) = flat[L.beta(q, i)];
        }
        for (int d = 0; d < c.M; ++d) h.sigma2[d] = flat[L.sigma2(d)];
        return h;
    }
};

struct OutputBlock {
    Mat X;  // J_d x n
    Vec y;  // J_d
};

/// Observations grouped per output. Blocks may have unequal (or zero) sizes.
class Dataset {
public:
    Dataset() = default;

    Dataset(int input_dim, std::vector<OutputBlock> blocks)
        : n_(input_dim), blocks_(std::move(blocks)) {
        if (n_ < 1) throw std::invalid_argument("Dataset: input dimension must be >= 1");
        if (blocks_.empty()) throw std::invalid_argument("Dataset: needs at least one output");
        offsets_.assign(blocks_.size() + 1, 0);
        for (std::size_t d = 0; d < blocks_.size(); ++d) {
            const auto& b = blocks_[d];
            if (b.X.rows() != b.y.size())
                throw DimensionMismatch("Dataset: block " + std::to_string(d) +
                                        " has mismatched X/y sizes");
            if (b.X.rows() > 0 && b.X.cols() != n_)
                throw DimensionMismatch("Dataset: block " + std::to_string(d) +
                                        " has rows of the wrong dimension");
            offsets_[d + 1] = offsets_[d] + b.X.rows();
        }
    }

    int input_dim() const { return n_; }
    int num_outputs() const { return static_cast<int>(blocks_.size()); }
    Index size() const { return offsets_.empty() ? 0 : offsets_.back(); }
    bool empty() const { return size() == 0; }
    const OutputBlock& block(int d) const { return blocks_.at(static_cast<std::size_t>(d)); }
    const std::vector<Index>& offsets() const { return offsets_; }

    Mat stacked_inputs() const {
        Mat X(size(), n_);
        for (int d = 0; d < num_outputs(); ++d)
            if (block(d).X.rows() > 0) X.middleRows(offsets_[d], block(d).X.rows()) = block(d).X;
        return X;
    }

    Vec stacked_targets() const {
        Vec y(size());
        for (int d = 0; d < num_outputs(); ++d)
            y.segment(offsets_[d], block(d).y.size()) = block(d).y;
        return y;
    }

    /// Row subset per output (indices into each block).
    Dataset select(const std::vector<std::vector<Index>>& rows) const {
        if (static_cast<int>(rows.size()) != num_outputs())
            throw DimensionMismatch("Dataset::select: one index list per output required");
        std::vector<OutputBlock> out(rows.size());
        for (std::size_t d = 0; d < rows.size(); ++d) {
            const auto& src = blocks_[d];
            const auto m = static_cast<Index>(rows[d].size());
            out[d].X.resize(m, n_);
            out[d].y.resize(m);
            for (Index r = 0; r < m; ++r) {
                const Index k = rows[d][static_cast<std::size_t>(r)];
                if (k < 0 || k >= src.X.rows()) throw std::out_of_range("Dataset::select");
                out[d].X.row(r) = src.X.row(k);
                out[d].y[r] = src.y[k];
            }
        }
        return Dataset(n_, std::move(out));
    }

    void require_compatible(const KernelConfig& c) const {
        if (c.n != n_ || c.M != num_outputs())
            throw DimensionMismatch("Dataset does not match kernel config (n=" +
                                    std::to_string(n_) + ", M=" +
                                    std::to_string(num_outputs()) + ")");
    }

private:
    int n_ = 1;
    std::vector<OutputBlock> blocks_;
    std::vector<Index> offsets_;
};

/// Per (d, d', q) constants of the covariance.
struct BlockCoef {
    double base = 0.0;   // (2 pi)^{-n/2} |P|^{-1/2}
    double scale = 0.0;  // nu[d,q] nu[d',q] upsilon[q] * base
    Vec s;               // diagonal of P
};

inline BlockCoef block_coef(const Hyperparameters& th, int d, int d2, int q) {
    const auto n = th.alpha.cols();
    BlockCoef c;
    c.s.resize(n);
    double prod = 1.0;
    for (Index i = 0; i < n; ++i) {
        c.s[i] = (1.0 / th.alpha(d, i) + 1.0 / th.alpha(d2, i)) + 1.0 / th.beta(q, i);
        prod *= c.s[i];
    }
    c.base = std::pow(2.0 * std::numbers::pi, -0.5 * static_cast<double>(n)) / std::sqrt(prod);
    c.scale = th.nu(d, q) * th.nu(d2, q) * th.upsilon[q] * c.base;
    return c;
}

/// Noise-free covariance between f_d(x) and f_{d2}(x2).
template <typename A, typename B>
double cross_cov(const Eigen::MatrixBase<A>& x, const Eigen::MatrixBase<B>& x2, int d, int d2,
                 const Hyperparameters& th, const KernelConfig& cfg) {
    double total = 0.0;
    for (int q = 0; q < cfg.Q; ++q) {
        const BlockCoef c = block_coef(th, d, d2, q);
        double quad = 0.0;
        for (int i = 0; i < cfg.n; ++i) {
            const double delta = x(i) - x2(i);
            quad += delta * delta / c.s[i];
        }
        total += c.scale * std::exp(-0.5 * quad);
    }
    return total;
}

/// Squared coordinate differences between two output-grouped point sets, reused
/// across every hyperparameter evaluation on the same data.
class PairGeometry {
public:
    PairGeometry(const Mat& rows, std::vector<Index> row_offsets, const Mat& cols,
                 std::vector<Index> col_offsets, bool symmetric)
        : row_off_(std::move(row_offsets)), col_off_(std::move(col_offsets)),
          symmetric_(symmetric) {
        const Index n = rows.cols();
        sqdiff_.reserve(static_cast<std::size_t>(n));
        for (Index i = 0; i < n; ++i) {
            Mat m(rows.rows(), cols.rows());
            for (Index c = 0; c < cols.rows(); ++c)
                for (Index r = 0; r < rows.rows(); ++r) {
                    const double delta = rows(r, i) - cols(c, i);
                    m(r, c) = delta * delta;
                }
            sqdiff_.push_back(std::move(m));
        }
        n_rows_ = rows.rows();
        n_cols_ = cols.rows();
    }

    /// Training set against itself.
    static PairGeometry self(const Dataset& data) {
        const Mat X = data.stacked_inputs();
        return PairGeometry(X, data.offsets(), X, data.offsets(), true);
    }

    /// Evaluation points (rows) against training points (columns).
    static PairGeometry cross(const Dataset& eval, const Dataset& train) {
        return PairGeometry(eval.stacked_inputs(), eval.offsets(), train.stacked_inputs(),
                            train.offsets(), false);
    }

    Index rows() const { return n_rows_; }
    Index cols() const { return n_cols_; }
    int num_outputs() const { return static_cast<int>(row_off_.size()) - 1; }
    bool symmetric() const { return symmetric_; }
    const std::vector<Index>& row_offsets() const { return row_off_; }
    const std::vector<Index>& col_offsets() const { return col_off_; }

    /// sq(i) restricted to block (d, d2).
    auto block(int i, int d, int d2) const {
        return sqdiff_[static_cast<std::size_t>(i)].block(row_off_[d], col_off_[d2], row_size(d),
                                                          col_size(d2));
    }

    Index row_size(int d) const { return row_off_[d + 1] - row_off_[d]; }
    Index col_size(int d) const { return col_off_[d + 1] - col_off_[d]; }

private:
    std::vector<Index> row_off_, col_off_;
    std::vector<Mat> sqdiff_;
    Index n_rows_ = 0, n_cols_ = 0;
    bool symmetric_ = false;
};

namespace detail {

inline Eigen::ArrayXXd block_exp(const PairGeometry& g, const BlockCoef& c, int d, int d2) {
    const int n = static_cast<int>(c.s.size());
    Eigen::ArrayXXd e = g.block(0, d, d2).array() * (-0.5 / c.s[0]);
    for (int i = 1; i < n; ++i) e += g.block(i, d, d2).array() * (-0.5 / c.s[i]);
    return e.exp();
}

}  // namespace detail

/// Noise-free covariance matrix for a geometry.
inline Mat covariance(const PairGeometry& g, const Hyperparameters& th, const KernelConfig& cfg) {
    Mat K = Mat::Zero(g.rows(), g.cols());
    const int M = cfg.M;
    for (int d = 0; d < M; ++d) {
        for (int d2 = g.symmetric() ? d : 0; d2 < M; ++d2) {
            if (g.row_size(d) == 0 || g.col_size(d2) == 0) continue;
            auto blk = K.block(g.row_offsets()[d], g.col_offsets()[d2], g.row_size(d),
                               g.col_size(d2));
            for (int q = 0; q < cfg.Q; ++q) {
                const BlockCoef c = block_coef(th, d, d2, q);
                blk.array() += c.scale * detail::block_exp(g, c, d, d2);
            }
            if (g.symmetric() && d2 != d)
                K.block(g.row_offsets()[d2], g.col_offsets()[d], g.row_size(d2), g.col_size(d)) =
                    blk.transpose();
        }
    }
    return K;
}

inline void add_noise(Mat& K, const Dataset& data, const Hyperparameters& th) {
    for (int d = 0; d < data.num_outputs(); ++d)
        for (Index r = data.offsets()[d]; r < data.offsets()[d + 1]; ++r) K(r, r) += th.sigma2[d];
}

/// grad[k] += sum_{r,c} W(r,c) dK(r,c)/dtheta_k for the noise-free covariance of
/// geometry g. For symmetric geometries W must be symmetric.
inline void accumulate_kernel_gradient(const PairGeometry& g, const Mat& W,
                                       const Hyperparameters& th, const KernelConfig& cfg,
                                       Vec& grad) {
    const ParamLayout L(cfg);
    const int M = cfg.M;
    for (int d = 0; d < M; ++d) {
        for (int d2 = g.symmetric() ? d : 0; d2 < M; ++d2) {
            if (g.row_size(d) == 0 || g.col_size(d2) == 0) continue;
            const double mult = (g.symmetric() && d2 != d) ? 2.0 : 1.0;
            const auto w = W.block(g.row_offsets()[d], g.col_offsets()[d2], g.row_size(d),
                                   g.col_size(d2))
                               .array();
            for (int q = 0; q < cfg.Q; ++q) {
                const BlockCoef c = block_coef(th, d, d2, q);
                const Eigen::ArrayXXd wb = w * (c.base * detail::block_exp(g, c, d, d2));
                const double sum_wb = mult * wb.sum();
                const double nu_d = th.nu(d, q), nu_d2 = th.nu(d2, q), ups = th.upsilon[q];
                grad[L.nu(d, q)] += nu_d2 * ups * sum_wb;
                grad[L.nu(d2, q)] += nu_d * ups * sum_wb;
                grad[L.upsilon(q)] += nu_d * nu_d2 * sum_wb;
                const double amp = nu_d * nu_d2 * ups;
                const double sum_wt = amp * sum_wb;
                for (int i = 0; i < cfg.n; ++i) {
                    const double si = c.s[i];
                    const double sum_wtd = mult * amp * (wb * g.block(i, d, d2).array()).sum();
                    const double dk_ds = -sum_wt / (2.0 * si) + sum_wtd / (2.0 * si * si);
                    const double ad = th.alpha(d, i), ad2 = th.alpha(d2, i), bq = th.beta(q, i);
                    grad[L.alpha(d, i)] -= dk_ds / (ad * ad);
                    grad[L.alpha(d2, i)] -= dk_ds / (ad2 * ad2);
                    grad[L.beta(q, i)] -= dk_ds / (bq * bq);
                }
            }
        }
    }
}

inline void accumulate_noise_gradient(const Dataset& data, const Mat& W, const KernelConfig& cfg,
                                      Vec& grad) {
    const ParamLayout L(cfg);
    for (int d = 0; d < data.num_outputs(); ++d)
        for (Index r = data.offsets()[d]; r < data.offsets()[d + 1]; ++r)
            grad[L.sigma2(d)] += W(r, r);
}

inline void check_theta(const Hyperparameters& th, const KernelConfig& cfg) {
    cfg.validate();
    if (!th.matches(cfg)) throw DimensionMismatch("Hyperparameters do not match kernel config");
}

inline Mat build_K_yy(const Dataset& data, const Hyperparameters& th, const KernelConfig& cfg) {
    check_theta(th, cfg);
    data.require_compatible(cfg);
    Mat K = covariance(PairGeometry::self(data), th, cfg);
    add_noise(K, data, th);
    return K;
}

inline Mat build_K_cross(const Mat& queries, int query_output, const Dataset& data,
                         const Hyperparameters& th, const KernelConfig& cfg) {
    check_theta(th, cfg);
    data.require_compatible(cfg);
    if (query_output < 0 || query_output >= cfg.M)
        throw std::out_of_range("build_K_cross: query output index out of range");
    if (queries.rows() > 0 && queries.cols() != cfg.n)
        throw DimensionMismatch("build_K_cross: query rows have the wrong dimension");
    std::vector<Index> row_off(static_cast<std::size_t>(cfg.M) + 1, 0);
    for (int d = query_output + 1; d <= cfg.M; ++d) row_off[d] = queries.rows();
    const Mat q = queries.rows() > 0 ? queries : Mat(0, cfg.n);
    return covariance(PairGeometry(q, row_off, data.stacked_inputs(), data.offsets(), false), th,
                      cfg);
}

struct Prediction {
    Vec mean;
    Vec variance;  // clamped at zero
    double min_raw_variance = 0.0;
};

/// Conditioned model: training data, hyperparameters and the factor of K_yy.
class TrainedModel {
public:
    TrainedModel(KernelConfig cfg, Hyperparameters th, Dataset data)
        : cfg_(cfg), th_(std::move(th)), data_(std::move(data)) {
        init(PairGeometry::self(data_));
    }

    /// `self` must be PairGeometry::self(data).
    TrainedModel(KernelConfig cfg, Hyperparameters th, Dataset data, const PairGeometry& self)
        : cfg_(cfg), th_(std::move(th)), data_(std::move(data)) {
        init(self);
    }

    const KernelConfig& config() const { return cfg_; }
    const Hyperparameters& theta() const { return th_; }
    const Dataset& data() const { return data_; }
    const numerics::CholFactor& chol() const { return chol_; }
    /// K_yy^{-1} y
    const Vec& weights() const { return weights_; }

private:
    void init(const PairGeometry& self) {
        check_theta(th_, cfg_);
        data_.require_compatible(cfg_);
        if (data_.empty()) throw std::invalid_argument("TrainedModel: empty training set");
        Mat K = covariance(self, th_, cfg_);
        add_noise(K, data_, th_);
        chol_ = numerics::cholesky_psd(K);
        weights_ = numerics::solve_psd(chol_, data_.stacked_targets());
    }

    KernelConfig cfg_;
    Hyperparameters th_;
    Dataset data_;
    numerics::CholFactor chol_;
    Vec weights_;
};

inline Prediction predict(const TrainedModel& model, const Mat& queries, int query_output) {
    const auto& cfg = model.config();
    const Mat Ks = build_K_cross(queries, query_output, model.data(), model.theta(), cfg);
    Prediction p;
    p.mean = Ks * model.weights();
    const Mat V = numerics::solve_lower(model.chol(), Ks.transpose().eval());
    double prior = 0.0;
    for (int q = 0; q < cfg.Q; ++q)
        prior += block_coef(model.theta(), query_output, query_output, q).scale;
    Vec raw = Vec::Constant(queries.rows(), prior) - V.colwise().squaredNorm().transpose();
    p.min_raw_variance = raw.size() > 0 ? raw.minCoeff() : 0.0;
    p.variance = raw.cwiseMax(0.0);
    return p;
}

inline constexpr double kLog2Pi = 1.8378770664093454836;

/// Negative log marginal likelihood.
inline double nll(const Dataset& data, const Hyperparameters& th, const KernelConfig& cfg) {
    const TrainedModel m(cfg, th, data);
    const Vec y = data.stacked_targets();
    return 0.5 * y.dot(m.weights()) + 0.5 * numerics::logdet(m.chol()) +
           0.5 * static_cast<double>(y.size()) * kLog2Pi;
}

namespace detail {

inline Vec nll_gradient(const TrainedModel& m, const PairGeometry& g) {
    const auto& cfg = m.config();
    const Vec& a = m.weights();
    Mat W = numerics::inverse_psd(m.chol());
    W.noalias() -= a * a.transpose();
    W *= 0.5;
    Vec grad = Vec::Zero(cfg.dimension());
    accumulate_kernel_gradient(g, W, m.theta(), cfg, grad);
    accumulate_noise_gradient(m.data(), W, cfg, grad);
    return grad;
}

struct MseParts {
    double value;
    Vec residual;  // y - mu over the stacked evaluation set
    Mat Ks;
};

inline MseParts mse_parts(const Dataset& eval, const TrainedModel& m, const PairGeometry& cross) {
    if (eval.empty()) throw EmptyEvalSet("mse: evaluation set is empty");
    MseParts p;
    p.Ks = covariance(cross, m.theta(), m.config());
    p.residual = eval.stacked_targets() - p.Ks * m.weights();
    p.value = p.residual.squaredNorm() / static_cast<double>(eval.size());
    return p;
}

inline Vec mse_gradient(const Dataset& eval, const TrainedModel& m, const PairGeometry& self,
                        const PairGeometry& cross, const MseParts& p) {
    const auto& cfg = m.config();
    const Vec& a = m.weights();
    const Vec g = (-2.0 / static_cast<double>(eval.size())) * p.residual;
    const Vec b = numerics::solve_psd(m.chol(), (p.Ks.transpose() * g).eval());
    Vec grad = Vec::Zero(cfg.dimension());
    const Mat w_cross = g * a.transpose();
    accumulate_kernel_gradient(cross, w_cross, m.theta(), cfg, grad);
    const Mat w_self = -0.5 * (b * a.transpose() + a * b.transpose());
    accumulate_kernel_gradient(self, w_self, m.theta(), cfg, grad);
    accumulate_noise_gradient(m.data(), w_self, cfg, grad);
    return grad;
}

}  // namespace detail

/// Gradient of nll with respect to the flattened hyperparameters.
inline Vec nll_grad(const Dataset& data, const Hyperparameters& th, const KernelConfig& cfg) {
    const TrainedModel m(cfg, th, data);
    return detail::nll_gradient(m, PairGeometry::self(data));
}

/// Mean squared error of the predictive mean, pooled over all outputs.
inline double mse(const Dataset& eval, const TrainedModel& model) {
    eval.require_compatible(model.config());
    return detail::mse_parts(eval, model, PairGeometry::cross(eval, model.data())).value;
}

/// Gradient of mse with respect to the flattened hyperparameters of `model`, with
/// K_yy rebuilt as a function of those hyperparameters.
inline Vec mse_grad(const Dataset& eval, const TrainedModel& model) {
    eval.require_compatible(model.config());
    const PairGeometry cross = PairGeometry::cross(eval, model.data());
    const auto parts = detail::mse_parts(eval, model, cross);
    return detail::mse_gradient(eval, model, PairGeometry::self(model.data()), cross, parts);
}

/// Per-output mse; outputs with no evaluation points report NaN.
inline Vec mse_per_output(const Dataset& eval, const TrainedModel& model) {
    eval.require_compatible(model.config());
    Vec out(eval.num_outputs());
    for (int d = 0; d < eval.num_outputs(); ++d) {
        const auto& b = eval.block(d);
        if (b.y.size() == 0) {
            out[d] = std::numeric_limits<double>::quiet_NaN();
            continue;
        }
        const Prediction p = predict(model, b.X, d);
        out[d] = (b.y - p.mean).squaredNorm() / static_cast<double>(b.y.size());
    }
    return out;
}

/// Objectives seen by the optimizers. Geometry is cached; any failure
/// (non-positive hyperparameters, factorization failure) reports +inf.
class NllObjective {
public:
    NllObjective(KernelConfig cfg, Dataset train)
        : cfg_(cfg), train_(std::move(train)), self_(PairGeometry::self(train_)) {
        train_.require_compatible(cfg_);
    }

    double operator()(const Vec& theta) const {
        try {
            const TrainedModel m = model(theta);
            const Vec y = train_.stacked_targets();
            return finite_or_inf(0.5 * y.dot(m.weights()) + 0.5 * numerics::logdet(m.chol()) +
                                 0.5 * static_cast<double>(y.size()) * kLog2Pi);
        } catch (const NotPositiveDefinite&) {
            return kInf;
        } catch (const DimensionMismatch&) {
            throw;
        } catch (const std::invalid_argument&) {
            return kInf;
        }
    }

    double value_and_gradient(const Vec& theta, Vec& grad) const {
        try {
            const TrainedModel m = model(theta);
            const Vec y = train_.stacked_targets();
            grad = detail::nll_gradient(m, self_);
            const double v = 0.5 * y.dot(m.weights()) + 0.5 * numerics::logdet(m.chol()) +
                             0.5 * static_cast<double>(y.size()) * kLog2Pi;
            if (!grad.allFinite()) return kInf;
            return finite_or_inf(v);
        } catch (const NotPositiveDefinite&) {
            grad = Vec::Zero(cfg_.dimension());
            return kInf;
        } catch (const DimensionMismatch&) {
            throw;
        } catch (const std::invalid_argument&) {
            grad = Vec::Zero(cfg_.dimension());
            return kInf;
        }
    }

    const KernelConfig& config() const { return cfg_; }
    const Dataset& train() const { return train_; }

private:
    static constexpr double kInf = std::numeric_limits<double>::infinity();

    static double finite_or_inf(double v) { return std::isfinite(v) ? v : kInf; }

    TrainedModel model(const Vec& theta) const {
        Hyperparameters th = Hyperparameters::unflatten(cfg_, theta);
        if (!th.strictly_positive()) throw std::invalid_argument("non-positive hyperparameter");
        return TrainedModel(cfg_, std::move(th), train_, self_);
    }

    KernelConfig cfg_;
    Dataset train_;
    PairGeometry self_;
};

class MseObjective {
public:
    MseObjective(KernelConfig cfg, Dataset train, Dataset eval)
        : cfg_(cfg), train_(std::move(train)), eval_(std::move(eval)),
          self_(PairGeometry::self(train_)), cross_(PairGeometry::cross(eval_, train_)) {
        train_.require_compatible(cfg_);
        eval_.require_compatible(cfg_);
        if (eval_.empty()) throw EmptyEvalSet("MseObjective: evaluation set is empty");
    }

    double operator()(const Vec& theta) const {
        try {
            const TrainedModel m = model(theta);
            return finite_or_inf(detail::mse_parts(eval_, m, cross_).value);
        } catch (const NotPositiveDefinite&) {
            return kInf;
        } catch (const DimensionMismatch&) {
            throw;
        } catch (const std::invalid_argument&) {
            return kInf;
        }
    }

    double value_and_gradient(const Vec& theta, Vec& grad) const {
        try {
            const TrainedModel m = model(theta);
            const auto parts = detail::mse_parts(eval_, m, cross_);
            grad = detail::mse_gradient(eval_, m, self_, cross_, parts);
            if (!grad.allFinite()) return kInf;
            return finite_or_inf(parts.value);
        } catch (const NotPositiveDefinite&) {
            grad = Vec::Zero(cfg_.dimension());
            return kInf;
        } catch (const DimensionMismatch&) {
            throw;
        } catch (const std::invalid_argument&) {
            grad = Vec::Zero(cfg_.dimension());
            return kInf;
        }
    }

    const KernelConfig& config() const { return cfg_; }
    const Dataset& train() const { return train_; }
    const Dataset& eval() const { return eval_; }

private:
    static constexpr double kInf = std::numeric_limits<double>::infinity();

    static double finite_or_inf(double v) { return std::isfinite(v) ? v : kInf; }

    TrainedModel model(const Vec& theta) const {
        Hyperparameters th = Hyperparameters::unflatten(cfg_, theta);
        if (!th.strictly_positive()) throw std::invalid_argument("non-positive hyperparameter");
        return TrainedModel(cfg_, std::move(th), train_, self_);
    }

    KernelConfig cfg_;
    Dataset train_;
    Dataset eval_;
    PairGeometry self_;
    PairGeometry cross_;
};

}  // namespace cgp
}  // namespace cgpso
