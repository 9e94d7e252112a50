#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <string>

#include "mfgm/errors.hpp"
#include "mfgm/ode_model.hpp"

namespace mfgm {

/// Mean-field proxy over a K x N state matrix: one independent Gaussian per (state, time) cell.
struct FactorizedGaussian {
    Eigen::MatrixXd mean;      // K x N
    Eigen::MatrixXd variance;  // K x N, strictly positive (zero only for a pinned cell)

    FactorizedGaussian() = default;
    FactorizedGaussian(Eigen::MatrixXd m, Eigen::MatrixXd v) : mean(std::move(m)), variance(std::move(v)) {
        if (mean.rows() != variance.rows() || mean.cols() != variance.cols()) {
            throw DimensionMismatch("proxy mean and variance shapes differ");
        }
    }

    [[nodiscard]] Eigen::Index num_states() const noexcept { return mean.rows(); }
    [[nodiscard]] Eigen::Index num_times() const noexcept { return mean.cols(); }

    /// E[x_k(t)^2]
    [[nodiscard]] double second_moment(int k, Eigen::Index t) const {
        return mean(k, t) * mean(k, t) + variance(k, t);
    }
};

namespace detail {

inline void check_cell_range(const FactorizedGaussian& q, const Monomial& m, Eigen::Index t) {
    if (t < 0 || t >= q.num_times()) {
        throw IndexOutOfRange("time index " + std::to_string(t) + " out of range");
    }
    if (!m.empty() && m.states().back() >= q.num_states()) {
        throw IndexOutOfRange("monomial state index " + std::to_string(m.states().back()) + " out of range");
    }
}

}  // namespace detail

/// E_Q[prod_{j in m} x_j(t)]; cells are independent, so this is the product of means.
inline double expected_monomial(const FactorizedGaussian& q, const Monomial& m, Eigen::Index t) {
    detail::check_cell_range(q, m, t);
    double v = 1.0;
    for (int j : m.states()) v *= q.mean(j, t);
    return v;
}

/// E_Q[m1(t1) * m2(t2)]. A cell present in both factors contributes its second moment; all
/// other cells their mean. Degree per cell never exceeds two since monomials are sets.
inline double expected_monomial_product(const FactorizedGaussian& q, const Monomial& m1,
                                        Eigen::Index t1, const Monomial& m2, Eigen::Index t2) {
    detail::check_cell_range(q, m1, t1);
    detail::check_cell_range(q, m2, t2);
    if (t1 != t2) return expected_monomial(q, m1, t1) * expected_monomial(q, m2, t2);
    const auto& a = m1.states();
    const auto& b = m2.states();
    double v = 1.0;
    std::size_t i = 0, j = 0;
    while (i < a.size() || j < b.size()) {
        if (j == b.size() || (i < a.size() && a[i] < b[j])) {
            v *= q.mean(a[i++], t1);
        } else if (i == a.size() || b[j] < a[i]) {
            v *= q.mean(b[j++], t1);
        } else {
            v *= q.second_moment(a[i], t1);
            ++i;
            ++j;
        }
    }
    return v;
}

/// sum over cells of 1/2 ln(2 pi e Gamma)
inline double entropy(const FactorizedGaussian& q) {
    if ((q.variance.array() <= 0.0).any()) throw InvalidArgument("proxy variances must be > 0");
    const double c = 0.5 * std::log(2.0 * M_PI * M_E);
    return static_cast<double>(q.variance.size()) * c + 0.5 * q.variance.array().log().sum();
}

/// A Gaussian stored through its precision matrix, which is what the proxy updates consume.
struct PrecisionGaussian {
    Eigen::VectorXd mean;
    Eigen::MatrixXd precision;
    double logdet_precision = 0.0;

    static PrecisionGaussian from_covariance(Eigen::VectorXd mean, const Eigen::MatrixXd& cov) {
        Eigen::LLT<Eigen::MatrixXd> llt(cov);
        if (llt.info() != Eigen::Success) throw NotPositiveDefinite("covariance is not positive definite");
        const auto n = cov.rows();
        Eigen::MatrixXd prec = llt.solve(Eigen::MatrixXd::Identity(n, n));
        prec = (0.5 * (prec + prec.transpose())).eval();
        const double logdet_cov = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
        return {std::move(mean), std::move(prec), -logdet_cov};
    }
};

/// E_Q[ln N(x_k | g.mean, g.precision^{-1})] for row k of the proxy.
inline double expected_gaussian_logdensity(const FactorizedGaussian& q, int k, const PrecisionGaussian& g) {
    const auto n = q.num_times();
    if (g.mean.size() != n || g.precision.rows() != n || g.precision.cols() != n) {
        throw DimensionMismatch("Gaussian dimension does not match the proxy time axis");
    }
    if (k < 0 || k >= q.num_states()) throw IndexOutOfRange("state index out of range");
    const Eigen::VectorXd diff = q.mean.row(k).transpose() - g.mean;
    const double quad = diff.dot(g.precision * diff);
    const double trace = g.precision.diagonal().dot(q.variance.row(k).transpose());
    return -0.5 * (static_cast<double>(n) * std::log(2.0 * M_PI) - g.logdet_precision + quad + trace);
}

inline double expected_gaussian_logdensity(const FactorizedGaussian& q, int k, const Eigen::VectorXd& mean,
                                           const Eigen::MatrixXd& cov) {
    return expected_gaussian_logdensity(q, k, PrecisionGaussian::from_covariance(mean, cov));
}

}  // namespace mfgm
