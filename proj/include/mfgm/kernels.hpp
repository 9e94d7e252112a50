#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "mfgm/errors.hpp"
#include "mfgm/time_grid.hpp"

namespace mfgm {

enum class KernelKind { rbf, neural_net };

inline std::string_view to_string(KernelKind kind) {
    return kind == KernelKind::rbf ? "rbf" : "neural_net";
}

inline KernelKind kernel_kind_from_string(std::string_view name) {
    if (name == "rbf") return KernelKind::rbf;
    if (name == "neural_net" || name == "sigmoid") return KernelKind::neural_net;
    throw InvalidArgument("unknown kernel kind '" + std::string(name) + "'");
}

/// Hyperparameters of a stationary RBF kernel or of the (non-stationary) neural-network kernel.
///
///   rbf:        k(s,t) = sf2 * exp(-(s-t)^2 / (2 l^2))
///   neural_net: k(s,t) = sf2 * asin((a + b s t) / sqrt((a + b s^2 + 1)(a + b t^2 + 1)))
///
/// Only the fields belonging to `kind` are read.
struct KernelSpec {
    KernelKind kind = KernelKind::rbf;
    double signal_variance = 1.0;
    double rbf_lengthscale = 1.0;
    double nn_offset = 1.0;
    double nn_scale = 1.0;

    static KernelSpec rbf(double signal_variance, double lengthscale) {
        return {KernelKind::rbf, signal_variance, lengthscale, 1.0, 1.0};
    }
    static KernelSpec neural_net(double signal_variance, double offset, double scale) {
        return {KernelKind::neural_net, signal_variance, 1.0, offset, scale};
    }

    void validate() const {
        auto positive = [](double v) { return std::isfinite(v) && v > 0.0; };
        if (!positive(signal_variance)) throw InvalidArgument("kernel signal_variance must be > 0");
        if (kind == KernelKind::rbf && !positive(rbf_lengthscale)) {
            throw InvalidArgument("rbf lengthscale must be > 0");
        }
        if (kind == KernelKind::neural_net && (!positive(nn_offset) || !positive(nn_scale))) {
            throw InvalidArgument("neural_net offset and scale must be > 0");
        }
    }

    bool operator==(const KernelSpec&) const = default;
};

/// Kernel value together with its first and mixed second derivatives at (s, t).
struct KernelDerivs {
    double k;     // k(s,t)
    double ds;    // dk/ds   = cov(x'(s), x(t))
    double dt;    // dk/dt   = cov(x(s), x'(t))
    double dsdt;  // d2k/dsdt = cov(x'(s), x'(t))
};

namespace detail {

inline KernelDerivs rbf_derivs(const KernelSpec& spec, double s, double t) {
    const double l2 = spec.rbf_lengthscale * spec.rbf_lengthscale;
    const double d = s - t;
    const double k = spec.signal_variance * std::exp(-0.5 * d * d / l2);
    return {k, -d / l2 * k, d / l2 * k, (1.0 / l2 - d * d / (l2 * l2)) * k};
}

inline KernelDerivs neural_net_derivs(const KernelSpec& spec, double s, double t) {
    const double a = spec.nn_offset;
    const double b = spec.nn_scale;
    const double p = a + b * s * t;
    const double qs = a + b * s * s + 1.0;
    const double qt = a + b * t * t + 1.0;
    const double r = 1.0 / std::sqrt(qs * qt);
    const double u = p * r;
    const double u_s = b * r * (t - p * s / qs);
    const double u_t = b * r * (s - p * t / qt);
    const double u_st = b * r * (1.0 - b * s * s / qs - (b * t / qt) * (t - p * s / qs));
    const double one_minus = 1.0 - u * u;  // > 0 because of the +1 in qs, qt
    const double inv_sqrt = 1.0 / std::sqrt(one_minus);
    const double sf2 = spec.signal_variance;
    return {sf2 * std::asin(u), sf2 * u_s * inv_sqrt, sf2 * u_t * inv_sqrt,
            sf2 * (u_st * inv_sqrt + u * u_s * u_t * inv_sqrt / one_minus)};
}

}  // namespace detail

inline KernelDerivs kernel_derivs(const KernelSpec& spec, double s, double t) {
    return spec.kind == KernelKind::rbf ? detail::rbf_derivs(spec, s, t)
                                        : detail::neural_net_derivs(spec, s, t);
}

inline double kernel_eval(const KernelSpec& spec, double s, double t) {
    return kernel_derivs(spec, s, t).k;
}

/// The four covariance blocks of a GP and its derivative on a grid.
struct DerivKernelSet {
    Eigen::MatrixXd C;    // cov(x(s), x(t)), jitter included on the diagonal
    Eigen::MatrixXd Cd;   // cov(x'(s), x(t))
    Eigen::MatrixXd dC;   // cov(x(s), x'(t)) == Cd^T
    Eigen::MatrixXd Cdd;  // cov(x'(s), x'(t))
    double jitter = 0.0;
    Eigen::LLT<Eigen::MatrixXd> C_llt;  // factor of C
};

/// Default diagonal regularization: 1e-6 times the mean prior variance on the grid.
inline double default_jitter(const KernelSpec& spec, const TimeGrid& grid) {
    double sum = 0.0;
    for (double t : grid.times()) sum += kernel_eval(spec, t, t);
    return 1e-6 * sum / static_cast<double>(grid.size());
}

/// Assembles C, Cd, dC, Cdd. Jitter starts at `base_jitter` and grows x10 (at most eight
/// times) until C factorizes.
inline DerivKernelSet build_deriv_kernels(const KernelSpec& spec, const TimeGrid& grid,
                                          double base_jitter) {
    spec.validate();
    if (!(base_jitter >= 0.0) || !std::isfinite(base_jitter)) {
        throw InvalidArgument("base_jitter must be finite and >= 0");
    }
    const auto n = static_cast<Eigen::Index>(grid.size());
    DerivKernelSet out;
    out.C.resize(n, n);
    out.Cd.resize(n, n);
    out.dC.resize(n, n);
    out.Cdd.resize(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j < n; ++j) {
            const auto d = kernel_derivs(spec, grid[i], grid[j]);
            out.C(i, j) = d.k;
            out.Cd(i, j) = d.ds;
            out.dC(i, j) = d.dt;
            out.Cdd(i, j) = d.dsdt;
        }
    }
    // exact symmetry, independent of rounding in the closed forms
    out.C = (0.5 * (out.C + out.C.transpose())).eval();
    out.Cdd = (0.5 * (out.Cdd + out.Cdd.transpose())).eval();
    out.dC = out.Cd.transpose();

    const double mean_diag = out.C.diagonal().mean();
    double jitter = base_jitter;
    for (int attempt = 0; attempt <= 8; ++attempt) {
        Eigen::MatrixXd jittered = out.C;
        jittered.diagonal().array() += jitter;
        out.C_llt.compute(jittered);
        if (out.C_llt.info() == Eigen::Success) {
            out.C = std::move(jittered);
            out.jitter = jitter;
            return out;
        }
        jitter = jitter > 0.0 ? jitter * 10.0 : 1e-10 * mean_diag;
    }
    throw NotPositiveDefinite("kernel matrix is not positive definite even with jitter " +
                              std::to_string(jitter / 10.0));
}

// ---------------------------------------------------------------------------------------------
// Empirical Bayes hyperparameter fitting

/// Standard GP log marginal likelihood of `y` under N(0, C + noise I). -inf when not PD.
inline double log_marginal_likelihood(const KernelSpec& spec, const TimeGrid& grid,
                                      const Eigen::VectorXd& y, double noise_variance) {
    const auto n = static_cast<Eigen::Index>(grid.size());
    Eigen::MatrixXd K(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j <= i; ++j) {
            K(i, j) = K(j, i) = kernel_eval(spec, grid[i], grid[j]);
        }
    }
    K.diagonal().array() += noise_variance;
    Eigen::LLT<Eigen::MatrixXd> llt(K);
    if (llt.info() != Eigen::Success) return -std::numeric_limits<double>::infinity();
    const Eigen::VectorXd alpha = llt.solve(y);
    const double logdet = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
    const double value = -0.5 * y.dot(alpha) - 0.5 * logdet -
                         0.5 * static_cast<double>(n) * std::log(2.0 * M_PI);
    return std::isfinite(value) ? value : -std::numeric_limits<double>::infinity();
}

struct HyperparameterFit {
    KernelSpec spec;
    double noise_variance;
    double log_marginal_likelihood;
    double initial_log_marginal_likelihood;
};

struct HyperparameterFitOptions {
    int restarts = 5;
    int max_iterations = 200;
    double floor = 1e-6;
    double ceiling = 1e6;
    std::uint64_t seed = 1;
};

namespace detail {

inline std::vector<double> pack_log_params(const KernelSpec& spec, double noise, bool fit_noise) {
    std::vector<double> p{std::log(spec.signal_variance)};
    if (spec.kind == KernelKind::rbf) {
        p.push_back(std::log(spec.rbf_lengthscale));
    } else {
        p.push_back(std::log(spec.nn_offset));
        p.push_back(std::log(spec.nn_scale));
    }
    if (fit_noise) p.push_back(std::log(noise));
    return p;
}

inline std::pair<KernelSpec, double> unpack_log_params(const std::vector<double>& p,
                                                       KernelKind kind, double fixed_noise,
                                                       bool fit_noise) {
    KernelSpec spec;
    spec.kind = kind;
    spec.signal_variance = std::exp(p[0]);
    std::size_t i = 1;
    if (kind == KernelKind::rbf) {
        spec.rbf_lengthscale = std::exp(p[i++]);
    } else {
        spec.nn_offset = std::exp(p[i++]);
        spec.nn_scale = std::exp(p[i++]);
    }
    const double noise = fit_noise ? std::exp(p[i]) : fixed_noise;
    return {spec, noise};
}

}  // namespace detail

/// Maximizes the log marginal likelihood over the kernel hyperparameters (and the noise
/// variance when `fit_noise`) by multi-start compass search in log-parameter space. The first
/// start is `init`; the others are seeded uniform perturbations of it by up to e^{+-2}.
inline HyperparameterFit fit_hyperparameters(KernelKind kind, const TimeGrid& grid,
                                             const Eigen::VectorXd& observations,
                                             KernelSpec init, double init_noise_variance,
                                             bool fit_noise,
                                             const HyperparameterFitOptions& options = {}) {
    if (static_cast<std::size_t>(observations.size()) != grid.size()) {
        throw DimensionMismatch("observations length " + std::to_string(observations.size()) +
                                " does not match grid size " + std::to_string(grid.size()));
    }
    if (!observations.allFinite()) throw InvalidArgument("observations must be finite");
    init.kind = kind;
    init.validate();
    if (!(init_noise_variance > 0.0)) throw InvalidArgument("noise variance must be > 0");

    const double lo = std::log(options.floor);
    const double hi = std::log(options.ceiling);
    auto objective = [&](const std::vector<double>& p) {
        const auto [spec, noise] = detail::unpack_log_params(p, kind, init_noise_variance, fit_noise);
        return log_marginal_likelihood(spec, grid, observations, noise);
    };

    const std::vector<double> p0 = detail::pack_log_params(init, init_noise_variance, fit_noise);
    const double init_value = objective(p0);

    std::mt19937_64 rng(options.seed);
    std::uniform_real_distribution<double> perturb(-2.0, 2.0);

    std::optional<std::vector<double>> best;
    double best_value = -std::numeric_limits<double>::infinity();
    for (int start = 0; start < std::max(1, options.restarts); ++start) {
        std::vector<double> p = p0;
        if (start > 0) {
            for (double& v : p) v += perturb(rng);
        }
        for (double& v : p) v = std::clamp(v, lo, hi);
        double value = objective(p);
        double step = 1.0;
        for (int iter = 0; iter < options.max_iterations && step > 1e-5; ++iter) {
            bool improved = false;
            for (std::size_t c = 0; c < p.size(); ++c) {
                for (double dir : {+1.0, -1.0}) {
                    std::vector<double> trial = p;
                    trial[c] = std::clamp(trial[c] + dir * step, lo, hi);
                    if (trial[c] == p[c]) continue;
                    const double v = objective(trial);
                    if (v > value) {
                        p = std::move(trial);
                        value = v;
                        improved = true;
                        break;
                    }
                }
            }
            if (!improved) step *= 0.5;
        }
        if (std::isfinite(value) && value > best_value) {
            best_value = value;
            best = p;
        }
    }
    if (!best || (std::isfinite(init_value) && best_value < init_value)) {
        throw OptimFailed("hyperparameter search found no finite improvement over the initial values");
    }
    const auto [spec, noise] = detail::unpack_log_params(*best, kind, init_noise_variance, fit_noise);
    return {spec, noise, best_value, init_value};
}

}  // namespace mfgm
