#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "mfgm/errors.hpp"
#include "mfgm/kernels.hpp"
#include "mfgm/moments.hpp"
#include "mfgm/time_grid.hpp"

namespace mfgm {

/// Observation-informed GP posterior of one state trajectory.
struct StatePosterior {
    Eigen::VectorXd mean;
    Eigen::MatrixXd cov;
    /// Same distribution in precision form, P = C^{-1} + I / sigma^2.
    PrecisionGaussian precision_form;
};

/// mu = C (C + s2 I)^{-1} y,  Sigma = s2 C (C + s2 I)^{-1}, all through Cholesky solves.
inline StatePosterior state_posterior(const DerivKernelSet& kernels, double noise_variance,
                                      const Eigen::VectorXd& y) {
    if (!(noise_variance > 0.0)) throw InvalidArgument("noise variance must be > 0");
    const auto n = kernels.C.rows();
    if (y.size() != n) throw DimensionMismatch("observation vector does not match the kernel grid");

    Eigen::MatrixXd noisy = kernels.C;
    noisy.diagonal().array() += noise_variance;
    Eigen::LLT<Eigen::MatrixXd> llt(noisy);
    if (llt.info() != Eigen::Success) throw NotPositiveDefinite("C + sigma^2 I is not positive definite");

    StatePosterior post;
    post.mean = kernels.C * llt.solve(y);
    // C (C+s2 I)^{-1} = ((C+s2 I)^{-1} C)^T since both are symmetric
    Eigen::MatrixXd cov = noise_variance * llt.solve(kernels.C).transpose();
    post.cov = 0.5 * (cov + cov.transpose());

    Eigen::MatrixXd prec = kernels.C_llt.solve(Eigen::MatrixXd::Identity(n, n));
    prec.diagonal().array() += 1.0 / noise_variance;
    prec = (0.5 * (prec + prec.transpose())).eval();
    const double logdet_c = 2.0 * kernels.C_llt.matrixLLT().diagonal().array().log().sum();
    const double logdet_noisy = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
    // log|Sigma| = n log s2 + log|C| - log|C + s2 I|
    const double logdet_cov = static_cast<double>(n) * std::log(noise_variance) + logdet_c - logdet_noisy;
    post.precision_form = PrecisionGaussian{post.mean, std::move(prec), -logdet_cov};
    return post;
}

/// Operators of the derivative conditional p(x' | x) = N(D x, A) and the gradient-matching
/// precision Lambda = (A + gamma I)^{-1}.
struct DerivOps {
    Eigen::MatrixXd D;
    Eigen::MatrixXd A;
    Eigen::MatrixXd Lambda;
    double gamma = 0.0;
    double logdet_Lambda = 0.0;
};

inline DerivOps derivative_ops(const DerivKernelSet& kernels, double gamma) {
    if (!(gamma > 0.0)) throw InvalidArgument("gamma must be > 0");
    const auto n = kernels.C.rows();
    DerivOps ops;
    ops.gamma = gamma;
    ops.D = kernels.C_llt.solve(kernels.dC).transpose();  // Cd C^{-1}
    Eigen::MatrixXd A = kernels.Cdd - ops.D * kernels.dC;
    ops.A = 0.5 * (A + A.transpose());

    Eigen::MatrixXd slack = ops.A;
    slack.diagonal().array() += gamma;
    Eigen::LLT<Eigen::MatrixXd> llt(slack);
    if (llt.info() != Eigen::Success) {
        throw NotPositiveDefinite("A + gamma I is not positive definite; gamma " + std::to_string(gamma) +
                                  " is too small for this kernel");
    }
    Eigen::MatrixXd lambda = llt.solve(Eigen::MatrixXd::Identity(n, n));
    ops.Lambda = 0.5 * (lambda + lambda.transpose());
    ops.logdet_Lambda = -2.0 * llt.matrixLLT().diagonal().array().log().sum();
    return ops;
}

/// Everything the variational engine needs about one state.
struct GpState {
    StatePosterior posterior;  // on the original (uncentered) scale
    DerivOps ops;
    double offset = 0.0;       // subtracted before GP regression, restored in the mean
    Eigen::VectorXd drift;     // offset * D 1, so that m = D x - drift
    double jitter = 0.0;
    KernelSpec kernel;
    double noise_variance = 0.0;
};

struct GpLayerOptions {
    bool center = true;
    /// Per-state base jitter; empty means the scale-aware default.
    std::optional<double> base_jitter;
};

/// Builds one GpState from a single observed trajectory.
inline GpState build_gp_state(const KernelSpec& spec, const TimeGrid& grid, double noise_variance, double gamma,
                              const Eigen::VectorXd& y, const GpLayerOptions& options = {}) {
    const double jitter = options.base_jitter.value_or(default_jitter(spec, grid));
    const DerivKernelSet kernels = build_deriv_kernels(spec, grid, jitter);
    GpState s;
    s.offset = options.center ? y.mean() : 0.0;
    const Eigen::VectorXd centered = y.array() - s.offset;
    s.posterior = state_posterior(kernels, noise_variance, centered);
    s.posterior.mean.array() += s.offset;
    s.posterior.precision_form.mean = s.posterior.mean;
    s.ops = derivative_ops(kernels, gamma);
    s.drift = s.offset * s.ops.D.rowwise().sum();
    s.jitter = kernels.jitter;
    s.kernel = spec;
    s.noise_variance = noise_variance;
    return s;
}

/// Per-state GP quantities for a K x N observation matrix. The states are independent.
inline std::vector<GpState> build_gp_layer(int num_states, const std::vector<KernelSpec>& specs,
                                           const TimeGrid& grid, const std::vector<double>& noise_variances,
                                           const std::vector<double>& gammas, const Eigen::MatrixXd& Y,
                                           const GpLayerOptions& options = {}) {
    const auto K = static_cast<std::size_t>(num_states);
    if (specs.size() != K || noise_variances.size() != K || gammas.size() != K) {
        throw DimensionMismatch("per-state settings must have one entry for each of the " +
                                std::to_string(K) + " states");
    }
    if (Y.rows() != num_states || static_cast<std::size_t>(Y.cols()) != grid.size()) {
        throw DimensionMismatch("observations are " + std::to_string(Y.rows()) + "x" + std::to_string(Y.cols()) +
                                ", expected " + std::to_string(K) + "x" + std::to_string(grid.size()));
    }
    std::vector<GpState> layer;
    layer.reserve(K);
    for (std::size_t k = 0; k < K; ++k) {
        layer.push_back(build_gp_state(specs[k], grid, noise_variances[k], gammas[k],
                                       Y.row(static_cast<Eigen::Index>(k)).transpose(), options));
    }
    return layer;
}

}  // namespace mfgm
