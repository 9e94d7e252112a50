#pragma once

// Mean-field coordinate ascent for GP gradient matching.
//
// The variational objective for a factorized Gaussian proxy Q over the K x N state matrix is
//
//   L(Q, theta) = H(Q)
//               + sum_k E_Q ln N(f_k(X, theta) - m_k(X) | 0, Lambda_k^{-1})
//               + sum_k E_Q ln N(x_k | mu_k, Sigma_k)
//               [+ ln N(theta | 0, prior_precision^{-1} I)]
//
// with m_k = D_k x_k - drift_k. Because every monomial is a set, f_k is affine in any single
// cell x_u(alpha) and linear in theta, so L restricted to one cell (or to theta) is a concave
// quadratic. Restricted to a whole row x_u it is still a concave quadratic in the means, and
// separable in the variances. The E-step either replaces each cell by its exact coordinate
// optimum (cellwise) or each row by its exact joint optimum (statewise); both have the same
// fixed points, and the row update gets there in far fewer sweeps because the GP prior couples
// neighbouring time points strongly. The M-step solves for theta in closed form, so L never
// decreases between sweeps.

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "mfgm/errors.hpp"
#include "mfgm/gp_layer.hpp"
#include "mfgm/moments.hpp"
#include "mfgm/ode_model.hpp"
#include "mfgm/time_grid.hpp"

namespace mfgm {

/// Gaussian factor over one scalar in natural parameters. precision == 0 is a flat factor.
struct GaussianFactor {
    double precision = 0.0;
    double shift = 0.0;  // precision * mean

    static GaussianFactor from_moments(double mean, double variance) {
        return {1.0 / variance, mean / variance};
    }
    [[nodiscard]] bool flat() const noexcept { return precision <= 0.0; }
    [[nodiscard]] double mean() const { return shift / precision; }
    [[nodiscard]] double variance() const { return 1.0 / precision; }
};

struct ThetaPosterior {
    Eigen::VectorXd mean;  // zeta
    Eigen::MatrixXd cov;   // Psi

    [[nodiscard]] Eigen::VectorXd stddev() const { return cov.diagonal().array().sqrt(); }
};

/// Per-state operators of the gradient-matching term, precomputed once per run.
struct MatchingOperators {
    Eigen::MatrixXd D;
    Eigen::MatrixXd Lambda;
    Eigen::MatrixXd LambdaD;     // Lambda D
    Eigen::MatrixXd DtLambdaD;   // D^T Lambda D
    Eigen::VectorXd drift;
    Eigen::VectorXd LambdaDrift;
    double logdet_Lambda = 0.0;
};

/// Term of equation k that contains state u, with u factored out.
struct SlopeTerm {
    int param;
    int sign;
    Monomial rest;
};

/// The ODE side of the objective: the system plus per-state matching operators.
class GradientMatching {
public:
    GradientMatching(OdeSystem system, const std::vector<GpState>& gp) : system_(std::move(system)) {
        const int K = system_.num_states();
        if (static_cast<int>(gp.size()) != K) {
            throw DimensionMismatch("GP layer has " + std::to_string(gp.size()) + " states, system has " +
                                    std::to_string(K));
        }
        num_times_ = gp.front().ops.D.rows();
        ops_.reserve(gp.size());
        for (const auto& s : gp) {
            if (s.ops.D.rows() != num_times_) throw DimensionMismatch("GP states disagree on grid size");
            MatchingOperators m;
            m.D = s.ops.D;
            m.Lambda = s.ops.Lambda;
            m.LambdaD = m.Lambda * m.D;
            m.DtLambdaD = m.D.transpose() * m.LambdaD;
            m.DtLambdaD = (0.5 * (m.DtLambdaD + m.DtLambdaD.transpose())).eval();
            m.drift = s.drift.size() == num_times_ ? s.drift : Eigen::VectorXd::Zero(num_times_);
            m.LambdaDrift = m.Lambda * m.drift;
            m.logdet_Lambda = s.ops.logdet_Lambda;
            ops_.push_back(std::move(m));
        }
        slope_terms_.assign(K, std::vector<std::vector<SlopeTerm>>(K));
        for (int k = 0; k < K; ++k) {
            for (const auto& term : system_.equation(k)) {
                for (int u : term.monomial.states()) {
                    slope_terms_[k][u].push_back({term.param, term.sign, term.monomial.without(u)});
                }
            }
        }
    }

    [[nodiscard]] const OdeSystem& system() const noexcept { return system_; }
    [[nodiscard]] const MatchingOperators& ops(int k) const { return ops_.at(k); }
    [[nodiscard]] Eigen::Index num_times() const noexcept { return num_times_; }
    [[nodiscard]] const std::vector<SlopeTerm>& slope_terms(int k, int u) const { return slope_terms_[k][u]; }

private:
    OdeSystem system_;
    Eigen::Index num_times_ = 0;
    std::vector<MatchingOperators> ops_;
    std::vector<std::vector<std::vector<SlopeTerm>>> slope_terms_;
};

// ---------------------------------------------------------------------------------------------
// E-step pieces

/// Conditional of coordinate alpha of N(mu_u, Sigma_u) given the other coordinates at their
/// current proxy means. Uses the precision form: Xi = 1/P_aa, iota = mu_a - P_a,rest (nu - mu)_rest / P_aa.
inline GaussianFactor obs_proxy(int u, Eigen::Index alpha, const FactorizedGaussian& q, const StatePosterior& post) {
    const auto& P = post.precision_form.precision;
    const auto n = P.rows();
    if (n < 2) throw InvalidArgument("conditioning needs at least two time points");
    if (alpha < 0 || alpha >= n || u < 0 || u >= q.num_states()) throw IndexOutOfRange("cell out of range");
    const double paa = P(alpha, alpha);
    if (!(paa > 0.0)) throw NotPositiveDefinite("state posterior precision has a non-positive diagonal");
    double coupling = 0.0;
    for (Eigen::Index b = 0; b < n; ++b) {
        if (b != alpha) coupling += P(alpha, b) * (q.mean(u, b) - post.mean[b]);
    }
    return {paa, paa * post.mean[alpha] - coupling};
}

namespace detail {

/// Factors from each equation for cell (u, alpha). `q` must have that cell pinned to
/// mean 0 and variance 0, which makes every expectation below one over the remaining cells.
inline std::vector<GaussianFactor> ode_factors_pinned(int u, Eigen::Index alpha, const FactorizedGaussian& q,
                                                      const Eigen::VectorXd& theta, const GradientMatching& gm) {
    const OdeSystem& sys = gm.system();
    const int K = sys.num_states();
    const Eigen::Index N = gm.num_times();
    std::vector<GaussianFactor> out(static_cast<std::size_t>(K));

    for (int k = 0; k < K; ++k) {
        const auto& st = gm.slope_terms(k, u);
        const bool self = (k == u);
        if (st.empty() && !self) continue;
        const MatchingOperators& m = gm.ops(k);

        // slope a = sum_i c_i rest_i(alpha); s = a e_alpha - [k==u] D_u(:, alpha)
        double Ea = 0.0;
        double Ea2 = 0.0;
        for (std::size_t i = 0; i < st.size(); ++i) {
            const double ci = st[i].sign * theta[st[i].param];
            Ea += ci * expected_monomial(q, st[i].rest, alpha);
            for (std::size_t j = 0; j < st.size(); ++j) {
                const double cj = st[j].sign * theta[st[j].param];
                Ea2 += ci * cj * expected_monomial_product(q, st[i].rest, alpha, st[j].rest, alpha);
            }
        }

        double p = Ea2 * m.Lambda(alpha, alpha);
        if (self) p += -2.0 * Ea * m.LambdaD(alpha, alpha) + m.DtLambdaD(alpha, alpha);

        // E[r0] where r0 = f_k - D_k x_k + drift_k with the pinned cell at zero
        Eigen::VectorXd Ef = Eigen::VectorXd::Zero(N);
        for (Eigen::Index t = 0; t < N; ++t) {
            for (const auto& term : sys.equation(k)) {
                Ef[t] += term.coefficient(theta) * expected_monomial(q, term.monomial, t);
            }
        }
        const Eigen::VectorXd nu_k = q.mean.row(k).transpose();

        double EaLr = 0.0;  // E[a (Lambda r0)_alpha]
        if (!st.empty()) {
            const Monomial xk{k};
            double EaF = 0.0;  // E[a f0(alpha)]
            double Eax = 0.0;  // E[a x_k(alpha)]
            for (const auto& si : st) {
                const double ci = si.sign * theta[si.param];
                for (const auto& term : sys.equation(k)) {
                    EaF += ci * term.coefficient(theta) *
                           expected_monomial_product(q, si.rest, alpha, term.monomial, alpha);
                }
                Eax += ci * expected_monomial_product(q, si.rest, alpha, xk, alpha);
            }
            const double lam_aa = m.Lambda(alpha, alpha);
            const double term_f = Ea * m.Lambda.row(alpha).dot(Ef) + lam_aa * (EaF - Ea * Ef[alpha]);
            const double term_d =
                Ea * m.LambdaD.row(alpha).dot(nu_k) + m.LambdaD(alpha, alpha) * (Eax - Ea * nu_k[alpha]);
            const double term_c = Ea * m.LambdaDrift[alpha];
            EaLr = term_f - term_d + term_c;
        }
        double dLr = 0.0;  // E[d^T Lambda r0]
        if (self) {
            const Eigen::VectorXd Er = Ef - m.D * nu_k + m.drift;
            dLr = m.LambdaD.col(alpha).dot(Er);
        }
        const double h = -(EaLr - dLr);
        if (p > 0.0) out[static_cast<std::size_t>(k)] = {p, h};
    }
    return out;
}

}  // namespace detail

/// Natural parameters contributed to cell (u, alpha) by every equation's gradient-matching
/// term, in expectation over all other cells of `q`. Equations that do not involve the cell
/// give flat factors.
inline std::vector<GaussianFactor> ode_proxy(int u, Eigen::Index alpha, const FactorizedGaussian& q,
                                             const Eigen::VectorXd& theta, const GradientMatching& gm) {
    if (u < 0 || u >= q.num_states() || alpha < 0 || alpha >= q.num_times()) {
        throw IndexOutOfRange("cell out of range");
    }
    if (q.num_states() != gm.system().num_states() || q.num_times() != gm.num_times()) {
        throw DimensionMismatch("proxy shape does not match the model");
    }
    if (theta.size() != gm.system().num_params()) throw DimensionMismatch("theta has the wrong length");
    FactorizedGaussian pinned = q;
    pinned.mean(u, alpha) = 0.0;
    pinned.variance(u, alpha) = 0.0;
    return detail::ode_factors_pinned(u, alpha, pinned, theta, gm);
}

/// Product of the observation factor with the ODE factors (precision addition).
inline GaussianFactor combine_proxies(const GaussianFactor& obs, const std::vector<GaussianFactor>& ode) {
    GaussianFactor total = obs;
    for (const auto& f : ode) {
        if (f.flat()) continue;
        total.precision += f.precision;
        total.shift += f.shift;
    }
    return total;
}

// ---------------------------------------------------------------------------------------------
// Expected quadratic form in theta, shared by the M-step and the objective

/// E_Q[(G_k theta - m_k)^T Lambda_k (G_k theta - m_k)] = theta^T H theta - 2 theta^T b + c
struct ExpectedQuadratic {
    Eigen::MatrixXd H;
    Eigen::VectorXd b;
    double c = 0.0;
};

inline ExpectedQuadratic expected_quadratic(const FactorizedGaussian& q, const GradientMatching& gm, int k) {
    const OdeSystem& sys = gm.system();
    const int M = sys.num_params();
    const Eigen::Index N = gm.num_times();
    const MatchingOperators& m = gm.ops(k);
    const auto& eq = sys.equation(k);
    const Monomial xk{k};

    Eigen::MatrixXd EG = Eigen::MatrixXd::Zero(N, M);
    Eigen::MatrixXd H_local = Eigen::MatrixXd::Zero(M, M);  // sum_t Lambda_tt Cov_t(G(t,:))
    Eigen::VectorXd b_local = Eigen::VectorXd::Zero(M);     // sum_t (Lambda D)_tt Cov_t(G(t,:), x_k(t))
    for (Eigen::Index t = 0; t < N; ++t) {
        for (const auto& a : eq) EG(t, a.param) += a.sign * expected_monomial(q, a.monomial, t);
        for (const auto& a : eq) {
            const double ea = expected_monomial(q, a.monomial, t);
            for (const auto& b : eq) {
                const double cov = expected_monomial_product(q, a.monomial, t, b.monomial, t) -
                                   ea * expected_monomial(q, b.monomial, t);
                H_local(a.param, b.param) += m.Lambda(t, t) * a.sign * b.sign * cov;
            }
            const double cov_x = expected_monomial_product(q, a.monomial, t, xk, t) - ea * q.mean(k, t);
            b_local[a.param] += m.LambdaD(t, t) * a.sign * cov_x;
        }
    }
    const Eigen::VectorXd nu = q.mean.row(k).transpose();
    const Eigen::VectorXd gam = q.variance.row(k).transpose();

    ExpectedQuadratic out;
    out.H = EG.transpose() * m.Lambda * EG + H_local;
    out.H = (0.5 * (out.H + out.H.transpose())).eval();
    out.b = EG.transpose() * (m.LambdaD * nu) + b_local - EG.transpose() * m.LambdaDrift;
    out.c = nu.dot(m.DtLambdaD * nu) + m.DtLambdaD.diagonal().dot(gam) - 2.0 * m.drift.dot(m.LambdaD * nu) +
            m.drift.dot(m.LambdaDrift);
    return out;
}

/// Closed-form maximizer of the objective over theta with Q fixed.
inline ThetaPosterior update_theta(const FactorizedGaussian& q, const GradientMatching& gm, double prior_precision) {
    if (!(prior_precision >= 0.0)) throw InvalidArgument("prior precision must be >= 0");
    const int M = gm.system().num_params();
    Eigen::MatrixXd H = prior_precision * Eigen::MatrixXd::Identity(M, M);
    Eigen::VectorXd b = Eigen::VectorXd::Zero(M);
    for (int k = 0; k < gm.system().num_states(); ++k) {
        const auto eq = expected_quadratic(q, gm, k);
        H += eq.H;
        b += eq.b;
    }
    Eigen::LLT<Eigen::MatrixXd> llt(H);
    if (llt.info() != Eigen::Success || !(llt.matrixLLT().diagonal().array() > 0.0).all()) {
        throw Singular("parameter normal equations are singular; some parameter is not identifiable");
    }
    // reject numerically rank-deficient systems: tiny pivots relative to the largest
    const auto piv = llt.matrixLLT().diagonal();
    if (piv.minCoeff() < 1e-12 * piv.maxCoeff()) {
        throw Singular("parameter normal equations are numerically singular");
    }
    ThetaPosterior post;
    post.cov = llt.solve(Eigen::MatrixXd::Identity(M, M));
    post.cov = (0.5 * (post.cov + post.cov.transpose())).eval();
    post.mean = llt.solve(b);
    return post;
}

/// Breakdown of the variational objective.
struct ElboTerms {
    double entropy = 0.0;
    double gradient_matching = 0.0;  // sum_k E ln N(f_k - m_k | 0, Lambda_k^{-1})
    double observation = 0.0;        // sum_k E ln N(x_k | mu_k, Sigma_k)
    double prior = 0.0;
    [[nodiscard]] double total() const { return entropy + gradient_matching + observation + prior; }
};

inline ElboTerms elbo_terms(const FactorizedGaussian& q, const Eigen::VectorXd& theta, const GradientMatching& gm,
                            const std::vector<GpState>& gp, double prior_precision = 0.0) {
    const int K = gm.system().num_states();
    if (theta.size() != gm.system().num_params()) throw DimensionMismatch("theta has the wrong length");
    if (static_cast<int>(gp.size()) != K) throw DimensionMismatch("GP layer size does not match the system");
    const double n = static_cast<double>(gm.num_times());
    ElboTerms out;
    out.entropy = entropy(q);
    for (int k = 0; k < K; ++k) {
        const auto eq = expected_quadratic(q, gm, k);
        const double quad = theta.dot(eq.H * theta) - 2.0 * theta.dot(eq.b) + eq.c;
        out.gradient_matching += -0.5 * quad + 0.5 * gm.ops(k).logdet_Lambda - 0.5 * n * std::log(2.0 * M_PI);
        out.observation += expected_gaussian_logdensity(q, k, gp[static_cast<std::size_t>(k)].posterior.precision_form);
    }
    if (prior_precision > 0.0) {
        const double m = static_cast<double>(theta.size());
        out.prior = -0.5 * prior_precision * theta.squaredNorm() + 0.5 * m * std::log(prior_precision / (2.0 * M_PI));
    }
    return out;
}

inline double elbo(const FactorizedGaussian& q, const Eigen::VectorXd& theta, const GradientMatching& gm,
                   const std::vector<GpState>& gp, double prior_precision = 0.0) {
    return elbo_terms(q, theta, gm, gp, prior_precision).total();
}

// ---------------------------------------------------------------------------------------------
// Driver

enum class EStepMode {
    cellwise,   // one cell at a time, state-major
    statewise,  // all cells of a state jointly
};

struct InferenceOptions {
    EStepMode e_step = EStepMode::statewise;
    double prior_precision = 0.0;
    double tol_theta = 1e-6;
    double tol_elbo = 1e-8;
    int max_iter = 200;
    // Start the proxy means at the GP regression means instead of zero. Off by default.
    bool warm_start = false;
};

struct InferenceResult {
    ThetaPosterior theta;
    FactorizedGaussian proxy;
    std::vector<double> elbo_trace;
    std::vector<Eigen::VectorXd> theta_trace;
    int iterations = 0;
    bool converged = false;
    std::vector<std::string> warnings;
};

/// One E-step sweep over all cells in state-major order, committing each update immediately.
inline void e_step(FactorizedGaussian& q, const Eigen::VectorXd& theta, const GradientMatching& gm,
                   const std::vector<GpState>& gp) {
    const int K = gm.system().num_states();
    const Eigen::Index N = gm.num_times();
    for (int u = 0; u < K; ++u) {
        for (Eigen::Index a = 0; a < N; ++a) {
            const GaussianFactor obs = obs_proxy(u, a, q, gp[static_cast<std::size_t>(u)].posterior);
            q.mean(u, a) = 0.0;
            q.variance(u, a) = 0.0;
            const GaussianFactor total = combine_proxies(obs, detail::ode_factors_pinned(u, a, q, theta, gm));
            const double mean = total.mean();
            const double var = total.variance();
            if (!std::isfinite(mean) || !std::isfinite(var) || !(var > 0.0)) {
                throw NonFiniteEncountered("non-finite proxy update at state x" + std::to_string(u + 1) +
                                           ", time index " + std::to_string(a));
            }
            q.mean(u, a) = mean;
            q.variance(u, a) = var;
        }
    }
}

/// Precision matrix J and linear coefficient h of the objective in the whole row x_u, with
/// every other row held at its proxy moments: L = -1/2 nu_u^T J nu_u + h^T nu_u
/// - 1/2 sum_a J_aa Gamma_ua + 1/2 sum_a ln Gamma_ua + const.
struct StateQuadratic {
    Eigen::MatrixXd J;
    Eigen::VectorXd h;
};

namespace detail {

/// `q` must have row u pinned to mean 0, variance 0.
inline StateQuadratic state_quadratic_pinned(int u, const FactorizedGaussian& q, const Eigen::VectorXd& theta,
                                             const GradientMatching& gm, const StatePosterior& post) {
    const OdeSystem& sys = gm.system();
    const int K = sys.num_states();
    const Eigen::Index N = gm.num_times();
    StateQuadratic out{post.precision_form.precision, post.precision_form.precision * post.mean};

    for (int k = 0; k < K; ++k) {
        const auto& st = gm.slope_terms(k, u);
        const bool self = (k == u);
        if (st.empty() && !self) continue;
        const MatchingOperators& m = gm.ops(k);
        const Monomial xk{k};

        // per-time moments of the slope a_t and its covariances with f0(t) and x_k(t)
        Eigen::VectorXd Ea = Eigen::VectorXd::Zero(N);
        Eigen::VectorXd var_a = Eigen::VectorXd::Zero(N);
        Eigen::VectorXd cov_af = Eigen::VectorXd::Zero(N);
        Eigen::VectorXd cov_ax = Eigen::VectorXd::Zero(N);
        Eigen::VectorXd Ef = Eigen::VectorXd::Zero(N);
        for (Eigen::Index t = 0; t < N; ++t) {
            for (const auto& term : sys.equation(k)) {
                Ef[t] += term.coefficient(theta) * expected_monomial(q, term.monomial, t);
            }
            double ea = 0.0, ea2 = 0.0, eaf = 0.0, eax = 0.0;
            for (const auto& si : st) {
                const double ci = si.sign * theta[si.param];
                ea += ci * expected_monomial(q, si.rest, t);
                for (const auto& sj : st) {
                    ea2 += ci * sj.sign * theta[sj.param] * expected_monomial_product(q, si.rest, t, sj.rest, t);
                }
                for (const auto& term : sys.equation(k)) {
                    eaf += ci * term.coefficient(theta) * expected_monomial_product(q, si.rest, t, term.monomial, t);
                }
                eax += ci * expected_monomial_product(q, si.rest, t, xk, t);
            }
            Ea[t] = ea;
            var_a[t] = ea2 - ea * ea;
            cov_af[t] = eaf - ea * Ef[t];
            cov_ax[t] = eax - ea * q.mean(k, t);
        }
        const Eigen::VectorXd nu_k = q.mean.row(k).transpose();
        const Eigen::VectorXd Er = Ef - m.D * nu_k + m.drift;
        const Eigen::VectorXd LEr = m.Lambda * Er;

        // E[R^T Lambda R] with R = diag(a) - [self] D
        Eigen::MatrixXd Jk = (Ea * Ea.transpose()).cwiseProduct(m.Lambda);
        Jk.diagonal() += var_a.cwiseProduct(m.Lambda.diagonal());
        // -E[R^T Lambda r0]
        Eigen::VectorXd hk = -(Ea.cwiseProduct(LEr) + cov_af.cwiseProduct(m.Lambda.diagonal()) -
                               cov_ax.cwiseProduct(m.LambdaD.diagonal()));
        if (self) {
            const Eigen::MatrixXd cross = Ea.asDiagonal() * m.LambdaD;
            Jk -= cross + cross.transpose();
            Jk += m.DtLambdaD;
            hk += m.D.transpose() * LEr;
        }
        out.J += Jk;
        out.h += hk;
    }
    out.J = (0.5 * (out.J + out.J.transpose())).eval();
    return out;
}

}  // namespace detail

inline StateQuadratic state_quadratic(int u, const FactorizedGaussian& q, const Eigen::VectorXd& theta,
                                      const GradientMatching& gm, const StatePosterior& post) {
    if (u < 0 || u >= q.num_states()) throw IndexOutOfRange("state index out of range");
    FactorizedGaussian pinned = q;
    pinned.mean.row(u).setZero();
    pinned.variance.row(u).setZero();
    return detail::state_quadratic_pinned(u, pinned, theta, gm, post);
}

/// Joint optimum of all cells of each state in turn: Gamma_ua = 1/J_aa, nu_u = J^{-1} h.
/// Within the factorized family this is the limit of repeated cell sweeps over state u.
inline void e_step_statewise(FactorizedGaussian& q, const Eigen::VectorXd& theta, const GradientMatching& gm,
                             const std::vector<GpState>& gp) {
    const int K = gm.system().num_states();
    for (int u = 0; u < K; ++u) {
        q.mean.row(u).setZero();
        q.variance.row(u).setZero();
        const StateQuadratic sq =
            detail::state_quadratic_pinned(u, q, theta, gm, gp[static_cast<std::size_t>(u)].posterior);
        Eigen::LLT<Eigen::MatrixXd> llt(sq.J);
        if (llt.info() != Eigen::Success) {
            throw NotPositiveDefinite("state x" + std::to_string(u + 1) + " block precision is not positive definite");
        }
        const Eigen::VectorXd nu = llt.solve(sq.h);
        const Eigen::VectorXd var = sq.J.diagonal().cwiseInverse();
        if (!nu.allFinite() || !var.allFinite() || !(var.array() > 0.0).all()) {
            throw NonFiniteEncountered("non-finite proxy update for state x" + std::to_string(u + 1));
        }
        q.mean.row(u) = nu.transpose();
        q.variance.row(u) = var.transpose();
    }
}

/// Alternates E-steps and closed-form M-steps from theta = 0, Gamma = diag(Sigma_k) and nu = 0
/// (nu = mu_k with warm_start).
inline InferenceResult coordinate_ascent(const OdeSystem& system, const std::vector<GpState>& gp,
                                         const InferenceOptions& options = {}) {
    if (options.max_iter < 1) throw InvalidArgument("max_iter must be >= 1");
    const GradientMatching gm(system, gp);
    const int K = system.num_states();
    const Eigen::Index N = gm.num_times();

    InferenceResult res;
    res.proxy = FactorizedGaussian(Eigen::MatrixXd::Zero(K, N), Eigen::MatrixXd::Zero(K, N));
    for (int k = 0; k < K; ++k) {
        const auto& post = gp[static_cast<std::size_t>(k)].posterior;
        res.proxy.variance.row(k) = post.cov.diagonal().transpose();
        if (options.warm_start) res.proxy.mean.row(k) = post.mean.transpose();
    }
    Eigen::VectorXd theta = Eigen::VectorXd::Zero(system.num_params());

    for (int iter = 1; iter <= options.max_iter; ++iter) {
        if (options.e_step == EStepMode::cellwise) {
            e_step(res.proxy, theta, gm, gp);
        } else {
            e_step_statewise(res.proxy, theta, gm, gp);
        }
        res.theta = update_theta(res.proxy, gm, options.prior_precision);
        if (!res.theta.mean.allFinite()) throw NonFiniteEncountered("non-finite parameter estimate");
        const double delta_theta = (res.theta.mean - theta).lpNorm<Eigen::Infinity>();
        theta = res.theta.mean;
        const double value = elbo(res.proxy, theta, gm, gp, options.prior_precision);
        if (!std::isfinite(value)) throw NonFiniteEncountered("non-finite objective after sweep " + std::to_string(iter));
        res.theta_trace.push_back(theta);
        res.iterations = iter;
        if (!res.elbo_trace.empty()) {
            const double prev = res.elbo_trace.back();
            const double rel = std::abs(value - prev) / std::max(std::abs(prev), 1e-300);
            res.elbo_trace.push_back(value);
            if (delta_theta < options.tol_theta && rel < options.tol_elbo) {
                res.converged = true;
                break;
            }
        } else {
            res.elbo_trace.push_back(value);
        }
    }
    if (!res.converged) {
        res.warnings.push_back("no convergence after " + std::to_string(res.iterations) + " sweeps");
    }
    for (Eigen::Index i = 0; i < theta.size(); ++i) {
        if (theta[i] < 0.0) {
            res.warnings.push_back("theta" + std::to_string(i + 1) + " estimate is negative (" +
                                   std::to_string(theta[i]) + ")");
        }
    }
    return res;
}

/// Everything needed to go from observations to a result.
struct InferenceConfig {
    std::vector<KernelSpec> kernels;
    std::vector<double> noise_variances;
    std::vector<double> gammas;
    GpLayerOptions gp;
    InferenceOptions inference;
};

inline InferenceResult run_inference(const Eigen::MatrixXd& Y, const TimeGrid& grid, const OdeSystem& system,
                                     const InferenceConfig& config) {
    if (!Y.allFinite()) throw InvalidArgument("observations must be finite");
    const auto gp = build_gp_layer(system.num_states(), config.kernels, grid, config.noise_variances,
                                   config.gammas, Y, config.gp);
    return coordinate_ascent(system, gp, config.inference);
}

}  // namespace mfgm
