#include <gtest/gtest.h>

#include <Eigen/Dense>

#include <cmath>
#include <random>

#include "mfgm/errors.hpp"
#include "mfgm/simulator.hpp"
#include "mfgm/vi_engine.hpp"
#include "support/instances.hpp"

using namespace mfgm;
using mfgm::testing::uniform;
using mfgm::testing::uniform_int;

namespace {

Eigen::VectorXd random_theta(std::mt19937_64& rng, int M) {
    Eigen::VectorXd th(M);
    for (auto& v : th) v = uniform(rng, -1.5, 1.5);
    return th;
}

struct Problem {
    mfgm::testing::Instance inst;
    GradientMatching gm;
    FactorizedGaussian q;
    Eigen::VectorXd theta;
};

Problem random_problem(std::mt19937_64& rng, int K, int N) {
    auto inst = mfgm::testing::random_instance(rng, K, N);
    GradientMatching gm(inst.system, inst.gp);
    auto q = mfgm::testing::random_proxy(rng, K, N);
    auto theta = random_theta(rng, inst.system.num_params());
    return {std::move(inst), std::move(gm), std::move(q), std::move(theta)};
}

double objective(const Problem& p, const FactorizedGaussian& q) { return elbo(q, p.theta, p.gm, p.inst.gp); }

TEST(ObsProxy, EqualsGaussianConditional) {
    std::mt19937_64 rng(301);
    for (int rep = 0; rep < 10; ++rep) {
        auto p = random_problem(rng, 2, uniform_int(rng, 3, 8));
        const auto& post = p.inst.gp[1].posterior;
        const auto N = p.q.num_times();
        const Eigen::Index a = uniform_int(rng, 0, static_cast<int>(N) - 1);
        // partition of the covariance: alpha against the rest
        std::vector<Eigen::Index> rest;
        for (Eigen::Index b = 0; b < N; ++b)
            if (b != a) rest.push_back(b);
        const Eigen::MatrixXd S_rr = post.cov(rest, rest);
        const Eigen::RowVectorXd S_ar = post.cov(Eigen::seq(a, a), rest);
        Eigen::VectorXd dev(rest.size());
        for (std::size_t i = 0; i < rest.size(); ++i) dev[i] = p.q.mean(1, rest[i]) - post.mean[rest[i]];
        const Eigen::FullPivLU<Eigen::MatrixXd> lu(S_rr);
        const double cond_mean = post.mean[a] + S_ar.dot(lu.solve(dev));
        const double cond_var = post.cov(a, a) - S_ar.dot(lu.solve(S_ar.transpose()));

        const auto f = obs_proxy(1, a, p.q, post);
        EXPECT_NEAR(f.mean(), cond_mean, 1e-6 * (1 + std::abs(cond_mean)));
        EXPECT_NEAR(f.variance(), cond_var, 1e-6 * cond_var);
    }
}

TEST(ObsProxy, RejectsBadCells) {
    std::mt19937_64 rng(302);
    auto p = random_problem(rng, 1, 4);
    EXPECT_THROW(obs_proxy(0, 4, p.q, p.inst.gp[0].posterior), IndexOutOfRange);
    EXPECT_THROW(obs_proxy(1, 0, p.q, p.inst.gp[0].posterior), IndexOutOfRange);
}

// The objective restricted to one cell's mean is -1/2 P nu^2 + s nu + const, and restricted to
// its variance -1/2 P Gamma + 1/2 ln Gamma + const, where (P, s) is the combined factor.
TEST(CellFactors, DescribeObjectiveInOneCell) {
    std::mt19937_64 rng(303);
    for (int rep = 0; rep < 20; ++rep) {
        auto p = random_problem(rng, uniform_int(rng, 1, 3), uniform_int(rng, 3, 7));
        const int u = uniform_int(rng, 0, static_cast<int>(p.q.num_states()) - 1);
        const Eigen::Index a = uniform_int(rng, 0, static_cast<int>(p.q.num_times()) - 1);
        const auto total = combine_proxies(obs_proxy(u, a, p.q, p.inst.gp[static_cast<std::size_t>(u)].posterior),
                                           ode_proxy(u, a, p.q, p.theta, p.gm));
        auto at_mean = [&](double v) {
            auto q = p.q;
            q.mean(u, a) = v;
            return objective(p, q);
        };
        const double eps = 0.25;
        const double f0 = at_mean(0.0), fp = at_mean(eps), fm = at_mean(-eps);
        const double curvature = -(fp - 2 * f0 + fm) / (eps * eps);
        const double slope = (fp - fm) / (2 * eps);
        const double scale = 1e-7 * (std::abs(f0) + total.precision);
        EXPECT_NEAR(curvature, total.precision, scale / (eps * eps));
        EXPECT_NEAR(slope, total.shift, scale / eps);

        auto at_var = [&](double v) {
            auto q = p.q;
            q.variance(u, a) = v;
            return objective(p, q);
        };
        const double g0 = p.q.variance(u, a);
        const double d = at_var(g0 + 0.1) - at_var(g0);
        EXPECT_NEAR(d, -0.5 * total.precision * 0.1 + 0.5 * std::log((g0 + 0.1) / g0), 1e-7 * (1 + std::abs(f0)));
    }
}

TEST(CellFactors, FlatWhenEquationDoesNotInvolveCell) {
    // dx1 = theta1 x1, dx2 = theta2 x2: x1 only enters its own equation
    const OdeSystem sys(2, 2, {{Term{0, 1, Monomial{0}}}, {Term{1, 1, Monomial{1}}}});
    std::mt19937_64 rng(304);
    auto data = mfgm::testing::random_data(rng, 2, 5);
    const auto gp = build_gp_layer(2, {KernelSpec::rbf(1, 0.3), KernelSpec::rbf(1, 0.3)}, data.grid, {0.1, 0.1},
                                   {0.1, 0.1}, data.Y);
    const GradientMatching gm(sys, gp);
    const auto q = mfgm::testing::random_proxy(rng, 2, 5);
    const auto f = ode_proxy(0, 2, q, Eigen::Vector2d(0.5, -0.3), gm);
    EXPECT_FALSE(f[0].flat());
    EXPECT_TRUE(f[1].flat());
}

TEST(StateQuadratic, DescribesObjectiveInOneRow) {
    std::mt19937_64 rng(305);
    for (int rep = 0; rep < 20; ++rep) {
        auto p = random_problem(rng, uniform_int(rng, 1, 3), uniform_int(rng, 3, 7));
        const int u = uniform_int(rng, 0, static_cast<int>(p.q.num_states()) - 1);
        const auto sq = state_quadratic(u, p.q, p.theta, p.gm, p.inst.gp[static_cast<std::size_t>(u)].posterior);
        const auto N = p.q.num_times();
        auto at = [&](const Eigen::VectorXd& nu) {
            auto q = p.q;
            q.mean.row(u) = nu.transpose();
            return objective(p, q);
        };
        const Eigen::VectorXd nu0 = p.q.mean.row(u).transpose();
        const double eps = 0.25;
        const double tol = 1e-7 * (std::abs(at(nu0)) + sq.J.cwiseAbs().maxCoeff());
        for (Eigen::Index i = 0; i < N; ++i) {
            const Eigen::VectorXd ei = eps * Eigen::VectorXd::Unit(N, i);
            const double grad = (at(nu0 + ei) - at(nu0 - ei)) / (2 * eps);
            EXPECT_NEAR(grad, sq.h[i] - sq.J.row(i).dot(nu0), tol / eps);
            for (Eigen::Index j = 0; j < N; ++j) {
                const Eigen::VectorXd ej = eps * Eigen::VectorXd::Unit(N, j);
                const double mixed = (at(nu0 + ei + ej) - at(nu0 + ei) - at(nu0 + ej) + at(nu0)) / (eps * eps);
                EXPECT_NEAR(-mixed, sq.J(i, j), tol / (eps * eps));
            }
        }
    }
}

TEST(StatewiseEStep, RowUpdateIsTheRowOptimum) {
    std::mt19937_64 rng(306);
    for (int rep = 0; rep < 10; ++rep) {
        auto p = random_problem(rng, uniform_int(rng, 1, 3), uniform_int(rng, 3, 7));
        auto q = p.q;
        e_step_statewise(q, p.theta, p.gm, p.inst.gp);
        const double best = objective(p, q);
        // perturbing any cell of the last row (the others have moved on since) cannot help
        const int u = static_cast<int>(q.num_states()) - 1;
        for (Eigen::Index a = 0; a < q.num_times(); ++a) {
            for (double d : {-0.05, 0.05}) {
                auto r = q;
                r.mean(u, a) += d;
                EXPECT_LE(objective(p, r), best + 1e-9 * std::abs(best));
                r = q;
                r.variance(u, a) *= (1 + d);
                EXPECT_LE(objective(p, r), best + 1e-9 * std::abs(best));
            }
        }
    }
}

TEST(CellwiseEStep, RepeatedSweepsReachTheStatewiseSolution) {
    std::mt19937_64 rng(307);
    auto p = random_problem(rng, 1, 6);
    auto cell = p.q;
    auto row = p.q;
    e_step_statewise(row, p.theta, p.gm, p.inst.gp);
    // Gauss-Seidel over strongly coupled cells converges slowly; sweep until it stalls
    int sweeps = 0;
    for (double change = 1.0; change > 1e-14 && sweeps < 1000000; ++sweeps) {
        const Eigen::MatrixXd before = cell.mean;
        e_step(cell, p.theta, p.gm, p.inst.gp);
        change = (cell.mean - before).lpNorm<Eigen::Infinity>();
    }
    ASSERT_LT(sweeps, 1000000);
    EXPECT_TRUE(cell.mean.isApprox(row.mean, 1e-6)) << cell.mean << "\n" << row.mean;
    EXPECT_TRUE(cell.variance.isApprox(row.variance, 1e-10));
}

TEST(EStepModes, ShareFixedPoints) {
    std::mt19937_64 rng(308);
    for (int rep = 0; rep < 5; ++rep) {
        auto inst = mfgm::testing::random_instance(rng, uniform_int(rng, 1, 3), uniform_int(rng, 4, 8));
        InferenceOptions opts;
        opts.tol_theta = 1e-13;
        opts.tol_elbo = 1e-15;
        opts.max_iter = 20000;
        const auto res = coordinate_ascent(inst.system, inst.gp, opts);
        const GradientMatching gm(inst.system, inst.gp);
        auto q = res.proxy;
        e_step(q, res.theta.mean, gm, inst.gp);
        EXPECT_TRUE(q.mean.isApprox(res.proxy.mean, 1e-6)) << "instance " << rep;
        EXPECT_TRUE(q.variance.isApprox(res.proxy.variance, 1e-8)) << "instance " << rep;
    }
}

TEST(ExpectedQuadratic, MatchesMonteCarlo) {
    std::mt19937_64 rng(309);
    for (int rep = 0; rep < 5; ++rep) {
        auto p = random_problem(rng, uniform_int(rng, 1, 3), 4);
        const int k = uniform_int(rng, 0, static_cast<int>(p.q.num_states()) - 1);
        const auto eq = expected_quadratic(p.q, p.gm, k);
        const double exact = p.theta.dot(eq.H * p.theta) - 2 * p.theta.dot(eq.b) + eq.c;
        const auto& m = p.gm.ops(k);
        std::normal_distribution<double> z(0, 1);
        const int S = 100000;
        double sum = 0, sum2 = 0;
        Eigen::MatrixXd X(p.q.num_states(), p.q.num_times());
        for (int s = 0; s < S; ++s) {
            for (Eigen::Index i = 0; i < X.size(); ++i)
                X.reshaped()[i] = p.q.mean.reshaped()[i] + std::sqrt(p.q.variance.reshaped()[i]) * z(rng);
            const Eigen::VectorXd r = design_matrix(p.inst.system, X, k) * p.theta -
                                      (m.D * X.row(k).transpose() - m.drift);
            const double v = r.dot(m.Lambda * r);
            sum += v;
            sum2 += v * v;
        }
        const double mean = sum / S, se = std::sqrt((sum2 / S - mean * mean) / (S - 1.0));
        EXPECT_LE(std::abs(exact - mean), 3 * se) << "instance " << rep;
    }
}

TEST(UpdateTheta, MatchesGridSearchForOneParameter) {
    const auto sys = mfgm::testing::linear_decay();
    const TimeGrid grid = TimeGrid::uniform(0.0, 2.0, 0.25);
    Eigen::MatrixXd Y = integrate_rk4(sys, Eigen::VectorXd::Constant(1, 1.3), Eigen::VectorXd::Constant(1, 2.0), grid, 1e-3);
    Y = add_noise(Y, {0.01}, 4);
    const auto gp = build_gp_layer(1, {KernelSpec::rbf(1.0, 1.0)}, grid, {0.01}, {0.1}, Y);
    const GradientMatching gm(sys, gp);
    FactorizedGaussian q(Y, Eigen::MatrixXd::Constant(1, Y.cols(), 0.01));
    for (double prior : {0.0, 2.0}) {
        const auto post = update_theta(q, gm, prior);
        double best = -INFINITY, arg = 0;
        for (int i = 0; i <= 10000; ++i) {
            const double th = -5.0 + 1e-3 * i;
            const double v = elbo(q, Eigen::VectorXd::Constant(1, th), gm, gp, prior);
            if (v > best) best = v, arg = th;
        }
        EXPECT_NEAR(post.mean[0], arg, 1e-3);
    }
}

TEST(UpdateTheta, ObjectiveIsExactQuadraticAroundTheUpdate) {
    std::mt19937_64 rng(310);
    for (int rep = 0; rep < 10; ++rep) {
        auto p = random_problem(rng, uniform_int(rng, 1, 3), uniform_int(rng, 4, 8));
        const double prior = rep % 2 ? 0.5 : 0.0;
        const auto post = update_theta(p.q, p.gm, prior);
        const double top = elbo(p.q, post.mean, p.gm, p.inst.gp, prior);
        const Eigen::MatrixXd Hinv = post.cov.inverse();
        for (int i = 0; i < 20; ++i) {
            Eigen::VectorXd d(post.mean.size());
            for (auto& v : d) v = uniform(rng, -0.3, 0.3);
            const double drop = top - elbo(p.q, post.mean + d, p.gm, p.inst.gp, prior);
            EXPECT_GE(drop, -1e-10 * std::abs(top));
            EXPECT_NEAR(drop, 0.5 * d.dot(Hinv * d), 1e-7 * (1 + std::abs(top)));
        }
    }
}

TEST(UpdateTheta, UnidentifiableParameterIsSingular) {
    // two parameters multiplying the same monomial in the same equation
    const OdeSystem sys(1, 2, {{Term{0, 1, Monomial{0}}, Term{1, 1, Monomial{0}}}});
    std::mt19937_64 rng(311);
    auto data = mfgm::testing::random_data(rng, 1, 5);
    const auto gp = build_gp_layer(1, {KernelSpec::rbf(1, 0.3)}, data.grid, {0.1}, {0.1}, data.Y);
    const GradientMatching gm(sys, gp);
    FactorizedGaussian q(data.Y, Eigen::MatrixXd::Zero(1, 5));
    EXPECT_THROW(update_theta(q, gm, 0.0), Singular);
    EXPECT_NO_THROW(update_theta(q, gm, 1.0));
    EXPECT_THROW(update_theta(q, gm, -1.0), InvalidArgument);
}

TEST(Elbo, PriorTermIsGaussianLogDensity) {
    std::mt19937_64 rng(312);
    auto p = random_problem(rng, 2, 4);
    const auto with = elbo_terms(p.q, p.theta, p.gm, p.inst.gp, 3.0);
    const auto without = elbo_terms(p.q, p.theta, p.gm, p.inst.gp, 0.0);
    const double M = static_cast<double>(p.theta.size());
    EXPECT_NEAR(with.prior, -1.5 * p.theta.squaredNorm() + 0.5 * M * std::log(3.0 / (2 * M_PI)), 1e-12);
    EXPECT_EQ(without.prior, 0.0);
    EXPECT_NEAR(with.total() - without.total(), with.prior, 1e-9);
}

TEST(CoordinateAscent, MonotoneOnRandomInstances) {
    std::mt19937_64 rng(313);
    for (int rep = 0; rep < 20; ++rep) {
        auto inst = mfgm::testing::random_instance(rng, uniform_int(rng, 1, 3), uniform_int(rng, 3, 10));
        for (auto mode : {EStepMode::statewise, EStepMode::cellwise}) {
            InferenceOptions opts;
            opts.e_step = mode;
            opts.max_iter = 300;
            const auto res = coordinate_ascent(inst.system, inst.gp, opts);
            for (std::size_t i = 1; i < res.elbo_trace.size(); ++i) {
                const double prev = res.elbo_trace[i - 1];
                EXPECT_GE(res.elbo_trace[i] - prev, -1e-8 * std::abs(prev)) << "instance " << rep << " sweep " << i;
            }
        }
    }
}

TEST(CoordinateAscent, EachHalfStepIsAscent) {
    std::mt19937_64 rng(314);
    for (int rep = 0; rep < 10; ++rep) {
        auto p = random_problem(rng, uniform_int(rng, 1, 3), uniform_int(rng, 3, 8));
        auto q = p.q;
        Eigen::VectorXd th = p.theta;
        double last = elbo(q, th, p.gm, p.inst.gp);
        for (int sweep = 0; sweep < 10; ++sweep) {
            if (sweep % 2) e_step(q, th, p.gm, p.inst.gp);
            else e_step_statewise(q, th, p.gm, p.inst.gp);
            const double after_e = elbo(q, th, p.gm, p.inst.gp);
            EXPECT_GE(after_e, last - 1e-9 * std::abs(last));
            th = update_theta(q, p.gm, 0.0).mean;
            const double after_m = elbo(q, th, p.gm, p.inst.gp);
            EXPECT_GE(after_m, after_e - 1e-9 * std::abs(after_e));
            last = after_m;
        }
    }
}

TEST(CoordinateAscent, RecoversLotkaVolterraFromCleanData) {
    const auto ds = make_dataset(lotka_volterra_sim(1e-4, 1));
    InferenceConfig cfg{{KernelSpec::rbf(2.0, 0.3), KernelSpec::rbf(2.0, 0.3)}, {1e-4, 1e-4}, {1e-3, 1e-3}, {}, {}};
    cfg.inference.max_iter = 2000;
    const auto res = run_inference(ds.Y, ds.grid, builtin_lotka_volterra(), cfg);
    EXPECT_TRUE(res.converged);
    const Eigen::Vector4d truth(2, 1, 4, 1);
    for (int i = 0; i < 4; ++i) EXPECT_NEAR(res.theta.mean[i], truth[i], 0.1 * truth[i]) << "theta" << i + 1;
}

TEST(CoordinateAscent, WarmStartReachesSameAnswer) {
    const auto ds = make_dataset(lotka_volterra_sim(0.1, 2));
    InferenceConfig cfg{{KernelSpec::rbf(2.0, 0.4), KernelSpec::rbf(2.0, 0.4)}, {0.1, 0.1}, {1.0, 1.0}, {}, {}};
    cfg.inference.max_iter = 2000;
    cfg.inference.tol_theta = 1e-10;
    cfg.inference.tol_elbo = 1e-14;
    const auto cold = run_inference(ds.Y, ds.grid, builtin_lotka_volterra(), cfg);
    cfg.inference.warm_start = true;
    const auto warm = run_inference(ds.Y, ds.grid, builtin_lotka_volterra(), cfg);
    EXPECT_TRUE(cold.theta.mean.isApprox(warm.theta.mean, 1e-6));
}

TEST(CoordinateAscent, ReportsNonConvergenceAndNegativeEstimates) {
    std::mt19937_64 rng(315);
    auto inst = mfgm::testing::random_instance(rng, 2, 6);
    InferenceOptions opts;
    opts.max_iter = 1;
    const auto res = coordinate_ascent(inst.system, inst.gp, opts);
    EXPECT_FALSE(res.converged);
    EXPECT_EQ(res.iterations, 1);
    ASSERT_FALSE(res.warnings.empty());
    EXPECT_NE(res.warnings.front().find("no convergence"), std::string::npos);
    opts.max_iter = 0;
    EXPECT_THROW(coordinate_ascent(inst.system, inst.gp, opts), InvalidArgument);
}

TEST(RunInference, RejectsNonFiniteObservations) {
    Eigen::MatrixXd Y = Eigen::MatrixXd::Ones(1, 4);
    Y(0, 2) = NAN;
    InferenceConfig cfg{{KernelSpec::rbf(1, 1)}, {0.1}, {0.1}, {}, {}};
    EXPECT_THROW(run_inference(Y, TimeGrid::uniform(0, 3, 1), mfgm::testing::linear_decay(), cfg), InvalidArgument);
}

}  // namespace
