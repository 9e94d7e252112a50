#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "mfgm/errors.hpp"
#include "mfgm/ode_model.hpp"
#include "mfgm/time_grid.hpp"

namespace mfgm {

/// Classical fixed-step RK4 starting from x0 at `t_start` (defaults to the first grid time).
/// Each interval between consecutive outputs is split into full steps plus one shortened step
/// so that every sample time is hit exactly. Returns K x N.
inline Eigen::MatrixXd integrate_rk4(const OdeSystem& sys, const Eigen::VectorXd& theta, const Eigen::VectorXd& x0,
                                     const TimeGrid& grid, double step, std::optional<double> t_start = {}) {
    if (!(step > 0.0)) throw InvalidArgument("integrator step must be > 0");
    if (x0.size() != sys.num_states()) throw DimensionMismatch("initial state has the wrong length");
    const double t0 = t_start.value_or(grid.front());
    if (t0 > grid.front()) throw InvalidArgument("start time lies after the first sample time");

    auto rhs = [&](const Eigen::VectorXd& x) { return evaluate(sys, theta, x); };
    Eigen::MatrixXd out(sys.num_states(), static_cast<Eigen::Index>(grid.size()));
    Eigen::VectorXd x = x0;
    double t = t0;
    for (std::size_t i = 0; i < grid.size(); ++i) {
        const double target = grid[i];
        const double span = target - t;
        if (span > 0.0) {
            const auto n = static_cast<long>(std::ceil(span / step * (1.0 - 1e-12)));
            for (long s = 0; s < n; ++s) {
                const double h = (s + 1 < n) ? step : span - static_cast<double>(n - 1) * step;
                const Eigen::VectorXd k1 = rhs(x);
                const Eigen::VectorXd k2 = rhs(x + 0.5 * h * k1);
                const Eigen::VectorXd k3 = rhs(x + 0.5 * h * k2);
                const Eigen::VectorXd k4 = rhs(x + h * k3);
                x += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
                if (!x.allFinite()) {
                    const double when = t + static_cast<double>(s) * step + h;
                    throw NonFiniteState("trajectory became non-finite at t=" + std::to_string(when), when);
                }
            }
        }
        t = target;
        out.col(static_cast<Eigen::Index>(i)) = x;
    }
    return out;
}

/// Y = X + E with E_kt ~ N(0, noise_variance[k]), drawn state-major from a seeded mt19937_64.
inline Eigen::MatrixXd add_noise(const Eigen::MatrixXd& X, const std::vector<double>& noise_variance,
                                 std::uint64_t seed) {
    if (static_cast<Eigen::Index>(noise_variance.size()) != X.rows()) {
        throw DimensionMismatch("need one noise variance per state");
    }
    for (double v : noise_variance) {
        if (!(v >= 0.0)) throw InvalidArgument("noise variance must be >= 0");
    }
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    Eigen::MatrixXd Y = X;
    for (Eigen::Index k = 0; k < X.rows(); ++k) {
        const double sd = std::sqrt(noise_variance[static_cast<std::size_t>(k)]);
        for (Eigen::Index t = 0; t < X.cols(); ++t) {
            const double z = normal(rng);
            if (sd > 0.0) Y(k, t) += sd * z;
        }
    }
    return Y;
}

struct SimConfig {
    OdeSystem system;
    Eigen::VectorXd theta_true;
    Eigen::VectorXd x0;
    double t_start = 0.0;
    double t_end = 1.0;
    std::vector<double> sample_times;
    double integrator_step = 1e-3;
    std::vector<double> noise_variance;
    std::uint64_t seed = 1;

    void validate() const {
        if (theta_true.size() != system.num_params()) throw DimensionMismatch("theta_true has the wrong length");
        if (x0.size() != system.num_states()) throw DimensionMismatch("x0 has the wrong length");
        if (static_cast<int>(noise_variance.size()) != system.num_states()) {
            throw DimensionMismatch("need one noise variance per state");
        }
        const TimeGrid grid(sample_times);
        if (grid.front() < t_start || grid.back() > t_end) {
            throw InvalidArgument("sample times must lie inside [t_start, t_end]");
        }
        if (!(integrator_step > 0.0) || integrator_step > grid.min_gap()) {
            throw InvalidArgument("integrator step must be positive and no larger than the smallest sample gap");
        }
    }
};

struct Dataset {
    TimeGrid grid;
    Eigen::MatrixXd Y;       // K x N observations
    Eigen::MatrixXd X_true;  // K x N noise-free states
};

inline Dataset make_dataset(const SimConfig& cfg) {
    cfg.validate();
    TimeGrid grid(cfg.sample_times);
    Eigen::MatrixXd X = integrate_rk4(cfg.system, cfg.theta_true, cfg.x0, grid, cfg.integrator_step, cfg.t_start);
    Eigen::MatrixXd Y = add_noise(X, cfg.noise_variance, cfg.seed);
    return {std::move(grid), std::move(Y), std::move(X)};
}

/// Predator-prey setup: theta = (2, 1, 4, 1), x(0) = (5, 3), samples every 0.1 on [0, 2].
inline SimConfig lotka_volterra_sim(double noise_variance, std::uint64_t seed) {
    SimConfig cfg{builtin_lotka_volterra(), Eigen::Vector4d(2.0, 1.0, 4.0, 1.0), Eigen::Vector2d(5.0, 3.0), 0.0, 0.0, {}, 1e-3, {}, seed};
    cfg.t_start = 0.0;
    cfg.t_end = 2.0;
    const TimeGrid g = TimeGrid::uniform(0.0, 2.0, 0.1);
    cfg.sample_times.assign(g.times().begin(), g.times().end());
    cfg.integrator_step = 1e-3;
    cfg.noise_variance.assign(2, noise_variance);
    cfg.seed = seed;
    return cfg;
}

/// Signalling pathway: theta = (0.07, 0.6, 0.05, 0.3, 0.017), x(0) = (1, 0, 1, 0, 0), 15 samples on [0, 100].
inline SimConfig protein_pathway_sim(double noise_variance, std::uint64_t seed) {
    Eigen::VectorXd theta(5);
    theta << 0.07, 0.6, 0.05, 0.3, 0.017;
    Eigen::VectorXd x0(5);
    x0 << 1.0, 0.0, 1.0, 0.0, 0.0;
    SimConfig cfg{builtin_protein_pathway(), theta, x0, 0.0, 0.0, {}, 1e-3, {}, seed};
    cfg.t_start = 0.0;
    cfg.t_end = 100.0;
    cfg.sample_times = {0, 1, 2, 4, 5, 7, 10, 15, 20, 30, 40, 50, 60, 80, 100};
    cfg.integrator_step = 0.01;
    cfg.noise_variance.assign(5, noise_variance);
    cfg.seed = seed;
    return cfg;
}

}  // namespace mfgm
