#pragma once

// End-to-end steps shared by the command-line tool and the acceptance suite: obtain data,
// set up the GP layer, run inference, re-integrate, and turn results into documents.

#include <Eigen/Dense>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "mfgm/app/config.hpp"
#include "mfgm/app/csv.hpp"
#include "mfgm/kernels.hpp"
#include "mfgm/model_format.hpp"
#include "mfgm/simulator.hpp"
#include "mfgm/version.hpp"
#include "mfgm/vi_engine.hpp"

namespace mfgm::app {

// ---------------------------------------------------------------------------------------------
// JSON helpers

inline json to_json(const Eigen::VectorXd& v) {
    json out = json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(v[i]);
    return out;
}

/// Row-major nested arrays.
inline json to_json(const Eigen::MatrixXd& m) {
    json out = json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        json row = json::array();
        for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
        out.push_back(std::move(row));
    }
    return out;
}

inline json to_json(const KernelSpec& s) {
    if (s.kind == KernelKind::rbf) {
        return {{"kind", "rbf"}, {"signal_variance", s.signal_variance}, {"lengthscale", s.rbf_lengthscale}};
    }
    return {{"kind", "neural_net"}, {"signal_variance", s.signal_variance}, {"offset", s.nn_offset},
            {"scale", s.nn_scale}};
}

inline Eigen::VectorXd vector_from_json(const json& j, const std::string& what) {
    if (!j.is_array()) throw InvalidArgument(what + " must be an array");
    Eigen::VectorXd v(static_cast<Eigen::Index>(j.size()));
    for (std::size_t i = 0; i < j.size(); ++i) {
        if (!j[i].is_number()) throw InvalidArgument(what + " must contain numbers");
        v[static_cast<Eigen::Index>(i)] = j[i].get<double>();
    }
    return v;
}

inline Eigen::MatrixXd matrix_from_json(const json& j, const std::string& what) {
    if (!j.is_array() || j.empty()) throw InvalidArgument(what + " must be a non-empty array of rows");
    const std::size_t cols = j.front().is_array() ? j.front().size() : 0;
    Eigen::MatrixXd m(static_cast<Eigen::Index>(j.size()), static_cast<Eigen::Index>(cols));
    for (std::size_t r = 0; r < j.size(); ++r) {
        if (!j[r].is_array() || j[r].size() != cols) throw InvalidArgument(what + " rows have unequal lengths");
        m.row(static_cast<Eigen::Index>(r)) = vector_from_json(j[r], what).transpose();
    }
    return m;
}

inline std::vector<std::string> state_names(int K) {
    std::vector<std::string> out;
    for (int k = 1; k <= K; ++k) out.push_back("x" + std::to_string(k));
    return out;
}

inline std::vector<std::string> param_names(int M) {
    std::vector<std::string> out;
    for (int i = 1; i <= M; ++i) out.push_back("theta" + std::to_string(i));
    return out;
}

// ---------------------------------------------------------------------------------------------
// Data

struct Observations {
    TimeGrid grid;
    Eigen::MatrixXd Y;
    std::optional<Dataset> truth;  // present when the data were simulated
};

inline Observations load_observations(const ExperimentConfig& cfg) {
    if (cfg.simulate) {
        Dataset ds = make_dataset(*cfg.simulate);
        return {ds.grid, ds.Y, ds};
    }
    Series s = read_series_csv(*cfg.data_path);
    if (s.values.rows() != cfg.system.num_states()) {
        throw DimensionMismatch("data file '" + *cfg.data_path + "' has " + std::to_string(s.values.rows()) +
                                " states, model '" + cfg.model_name + "' has " +
                                std::to_string(cfg.system.num_states()));
    }
    return {s.grid, s.values, std::nullopt};
}

/// Truth sidecar written next to simulated data.
inline json truth_document(const SimConfig& sim, const Dataset& ds) {
    json doc;
    doc["schema_version"] = std::string(schema_version);
    doc["kind"] = "truth";
    doc["model"] = serialize_model(sim.system);
    doc["parameters"] = param_names(sim.system.num_params());
    doc["theta"] = to_json(sim.theta_true);
    doc["x0"] = to_json(sim.x0);
    doc["t_start"] = sim.t_start;
    doc["integrator_step"] = sim.integrator_step;
    doc["noise_variance"] = sim.noise_variance;
    doc["seed"] = sim.seed;
    doc["times"] = std::vector<double>(ds.grid.times().begin(), ds.grid.times().end());
    doc["states"] = to_json(ds.X_true);
    return doc;
}

// ---------------------------------------------------------------------------------------------
// Fitting

struct GpSetup {
    KernelSpec kernel;
    double noise_variance = 0.0;
    double gamma = 0.0;
    bool fitted = false;
    std::optional<double> log_marginal_likelihood;
};

struct Reintegration {
    Eigen::VectorXd x0;
    double step = 0.0;
    std::optional<Eigen::MatrixXd> states;
    std::string error;
};

struct FitOutput {
    Observations data;
    std::vector<GpSetup> setup;
    std::vector<GpState> gp;
    InferenceResult result;
    Reintegration reintegration;
    double seconds_hyperparameters = 0.0;
    double seconds_inference = 0.0;
};

/// Starting point for the marginal-likelihood search, scaled to the centered data and time span.
inline KernelSpec initial_kernel(KernelKind kind, const TimeGrid& grid, const Eigen::VectorXd& centered) {
    const double var = std::max(centered.squaredNorm() / static_cast<double>(centered.size()), 1e-4);
    const double span = grid.back() - grid.front();
    if (kind == KernelKind::rbf) return KernelSpec::rbf(var, 0.25 * span);
    return KernelSpec::neural_net(var, 1.0, 1.0 / span);
}

inline std::vector<GpSetup> resolve_gp_setup(const ExperimentConfig& cfg, const TimeGrid& grid,
                                             const Eigen::MatrixXd& Y) {
    const int K = cfg.system.num_states();
    std::vector<GpSetup> out(static_cast<std::size_t>(K));
    for (int k = 0; k < K; ++k) {
        auto& s = out[static_cast<std::size_t>(k)];
        s.gamma = cfg.gammas[static_cast<std::size_t>(k)];
        if (!cfg.fit_kernel) {
            s.kernel = cfg.kernels[static_cast<std::size_t>(k)];
            s.noise_variance = cfg.noise_variances[static_cast<std::size_t>(k)];
            continue;
        }
        Eigen::VectorXd y = Y.row(k).transpose();
        if (cfg.gp.center) y.array() -= y.mean();
        const KernelSpec init = initial_kernel(cfg.kernel_kind, grid, y);
        const double noise0 = cfg.fit_noise ? std::max(0.1 * init.signal_variance, 1e-4)
                                            : cfg.noise_variances[static_cast<std::size_t>(k)];
        HyperparameterFitOptions opts;
        opts.seed = cfg.seed + static_cast<std::uint64_t>(k);
        const auto fit = fit_hyperparameters(cfg.kernel_kind, grid, y, init, noise0, cfg.fit_noise, opts);
        s.kernel = fit.spec;
        s.noise_variance = fit.noise_variance;
        s.fitted = true;
        s.log_marginal_likelihood = fit.log_marginal_likelihood;
    }
    return out;
}

/// Re-integrates the system under the parameter mean from the proxy mean at the first sample.
inline Reintegration reintegrate(const OdeSystem& system, const Eigen::VectorXd& theta, const FactorizedGaussian& q,
                                 const TimeGrid& grid) {
    Reintegration r;
    r.x0 = q.mean.col(0);
    r.step = grid.min_gap() / 100.0;
    try {
        r.states = integrate_rk4(system, theta, r.x0, grid, r.step);
    } catch (const NonFiniteState& e) {
        r.error = e.what();
    }
    return r;
}

inline FitOutput run_fit(const ExperimentConfig& cfg) {
    using clock = std::chrono::steady_clock;
    FitOutput out{load_observations(cfg), {}, {}, {}, {}};
    const auto t0 = clock::now();
    out.setup = resolve_gp_setup(cfg, out.data.grid, out.data.Y);
    const auto t1 = clock::now();

    std::vector<KernelSpec> kernels;
    std::vector<double> noise, gammas;
    for (const auto& s : out.setup) {
        kernels.push_back(s.kernel);
        noise.push_back(s.noise_variance);
        gammas.push_back(s.gamma);
    }
    out.gp = build_gp_layer(cfg.system.num_states(), kernels, out.data.grid, noise, gammas, out.data.Y, cfg.gp);
    out.result = coordinate_ascent(cfg.system, out.gp, cfg.inference);
    const auto t2 = clock::now();
    out.reintegration = reintegrate(cfg.system, out.result.theta.mean, out.result.proxy, out.data.grid);

    out.seconds_hyperparameters = std::chrono::duration<double>(t1 - t0).count();
    out.seconds_inference = std::chrono::duration<double>(t2 - t1).count();
    return out;
}

inline json result_document(const ExperimentConfig& cfg, const FitOutput& fit) {
    const auto& res = fit.result;
    const int K = cfg.system.num_states();
    json doc;
    doc["schema_version"] = std::string(schema_version);
    doc["kind"] = "result";
    doc["versions"] = {{"mfgm", std::string(version)},
                       {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) +
                                     "." + std::to_string(EIGEN_MINOR_VERSION)},
                       {"json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                    std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                    std::to_string(NLOHMANN_JSON_VERSION_PATCH)}};
    doc["config"] = cfg.echo;
    doc["model"] = serialize_model(cfg.system);
    doc["states"] = state_names(K);
    doc["parameters"] = param_names(cfg.system.num_params());
    doc["times"] = std::vector<double>(fit.data.grid.times().begin(), fit.data.grid.times().end());

    json gp = json::array();
    for (int k = 0; k < K; ++k) {
        const auto& s = fit.setup[static_cast<std::size_t>(k)];
        const auto& g = fit.gp[static_cast<std::size_t>(k)];
        json e{{"state", "x" + std::to_string(k + 1)},
               {"kernel", to_json(s.kernel)},
               {"kernel_fitted", s.fitted},
               {"noise_variance", s.noise_variance},
               {"gamma", s.gamma},
               {"offset", g.offset},
               {"jitter", g.jitter}};
        e["log_marginal_likelihood"] = s.log_marginal_likelihood ? json(*s.log_marginal_likelihood) : json(nullptr);
        gp.push_back(std::move(e));
    }
    doc["gp"] = std::move(gp);

    doc["theta"] = {{"mean", to_json(res.theta.mean)},
                    {"stddev", to_json(Eigen::VectorXd(res.theta.stddev()))},
                    {"cov", to_json(res.theta.cov)}};
    doc["proxy"] = {{"mean", to_json(res.proxy.mean)}, {"variance", to_json(res.proxy.variance)}};
    doc["elbo_trace"] = res.elbo_trace;
    doc["iterations"] = res.iterations;
    doc["converged"] = res.converged;
    doc["warnings"] = res.warnings;

    const auto& r = fit.reintegration;
    json reint{{"x0", to_json(r.x0)}, {"step", r.step}};
    reint["states"] = r.states ? to_json(*r.states) : json(nullptr);
    reint["error"] = r.error.empty() ? json(nullptr) : json(r.error);
    doc["reintegrated"] = std::move(reint);
    return doc;
}

inline json timings_document(const FitOutput& fit) {
    return {{"hyperparameters_seconds", fit.seconds_hyperparameters},
            {"inference_seconds", fit.seconds_inference},
            {"iterations", fit.result.iterations}};
}

// ---------------------------------------------------------------------------------------------
// Evaluation

/// Ranks with ties sharing their average rank (1-based).
inline std::vector<double> average_ranks(const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> ranks(v.size());
    std::size_t i = 0;
    while (i < idx.size()) {
        std::size_t j = i;
        while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
        const double r = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t m = i; m <= j; ++m) ranks[idx[m]] = r;
        i = j + 1;
    }
    return ranks;
}

/// Spearman rank correlation (Pearson correlation of average ranks). NaN when either input is constant.
inline double spearman(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw DimensionMismatch("rank correlation needs equal-length inputs");
    if (a.size() < 2) throw InvalidArgument("rank correlation needs at least two values");
    const auto ra = average_ranks(a);
    const auto rb = average_ranks(b);
    const double n = static_cast<double>(a.size());
    const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
    const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < ra.size(); ++i) {
        sab += (ra[i] - ma) * (rb[i] - mb);
        saa += (ra[i] - ma) * (ra[i] - ma);
        sbb += (rb[i] - mb) * (rb[i] - mb);
    }
    if (saa == 0.0 || sbb == 0.0) return std::numeric_limits<double>::quiet_NaN();
    return sab / std::sqrt(saa * sbb);
}

inline Eigen::VectorXd rmse_per_state(const Eigen::MatrixXd& estimate, const Eigen::MatrixXd& truth) {
    if (estimate.rows() != truth.rows() || estimate.cols() != truth.cols()) {
        throw DimensionMismatch("trajectory shapes differ: " + std::to_string(estimate.rows()) + "x" +
                                std::to_string(estimate.cols()) + " vs " + std::to_string(truth.rows()) + "x" +
                                std::to_string(truth.cols()));
    }
    return ((estimate - truth).array().square().rowwise().sum() / static_cast<double>(truth.cols())).sqrt();
}

/// Each state's RMSE divided by the range of its true trajectory (1 for a constant trajectory).
inline Eigen::VectorXd normalized_rmse_per_state(const Eigen::MatrixXd& estimate, const Eigen::MatrixXd& truth) {
    Eigen::VectorXd r = rmse_per_state(estimate, truth);
    for (Eigen::Index k = 0; k < truth.rows(); ++k) {
        const double range = truth.row(k).maxCoeff() - truth.row(k).minCoeff();
        if (range > 0.0) r[k] /= range;
    }
    return r;
}

/// Number of sign changes of each state's derivative along a trajectory.
inline std::vector<int> derivative_sign_changes(const OdeSystem& sys, const Eigen::VectorXd& theta,
                                                const Eigen::MatrixXd& X) {
    std::vector<int> out(static_cast<std::size_t>(sys.num_states()), 0);
    std::vector<double> prev(out.size(), 0.0);
    for (Eigen::Index t = 0; t < X.cols(); ++t) {
        const Eigen::VectorXd d = evaluate(sys, theta, X.col(t));
        for (std::size_t k = 0; k < out.size(); ++k) {
            const double v = d[static_cast<Eigen::Index>(k)];
            if (v != 0.0) {
                if (prev[k] != 0.0 && (v > 0.0) != (prev[k] > 0.0)) ++out[k];
                prev[k] = v;
            }
        }
    }
    return out;
}

inline json nan_to_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

/// Compares a result document against a truth sidecar.
inline json metrics_document(const json& result, const json& truth) {
    if (result.value("kind", "") != "result") throw InvalidArgument("first document is not a result document");
    if (truth.value("kind", "") != "truth") throw InvalidArgument("second document is not a truth document");

    const Eigen::VectorXd zeta = vector_from_json(result.at("theta").at("mean"), "theta.mean");
    const Eigen::VectorXd sd = vector_from_json(result.at("theta").at("stddev"), "theta.stddev");
    const Eigen::VectorXd theta = vector_from_json(truth.at("theta"), "truth theta");
    if (zeta.size() != theta.size()) {
        throw DimensionMismatch("result has " + std::to_string(zeta.size()) + " parameters, truth has " +
                                std::to_string(theta.size()));
    }
    const Eigen::MatrixXd proxy = matrix_from_json(result.at("proxy").at("mean"), "proxy.mean");
    const Eigen::MatrixXd X = matrix_from_json(truth.at("states"), "truth states");
    if (result.at("times") != truth.at("times")) throw DimensionMismatch("result and truth use different time grids");

    json params = json::array();
    for (Eigen::Index i = 0; i < zeta.size(); ++i) {
        const double err = zeta[i] - theta[i];
        json p{{"name", "theta" + std::to_string(i + 1)},
               {"estimate", zeta[i]},
               {"truth", theta[i]},
               {"stddev", sd[i]},
               {"abs_error", std::abs(err)}};
        p["rel_error"] = theta[i] != 0.0 ? json(std::abs(err) / std::abs(theta[i])) : json(nullptr);
        p["z_score"] = sd[i] > 0.0 ? json(std::abs(err) / sd[i]) : json(nullptr);
        params.push_back(std::move(p));
    }

    json m;
    m["schema_version"] = std::string(schema_version);
    m["kind"] = "metrics";
    m["parameters"] = std::move(params);
    m["spearman"] = nan_to_null(spearman(std::vector<double>(zeta.data(), zeta.data() + zeta.size()),
                                         std::vector<double>(theta.data(), theta.data() + theta.size())));
    m["proxy_rmse"] = to_json(rmse_per_state(proxy, X));
    m["proxy_rmse_normalized"] = to_json(normalized_rmse_per_state(proxy, X));

    const json& reint = result.at("reintegrated").at("states");
    if (reint.is_null()) {
        m["reintegrated_rmse"] = nullptr;
        m["reintegrated_rmse_overall"] = nullptr;
        m["reintegrated_derivative_sign_changes"] = nullptr;
    } else {
        const Eigen::MatrixXd R = matrix_from_json(reint, "reintegrated.states");
        m["reintegrated_rmse"] = to_json(rmse_per_state(R, X));
        m["reintegrated_rmse_overall"] = std::sqrt((R - X).squaredNorm() / static_cast<double>(X.size()));
        const OdeSystem sys = parse_model(result.at("model").get<std::string>());
        m["reintegrated_derivative_sign_changes"] = derivative_sign_changes(sys, zeta, R);
    }
    return m;
}

/// Long-format plot data: one row per (series, state, time).
inline std::string plot_csv(const json& result, const Eigen::MatrixXd& observations,
                            const std::optional<Eigen::MatrixXd>& truth) {
    const Eigen::VectorXd times = vector_from_json(result.at("times"), "times");
    const Eigen::MatrixXd mean = matrix_from_json(result.at("proxy").at("mean"), "proxy.mean");
    const Eigen::MatrixXd var = matrix_from_json(result.at("proxy").at("variance"), "proxy.variance");
    std::string out = "series,state,t,value,sd\n";
    auto emit = [&](const char* series, const Eigen::MatrixXd& values, const Eigen::MatrixXd* sds) {
        for (Eigen::Index k = 0; k < values.rows(); ++k) {
            for (Eigen::Index t = 0; t < values.cols(); ++t) {
                out += series;
                out += ",x" + std::to_string(k + 1) + "," + format_double(times[t]) + "," +
                       format_double(values(k, t)) + ",";
                if (sds) out += format_double((*sds)(k, t));
                out += '\n';
            }
        }
    };
    if (truth) emit("truth", *truth, nullptr);
    emit("observation", observations, nullptr);
    const Eigen::MatrixXd sd = var.array().sqrt();
    emit("proxy", mean, &sd);
    const json& reint = result.at("reintegrated").at("states");
    if (!reint.is_null()) emit("reintegrated", matrix_from_json(reint, "reintegrated.states"), nullptr);
    return out;
}

}  // namespace mfgm::app
