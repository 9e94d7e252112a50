#include <gtest/gtest.h>

#include <Eigen/Dense>

#include <cmath>
#include <filesystem>
#include <random>

#include "mfgm/app/config.hpp"
#include "mfgm/app/csv.hpp"
#include "mfgm/app/pipeline.hpp"
#include "mfgm/app/replicate.hpp"
#include "mfgm/errors.hpp"
#include "support/instances.hpp"
#include "support/schema_check.hpp"

using namespace mfgm;
using namespace mfgm::app;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("mfgm-test-" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

// ---------------------------------------------------------------------------------------------
// CSV

TEST(Csv, RoundTripsExactly) {
    std::mt19937_64 rng(401);
    const TimeGrid grid({0.0, 0.1, 0.30000000000000004, 1e-3 + 1});
    Eigen::MatrixXd v(2, 4);
    for (auto& x : v.reshaped()) x = mfgm::testing::uniform(rng, -1e3, 1e3);
    const auto text = format_series_csv(grid, v);
    EXPECT_EQ(text.substr(0, 8), "t,x1,x2\n");
    const auto s = parse_series_csv(text);
    EXPECT_EQ(s.grid, grid);
    EXPECT_EQ(s.values, v);
}

TEST(Csv, ToleratesWhitespaceCrlfAndBom) {
    const auto s = parse_series_csv("\xEF\xBB\xBFt, x1\r\n\r\n0, +1.5\r\n 1 ,2e-1\r\n");
    EXPECT_EQ(s.values.cols(), 2);
    EXPECT_DOUBLE_EQ(s.values(0, 0), 1.5);
    EXPECT_DOUBLE_EQ(s.values(0, 1), 0.2);
}

void expect_csv_error(const std::string& text, std::size_t line, const std::string& fragment) {
    try {
        parse_series_csv(text);
        ADD_FAILURE() << "no error for: " << text;
    } catch (const ParseError& e) {
        EXPECT_EQ(e.line(), line) << e.what();
        EXPECT_NE(std::string(e.what()).find(fragment), std::string::npos) << e.what();
    }
}

TEST(Csv, ReportsMalformedInput) {
    expect_csv_error("time,x1\n0,1\n1,2\n", 1, "'t'");
    expect_csv_error("t,x2\n0,1\n1,2\n", 1, "'x1'");
    expect_csv_error("t\n0\n1\n", 1, "at least one state");
    expect_csv_error("t,x1\n0,1\n1\n", 3, "expected 2 values");
    expect_csv_error("t,x1\n0,1\n1,abc\n", 3, "not a number");
    expect_csv_error("t,x1\n0,1\n1,\n", 3, "empty value");
    expect_csv_error("t,x1\n0,1\n1,nan\n", 3, "non-finite");
    expect_csv_error("t,x1\n0,1\n0,2\n", 3, "strictly increasing");
    expect_csv_error("t,x1\n0,1\n", 2, "two data rows");
    expect_csv_error("", 0, "missing header");
}

TEST(Csv, FileErrorsNameThePath) {
    EXPECT_THROW(read_series_csv("/nonexistent/data.csv"), InvalidArgument);
    const auto dir = scratch_dir("csv");
    write_text_file((dir / "bad.csv").string(), "t,x1\n0,1\n1,x\n");
    try {
        read_series_csv((dir / "bad.csv").string());
        FAIL();
    } catch (const ParseError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("bad.csv"), std::string::npos);
        EXPECT_NE(msg.find("line 3"), std::string::npos);
        EXPECT_EQ(msg.find("line 0"), std::string::npos);
    }
}

// ---------------------------------------------------------------------------------------------
// Config

json lv_config() {
    return {{"model", "lotka-volterra"},
            {"simulate", lotka_volterra_simulation(0.1)},
            {"noise_variance", 0.1},
            {"gamma", 1.0},
            {"seed", 4}};
}

TEST(Config, DefaultsAndEcho) {
    const auto cfg = parse_config(lv_config(), ".");
    EXPECT_EQ(cfg.system, builtin_lotka_volterra());
    EXPECT_TRUE(cfg.fit_kernel);
    EXPECT_EQ(cfg.kernel_kind, KernelKind::rbf);
    EXPECT_FALSE(cfg.fit_noise);
    EXPECT_EQ(cfg.noise_variances, (std::vector<double>{0.1, 0.1}));
    EXPECT_EQ(cfg.inference.e_step, EStepMode::statewise);
    EXPECT_FALSE(cfg.inference.warm_start);
    EXPECT_TRUE(cfg.gp.center);
    EXPECT_EQ(cfg.seed, 4u);
    EXPECT_EQ(cfg.simulate->seed, 4u);
    EXPECT_EQ(cfg.simulate->sample_times.size(), 21u);
    EXPECT_EQ(cfg.echo.at("seed"), 4);
}

TEST(Config, SeedOverrideReachesSimulationAndEcho) {
    const auto cfg = parse_config(lv_config(), ".", 17);
    EXPECT_EQ(cfg.seed, 17u);
    EXPECT_EQ(cfg.simulate->seed, 17u);
    EXPECT_EQ(cfg.echo.at("seed"), 17);
}

TEST(Config, ExplicitKernelsAndOptions) {
    json j = lv_config();
    j["kernel"] = json::array({{{"kind", "rbf"}, {"signal_variance", 2.0}, {"lengthscale", 0.5}},
                               {{"kind", "neural_net"}, {"signal_variance", 1.0}, {"offset", 1.0}, {"scale", 0.1}}});
    j["noise_variance"] = {0.1, 0.2};
    j["gamma"] = {0.5, 0.25};
    j["e_step"] = "cellwise";
    j["warm_start"] = true;
    j["center"] = false;
    j["jitter"] = 1e-6;
    j["prior_precision"] = 0.1;
    j["max_iter"] = 7;
    const auto cfg = parse_config(j, ".");
    EXPECT_FALSE(cfg.fit_kernel);
    EXPECT_EQ(cfg.kernels[1], KernelSpec::neural_net(1.0, 1.0, 0.1));
    EXPECT_EQ(cfg.gammas, (std::vector<double>{0.5, 0.25}));
    EXPECT_EQ(cfg.inference.e_step, EStepMode::cellwise);
    EXPECT_TRUE(cfg.inference.warm_start);
    EXPECT_FALSE(cfg.gp.center);
    EXPECT_EQ(cfg.gp.base_jitter, 1e-6);
    EXPECT_EQ(cfg.inference.prior_precision, 0.1);
    EXPECT_EQ(cfg.inference.max_iter, 7);
}

TEST(Config, ModelFileAndDataPathResolveAgainstConfigDirectory) {
    const auto dir = scratch_dir("config");
    write_text_file((dir / "decay.txt").string(), "dx1 = -theta1*x1\n");
    write_text_file((dir / "data.csv").string(), "t,x1\n0,1\n1,0.5\n");
    write_text_file((dir / "cfg.json").string(),
                    R"({"model": "decay.txt", "data": "data.csv", "kernel": {"kind": "rbf", "signal_variance": 1,
                        "lengthscale": 1}, "noise_variance": 0.01})");
    const auto cfg = load_config((dir / "cfg.json").string());
    EXPECT_EQ(cfg.system.num_states(), 1);
    EXPECT_EQ(fs::path(*cfg.data_path), dir / "data.csv");
    const auto obs = load_observations(cfg);
    EXPECT_EQ(obs.Y.cols(), 2);
    EXPECT_FALSE(obs.truth);
}

void expect_config_error(const json& j, const std::string& fragment) {
    try {
        parse_config(j, ".");
        ADD_FAILURE() << "no error for " << j.dump();
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find(fragment), std::string::npos) << e.what();
    }
}

TEST(Config, RejectsInvalidSettings) {
    auto with = [](const char* key, json v) {
        json j = lv_config();
        j[key] = std::move(v);
        return j;
    };
    auto without = [](const char* key) {
        json j = lv_config();
        j.erase(key);
        return j;
    };
    expect_config_error(json::array(), "JSON object");
    expect_config_error(without("model"), "missing 'model'");
    expect_config_error(without("noise_variance"), "missing 'noise_variance'");
    expect_config_error(without("simulate"), "exactly one of");
    expect_config_error(with("data", "x.csv"), "exactly one of");
    expect_config_error(with("seed", -1), "seed");
    expect_config_error(with("gamma", 0.0), "gamma");
    expect_config_error(with("gamma", json::array({1.0})), "1 entries");
    expect_config_error(with("noise_variance", -0.1), "noise_variance");
    expect_config_error(with("kernel", "auto"), "kernel must be");
    expect_config_error(with("kernel_kind", "matern"), "matern");
    expect_config_error(with("e_step", "blockwise"), "e_step");
    expect_config_error(with("max_iter", 0), "max_iter");
    expect_config_error(with("max_iter", 1.5), "integer");
    expect_config_error(with("tol_theta", 0.0), "tolerances");
    expect_config_error(with("warm_start", 1), "warm_start");
    json fixed_kernel_fit_noise = with("kernel", {{"kind", "rbf"}, {"signal_variance", 1.0}, {"lengthscale", 1.0}});
    fixed_kernel_fit_noise["noise_variance"] = "fit";
    expect_config_error(fixed_kernel_fit_noise, "requires kernel");
    json bad_sim = lv_config();
    bad_sim["simulate"]["x0"] = {1.0};
    expect_config_error(bad_sim, "x0");
    EXPECT_THROW(load_config("/nonexistent/cfg.json"), InvalidArgument);
}

TEST(Config, ReplicatePresets) {
    for (const auto& name : replicate_presets()) {
        const auto cfg = parse_config(replicate_config(name, 2), ".");
        EXPECT_TRUE(cfg.simulate);
        EXPECT_EQ(cfg.seed, 2u);
        EXPECT_FALSE(replicate_seeds(name).empty());
    }
    EXPECT_EQ(parse_config(replicate_config("protein", 1), ".").kernel_kind, KernelKind::neural_net);
    EXPECT_THROW(replicate_config("lv-0.5", 1), InvalidArgument);
}

// ---------------------------------------------------------------------------------------------
// Metrics

TEST(Metrics, AverageRanksWithTies) {
    EXPECT_EQ(average_ranks({3.0, 1.0, 2.0}), (std::vector<double>{3, 1, 2}));
    EXPECT_EQ(average_ranks({1.0, 2.0, 2.0, 0.5}), (std::vector<double>{2, 3.5, 3.5, 1}));
}

TEST(Metrics, SpearmanKnownValues) {
    EXPECT_DOUBLE_EQ(spearman({1, 2, 3, 4}, {10, 20, 30, 40}), 1.0);
    EXPECT_DOUBLE_EQ(spearman({1, 2, 3, 4}, {4, 3, 2, 1}), -1.0);
    // one swapped pair among five: 1 - 6 * 2 / (5 * 24)
    EXPECT_NEAR(spearman({1, 2, 3, 4, 5}, {1, 2, 3, 5, 4}), 0.9, 1e-15);
    EXPECT_TRUE(std::isnan(spearman({1, 1, 1}, {1, 2, 3})));
    EXPECT_THROW(spearman({1, 2}, {1, 2, 3}), DimensionMismatch);
}

TEST(Metrics, SpearmanIsInvariantUnderMonotoneMaps) {
    std::mt19937_64 rng(402);
    for (int rep = 0; rep < 50; ++rep) {
        std::vector<double> a(8), b(8);
        for (auto& v : a) v = mfgm::testing::uniform(rng, 0.1, 5.0);
        for (auto& v : b) v = mfgm::testing::uniform(rng, 0.1, 5.0);
        std::vector<double> la(8);
        for (std::size_t i = 0; i < 8; ++i) la[i] = std::log(a[i]) * 3.0 + 1.0;
        EXPECT_NEAR(spearman(a, b), spearman(la, b), 1e-12);
        EXPECT_LE(std::abs(spearman(a, b)), 1.0 + 1e-12);
    }
}

TEST(Metrics, RmseAndNormalization) {
    Eigen::MatrixXd truth(2, 4), est(2, 4);
    truth << 0, 1, 2, 3, 5, 5, 5, 5;
    est << 1, 1, 2, 3, 5, 5, 5, 7;
    const Eigen::VectorXd r = rmse_per_state(est, truth);
    EXPECT_DOUBLE_EQ(r[0], 0.5);
    EXPECT_DOUBLE_EQ(r[1], 1.0);
    const Eigen::VectorXd n = normalized_rmse_per_state(est, truth);
    EXPECT_DOUBLE_EQ(n[0], 0.5 / 3.0);
    EXPECT_DOUBLE_EQ(n[1], 1.0);
    EXPECT_THROW(rmse_per_state(est, truth.leftCols(3)), DimensionMismatch);
}

TEST(Metrics, DerivativeSignChanges) {
    const auto sys = builtin_lotka_volterra();
    const Eigen::Vector4d th(2, 1, 4, 1);
    const TimeGrid grid = TimeGrid::uniform(0.0, 2.0, 0.01);
    const Eigen::MatrixXd X = integrate_rk4(sys, th, Eigen::Vector2d(5, 3), grid, 1e-3);
    const auto sc = derivative_sign_changes(sys, th, X);
    EXPECT_GE(sc[0], 1);
    EXPECT_GE(sc[1], 1);
    const Eigen::MatrixXd flat = X.col(0).replicate(1, 5);
    EXPECT_EQ(derivative_sign_changes(sys, th, flat), (std::vector<int>{0, 0}));
}

// ---------------------------------------------------------------------------------------------
// Documents

TEST(Documents, ResultConformsToSchemaAndMetricsAreConsistent) {
    json j = lv_config();
    j["max_iter"] = 500;
    const auto cfg = parse_config(j, ".");
    const auto fit = run_fit(cfg);
    const json result = result_document(cfg, fit);
    const json schema = json::parse(read_text_file(MFGM_SOURCE_DIR "/schema/result.schema.json"));
    const auto errors = mfgm::testing::schema_errors(schema, result);
    for (const auto& e : errors) ADD_FAILURE() << e;

    const json truth = truth_document(*cfg.simulate, *fit.data.truth);
    const json metrics = metrics_document(result, truth);
    EXPECT_EQ(metrics.at("kind"), "metrics");
    const auto& p0 = metrics.at("parameters").at(0);
    EXPECT_NEAR(p0.at("abs_error").get<double>(), std::abs(fit.result.theta.mean[0] - 2.0), 1e-15);
    EXPECT_NEAR(p0.at("z_score").get<double>(), p0.at("abs_error").get<double>() / fit.result.theta.stddev()[0], 1e-12);
    EXPECT_EQ(metrics.at("proxy_rmse").size(), 2u);

    // mismatched pairs are input errors
    EXPECT_THROW(metrics_document(truth, result), InvalidArgument);
    json other = truth;
    other["times"] = {0.0, 1.0};
    EXPECT_THROW(metrics_document(result, other), DimensionMismatch);
}

TEST(Documents, RunsAreReproducible) {
    const auto cfg = parse_config(lv_config(), ".");
    const auto a = result_document(cfg, run_fit(cfg)).dump();
    const auto b = result_document(cfg, run_fit(cfg)).dump();
    EXPECT_EQ(a, b);
}

TEST(Documents, PlotCsvHasAllSeries) {
    const auto cfg = parse_config(lv_config(), ".");
    const auto fit = run_fit(cfg);
    const json result = result_document(cfg, fit);
    const auto text = plot_csv(result, fit.data.Y, fit.data.truth->X_true);
    EXPECT_EQ(text.substr(0, text.find('\n')), "series,state,t,value,sd");
    for (const char* s : {"\ntruth,", "\nobservation,", "\nproxy,", "\nreintegrated,"}) {
        EXPECT_NE(text.find(s), std::string::npos) << s;
    }
    // 4 series x 2 states x 21 times, plus the header
    EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 4 * 2 * 21 + 1);
}

TEST(Documents, DataWithWrongStateCountIsRejected) {
    const auto dir = scratch_dir("docs");
    write_text_file((dir / "d.csv").string(), "t,x1\n0,1\n1,2\n");
    const auto cfg = parse_config({{"model", "lotka-volterra"}, {"data", "d.csv"}, {"noise_variance", 0.1}}, dir);
    EXPECT_THROW(load_observations(cfg), DimensionMismatch);
}

}  // namespace
