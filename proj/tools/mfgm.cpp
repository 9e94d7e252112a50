// mfgm: simulate, fit, evaluate and replicate GP gradient-matching experiments.
//
// Exit codes: 0 success, 2 input error, 3 no convergence (results still written),
// 4 numerical failure. Log verbosity comes from MFGM_LOG_LEVEL (trace..off, default info).

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "CLI11.hpp"
#include "json.hpp"

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "mfgm/app/config.hpp"
#include "mfgm/app/csv.hpp"
#include "mfgm/app/pipeline.hpp"
#include "mfgm/app/replicate.hpp"
#include "mfgm/errors.hpp"

namespace fs = std::filesystem;
using mfgm::app::json;

namespace {

constexpr int exit_ok = 0;
constexpr int exit_input = 2;
constexpr int exit_not_converged = 3;
constexpr int exit_numerical = 4;

void setup_logging() {
    auto logger = spdlog::stderr_color_mt("mfgm");
    spdlog::set_default_logger(logger);
    spdlog::set_pattern("[%l] %v");
    const char* level = std::getenv("MFGM_LOG_LEVEL");
    spdlog::set_level(level ? spdlog::level::from_str(level) : spdlog::level::info);
}

void write_json(const fs::path& path, const json& doc) {
    mfgm::app::write_text_file(path.string(), doc.dump(2) + "\n");
    spdlog::info("wrote {}", path.string());
}

json read_json(const std::string& path) {
    const std::string text = mfgm::app::read_text_file(path);
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        throw mfgm::ParseError(path + ": " + e.what(), 0);
    }
}

fs::path prepare_out(const std::string& dir) {
    fs::path p(dir);
    std::error_code ec;
    fs::create_directories(p, ec);
    if (ec) throw mfgm::InvalidArgument("cannot create output directory '" + dir + "': " + ec.message());
    return p;
}

void write_dataset(const fs::path& out, const mfgm::SimConfig& sim, const mfgm::Dataset& ds) {
    mfgm::app::write_text_file((out / "data.csv").string(), mfgm::app::format_series_csv(ds.grid, ds.Y));
    spdlog::info("wrote {}", (out / "data.csv").string());
    write_json(out / "truth.json", mfgm::app::truth_document(sim, ds));
}

void write_fit_outputs(const fs::path& out, const mfgm::app::ExperimentConfig& cfg, const mfgm::app::FitOutput& fit,
                       const json& result) {
    write_json(out / "result.json", result);
    write_json(out / "timings.json", mfgm::app::timings_document(fit));
    std::optional<Eigen::MatrixXd> truth;
    if (fit.data.truth) {
        write_dataset(out, *cfg.simulate, *fit.data.truth);
        truth = fit.data.truth->X_true;
    }
    mfgm::app::write_text_file((out / "plot.csv").string(), mfgm::app::plot_csv(result, fit.data.Y, truth));
}

void log_fit(const mfgm::app::FitOutput& fit) {
    const auto& r = fit.result;
    spdlog::info("{} sweeps, converged: {}, final objective {}", r.iterations, r.converged ? "yes" : "no",
                 r.elbo_trace.empty() ? 0.0 : r.elbo_trace.back());
    for (Eigen::Index i = 0; i < r.theta.mean.size(); ++i) {
        spdlog::info("theta{} = {:.6g} +- {:.3g}", i + 1, r.theta.mean[i], std::sqrt(r.theta.cov(i, i)));
    }
    for (const auto& w : r.warnings) spdlog::warn("{}", w);
    if (!fit.reintegration.error.empty()) spdlog::warn("re-integration failed: {}", fit.reintegration.error);
}

int cmd_simulate(const std::string& preset, std::optional<double> noise, const std::string& config,
                 std::optional<std::uint64_t> seed, const std::string& out_dir) {
    json sim_cfg;
    if (!config.empty()) {
        if (!preset.empty()) throw mfgm::InvalidArgument("give either --preset or --config, not both");
        const auto cfg = mfgm::app::load_config(config, seed);
        if (!cfg.simulate) throw mfgm::InvalidArgument("config '" + config + "' has no 'simulate' section");
        const auto out = prepare_out(out_dir);
        write_dataset(out, *cfg.simulate, mfgm::make_dataset(*cfg.simulate));
        return exit_ok;
    }
    if (preset == "lotka-volterra") {
        sim_cfg = {{"model", "lotka-volterra"}, {"simulate", mfgm::app::lotka_volterra_simulation(noise.value_or(0.1))}};
    } else if (preset == "protein") {
        sim_cfg = {{"model", "protein"}, {"simulate", mfgm::app::protein_simulation(noise.value_or(0.01))}};
    } else if (preset.empty()) {
        throw mfgm::InvalidArgument("simulate needs --preset (lotka-volterra, protein) or --config");
    } else {
        throw mfgm::InvalidArgument("unknown simulation preset '" + preset + "' (expected lotka-volterra or protein)");
    }
    sim_cfg["noise_variance"] = 1.0;  // unused by simulation, required by the config format
    const auto cfg = mfgm::app::parse_config(sim_cfg, ".", seed);
    const auto out = prepare_out(out_dir);
    write_dataset(out, *cfg.simulate, mfgm::make_dataset(*cfg.simulate));
    return exit_ok;
}

int cmd_fit(const std::string& config, std::optional<std::uint64_t> seed, const std::string& out_dir) {
    const auto cfg = mfgm::app::load_config(config, seed);
    const auto fit = mfgm::app::run_fit(cfg);
    log_fit(fit);
    const auto out = prepare_out(out_dir);
    write_fit_outputs(out, cfg, fit, mfgm::app::result_document(cfg, fit));
    return fit.result.converged ? exit_ok : exit_not_converged;
}

int cmd_evaluate(const std::string& result_path, const std::string& truth_path, const std::string& out_dir) {
    const json metrics = mfgm::app::metrics_document(read_json(result_path), read_json(truth_path));
    spdlog::info("spearman rank correlation: {}", metrics.at("spearman").dump());
    for (const auto& p : metrics.at("parameters")) {
        spdlog::info("{}: estimate {} truth {} rel.err {}", p.at("name").get<std::string>(), p.at("estimate").dump(),
                     p.at("truth").dump(), p.at("rel_error").dump());
    }
    write_json(prepare_out(out_dir) / "metrics.json", metrics);
    return exit_ok;
}

int cmd_replicate(const std::string& preset, std::optional<std::uint64_t> seed, const std::string& out_dir) {
    if (preset.empty()) throw mfgm::InvalidArgument("replicate needs --preset (lv-0.1, lv-0.25, protein)");
    mfgm::app::replicate_config(preset, 1);  // rejects unknown names before any work
    const auto seeds = seed ? std::vector<std::uint64_t>{*seed} : mfgm::app::replicate_seeds(preset);
    const auto root = prepare_out(out_dir);

    std::vector<mfgm::app::ReplicateRun> runs;
    bool all_converged = true;
    for (auto s : seeds) {
        spdlog::info("{}: seed {}", preset, s);
        auto run = mfgm::app::run_replicate_seed(preset, s);
        log_fit(run.fit);
        const auto dir = prepare_out((root / ("seed-" + std::to_string(s))).string());
        write_fit_outputs(dir, run.config, run.fit, run.result);
        write_json(dir / "metrics.json", run.metrics);
        all_converged = all_converged && run.fit.result.converged;
        runs.push_back(std::move(run));
    }
    const json summary = mfgm::app::replicate_summary(preset, runs);
    for (const auto& c : summary.at("checks")) {
        spdlog::info("check {}: {} ({})", c.at("name").get<std::string>(), c.at("passed").get<bool>() ? "pass" : "FAIL",
                     c.at("detail").get<std::string>());
    }
    write_json(root / "summary.json", summary);
    return all_converged ? exit_ok : exit_not_converged;
}

}  // namespace

int main(int argc, char** argv) {
    setup_logging();
    CLI::App app{"Mean-field variational inference for ODE parameters via GP gradient matching", "mfgm"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(mfgm::version));

    std::string preset, config, out_dir = ".", result_path, truth_path;
    std::optional<std::uint64_t> seed;
    std::optional<double> noise;

    auto* sim = app.add_subcommand("simulate", "Simulate a benchmark system and write data.csv + truth.json");
    sim->add_option("--preset", preset, "lotka-volterra or protein");
    sim->add_option("--noise", noise, "observation noise variance for the preset");
    sim->add_option("--config", config, "experiment config with a 'simulate' section");
    sim->add_option("--seed", seed, "random seed");
    sim->add_option("--out", out_dir, "output directory");

    auto* fit = app.add_subcommand("fit", "Run inference and write result.json");
    fit->add_option("--config", config, "experiment config")->required();
    fit->add_option("--seed", seed, "override the config seed");
    fit->add_option("--out", out_dir, "output directory");

    auto* eval = app.add_subcommand("evaluate", "Compare a result with the truth and write metrics.json");
    eval->add_option("--result", result_path, "result.json from fit")->required();
    eval->add_option("--truth", truth_path, "truth.json from simulate")->required();
    eval->add_option("--out", out_dir, "output directory");

    auto* rep = app.add_subcommand("replicate", "Run a replication preset end to end");
    rep->add_option("--preset", preset, "lv-0.1, lv-0.25 or protein")->required();
    rep->add_option("--seed", seed, "run a single seed instead of the preset's seeds");
    rep->add_option("--out", out_dir, "output directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? exit_ok : exit_input;
    }

    try {
        if (*sim) return cmd_simulate(preset, noise, config, seed, out_dir);
        if (*fit) return cmd_fit(config, seed, out_dir);
        if (*eval) return cmd_evaluate(result_path, truth_path, out_dir);
        if (*rep) return cmd_replicate(preset, seed, out_dir);
    } catch (const mfgm::NotPositiveDefinite& e) {
        spdlog::error("numerical failure: {}", e.what());
        return exit_numerical;
    } catch (const mfgm::Singular& e) {
        spdlog::error("numerical failure: {}", e.what());
        return exit_numerical;
    } catch (const mfgm::NonFiniteEncountered& e) {
        spdlog::error("numerical failure: {}", e.what());
        return exit_numerical;
    } catch (const mfgm::NonFiniteState& e) {
        spdlog::error("numerical failure: {}", e.what());
        return exit_numerical;
    } catch (const mfgm::OptimFailed& e) {
        spdlog::error("numerical failure: {}", e.what());
        return exit_numerical;
    } catch (const mfgm::Error& e) {
        spdlog::error("{}", e.what());
        return exit_input;
    } catch (const json::exception& e) {
        spdlog::error("malformed document: {}", e.what());
        return exit_input;
    }
    return exit_input;
}
