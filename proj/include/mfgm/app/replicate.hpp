#pragma once

// Replication presets: simulate the benchmark, fit it, and score the fit against the truth.

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "mfgm/app/config.hpp"
#include "mfgm/app/pipeline.hpp"

namespace mfgm::app {

struct ReplicateRun {
    std::uint64_t seed = 0;
    ExperimentConfig config;
    FitOutput fit;
    json result;
    json truth;
    json metrics;
};

inline ReplicateRun run_replicate_seed(const std::string& preset, std::uint64_t seed) {
    ExperimentConfig config = parse_config(replicate_config(preset, seed), ".");
    FitOutput fit = run_fit(config);
    json result = result_document(config, fit);
    json truth = truth_document(*config.simulate, *fit.data.truth);
    json metrics = metrics_document(result, truth);
    return {seed, std::move(config), std::move(fit), std::move(result), std::move(truth), std::move(metrics)};
}

struct Check {
    std::string name;
    bool passed = false;
    std::string detail;
};

/// Parameter recovery over several seeds: the seed-averaged estimate of every parameter
/// within `max_rel_error` of the truth, and the truth within `max_z` posterior standard
/// deviations of every single-seed estimate.
inline Check parameter_recovery_check(const std::vector<ReplicateRun>& runs, double max_rel_error, double max_z) {
    Check c{"parameter_recovery", true, ""};
    const auto& first = runs.front().metrics.at("parameters");
    for (std::size_t i = 0; i < first.size(); ++i) {
        double mean = 0.0;
        double worst_z = 0.0;
        for (const auto& r : runs) {
            const auto& p = r.metrics.at("parameters").at(i);
            mean += p.at("estimate").get<double>() / static_cast<double>(runs.size());
            const auto& z = p.at("z_score");
            worst_z = std::max(worst_z, z.is_null() ? std::numeric_limits<double>::infinity() : z.get<double>());
        }
        const double truth = first.at(i).at("truth").get<double>();
        const double rel = std::abs(mean - truth) / std::abs(truth);
        const bool ok = rel <= max_rel_error && worst_z <= max_z;
        c.passed = c.passed && ok;
        c.detail += first.at(i).at("name").get<std::string>() + ": mean " + format_double(mean) + " rel.err " +
                    format_double(rel) + " max z " + format_double(worst_z) + (ok ? "" : " (fail)") + "; ";
    }
    return c;
}

/// Re-integrated trajectories keep turning: every state's derivative changes sign.
inline Check periodicity_check(const std::vector<ReplicateRun>& runs) {
    Check c{"oscillation_preserved", true, ""};
    for (const auto& r : runs) {
        const auto& sc = r.metrics.at("reintegrated_derivative_sign_changes");
        bool ok = !sc.is_null();
        if (ok) {
            for (const auto& v : sc) ok = ok && v.get<int>() >= 1;
        }
        c.passed = c.passed && ok;
        c.detail += "seed " + std::to_string(r.seed) + ": sign changes " + (sc.is_null() ? "n/a" : sc.dump()) +
                    ", rmse " + r.metrics.at("reintegrated_rmse_overall").dump() + "; ";
    }
    return c;
}

inline Check rank_check(const std::vector<ReplicateRun>& runs) {
    Check c{"rank_agreement", true, ""};
    for (const auto& r : runs) {
        const auto& s = r.metrics.at("spearman");
        const bool ok = !s.is_null() && s.get<double>() >= 1.0 - 1e-12;
        c.passed = c.passed && ok;
        c.detail += "seed " + std::to_string(r.seed) + ": spearman " + s.dump() + "; ";
    }
    return c;
}

inline Check proxy_tracking_check(const std::vector<ReplicateRun>& runs, double max_normalized_rmse) {
    Check c{"proxy_tracking", true, ""};
    for (const auto& r : runs) {
        const auto& v = r.metrics.at("proxy_rmse_normalized");
        bool ok = true;
        for (const auto& e : v) ok = ok && e.get<double>() <= max_normalized_rmse;
        c.passed = c.passed && ok;
        c.detail += "seed " + std::to_string(r.seed) + ": normalized rmse " + v.dump() + "; ";
    }
    return c;
}

inline std::vector<Check> replicate_checks(const std::string& preset, const std::vector<ReplicateRun>& runs) {
    if (preset == "lv-0.1") return {parameter_recovery_check(runs, 0.25, 3.0)};
    if (preset == "lv-0.25") return {periodicity_check(runs)};
    if (preset == "protein") return {rank_check(runs), proxy_tracking_check(runs, 0.15)};
    throw InvalidArgument("unknown preset '" + preset + "'");
}

inline json replicate_summary(const std::string& preset, const std::vector<ReplicateRun>& runs) {
    json doc;
    doc["schema_version"] = std::string(schema_version);
    doc["kind"] = "replicate_summary";
    doc["preset"] = preset;
    json seeds = json::array();
    for (const auto& r : runs) {
        seeds.push_back({{"seed", r.seed},
                         {"converged", r.result.at("converged")},
                         {"iterations", r.result.at("iterations")},
                         {"theta", r.result.at("theta").at("mean")},
                         {"stddev", r.result.at("theta").at("stddev")},
                         {"spearman", r.metrics.at("spearman")},
                         {"proxy_rmse_normalized", r.metrics.at("proxy_rmse_normalized")},
                         {"reintegrated_rmse_overall", r.metrics.at("reintegrated_rmse_overall")}});
    }
    doc["runs"] = std::move(seeds);
    json checks = json::array();
    for (const auto& c : replicate_checks(preset, runs)) {
        checks.push_back({{"name", c.name}, {"passed", c.passed}, {"detail", c.detail}});
    }
    doc["checks"] = std::move(checks);
    return doc;
}

}  // namespace mfgm::app
