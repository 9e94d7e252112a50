#pragma once

// Experiment configuration: a JSON object naming the model, where the data come from, and how
// the GP layer and the inference loop are set up. See configs/ for annotated samples.

#include "json.hpp"

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "mfgm/errors.hpp"
#include "mfgm/kernels.hpp"
#include "mfgm/model_format.hpp"
#include "mfgm/ode_model.hpp"
#include "mfgm/simulator.hpp"
#include "mfgm/vi_engine.hpp"

namespace mfgm::app {

using json = nlohmann::ordered_json;

struct ExperimentConfig {
    std::string model_name;
    OdeSystem system{1, 1, {{Term{0, 1, Monomial{}}}}};

    std::optional<std::string> data_path;  // resolved against the config's directory
    std::optional<SimConfig> simulate;

    bool fit_kernel = true;
    KernelKind kernel_kind = KernelKind::rbf;
    std::vector<KernelSpec> kernels;  // per state, used when !fit_kernel

    bool fit_noise = false;
    std::vector<double> noise_variances;  // per state; initial values when fit_noise

    std::vector<double> gammas;
    GpLayerOptions gp;
    InferenceOptions inference;
    std::uint64_t seed = 1;

    json echo;  // the configuration as read, with overrides applied
};

namespace detail {

inline const json& require(const json& obj, const char* key) {
    if (!obj.contains(key)) throw InvalidArgument(std::string("config is missing '") + key + "'");
    return obj.at(key);
}

inline double number(const json& v, const std::string& what) {
    if (!v.is_number()) throw InvalidArgument(what + " must be a number");
    return v.get<double>();
}

inline std::vector<double> number_list(const json& v, const std::string& what) {
    if (!v.is_array()) throw InvalidArgument(what + " must be an array of numbers");
    std::vector<double> out;
    for (const auto& e : v) out.push_back(number(e, what + " entry"));
    return out;
}

inline Eigen::VectorXd to_vector(const std::vector<double>& v) {
    return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

/// A scalar applies to every state; an array must have one entry per state.
inline std::vector<double> per_state(const json& v, int K, const std::string& what) {
    if (v.is_number()) return std::vector<double>(static_cast<std::size_t>(K), v.get<double>());
    auto list = number_list(v, what);
    if (static_cast<int>(list.size()) != K) {
        throw DimensionMismatch(what + " has " + std::to_string(list.size()) + " entries, the model has " +
                                std::to_string(K) + " states");
    }
    return list;
}

inline OdeSystem resolve_model(const std::string& name, const std::filesystem::path& base) {
    if (name == "lotka-volterra") return builtin_lotka_volterra();
    if (name == "protein") return builtin_protein_pathway();
    std::filesystem::path p(name);
    if (p.is_relative()) p = base / p;
    return load_model_file(p.string());
}

inline KernelSpec kernel_from_json(const json& v) {
    if (!v.is_object()) throw InvalidArgument("kernel entries must be objects");
    const auto kind = kernel_kind_from_string(require(v, "kind").get<std::string>());
    KernelSpec spec;
    if (kind == KernelKind::rbf) {
        spec = KernelSpec::rbf(number(require(v, "signal_variance"), "signal_variance"),
                               number(require(v, "lengthscale"), "lengthscale"));
    } else {
        spec = KernelSpec::neural_net(number(require(v, "signal_variance"), "signal_variance"),
                                      number(require(v, "offset"), "offset"), number(require(v, "scale"), "scale"));
    }
    spec.validate();
    return spec;
}

inline SimConfig sim_from_json(const json& v, const OdeSystem& system, std::uint64_t seed) {
    if (!v.is_object()) throw InvalidArgument("'simulate' must be an object");
    const int K = system.num_states();
    SimConfig cfg{system, to_vector(number_list(require(v, "theta"), "simulate.theta")),
                  to_vector(number_list(require(v, "x0"), "simulate.x0")),
                  0.0, 0.0, {}, 1e-3, {}, seed};
    const json& times = require(v, "sample_times");
    if (times.is_object()) {
        const TimeGrid g = TimeGrid::uniform(number(require(times, "start"), "sample_times.start"),
                                             number(require(times, "stop"), "sample_times.stop"),
                                             number(require(times, "step"), "sample_times.step"));
        cfg.sample_times.assign(g.times().begin(), g.times().end());
    } else {
        cfg.sample_times = number_list(times, "simulate.sample_times");
    }
    if (cfg.sample_times.empty()) throw InvalidArgument("simulate.sample_times is empty");
    cfg.t_start = v.contains("t_start") ? number(v.at("t_start"), "t_start") : cfg.sample_times.front();
    cfg.t_end = v.contains("t_end") ? number(v.at("t_end"), "t_end") : cfg.sample_times.back();
    cfg.integrator_step = number(require(v, "integrator_step"), "integrator_step");
    cfg.noise_variance = per_state(require(v, "noise_variance"), K, "simulate.noise_variance");
    cfg.seed = seed;
    cfg.validate();
    return cfg;
}

inline EStepMode e_step_from_string(const std::string& s) {
    if (s == "statewise") return EStepMode::statewise;
    if (s == "cellwise") return EStepMode::cellwise;
    throw InvalidArgument("e_step must be 'statewise' or 'cellwise', got '" + s + "'");
}

}  // namespace detail

/// Parses a configuration object. Relative paths are resolved against `base_dir`.
inline ExperimentConfig parse_config(const json& j, const std::filesystem::path& base_dir,
                                     std::optional<std::uint64_t> seed_override = {}) {
    using namespace detail;
    if (!j.is_object()) throw InvalidArgument("config must be a JSON object");
    ExperimentConfig cfg;
    cfg.echo = j;
    if (j.contains("seed")) {
        const json& seed = j.at("seed");
        if (!seed.is_number_integer() || (!seed.is_number_unsigned() && seed.get<std::int64_t>() < 0)) {
            throw InvalidArgument("seed must be a non-negative integer");
        }
        cfg.seed = j.at("seed").get<std::uint64_t>();
    }
    if (seed_override) cfg.seed = *seed_override;
    cfg.echo["seed"] = cfg.seed;

    cfg.model_name = require(j, "model").get<std::string>();
    cfg.system = resolve_model(cfg.model_name, base_dir);
    const int K = cfg.system.num_states();

    const bool has_data = j.contains("data");
    const bool has_sim = j.contains("simulate");
    if (has_data == has_sim) throw InvalidArgument("config needs exactly one of 'data' and 'simulate'");
    if (has_data) {
        std::filesystem::path p(j.at("data").get<std::string>());
        if (p.is_relative()) p = base_dir / p;
        cfg.data_path = p.string();
    } else {
        cfg.simulate = sim_from_json(j.at("simulate"), cfg.system, cfg.seed);
    }

    const json kernel = j.value("kernel", json("fit"));
    if (kernel.is_string()) {
        if (kernel.get<std::string>() != "fit") throw InvalidArgument("kernel must be \"fit\", an object or a list");
        cfg.fit_kernel = true;
        cfg.kernel_kind = kernel_kind_from_string(j.value("kernel_kind", std::string("rbf")));
    } else {
        cfg.fit_kernel = false;
        if (kernel.is_object()) {
            cfg.kernels.assign(static_cast<std::size_t>(K), kernel_from_json(kernel));
        } else if (kernel.is_array()) {
            for (const auto& e : kernel) cfg.kernels.push_back(kernel_from_json(e));
            if (static_cast<int>(cfg.kernels.size()) != K) {
                throw DimensionMismatch("kernel list has " + std::to_string(cfg.kernels.size()) +
                                        " entries, the model has " + std::to_string(K) + " states");
            }
        } else {
            throw InvalidArgument("kernel must be \"fit\", an object or a list");
        }
        cfg.kernel_kind = cfg.kernels.front().kind;
    }

    const json noise = require(j, "noise_variance");
    if (noise.is_string()) {
        if (noise.get<std::string>() != "fit") throw InvalidArgument("noise_variance must be \"fit\" or numbers");
        if (!cfg.fit_kernel) throw InvalidArgument("noise_variance \"fit\" requires kernel \"fit\"");
        cfg.fit_noise = true;
    } else {
        cfg.noise_variances = per_state(noise, K, "noise_variance");
        for (double v : cfg.noise_variances) {
            if (!(v > 0.0)) throw InvalidArgument("noise_variance entries must be > 0");
        }
    }

    cfg.gammas = per_state(j.value("gamma", json(1e-2)), K, "gamma");
    for (double g : cfg.gammas) {
        if (!(g > 0.0)) throw InvalidArgument("gamma entries must be > 0");
    }

    cfg.gp.center = j.value("center", true);
    if (j.contains("jitter")) cfg.gp.base_jitter = number(j.at("jitter"), "jitter");

    cfg.inference.prior_precision = j.contains("prior_precision") ? number(j.at("prior_precision"), "prior_precision") : 0.0;
    cfg.inference.tol_theta = j.contains("tol_theta") ? number(j.at("tol_theta"), "tol_theta") : 1e-6;
    cfg.inference.tol_elbo = j.contains("tol_elbo") ? number(j.at("tol_elbo"), "tol_elbo") : 1e-8;
    if (j.contains("max_iter")) {
        if (!j.at("max_iter").is_number_integer()) throw InvalidArgument("max_iter must be an integer");
        cfg.inference.max_iter = j.at("max_iter").get<int>();
    }
    cfg.inference.e_step = e_step_from_string(j.value("e_step", std::string("statewise")));
    if (j.contains("warm_start")) {
        if (!j.at("warm_start").is_boolean()) throw InvalidArgument("warm_start must be true or false");
        cfg.inference.warm_start = j.at("warm_start").get<bool>();
    }
    if (!(cfg.inference.prior_precision >= 0.0)) throw InvalidArgument("prior_precision must be >= 0");
    if (!(cfg.inference.tol_theta > 0.0) || !(cfg.inference.tol_elbo > 0.0)) {
        throw InvalidArgument("tolerances must be > 0");
    }
    if (cfg.inference.max_iter < 1) throw InvalidArgument("max_iter must be >= 1");
    return cfg;
}

inline ExperimentConfig load_config(const std::string& path, std::optional<std::uint64_t> seed_override = {}) {
    std::ifstream in(path);
    if (!in) throw InvalidArgument("cannot open config '" + path + "'");
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ParseError(path + ": " + e.what(), 0);
    }
    const auto base = std::filesystem::path(path).parent_path();
    return parse_config(j, base, seed_override);
}

// ---------------------------------------------------------------------------------------------
// Presets

inline json lotka_volterra_simulation(double noise_variance) {
    return {{"theta", {2.0, 1.0, 4.0, 1.0}},
            {"x0", {5.0, 3.0}},
            {"t_start", 0.0},
            {"t_end", 2.0},
            {"sample_times", {{"start", 0.0}, {"stop", 2.0}, {"step", 0.1}}},
            {"integrator_step", 1e-3},
            {"noise_variance", noise_variance}};
}

inline json protein_simulation(double noise_variance) {
    return {{"theta", {0.07, 0.6, 0.05, 0.3, 0.017}},
            {"x0", {1.0, 0.0, 1.0, 0.0, 0.0}},
            {"t_start", 0.0},
            {"t_end", 100.0},
            {"sample_times", {0, 1, 2, 4, 5, 7, 10, 15, 20, 30, 40, 50, 60, 80, 100}},
            {"integrator_step", 0.01},
            {"noise_variance", noise_variance}};
}

inline const std::vector<std::string>& replicate_presets() {
    static const std::vector<std::string> names{"lv-0.1", "lv-0.25", "protein"};
    return names;
}

/// Full experiment for a replication preset. The observation noise is known from the
/// simulation and kept fixed; kernel hyperparameters are fitted per state.
inline json replicate_config(const std::string& name, std::uint64_t seed) {
    if (name == "lv-0.1" || name == "lv-0.25") {
        const double noise = name == "lv-0.1" ? 0.1 : 0.25;
        return {{"model", "lotka-volterra"},
                {"simulate", lotka_volterra_simulation(noise)},
                {"kernel", "fit"},
                {"kernel_kind", "rbf"},
                {"noise_variance", noise},
                {"gamma", 1.0},
                {"max_iter", 5000},
                {"seed", seed}};
    }
    if (name == "protein") {
        return {{"model", "protein"},
                {"simulate", protein_simulation(0.01)},
                {"kernel", "fit"},
                {"kernel_kind", "neural_net"},
                {"noise_variance", 0.01},
                {"gamma", 1e-2},
                {"max_iter", 5000},
                {"seed", seed}};
    }
    throw InvalidArgument("unknown preset '" + name + "' (expected lv-0.1, lv-0.25 or protein)");
}

/// Seeds a preset runs when none is given on the command line.
inline std::vector<std::uint64_t> replicate_seeds(const std::string& name) {
    if (name == "protein") return {1};
    return {1, 2, 3};
}

}  // namespace mfgm::app
