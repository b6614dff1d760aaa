// Command-line harness: reproducible simulation, estimation, Monte Carlo
// recovery, UCL fitting with linearization-point comparison, and regret
// classification.  Every command reads one JSON config (unknown keys are
// rejected), honors --seed/--out-dir/--jobs overrides, and emits
// deterministic files: identical config and seed give identical bytes.
//
// Exit codes: 0 success, 1 usage/config/runtime error, 2 identification
// failure, 3 convergence failure, 4 invalid transformed estimate.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "softmaxfit/estimator.hpp"
#include "softmaxfit/io.hpp"
#include "softmaxfit/parallel.hpp"
#include "softmaxfit/rng.hpp"
#include "softmaxfit/ucl_linearize.hpp"
#include "softmaxfit/ucl_sim.hpp"

namespace fs = std::filesystem;
using softmaxfit::json;

namespace {

constexpr int kExitError = 1;
constexpr int kExitIdentification = 2;
constexpr int kExitConvergence = 3;
constexpr int kExitTransform = 4;

struct CliFailure {
    int code;
    std::string message;
};

[[noreturn]] void fail(int code, const std::string& message) {
    throw CliFailure{code, message};
}

// Flag overrides shared by all subcommands.
struct Overrides {
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out_dir;
    std::optional<int> jobs;
    bool force = false;
};

// ---------------------------------------------------------------------------
// Strict config access: every object must enumerate its allowed keys.

void check_keys(const json& j, const std::set<std::string>& allowed,
                const std::string& context) {
    if (!j.is_object()) fail(kExitError, "config: " + context + " must be a JSON object");
    for (const auto& item : j.items()) {
        if (allowed.find(item.key()) == allowed.end()) {
            fail(kExitError, "config: unknown key \"" + item.key() + "\" in " + context);
        }
    }
}

template <typename T>
T require(const json& j, const std::string& key, const std::string& context) {
    if (!j.contains(key)) fail(kExitError, "config: " + context + " is missing \"" + key + "\"");
    try {
        return j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        fail(kExitError, "config: \"" + key + "\" in " + context + " has the wrong type");
    }
}

template <typename T>
T get_or(const json& j, const std::string& key, const T& fallback) {
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        fail(kExitError, "config: \"" + key + "\" has the wrong type");
    }
}

json load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail(kExitError, "cannot open config: " + path);
    json config;
    try {
        in >> config;
    } catch (const nlohmann::json::exception& err) {
        fail(kExitError, path + ": " + err.what());
    }
    if (!config.is_object()) fail(kExitError, path + ": config must be a JSON object");
    if (config.contains("schema_version") &&
        config.at("schema_version").get<int>() != softmaxfit::kSchemaVersion) {
        fail(kExitError, path + ": unsupported schema_version");
    }
    return config;
}

std::uint64_t effective_seed(const json& config, const Overrides& flags,
                             std::uint64_t fallback = 0) {
    if (flags.seed) return *flags.seed;
    return get_or<std::uint64_t>(config, "seed", fallback);
}

fs::path effective_out_dir(const json& config, const Overrides& flags) {
    const std::string dir =
        flags.out_dir ? *flags.out_dir : get_or<std::string>(config, "out_dir", ".");
    fs::create_directories(dir);
    return fs::path(dir);
}

int effective_jobs(const json& config, const Overrides& flags) {
    const int jobs = flags.jobs ? *flags.jobs : get_or<int>(config, "jobs", 1);
    if (jobs < 1) fail(kExitError, "jobs must be >= 1");
    return jobs;
}

void write_text(const fs::path& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(kExitError, "cannot open for writing: " + path.string());
    out << content;
    if (!out) fail(kExitError, "write failed: " + path.string());
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

std::string d17(double v) { return softmaxfit::detail::format_double(v); }

Eigen::VectorXd vector_from(const json& j, const std::string& context) {
    if (!j.is_array() || j.empty()) {
        fail(kExitError, "config: " + context + " must be a nonempty array of numbers");
    }
    Eigen::VectorXd v(static_cast<int>(j.size()));
    for (int i = 0; i < v.size(); ++i) {
        try {
            v(i) = j.at(i).get<double>();
        } catch (const nlohmann::json::exception&) {
            fail(kExitError, "config: " + context + " must contain only numbers");
        }
    }
    return v;
}

json vector_to(const Eigen::VectorXd& v) {
    json out = json::array();
    for (int i = 0; i < v.size(); ++i) out.push_back(v(i));
    return out;
}

softmaxfit::SolverOptions solver_from(const json& config) {
    softmaxfit::SolverOptions options;
    if (!config.contains("solver")) return options;
    const json& j = config.at("solver");
    check_keys(j, {"use_newton", "gradient_tolerance", "max_iterations"}, "solver");
    options.use_newton = get_or<bool>(j, "use_newton", options.use_newton);
    options.gradient_tolerance =
        get_or<double>(j, "gradient_tolerance", options.gradient_tolerance);
    options.max_iterations = get_or<int>(j, "max_iterations", options.max_iterations);
    return options;
}

json solver_echo(const softmaxfit::SolverOptions& options) {
    return json{{"use_newton", options.use_newton},
                {"gradient_tolerance", options.gradient_tolerance},
                {"max_iterations", options.max_iterations}};
}

// Environment block: either explicit arrays or a named grid landscape.
softmaxfit::BanditEnv env_from_config(const json& j, int horizon) {
    softmaxfit::BanditEnv env;
    if (j.contains("landscape")) {
        check_keys(j, {"landscape", "rows", "cols", "low", "high", "reward_sd"}, "env");
        const auto landscape = require<std::string>(j, "landscape", "env");
        const int rows = require<int>(j, "rows", "env");
        const int cols = require<int>(j, "cols", "env");
        const double low = require<double>(j, "low", "env");
        const double high = require<double>(j, "high", "env");
        if (landscape == "unimodal") {
            env.mean_rewards = softmaxfit::unimodal_grid_rewards(rows, cols, low, high);
        } else if (landscape == "bimodal") {
            env.mean_rewards = softmaxfit::bimodal_grid_rewards(rows, cols, low, high);
        } else {
            fail(kExitError, "config: env.landscape must be \"unimodal\" or \"bimodal\"");
        }
        env.arm_locations = softmaxfit::grid_locations(rows, cols);
    } else {
        check_keys(j, {"mean_rewards", "arm_locations", "reward_sd"}, "env");
        env.mean_rewards = vector_from(require<json>(j, "mean_rewards", "env"),
                                       "env.mean_rewards");
        const json& locations = require<json>(j, "arm_locations", "env");
        for (const auto& loc : locations) {
            if (!loc.is_array() || loc.size() != 2) {
                fail(kExitError, "config: env.arm_locations must be [x,y] pairs");
            }
            env.arm_locations.emplace_back(loc.at(0).get<double>(), loc.at(1).get<double>());
        }
    }
    env.reward_sd = require<double>(j, "reward_sd", "env");
    env.horizon = horizon;
    try {
        env.validate();
    } catch (const std::invalid_argument& err) {
        fail(kExitError, std::string("config: ") + err.what());
    }
    return env;
}

softmaxfit::UclParams params_from_config(const json& j) {
    check_keys(j, {"mu0", "sigma0_sq", "lambda", "nu", "sigma_s_sq"}, "params");
    softmaxfit::UclParams params;
    params.mu0 = require<double>(j, "mu0", "params");
    params.sigma0_sq = require<double>(j, "sigma0_sq", "params");
    params.lambda = require<double>(j, "lambda", "params");
    params.nu = require<double>(j, "nu", "params");
    params.sigma_s_sq = require<double>(j, "sigma_s_sq", "params");
    try {
        params.validate();
    } catch (const std::invalid_argument& err) {
        fail(kExitError, std::string("config: ") + err.what());
    }
    return params;
}

json ci_to_json(const softmaxfit::ConfidenceInterval& ci) {
    return json{
        {"level", ci.level}, {"lower", vector_to(ci.lower)}, {"upper", vector_to(ci.upper)}};
}

json identification_to_json(const softmaxfit::IdentificationReport& report) {
    return json{{"identified", report.identified},
                {"min_eigenvalue", report.min_eigenvalue},
                {"threshold", report.threshold},
                {"n_lower_bound", report.n_lower_bound},
                {"meets_observation_bound", report.meets_observation_bound}};
}

// ---------------------------------------------------------------------------
// simulate: linear-mode choice datasets or UCL bandit episodes.

int cmd_simulate(const json& config, const Overrides& flags) {
    check_keys(config,
               {"schema_version", "mode", "seed", "out_dir", "jobs", "n", "m", "theta",
                "dataset", "params", "env", "horizon", "episodes", "prefix"},
               "simulate config");
    const auto mode = require<std::string>(config, "mode", "simulate config");
    const std::uint64_t seed = effective_seed(config, flags);
    const fs::path out_dir = effective_out_dir(config, flags);

    if (mode == "linear") {
        const auto n = require<std::uint64_t>(config, "n", "simulate config");
        const int m = require<int>(config, "m", "simulate config");
        const Eigen::VectorXd theta =
            vector_from(require<json>(config, "theta", "simulate config"), "theta");
        const auto name = get_or<std::string>(config, "dataset", "dataset.csv");
        softmaxfit::Rng rng(seed);
        const auto data = softmaxfit::simulate_gaussian_dataset(n, m, theta, rng);
        softmaxfit::save_choice_dataset((out_dir / name).string(), data);
        const json provenance{{"schema_version", softmaxfit::kSchemaVersion},
                              {"mode", "linear"},
                              {"seed", seed},
                              {"n", n},
                              {"m", m},
                              {"theta", vector_to(theta)},
                              {"dataset", name}};
        write_json(out_dir / (name + ".provenance.json"), provenance);
        std::cout << "wrote " << (out_dir / name).string() << " (" << data.size()
                  << " observations)\n";
        return 0;
    }
    if (mode == "ucl") {
        const auto params = params_from_config(require<json>(config, "params", "simulate config"));
        const int horizon = require<int>(config, "horizon", "simulate config");
        const auto env = env_from_config(require<json>(config, "env", "simulate config"), horizon);
        const int episodes = get_or<int>(config, "episodes", 1);
        if (episodes < 1) fail(kExitError, "config: episodes must be >= 1");
        const auto prefix = get_or<std::string>(config, "prefix", "episode");
        const int jobs = effective_jobs(config, flags);
        // Episode i uses seed + i, so a config seed pins the whole batch and
        // the worker count cannot affect the content; writes stay on this
        // thread in index order.
        const auto logs = softmaxfit::parallel_map<softmaxfit::EpisodeLog>(
            static_cast<std::size_t>(episodes), jobs, [&](std::size_t i) {
                return softmaxfit::run_episode(env, params,
                                               seed + static_cast<std::uint64_t>(i));
            });
        for (int i = 0; i < episodes; ++i) {
            char suffix[32];
            std::snprintf(suffix, sizeof(suffix), "_%03d", i + 1);
            const std::string base = prefix + suffix;
            softmaxfit::save_episode((out_dir / (base + ".csv")).string(),
                                     (out_dir / (base + ".json")).string(), logs[i], &env);
        }
        json run{{"schema_version", softmaxfit::kSchemaVersion},
                 {"mode", "ucl"},
                 {"seed", seed},
                 {"params", softmaxfit::params_to_json(params)},
                 {"env", config.at("env")},
                 {"horizon", horizon},
                 {"episodes", episodes},
                 {"prefix", prefix}};
        write_json(out_dir / (prefix + "_run.json"), run);
        std::cout << "wrote " << episodes << " episode(s) under " << out_dir.string() << "/"
                  << prefix << "_*\n";
        return 0;
    }
    fail(kExitError, "config: mode must be \"linear\" or \"ucl\"");
}

// ---------------------------------------------------------------------------
// estimate: one dataset, ML or MAP, identification-gated.

int cmd_estimate(const json& config, const Overrides& flags) {
    check_keys(config,
               {"schema_version", "dataset", "method", "prior", "init", "solver", "ci_level",
                "out_dir", "output"},
               "estimate config");
    const auto dataset_path = require<std::string>(config, "dataset", "estimate config");
    const auto method = get_or<std::string>(config, "method", "ml");
    const double ci_level = get_or<double>(config, "ci_level", 0.95);
    const auto options = solver_from(config);
    const fs::path out_dir = effective_out_dir(config, flags);
    const auto output = get_or<std::string>(config, "output", "fit.json");

    const auto data = softmaxfit::load_choice_dataset(dataset_path);
    const auto report = softmaxfit::check_identification(data);
    if (!report.identified && !flags.force) {
        std::cerr << "dataset is not identified (min eigenvalue " << d17(report.min_eigenvalue)
                  << " vs threshold " << d17(report.threshold)
                  << "); pass --force to fit anyway\n";
        return kExitIdentification;
    }

    Eigen::VectorXd init = Eigen::VectorXd::Zero(data.feature_count());
    if (config.contains("init")) {
        init = vector_from(config.at("init"), "init");
        if (init.size() != data.feature_count()) {
            fail(kExitError, "config: init length does not match the dataset feature count");
        }
    }

    softmaxfit::FitResult fit;
    json prior_echo;
    if (method == "ml") {
        fit = softmaxfit::fit_ml(data, init, options);
    } else if (method == "map") {
        const json& prior = require<json>(config, "prior", "estimate config");
        check_keys(prior, {"mean", "sd"}, "prior");
        const Eigen::VectorXd mean = vector_from(require<json>(prior, "mean", "prior"),
                                                 "prior.mean");
        const Eigen::VectorXd sd = vector_from(require<json>(prior, "sd", "prior"), "prior.sd");
        if (mean.size() != data.feature_count() || sd.size() != data.feature_count()) {
            fail(kExitError, "config: prior mean/sd length does not match feature count");
        }
        fit = softmaxfit::fit_map(
            data, softmaxfit::gaussian_prior(mean, sd.array().square().matrix()), init, options);
        prior_echo = json{{"mean", vector_to(mean)}, {"sd", vector_to(sd)}};
    } else {
        fail(kExitError, "config: method must be \"ml\" or \"map\"");
    }

    json out = softmaxfit::fit_to_json(fit);
    out["method"] = method;
    if (!prior_echo.is_null()) out["prior"] = prior_echo;
    out["identification"] = identification_to_json(report);
    if (fit.covariance) {
        out["ci"] = ci_to_json(softmaxfit::confidence_intervals(fit, ci_level));
    } else {
        out["ci"] = nullptr;
    }
    write_json(out_dir / output, out);
    // Effective config, re-ingestable to reproduce this run.
    json sidecar{{"schema_version", softmaxfit::kSchemaVersion},
                 {"dataset", dataset_path},
                 {"method", method}};
    if (!prior_echo.is_null()) sidecar["prior"] = prior_echo;
    sidecar["init"] = vector_to(init);
    sidecar["ci_level"] = ci_level;
    sidecar["solver"] = solver_echo(options);
    sidecar["output"] = output;
    write_json(out_dir / (output + ".provenance.json"), sidecar);
    std::cout << "wrote " << (out_dir / output).string() << " (converged "
              << (fit.converged ? "yes" : "no") << ", log-likelihood "
              << d17(fit.log_likelihood) << ")\n";
    if (!fit.converged) {
        std::cerr << "fit did not converge within " << options.max_iterations
                  << " iterations (gradient norm " << d17(fit.gradient_norm) << ")\n";
        return kExitConvergence;
    }
    return 0;
}

// ---------------------------------------------------------------------------
// recover: Monte Carlo ensembles over a sample-size grid, features held
// fixed per gridpoint while responses are resimulated each replicate.

int cmd_recover(const json& config, const Overrides& flags) {
    check_keys(config,
               {"schema_version", "seed", "out_dir", "jobs", "m", "theta", "n_grid",
                "replicates", "ci_level", "solver", "report"},
               "recover config");
    const int m = require<int>(config, "m", "recover config");
    const Eigen::VectorXd theta_true =
        vector_from(require<json>(config, "theta", "recover config"), "theta");
    const auto n_grid_json = require<json>(config, "n_grid", "recover config");
    std::vector<std::uint64_t> n_grid;
    for (const auto& v : n_grid_json) n_grid.push_back(v.get<std::uint64_t>());
    if (n_grid.empty()) fail(kExitError, "config: n_grid must be nonempty");
    const int replicates = require<int>(config, "replicates", "recover config");
    if (replicates < 1) fail(kExitError, "config: replicates must be >= 1");
    const double ci_level = get_or<double>(config, "ci_level", 0.95);
    const auto options = solver_from(config);
    const std::uint64_t seed = effective_seed(config, flags);
    const fs::path out_dir = effective_out_dir(config, flags);
    const int jobs = effective_jobs(config, flags);
    const auto report_name = get_or<std::string>(config, "report", "recovery.csv");
    const int d = static_cast<int>(theta_true.size());

    struct Replicate {
        Eigen::VectorXd theta_hat;
        Eigen::VectorXd ci_lower, ci_upper;
        bool usable = false;
    };

    std::string csv = "n,coord,true_value,mean_estimate,empirical_p2_5,empirical_p97_5,"
                      "mean_ci_lower,mean_ci_upper,failures,replicates\n";
    for (std::size_t g = 0; g < n_grid.size(); ++g) {
        const std::uint64_t gridpoint_seed = softmaxfit::derive_seed(seed, g);
        softmaxfit::Rng feature_rng(softmaxfit::derive_seed(gridpoint_seed, 0));
        const auto base =
            softmaxfit::simulate_gaussian_dataset(n_grid[g], m, theta_true, feature_rng);
        const auto results = softmaxfit::parallel_map<Replicate>(
            static_cast<std::size_t>(replicates), jobs, [&](std::size_t r) {
                softmaxfit::Rng rng(softmaxfit::derive_seed(gridpoint_seed, 1 + r));
                const auto data = softmaxfit::resimulate_choices(base, theta_true, rng);
                const auto fit =
                    softmaxfit::fit_ml(data, Eigen::VectorXd::Zero(theta_true.size()), options);
                Replicate rep;
                if (fit.converged && fit.covariance) {
                    const auto ci = softmaxfit::confidence_intervals(fit, ci_level);
                    rep.theta_hat = fit.theta_hat;
                    rep.ci_lower = ci.lower;
                    rep.ci_upper = ci.upper;
                    rep.usable = true;
                }
                return rep;
            });

        long failures = 0;
        for (const auto& rep : results) failures += rep.usable ? 0 : 1;
        for (int c = 0; c < d; ++c) {
            std::vector<double> estimates;
            double mean = 0.0, lo_sum = 0.0, hi_sum = 0.0;
            for (const auto& rep : results) {
                if (!rep.usable) continue;
                estimates.push_back(rep.theta_hat(c));
                mean += rep.theta_hat(c);
                lo_sum += rep.ci_lower(c);
                hi_sum += rep.ci_upper(c);
            }
            if (estimates.empty()) {
                fail(kExitError, "recover: every replicate failed at n = " +
                                     std::to_string(n_grid[g]));
            }
            const double count = static_cast<double>(estimates.size());
            std::sort(estimates.begin(), estimates.end());
            // Nearest-rank percentiles; a single replicate degenerates to its
            // own value at both ends.
            const auto rank = [&](double q) {
                return estimates[static_cast<std::size_t>(
                    std::llround(q * (count - 1.0)))];
            };
            csv += std::to_string(n_grid[g]) + "," + std::to_string(c + 1) + "," +
                   d17(theta_true(c)) + "," + d17(mean / count) + "," + d17(rank(0.025)) +
                   "," + d17(rank(0.975)) + "," + d17(lo_sum / count) + "," +
                   d17(hi_sum / count) + "," + std::to_string(failures) + "," +
                   std::to_string(replicates) + "\n";
        }
    }
    write_text(out_dir / report_name, csv);
    json sidecar{{"schema_version", softmaxfit::kSchemaVersion},
                 {"seed", seed},
                 {"m", m},
                 {"theta", vector_to(theta_true)},
                 {"n_grid", n_grid_json},
                 {"replicates", replicates},
                 {"ci_level", ci_level},
                 {"solver", solver_echo(options)},
                 {"report", report_name}};
    write_json(out_dir / (report_name + ".provenance.json"), sidecar);
    std::cout << "wrote " << (out_dir / report_name).string() << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// fit-ucl: linearize episodes at one or more nominal points, fit each,
// compare, optionally sweep a lambda grid and run a grouped population fit.

struct LoadedEpisode {
    softmaxfit::EpisodeLog log;
    softmaxfit::BanditEnv env;
    std::string path;
};

std::string sidecar_path(const std::string& csv_path) {
    if (csv_path.size() < 4 || csv_path.substr(csv_path.size() - 4) != ".csv") {
        fail(kExitError, "episode files must end in .csv (sidecar is derived): " + csv_path);
    }
    return csv_path.substr(0, csv_path.size() - 4) + ".json";
}

LoadedEpisode load_episode_with_env(const std::string& csv_path) {
    auto file = softmaxfit::load_episode(csv_path, sidecar_path(csv_path));
    if (!file.env) {
        fail(kExitError, csv_path + ": sidecar has no env block (required here)");
    }
    LoadedEpisode ep;
    ep.log = std::move(file.log);
    ep.env = std::move(*file.env);
    ep.path = csv_path;
    return ep;
}

json ucl_estimate_to_json(const softmaxfit::UclEstimate& est, double ci_level) {
    json fit = softmaxfit::fit_to_json(est.fit);
    fit.erase("schema_version");
    json transformed_covariance;
    if (est.transformed_covariance) {
        transformed_covariance = json::array();
        for (int i = 0; i < 3; ++i) {
            for (int k = 0; k < 3; ++k) {
                transformed_covariance.push_back((*est.transformed_covariance)(i, k));
            }
        }
    }
    json ci;
    if (est.fit.covariance) {
        ci = ci_to_json(softmaxfit::confidence_intervals(est.fit, ci_level));
    }
    return json{{"fit", fit},
                {"ci", ci},
                {"transform_valid", est.transform_valid},
                {"invalid_reason", est.invalid_reason},
                {"nu", est.nu},
                {"mu0", est.mu0},
                {"sigma0_sq", est.sigma0_sq},
                {"delta_mu", est.delta_mu},
                {"delta_delta", est.delta_delta},
                {"transformed_covariance", transformed_covariance}};
}

int cmd_fit_ucl(const json& config, const Overrides& flags) {
    check_keys(config,
               {"schema_version", "episodes", "points", "sigma_s_sq", "lambda", "lambda_grid",
                "subjects", "solver", "ci_level", "init", "out_dir", "jobs", "output"},
               "fit-ucl config");
    const auto episode_paths =
        require<std::vector<std::string>>(config, "episodes", "fit-ucl config");
    if (episode_paths.empty()) fail(kExitError, "config: episodes must be nonempty");
    const double sigma_s_sq = require<double>(config, "sigma_s_sq", "fit-ucl config");
    const double lambda = require<double>(config, "lambda", "fit-ucl config");
    const double ci_level = get_or<double>(config, "ci_level", 0.95);
    const auto options = solver_from(config);
    const fs::path out_dir = effective_out_dir(config, flags);
    const int jobs = effective_jobs(config, flags);
    const auto output = get_or<std::string>(config, "output", "ucl_fit.json");

    Eigen::VectorXd init(3);
    init << 1.0, 0.0, 0.0;
    if (config.contains("init")) {
        init = vector_from(config.at("init"), "init");
        if (init.size() != 3) fail(kExitError, "config: init must have length 3");
    }

    const json& points_json = require<json>(config, "points", "fit-ucl config");
    if (!points_json.is_array() || points_json.empty()) {
        fail(kExitError, "config: points must be a nonempty array");
    }
    struct NominalPoint {
        double mu0_bar;
        double sigma0_sq_bar;
    };
    std::vector<NominalPoint> nominal;
    for (const auto& p : points_json) {
        check_keys(p, {"mu0_bar", "sigma0_sq_bar"}, "points[]");
        nominal.push_back({require<double>(p, "mu0_bar", "points[]"),
                           require<double>(p, "sigma0_sq_bar", "points[]")});
    }

    std::vector<LoadedEpisode> episodes;
    for (const auto& path : episode_paths) episodes.push_back(load_episode_with_env(path));

    auto linearize_all = [&](const softmaxfit::LinearizationPoint& point) {
        return softmaxfit::parallel_map<softmaxfit::UclFeatureDataset>(
            episodes.size(), jobs, [&](std::size_t i) {
                return softmaxfit::linearize_episode(episodes[i].log,
                                                     episodes[i].env.arm_locations, point);
            });
    };
    auto fit_at = [&](const softmaxfit::LinearizationPoint& point) {
        return softmaxfit::fit_ucl(
            softmaxfit::merge_feature_datasets(linearize_all(point)), init, options);
    };

    json point_blocks = json::array();
    std::vector<softmaxfit::UclEstimate> estimates;
    for (const auto& p : nominal) {
        const auto point =
            softmaxfit::LinearizationPoint::from_sigma0(p.mu0_bar, p.sigma0_sq_bar, lambda,
                                                        sigma_s_sq);
        const auto est = fit_at(point);
        estimates.push_back(est);
        json block = ucl_estimate_to_json(est, ci_level);
        block["point"] = json{{"mu0_bar", p.mu0_bar},
                              {"sigma0_sq_bar", p.sigma0_sq_bar},
                              {"delta0_sq_bar", point.delta0_sq_bar},
                              {"lambda", lambda},
                              {"sigma_s_sq", sigma_s_sq}};
        block["log_likelihood"] = est.fit.log_likelihood;
        point_blocks.push_back(std::move(block));
    }

    std::size_t selected = 0;
    for (std::size_t i = 1; i < estimates.size(); ++i) {
        if (estimates[i].fit.log_likelihood > estimates[selected].fit.log_likelihood) {
            selected = i;
        }
    }

    json out{{"schema_version", softmaxfit::kSchemaVersion},
             {"points", point_blocks},
             {"selected_point", selected}};

    if (config.contains("lambda_grid")) {
        const auto grid = require<std::vector<double>>(config, "lambda_grid", "fit-ucl config");
        if (grid.empty()) fail(kExitError, "config: lambda_grid must be nonempty");
        json grid_blocks = json::array();
        std::size_t best = 0;
        std::vector<double> likelihoods;
        for (std::size_t i = 0; i < grid.size(); ++i) {
            const auto point = softmaxfit::LinearizationPoint::from_sigma0(
                nominal[selected].mu0_bar, nominal[selected].sigma0_sq_bar, grid[i],
                sigma_s_sq);
            const auto est = fit_at(point);
            likelihoods.push_back(est.fit.log_likelihood);
            if (est.fit.log_likelihood > likelihoods[best]) best = i;
            json block = ucl_estimate_to_json(est, ci_level);
            block["lambda"] = grid[i];
            block["log_likelihood"] = est.fit.log_likelihood;
            grid_blocks.push_back(std::move(block));
        }
        out["lambda_grid"] = grid_blocks;
        out["selected_lambda"] = grid[best];
    }

    if (config.contains("subjects")) {
        const json& subjects_json = config.at("subjects");
        if (!subjects_json.is_array() || subjects_json.empty()) {
            fail(kExitError, "config: subjects must be a nonempty array");
        }
        const auto point = softmaxfit::LinearizationPoint::from_sigma0(
            nominal[selected].mu0_bar, nominal[selected].sigma0_sq_bar, lambda, sigma_s_sq);
        const auto all_features = linearize_all(point);
        std::vector<softmaxfit::UclFeatureDataset> subjects;
        std::vector<std::string> labels;
        for (const auto& s : subjects_json) {
            check_keys(s, {"label", "episodes"}, "subjects[]");
            const auto label = require<std::string>(s, "label", "subjects[]");
            const auto indices = require<std::vector<std::size_t>>(s, "episodes", "subjects[]");
            if (indices.empty()) fail(kExitError, "config: subject episode list is empty");
            std::vector<softmaxfit::UclFeatureDataset> parts;
            for (const auto idx : indices) {
                if (idx >= all_features.size()) {
                    fail(kExitError, "config: subject episode index out of range");
                }
                parts.push_back(all_features[idx]);
            }
            subjects.push_back(softmaxfit::merge_feature_datasets(parts));
            labels.push_back(label);
        }
        const auto population = softmaxfit::fit_population(subjects, labels, init, options);
        json groups = json::array();
        for (const auto& group : population.groups) {
            json member_lls = json::array();
            double ll_sum = 0.0;
            for (const auto& fit : group.member_fits) {
                member_lls.push_back(fit.log_likelihood);
                ll_sum += fit.log_likelihood;
            }
            json members = json::array();
            for (const auto m : group.members) members.push_back(m);
            groups.push_back(json{
                {"label", group.label},
                {"members", members},
                {"pooled_theta", vector_to(group.pooled.fit.theta_hat)},
                {"member_log_likelihoods", member_lls},
                {"mean_log_likelihood", ll_sum / static_cast<double>(group.member_fits.size())},
                {"estimate", ucl_estimate_to_json(group.estimate, ci_level)}});
        }
        json comparisons = json::array();
        for (const auto& cmp : population.comparisons) {
            json tests = json::array();
            for (const auto& test : cmp.coordinate_tests) {
                tests.push_back(
                    json{{"t", test.t}, {"df", test.df}, {"p_value", test.p_value}});
            }
            comparisons.push_back(json{{"group_a", cmp.group_a},
                                       {"group_b", cmp.group_b},
                                       {"available", cmp.available},
                                       {"coordinate_tests", tests}});
        }
        out["population"] = json{{"groups", groups}, {"comparisons", comparisons}};
    }

    write_json(out_dir / output, out);
    // Effective config, re-ingestable to reproduce this run.
    json sidecar{{"schema_version", softmaxfit::kSchemaVersion},
                 {"episodes", episode_paths},
                 {"points", points_json},
                 {"sigma_s_sq", sigma_s_sq},
                 {"lambda", lambda}};
    if (config.contains("lambda_grid")) sidecar["lambda_grid"] = config.at("lambda_grid");
    if (config.contains("subjects")) sidecar["subjects"] = config.at("subjects");
    sidecar["init"] = vector_to(init);
    sidecar["ci_level"] = ci_level;
    sidecar["solver"] = solver_echo(options);
    sidecar["output"] = output;
    write_json(out_dir / (output + ".provenance.json"), sidecar);
    const auto& chosen = estimates[selected];
    std::cout << "wrote " << (out_dir / output).string() << " (selected point "
              << d17(nominal[selected].mu0_bar) << "," << d17(nominal[selected].sigma0_sq_bar)
              << ", log-likelihood " << d17(chosen.fit.log_likelihood) << ")\n";
    if (!chosen.fit.converged) {
        std::cerr << "selected-point fit did not converge\n";
        return kExitConvergence;
    }
    if (!chosen.transform_valid) {
        std::cerr << "selected-point transform is invalid: " << chosen.invalid_reason << "\n";
        return kExitTransform;
    }
    return 0;
}

// ---------------------------------------------------------------------------
// classify-regret: slope of log R_t vs log t over the back half of each
// episode; labels optimal / log-law / linear.

int cmd_classify_regret(const json& config, const Overrides& flags) {
    check_keys(config,
               {"schema_version", "episodes", "threshold_ratio", "reference_slope", "out_dir",
                "output"},
               "classify-regret config");
    const auto episode_paths =
        require<std::vector<std::string>>(config, "episodes", "classify-regret config");
    if (episode_paths.empty()) fail(kExitError, "config: episodes must be nonempty");
    const double threshold_ratio = get_or<double>(config, "threshold_ratio", 0.4);
    const double reference_slope = get_or<double>(config, "reference_slope", 1.0);
    const fs::path out_dir = effective_out_dir(config, flags);
    const auto output = get_or<std::string>(config, "output", "regret_labels.csv");

    std::string csv = "episode,file,label,slope,final_regret\n";
    for (std::size_t i = 0; i < episode_paths.size(); ++i) {
        const auto ep = load_episode_with_env(episode_paths[i]);
        const Eigen::VectorXd regret = softmaxfit::cumulative_regret(ep.log, ep.env);
        const int horizon = static_cast<int>(regret.size());
        const double final_regret = regret(horizon - 1);
        std::string label;
        std::string slope_text;
        if (final_regret <= 0.0) {
            label = "optimal";
        } else {
            // Least squares of log R_t on log t over t in [T/2, T], skipping
            // zero-regret prefixes inside the window.
            std::vector<double> xs, ys;
            for (int t = (horizon + 1) / 2; t <= horizon; ++t) {
                if (regret(t - 1) > 0.0) {
                    xs.push_back(std::log(static_cast<double>(t)));
                    ys.push_back(std::log(regret(t - 1)));
                }
            }
            double slope = 0.0;
            if (xs.size() >= 2) {
                double mx = 0.0, my = 0.0;
                for (std::size_t k = 0; k < xs.size(); ++k) {
                    mx += xs[k];
                    my += ys[k];
                }
                mx /= static_cast<double>(xs.size());
                my /= static_cast<double>(xs.size());
                double sxy = 0.0, sxx = 0.0;
                for (std::size_t k = 0; k < xs.size(); ++k) {
                    sxy += (xs[k] - mx) * (ys[k] - my);
                    sxx += (xs[k] - mx) * (xs[k] - mx);
                }
                slope = sxy / sxx;
            }
            slope_text = d17(slope);
            label = slope < threshold_ratio * reference_slope ? "log-law" : "linear";
        }
        csv += std::to_string(i + 1) + "," + episode_paths[i] + "," + label + "," +
               slope_text + "," + d17(final_regret) + "\n";
    }
    write_text(out_dir / output, csv);
    json sidecar{{"schema_version", softmaxfit::kSchemaVersion},
                 {"episodes", episode_paths},
                 {"threshold_ratio", threshold_ratio},
                 {"reference_slope", reference_slope},
                 {"output", output}};
    write_json(out_dir / (output + ".provenance.json"), sidecar);
    std::cout << "wrote " << (out_dir / output).string() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"softmax decision-model estimation toolkit"};
    app.require_subcommand(1);

    std::string config_path;
    Overrides flags;
    std::uint64_t seed_flag = 0;
    std::string out_dir_flag;
    int jobs_flag = 0;

    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_path, "JSON config file")->required();
        cmd->add_option("--seed", seed_flag, "override the config seed");
        cmd->add_option("--out-dir", out_dir_flag, "override the output directory");
        cmd->add_option("--jobs", jobs_flag, "worker threads for replicates/episodes");
    };

    auto* simulate = app.add_subcommand("simulate", "generate datasets or bandit episodes");
    add_common(simulate);
    auto* estimate = app.add_subcommand("estimate", "fit one choice dataset (ML or MAP)");
    add_common(estimate);
    estimate->add_flag("--force", flags.force, "fit even when identification fails");
    auto* recover = app.add_subcommand("recover", "Monte Carlo recovery over a sample-size grid");
    add_common(recover);
    auto* fit_ucl = app.add_subcommand("fit-ucl", "fit UCL parameters from episodes");
    add_common(fit_ucl);
    auto* classify =
        app.add_subcommand("classify-regret", "label episodes by cumulative-regret growth");
    add_common(classify);

    CLI11_PARSE(app, argc, argv);

    auto* cmd = app.get_subcommands().front();
    if (cmd->count("--seed") > 0) flags.seed = seed_flag;
    if (cmd->count("--out-dir") > 0) flags.out_dir = out_dir_flag;
    if (cmd->count("--jobs") > 0) flags.jobs = jobs_flag;

    try {
        const json config = load_config(config_path);
        if (cmd == simulate) return cmd_simulate(config, flags);
        if (cmd == estimate) return cmd_estimate(config, flags);
        if (cmd == recover) return cmd_recover(config, flags);
        if (cmd == fit_ucl) return cmd_fit_ucl(config, flags);
        if (cmd == classify) return cmd_classify_regret(config, flags);
        std::cerr << "unknown subcommand\n";
        return kExitError;
    } catch (const CliFailure& failure) {
        std::cerr << failure.message << "\n";
        return failure.code;
    } catch (const softmaxfit::IdentificationError& err) {
        std::cerr << err.what() << "\n";
        return kExitIdentification;
    } catch (const softmaxfit::IoError& err) {
        std::cerr << err.what() << "\n";
        return kExitError;
    } catch (const std::exception& err) {
        std::cerr << err.what() << "\n";
        return kExitError;
    }
}
