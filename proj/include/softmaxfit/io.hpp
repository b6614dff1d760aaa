#pragma once

// CSV and JSON serialization for choice datasets, bandit episodes, fit
// results, and linearized feature sets.  Floating-point values are written
// with 17 significant digits (and JSON doubles with shortest-round-trip
// formatting), so every write/read pair reproduces the doubles bit-exactly.
// Parsers are strict and report 1-based line numbers on malformed input.

#include <Eigen/Dense>

#include <charconv>
#include <cstdint>
#include <fstream>
#include <istream>
#include <limits>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "softmaxfit/choice_model.hpp"
#include "softmaxfit/estimator.hpp"
#include "softmaxfit/ucl_linearize.hpp"
#include "softmaxfit/ucl_sim.hpp"

namespace softmaxfit {

using json = nlohmann::ordered_json;

// Version stamp carried by every emitted result file.
inline constexpr int kSchemaVersion = 1;

class IoError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

namespace detail {

// Locale-independent general-format rendering at 17 significant digits.
inline std::string format_double(double value) {
    char buf[64];
    const auto res =
        std::to_chars(buf, buf + sizeof(buf), value, std::chars_format::general, 17);
    return std::string(buf, res.ptr);
}

[[noreturn]] inline void parse_fail(const std::string& source, long line,
                                    const std::string& message) {
    throw IoError(source + ":" + std::to_string(line) + ": " + message);
}

inline std::vector<std::string> split_fields(const std::string& line) {
    std::vector<std::string> fields;
    std::size_t start = 0;
    while (true) {
        const std::size_t comma = line.find(',', start);
        if (comma == std::string::npos) {
            fields.push_back(line.substr(start));
            return fields;
        }
        fields.push_back(line.substr(start, comma - start));
        start = comma + 1;
    }
}

inline double parse_double_field(const std::string& field, const std::string& source,
                                 long line, const std::string& what) {
    double value = 0.0;
    const char* begin = field.data();
    const char* end = begin + field.size();
    const auto res = std::from_chars(begin, end, value);
    if (res.ec != std::errc() || res.ptr != end || field.empty()) {
        parse_fail(source, line, "expected a number for " + what + ", got \"" + field + "\"");
    }
    return value;
}

inline long parse_int_field(const std::string& field, const std::string& source, long line,
                            const std::string& what) {
    long value = 0;
    const char* begin = field.data();
    const char* end = begin + field.size();
    const auto res = std::from_chars(begin, end, value);
    if (res.ec != std::errc() || res.ptr != end || field.empty()) {
        parse_fail(source, line, "expected an integer for " + what + ", got \"" + field + "\"");
    }
    return value;
}

// Reads the next line, stripping one trailing carriage return if present.
inline bool next_line(std::istream& in, std::string& line) {
    if (!std::getline(in, line)) return false;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    return true;
}

inline std::ofstream open_output(const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open for writing: " + path);
    return out;
}

inline std::ifstream open_input(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open for reading: " + path);
    return in;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Choice dataset CSV: header obs,option,chosen,f1..f{n}; one row per
// (observation, option); observations numbered consecutively from 1; options
// numbered 0..m-1 within each block; exactly one chosen=1 per block.

inline void write_choice_dataset(std::ostream& out, const ChoiceDataset& data) {
    out << "obs,option,chosen";
    for (int j = 1; j <= data.feature_count(); ++j) out << ",f" << j;
    out << "\n";
    for (std::size_t k = 0; k < data.size(); ++k) {
        const auto& obs = data[k];
        for (int i = 0; i < obs.features.rows(); ++i) {
            out << (k + 1) << ',' << i << ',' << (i == obs.chosen ? 1 : 0);
            for (int j = 0; j < obs.features.cols(); ++j) {
                out << ',' << detail::format_double(obs.features(i, j));
            }
            out << "\n";
        }
    }
}

inline void save_choice_dataset(const std::string& path, const ChoiceDataset& data) {
    auto out = detail::open_output(path);
    write_choice_dataset(out, data);
    if (!out) throw IoError("write failed: " + path);
}

inline ChoiceDataset read_choice_dataset(std::istream& in,
                                         const std::string& source = "dataset") {
    std::string line;
    long line_no = 1;
    if (!detail::next_line(in, line)) detail::parse_fail(source, 1, "empty input");
    const auto header = detail::split_fields(line);
    if (header.size() < 4 || header[0] != "obs" || header[1] != "option" ||
        header[2] != "chosen") {
        detail::parse_fail(source, 1, "header must start with obs,option,chosen,f1,...");
    }
    const int n_obj = static_cast<int>(header.size()) - 3;
    for (int j = 0; j < n_obj; ++j) {
        if (header[3 + j] != "f" + std::to_string(j + 1)) {
            detail::parse_fail(source, 1, "feature columns must be named f1..f" +
                                              std::to_string(n_obj));
        }
    }

    std::vector<ChoiceObservation> observations;
    std::vector<Eigen::VectorXd> rows;   // feature rows of the current block
    int block_chosen = -1;
    long current_obs = 0;

    auto flush_block = [&](long end_line) {
        if (rows.empty()) return;
        if (block_chosen < 0) {
            detail::parse_fail(source, end_line,
                               "observation " + std::to_string(current_obs) +
                                   " has no chosen option");
        }
        ChoiceObservation obs;
        obs.features.resize(static_cast<int>(rows.size()), n_obj);
        for (std::size_t i = 0; i < rows.size(); ++i) obs.features.row(i) = rows[i];
        obs.chosen = block_chosen;
        observations.push_back(std::move(obs));
        rows.clear();
        block_chosen = -1;
    };

    while (detail::next_line(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto fields = detail::split_fields(line);
        if (static_cast<int>(fields.size()) != 3 + n_obj) {
            detail::parse_fail(source, line_no,
                               "expected " + std::to_string(3 + n_obj) + " fields, got " +
                                   std::to_string(fields.size()));
        }
        const long obs_id = detail::parse_int_field(fields[0], source, line_no, "obs");
        const long option = detail::parse_int_field(fields[1], source, line_no, "option");
        const long chosen = detail::parse_int_field(fields[2], source, line_no, "chosen");
        if (chosen != 0 && chosen != 1) {
            detail::parse_fail(source, line_no, "chosen must be 0 or 1");
        }
        if (obs_id == current_obs + 1 && option == 0) {
            flush_block(line_no);
            ++current_obs;
        } else if (obs_id != current_obs) {
            detail::parse_fail(source, line_no,
                               "observations must be numbered consecutively from 1 "
                               "(saw obs " +
                                   std::to_string(obs_id) + " after " +
                                   std::to_string(current_obs) + ")");
        }
        if (option != static_cast<long>(rows.size())) {
            detail::parse_fail(source, line_no,
                               "options must be numbered consecutively from 0 within "
                               "each observation (saw option " +
                                   std::to_string(option) + ", expected " +
                                   std::to_string(rows.size()) + ")");
        }
        if (chosen == 1) {
            if (block_chosen >= 0) {
                detail::parse_fail(source, line_no,
                                   "observation " + std::to_string(obs_id) +
                                       " has more than one chosen option");
            }
            block_chosen = static_cast<int>(option);
        }
        Eigen::VectorXd feats(n_obj);
        for (int j = 0; j < n_obj; ++j) {
            feats(j) = detail::parse_double_field(fields[3 + j], source, line_no,
                                                  "f" + std::to_string(j + 1));
        }
        rows.push_back(std::move(feats));
    }
    flush_block(line_no);
    if (observations.empty()) detail::parse_fail(source, line_no, "no observations");
    try {
        return ChoiceDataset(std::move(observations));
    } catch (const std::invalid_argument& err) {
        throw IoError(source + ": " + err.what());
    }
}

inline ChoiceDataset load_choice_dataset(const std::string& path) {
    auto in = detail::open_input(path);
    return read_choice_dataset(in, path);
}

// ---------------------------------------------------------------------------
// Episode CSV (t,arm,reward) plus a JSON sidecar carrying seed, horizon, the
// generating parameters, and optionally the environment (needed for regret).

inline void write_episode_csv(std::ostream& out, const EpisodeLog& log) {
    out << "t,arm,reward\n";
    for (std::size_t s = 0; s < log.choices.size(); ++s) {
        out << (s + 1) << ',' << log.choices[s] << ','
            << detail::format_double(log.rewards[s]) << "\n";
    }
}

inline json params_to_json(const UclParams& params) {
    return json{{"mu0", params.mu0},
                {"sigma0_sq", params.sigma0_sq},
                {"lambda", params.lambda},
                {"nu", params.nu},
                {"sigma_s_sq", params.sigma_s_sq}};
}

inline UclParams params_from_json(const nlohmann::json& j) {
    UclParams params;
    params.mu0 = j.at("mu0").get<double>();
    params.sigma0_sq = j.at("sigma0_sq").get<double>();
    params.lambda = j.at("lambda").get<double>();
    params.nu = j.at("nu").get<double>();
    params.sigma_s_sq = j.at("sigma_s_sq").get<double>();
    return params;
}

inline json env_to_json(const BanditEnv& env) {
    json locations = json::array();
    for (const auto& loc : env.arm_locations) {
        locations.push_back(json::array({loc.x(), loc.y()}));
    }
    json means = json::array();
    for (int i = 0; i < env.mean_rewards.size(); ++i) means.push_back(env.mean_rewards(i));
    return json{{"mean_rewards", means},
                {"reward_sd", env.reward_sd},
                {"arm_locations", locations},
                {"horizon", env.horizon}};
}

inline BanditEnv env_from_json(const nlohmann::json& j) {
    BanditEnv env;
    const auto& means = j.at("mean_rewards");
    env.mean_rewards.resize(static_cast<int>(means.size()));
    for (int i = 0; i < env.mean_rewards.size(); ++i) {
        env.mean_rewards(i) = means.at(i).get<double>();
    }
    env.reward_sd = j.at("reward_sd").get<double>();
    for (const auto& loc : j.at("arm_locations")) {
        env.arm_locations.emplace_back(loc.at(0).get<double>(), loc.at(1).get<double>());
    }
    env.horizon = j.at("horizon").get<int>();
    env.validate();
    return env;
}

struct EpisodeFile {
    EpisodeLog log;
    std::optional<BanditEnv> env;
};

inline json episode_sidecar(const EpisodeLog& log, const BanditEnv* env = nullptr) {
    json j{{"schema_version", kSchemaVersion},
           {"seed", log.seed},
           {"horizon", log.choices.size()},
           {"params", params_to_json(log.params)}};
    if (env != nullptr) j["env"] = env_to_json(*env);
    return j;
}

inline void save_episode(const std::string& csv_path, const std::string& json_path,
                         const EpisodeLog& log, const BanditEnv* env = nullptr) {
    auto csv = detail::open_output(csv_path);
    write_episode_csv(csv, log);
    if (!csv) throw IoError("write failed: " + csv_path);
    auto side = detail::open_output(json_path);
    side << episode_sidecar(log, env).dump(2) << "\n";
    if (!side) throw IoError("write failed: " + json_path);
}

inline EpisodeFile read_episode(std::istream& csv, const nlohmann::json& sidecar,
                                const std::string& source = "episode") {
    std::string line;
    long line_no = 1;
    if (!detail::next_line(csv, line)) detail::parse_fail(source, 1, "empty input");
    if (line != "t,arm,reward") detail::parse_fail(source, 1, "header must be t,arm,reward");
    EpisodeFile file;
    while (detail::next_line(csv, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto fields = detail::split_fields(line);
        if (fields.size() != 3) {
            detail::parse_fail(source, line_no, "expected 3 fields, got " +
                                                    std::to_string(fields.size()));
        }
        const long t = detail::parse_int_field(fields[0], source, line_no, "t");
        if (t != static_cast<long>(file.log.choices.size()) + 1) {
            detail::parse_fail(source, line_no,
                               "decision times must be numbered consecutively from 1");
        }
        const long arm = detail::parse_int_field(fields[1], source, line_no, "arm");
        if (arm < 0) detail::parse_fail(source, line_no, "arm index must be >= 0");
        file.log.choices.push_back(static_cast<int>(arm));
        file.log.rewards.push_back(
            detail::parse_double_field(fields[2], source, line_no, "reward"));
    }
    if (file.log.choices.empty()) detail::parse_fail(source, line_no, "no decisions");
    try {
        if (sidecar.at("schema_version").get<int>() != kSchemaVersion) {
            throw IoError(source + ": unsupported schema_version");
        }
        file.log.seed = sidecar.at("seed").get<std::uint64_t>();
        file.log.params = params_from_json(sidecar.at("params"));
        if (sidecar.contains("env")) file.env = env_from_json(sidecar.at("env"));
        if (sidecar.at("horizon").get<std::size_t>() != file.log.choices.size()) {
            throw IoError(source + ": sidecar horizon does not match CSV length");
        }
    } catch (const nlohmann::json::exception& err) {
        throw IoError(source + ": sidecar: " + err.what());
    }
    return file;
}

inline EpisodeFile load_episode(const std::string& csv_path, const std::string& json_path) {
    auto csv = detail::open_input(csv_path);
    auto side = detail::open_input(json_path);
    nlohmann::json sidecar;
    try {
        side >> sidecar;
    } catch (const nlohmann::json::exception& err) {
        throw IoError(json_path + ": " + err.what());
    }
    return read_episode(csv, sidecar, csv_path);
}

// ---------------------------------------------------------------------------
// Fit results as JSON (covariance stored row-major, null when unavailable).

inline json fit_to_json(const FitResult& fit) {
    json theta = json::array();
    for (int i = 0; i < fit.theta_hat.size(); ++i) theta.push_back(fit.theta_hat(i));
    json covariance;  // null when absent
    if (fit.covariance) {
        covariance = json::array();
        for (int i = 0; i < fit.covariance->rows(); ++i) {
            for (int j = 0; j < fit.covariance->cols(); ++j) {
                covariance.push_back((*fit.covariance)(i, j));
            }
        }
    }
    return json{{"schema_version", kSchemaVersion},
                {"theta_hat", theta},
                {"covariance", covariance},
                {"log_likelihood", fit.log_likelihood},
                {"converged", fit.converged},
                {"iterations", fit.iterations},
                {"gradient_norm", fit.gradient_norm}};
}

inline FitResult fit_from_json(const nlohmann::json& j) {
    FitResult fit;
    try {
        const auto& theta = j.at("theta_hat");
        const int d = static_cast<int>(theta.size());
        fit.theta_hat.resize(d);
        for (int i = 0; i < d; ++i) fit.theta_hat(i) = theta.at(i).get<double>();
        const auto& covariance = j.at("covariance");
        if (!covariance.is_null()) {
            if (static_cast<int>(covariance.size()) != d * d) {
                throw IoError("fit: covariance size does not match theta dimension");
            }
            Eigen::MatrixXd cov(d, d);
            for (int i = 0; i < d; ++i) {
                for (int k = 0; k < d; ++k) cov(i, k) = covariance.at(i * d + k).get<double>();
            }
            fit.covariance = std::move(cov);
        }
        fit.log_likelihood = j.at("log_likelihood").get<double>();
        fit.converged = j.at("converged").get<bool>();
        fit.iterations = j.at("iterations").get<int>();
        fit.gradient_norm = j.at("gradient_norm").get<double>();
    } catch (const nlohmann::json::exception& err) {
        throw IoError(std::string("fit: ") + err.what());
    }
    return fit;
}

// ---------------------------------------------------------------------------
// Linearized feature datasets: the choice-dataset CSV plus a provenance
// sidecar (linearization point, trust bounds, source seed, decision times).
// An infinite upper bound is stored as JSON null.

inline json feature_provenance(const UclFeatureDataset& data) {
    json upper;  // null encodes +infinity
    if (std::isfinite(data.bounds.upper)) upper = data.bounds.upper;
    return json{{"schema_version", kSchemaVersion},
                {"linearization_point",
                 {{"mu0_bar", data.point.mu0_bar},
                  {"delta0_sq_bar", data.point.delta0_sq_bar},
                  {"lambda", data.point.lambda},
                  {"sigma_s_sq", data.point.sigma_s_sq}}},
                {"bounds", {{"lower", data.bounds.lower}, {"upper", upper}}},
                {"episode_seed", data.episode_seed},
                {"decision_times", data.decision_times}};
}

inline void save_feature_dataset(const std::string& csv_path, const std::string& json_path,
                                 const UclFeatureDataset& data) {
    auto csv = detail::open_output(csv_path);
    write_choice_dataset(csv, data.dataset);
    if (!csv) throw IoError("write failed: " + csv_path);
    auto side = detail::open_output(json_path);
    side << feature_provenance(data).dump(2) << "\n";
    if (!side) throw IoError("write failed: " + json_path);
}

inline UclFeatureDataset load_feature_dataset(const std::string& csv_path,
                                              const std::string& json_path) {
    auto csv = detail::open_input(csv_path);
    auto side = detail::open_input(json_path);
    nlohmann::json sidecar;
    try {
        side >> sidecar;
    } catch (const nlohmann::json::exception& err) {
        throw IoError(json_path + ": " + err.what());
    }
    ChoiceDataset dataset = read_choice_dataset(csv, csv_path);
    try {
        if (sidecar.at("schema_version").get<int>() != kSchemaVersion) {
            throw IoError(json_path + ": unsupported schema_version");
        }
        const auto& pt = sidecar.at("linearization_point");
        LinearizationPoint point;
        point.mu0_bar = pt.at("mu0_bar").get<double>();
        point.delta0_sq_bar = pt.at("delta0_sq_bar").get<double>();
        point.lambda = pt.at("lambda").get<double>();
        point.sigma_s_sq = pt.at("sigma_s_sq").get<double>();
        point.validate();
        DeltaBounds bounds;
        bounds.lower = sidecar.at("bounds").at("lower").get<double>();
        const auto& upper = sidecar.at("bounds").at("upper");
        bounds.upper =
            upper.is_null() ? std::numeric_limits<double>::infinity() : upper.get<double>();
        UclFeatureDataset data{std::move(dataset),
                               sidecar.at("decision_times").get<std::vector<int>>(), bounds,
                               point, sidecar.at("episode_seed").get<std::uint64_t>()};
        if (data.decision_times.size() != data.dataset.size()) {
            throw IoError(json_path + ": decision_times length does not match dataset");
        }
        return data;
    } catch (const nlohmann::json::exception& err) {
        throw IoError(json_path + ": " + err.what());
    }
}

}  // namespace softmaxfit
