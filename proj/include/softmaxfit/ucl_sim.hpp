#pragma once

// Gaussian multi-armed bandits on spatial grids and the stochastic
// upper-credible-limit agent: conjugate Bayesian belief updating over
// correlated arms, the credible-limit heuristic, and softmax arm selection
// under a logarithmic cooling schedule.
//
// Timing convention used throughout: BeliefState.t counts observations
// already incorporated, so the decision at time t (1-based) is made from a
// state with t-1 observations, and the heuristic for that decision uses
// decision time t = state.t + 1.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "softmaxfit/rng.hpp"
#include "softmaxfit/stats.hpp"

namespace softmaxfit {

struct BanditEnv {
    Eigen::VectorXd mean_rewards;
    double reward_sd = 0.0;  // true sampling noise; 0 gives a noise-free bandit
    std::vector<Eigen::Vector2d> arm_locations;
    int horizon = 0;

    int arm_count() const { return static_cast<int>(mean_rewards.size()); }

    void validate() const {
        if (mean_rewards.size() < 1) throw std::invalid_argument("BanditEnv: no arms");
        if (!mean_rewards.allFinite()) throw std::invalid_argument("BanditEnv: non-finite means");
        if (!(reward_sd >= 0.0)) throw std::invalid_argument("BanditEnv: reward_sd must be >= 0");
        if (arm_locations.size() != static_cast<std::size_t>(mean_rewards.size())) {
            throw std::invalid_argument("BanditEnv: location count does not match arm count");
        }
        if (horizon < 1) throw std::invalid_argument("BanditEnv: horizon must be positive");
    }
};

// Agent-side model parameters.  sigma0_sq = 0 pins beliefs at the prior mean
// forever (infinite prior precision); an infinite sigma0_sq has no finite
// prior precision matrix and is outside the domain.
struct UclParams {
    double mu0 = 0.0;
    double sigma0_sq = 1.0;
    double lambda = 0.0;
    double nu = 1.0;
    double sigma_s_sq = 1.0;

    void validate() const {
        if (!std::isfinite(mu0)) throw std::invalid_argument("UclParams: mu0 must be finite");
        if (!(sigma0_sq >= 0.0) || !std::isfinite(sigma0_sq)) {
            throw std::invalid_argument("UclParams: sigma0_sq must be finite and >= 0");
        }
        if (!(lambda >= 0.0)) throw std::invalid_argument("UclParams: lambda must be >= 0");
        if (!(nu > 0.0)) throw std::invalid_argument("UclParams: nu must be positive");
        if (!(sigma_s_sq > 0.0)) {
            throw std::invalid_argument("UclParams: sigma_s_sq must be positive");
        }
    }
};

// Correlation matrix exponential in distance, Sigma_ij = exp(-|z_i - z_j|/lambda).
// lambda = 0 is taken in the limit sense: identity (arms uncorrelated).
inline Eigen::MatrixXd build_spatial_prior(const std::vector<Eigen::Vector2d>& locations,
                                           double lambda) {
    if (!(lambda >= 0.0)) throw std::invalid_argument("build_spatial_prior: lambda must be >= 0");
    const int n = static_cast<int>(locations.size());
    if (n < 1) throw std::invalid_argument("build_spatial_prior: no locations");
    Eigen::MatrixXd corr = Eigen::MatrixXd::Identity(n, n);
    if (lambda == 0.0) return corr;
    for (int i = 0; i < n; ++i) {
        for (int j = i + 1; j < n; ++j) {
            const double dist = (locations[i] - locations[j]).norm();
            if (dist == 0.0) {
                throw std::invalid_argument(
                    "build_spatial_prior: duplicate locations at indices " + std::to_string(i) +
                    " and " + std::to_string(j) + " make the prior singular");
            }
            corr(i, j) = corr(j, i) = std::exp(-dist / lambda);
        }
    }
    return corr;
}

struct BeliefState {
    Eigen::VectorXd mu;          // posterior mean per arm
    Eigen::MatrixXd precision;   // Lambda_t; zero matrix in the degenerate mode
    Eigen::MatrixXd covariance;  // Sigma_t;  zero matrix in the degenerate mode
    Eigen::VectorXi counts;      // observations per arm, summing to t
    Eigen::VectorXd reward_sums; // per-arm totals behind empirical_means
    int t = 0;
    bool degenerate = false;     // sigma0_sq == 0: mu never moves

    int arm_count() const { return static_cast<int>(mu.size()); }

    Eigen::VectorXd empirical_means() const {
        Eigen::VectorXd means = Eigen::VectorXd::Zero(mu.size());
        for (int i = 0; i < mu.size(); ++i) {
            if (counts(i) > 0) means(i) = reward_sums(i) / counts(i);
        }
        return means;
    }

    static BeliefState from_prior(const std::vector<Eigen::Vector2d>& locations,
                                  const UclParams& params) {
        params.validate();
        const int n = static_cast<int>(locations.size());
        if (n < 1) throw std::invalid_argument("BeliefState: no arms");
        BeliefState state;
        state.mu = Eigen::VectorXd::Constant(n, params.mu0);
        state.counts = Eigen::VectorXi::Zero(n);
        state.reward_sums = Eigen::VectorXd::Zero(n);
        state.t = 0;
        if (params.sigma0_sq == 0.0) {
            state.degenerate = true;
            state.precision = Eigen::MatrixXd::Zero(n, n);
            state.covariance = Eigen::MatrixXd::Zero(n, n);
            return state;
        }
        const Eigen::MatrixXd corr = build_spatial_prior(locations, params.lambda);
        state.covariance = params.sigma0_sq * corr;
        Eigen::LLT<Eigen::MatrixXd> llt(state.covariance);
        if (llt.info() != Eigen::Success) {
            throw std::invalid_argument("BeliefState: prior covariance is not positive definite");
        }
        state.precision = llt.solve(Eigen::MatrixXd::Identity(n, n));
        state.precision = 0.5 * (state.precision + state.precision.transpose());
        return state;
    }
};

// One-observation conjugate update: rank-1 precision increment on the pulled
// arm and the matching covariance/mean updates, equal to re-running the batch
// posterior over the whole history.
inline BeliefState belief_update(const BeliefState& state, int arm, double reward,
                                 const UclParams& params) {
    params.validate();
    if (arm < 0 || arm >= state.arm_count()) {
        throw std::invalid_argument("belief_update: arm index out of range");
    }
    if (!std::isfinite(reward)) throw std::invalid_argument("belief_update: non-finite reward");
    BeliefState next = state;
    next.counts(arm) += 1;
    next.reward_sums(arm) += reward;
    next.t += 1;
    if (state.degenerate) return next;  // infinite prior precision: mu stays at mu0

    next.precision(arm, arm) += 1.0 / params.sigma_s_sq;
    const double gain_denom = params.sigma_s_sq + state.covariance(arm, arm);
    const Eigen::VectorXd cov_col = state.covariance.col(arm);
    next.covariance = state.covariance - (cov_col * cov_col.transpose()) / gain_denom;
    next.covariance = 0.5 * (next.covariance + next.covariance.transpose());
    next.mu = state.mu + cov_col * ((reward - state.mu(arm)) / gain_denom);
    return next;
}

// Upper credible limit per arm for the decision at time state.t + 1:
// Q_i = mu_i + sqrt(Sigma_ii) * PhiInv(1 - alpha_t), alpha_t = 1/(sqrt(2*pi*e)*t).
inline Eigen::VectorXd ucl_heuristic(const BeliefState& state) {
    const int decision_time = state.t + 1;
    const double alpha = 1.0 / (std::sqrt(2.0 * M_PI * std::exp(1.0)) * decision_time);
    if (!(alpha < 1.0)) {
        throw std::invalid_argument("ucl_heuristic: credible level must be positive");
    }
    const double z = normal_quantile(1.0 - alpha);
    Eigen::VectorXd variances = state.covariance.diagonal();
    const double scale = variances.cwiseAbs().maxCoeff();
    for (int i = 0; i < variances.size(); ++i) {
        if (variances(i) < -1e-9 * std::max(scale, 1.0)) {
            throw std::runtime_error("ucl_heuristic: covariance has a negative diagonal entry");
        }
        if (variances(i) < 0.0) variances(i) = 0.0;
    }
    return state.mu + z * variances.cwiseSqrt();
}

// Softmax selection at inverse temperature log(t)/nu.  log(1) = 0 makes the
// t = 1 temperature infinite; that limit is implemented as an exactly uniform
// draw rather than a degenerate softmax.
inline int select_arm(const Eigen::VectorXd& q, int t, double nu, Rng& rng) {
    if (q.size() < 1) throw std::invalid_argument("select_arm: empty value vector");
    if (!q.allFinite()) throw std::invalid_argument("select_arm: non-finite values");
    if (t < 1) throw std::invalid_argument("select_arm: t must be >= 1");
    if (!(nu > 0.0)) throw std::invalid_argument("select_arm: nu must be positive");
    const int n = static_cast<int>(q.size());
    if (t == 1) {
        Eigen::VectorXd uniform = Eigen::VectorXd::Constant(n, 1.0 / n);
        return rng.categorical(uniform);
    }
    const Eigen::VectorXd scaled = q * (std::log(static_cast<double>(t)) / nu);
    Eigen::VectorXd p = (scaled.array() - scaled.maxCoeff()).exp();
    p /= p.sum();
    return rng.categorical(p);
}

struct EpisodeLog {
    std::vector<int> choices;      // arm index per decision, 0-based
    std::vector<double> rewards;
    std::uint64_t seed = 0;
    UclParams params;
};

// Runs one agent-environment episode.  Selection and reward noise come from
// separate streams derived from the seed, so the choice sequence is unchanged
// under a different reward-noise realization policy.
inline EpisodeLog run_episode(const BanditEnv& env, const UclParams& params, std::uint64_t seed) {
    env.validate();
    params.validate();
    BeliefState belief = BeliefState::from_prior(env.arm_locations, params);
    Rng selection_rng = Rng::stream(seed, 1);
    Rng reward_rng = Rng::stream(seed, 2);
    EpisodeLog log;
    log.seed = seed;
    log.params = params;
    log.choices.reserve(env.horizon);
    log.rewards.reserve(env.horizon);
    for (int t = 1; t <= env.horizon; ++t) {
        const Eigen::VectorXd q = ucl_heuristic(belief);
        const int arm = select_arm(q, t, params.nu, selection_rng);
        const double reward = reward_rng.normal(env.mean_rewards(arm), env.reward_sd);
        log.choices.push_back(arm);
        log.rewards.push_back(reward);
        belief = belief_update(belief, arm, reward, params);
    }
    return log;
}

// R_t = sum over s <= t of (max_i m_i - m_{i_s}), evaluated on true means.
inline Eigen::VectorXd cumulative_regret(const EpisodeLog& log, const BanditEnv& env) {
    env.validate();
    const std::size_t T = log.choices.size();
    if (log.rewards.size() != T) {
        throw std::invalid_argument("cumulative_regret: choices/rewards length mismatch");
    }
    const double best = env.mean_rewards.maxCoeff();
    Eigen::VectorXd regret(T);
    double running = 0.0;
    for (std::size_t s = 0; s < T; ++s) {
        const int arm = log.choices[s];
        if (arm < 0 || arm >= env.arm_count()) {
            throw std::invalid_argument("cumulative_regret: arm index out of range at step " +
                                        std::to_string(s + 1));
        }
        running += best - env.mean_rewards(arm);
        regret(static_cast<int>(s)) = running;
    }
    return regret;
}

// Exact softmax objectives (Q_i * log t / nu) implied by a logged history;
// entry t-1 of the result belongs to the decision at time t.  Used to score
// how a parameter setting explains observed play without re-running noise.
inline std::vector<Eigen::VectorXd> replay_scaled_objectives(
    const std::vector<int>& choices, const std::vector<double>& rewards,
    const std::vector<Eigen::Vector2d>& locations, const UclParams& params) {
    params.validate();
    if (choices.size() != rewards.size()) {
        throw std::invalid_argument("replay_scaled_objectives: choices/rewards length mismatch");
    }
    BeliefState belief = BeliefState::from_prior(locations, params);
    std::vector<Eigen::VectorXd> objectives;
    objectives.reserve(choices.size());
    for (std::size_t s = 0; s < choices.size(); ++s) {
        const int t = static_cast<int>(s) + 1;
        const Eigen::VectorXd q = ucl_heuristic(belief);
        objectives.push_back(q * (std::log(static_cast<double>(t)) / params.nu));
        belief = belief_update(belief, choices[s], rewards[s], params);
    }
    return objectives;
}

// ---- Grid environments -----------------------------------------------------

// Row-major unit-spacing grid: location of arm (r, c) is (x, y) = (c, r).
inline std::vector<Eigen::Vector2d> grid_locations(int rows, int cols) {
    if (rows < 1 || cols < 1) throw std::invalid_argument("grid_locations: empty grid");
    std::vector<Eigen::Vector2d> locations;
    locations.reserve(static_cast<std::size_t>(rows) * cols);
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
            locations.emplace_back(static_cast<double>(c), static_cast<double>(r));
        }
    }
    return locations;
}

// Concave single-peak profile: high at the grid center, falling off
// quadratically to low at the far corners.
inline Eigen::VectorXd unimodal_grid_rewards(int rows, int cols, double low, double high) {
    if (rows < 1 || cols < 1) throw std::invalid_argument("unimodal_grid_rewards: empty grid");
    if (!(high > low)) throw std::invalid_argument("unimodal_grid_rewards: need high > low");
    const auto locations = grid_locations(rows, cols);
    const Eigen::Vector2d center(0.5 * (cols - 1), 0.5 * (rows - 1));
    double max_sq = 0.0;
    for (const auto& z : locations) max_sq = std::max(max_sq, (z - center).squaredNorm());
    if (max_sq == 0.0) return Eigen::VectorXd::Constant(1, high);
    Eigen::VectorXd rewards(static_cast<int>(locations.size()));
    for (std::size_t i = 0; i < locations.size(); ++i) {
        const double d_sq = (locations[i] - center).squaredNorm();
        rewards(static_cast<int>(i)) = low + (high - low) * (1.0 - d_sq / max_sq);
    }
    // On even dimensions the continuous peak falls between cells; rescale so
    // the realized grid extremes hit [low, high] exactly.
    const double min_v = rewards.minCoeff(), max_v = rewards.maxCoeff();
    rewards = (low + (high - low) * (rewards.array() - min_v) / (max_v - min_v)).matrix();
    return rewards;
}

// Two Gaussian bumps of unequal height: a local maximum near one corner and
// the global maximum near the opposite corner.
inline Eigen::VectorXd bimodal_grid_rewards(int rows, int cols, double low, double high) {
    if (rows < 1 || cols < 1) throw std::invalid_argument("bimodal_grid_rewards: empty grid");
    if (!(high > low)) throw std::invalid_argument("bimodal_grid_rewards: need high > low");
    const auto locations = grid_locations(rows, cols);
    const Eigen::Vector2d minor_peak(0.25 * (cols - 1), 0.25 * (rows - 1));
    const Eigen::Vector2d major_peak(0.75 * (cols - 1), 0.75 * (rows - 1));
    const double spread = std::max(1.0, 0.15 * std::max(rows - 1, cols - 1));
    const double two_s_sq = 2.0 * spread * spread;
    Eigen::VectorXd profile(static_cast<int>(locations.size()));
    for (std::size_t i = 0; i < locations.size(); ++i) {
        const double minor = 0.6 * std::exp(-(locations[i] - minor_peak).squaredNorm() / two_s_sq);
        const double major = 1.0 * std::exp(-(locations[i] - major_peak).squaredNorm() / two_s_sq);
        profile(static_cast<int>(i)) = minor + major;
    }
    profile /= profile.maxCoeff();
    return low + (high - low) * profile.array();
}

}  // namespace softmaxfit
