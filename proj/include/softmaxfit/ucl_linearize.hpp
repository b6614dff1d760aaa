// Affine expansion of the credible-limit objective around a nominal prior,
// turning bandit episodes into softmax choice datasets whose coefficients
// recover the agent parameters.
#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "softmaxfit/choice_model.hpp"
#include "softmaxfit/estimator.hpp"
#include "softmaxfit/stats.hpp"
#include "softmaxfit/ucl_sim.hpp"

namespace softmaxfit {

// Nominal prior the expansion is taken around, together with the fixed
// spatial decay and the known observation variance. delta0_sq_bar is the
// observation-to-prior variance ratio sigma_s^2 / sigma0^2, the natural
// parameter for the posterior algebra.
struct LinearizationPoint {
    double mu0_bar = 0.0;
    double delta0_sq_bar = 1.0;
    double lambda = 0.0;
    double sigma_s_sq = 1.0;

    void validate() const {
        if (!(delta0_sq_bar > 0.0)) {
            throw std::invalid_argument("LinearizationPoint: need delta0_sq_bar > 0");
        }
        if (!(lambda >= 0.0)) {
            throw std::invalid_argument("LinearizationPoint: need lambda >= 0");
        }
        if (!(sigma_s_sq > 0.0)) {
            throw std::invalid_argument("LinearizationPoint: need sigma_s_sq > 0");
        }
    }

    static LinearizationPoint from_sigma0(double mu0_bar, double sigma0_sq_bar,
                                          double lambda, double sigma_s_sq) {
        if (!(sigma0_sq_bar > 0.0)) {
            throw std::invalid_argument("LinearizationPoint: need sigma0_sq_bar > 0");
        }
        LinearizationPoint point{mu0_bar, sigma_s_sq / sigma0_sq_bar, lambda, sigma_s_sq};
        point.validate();
        return point;
    }
};

inline bool same_point(const LinearizationPoint& a, const LinearizationPoint& b) {
    return a.mu0_bar == b.mu0_bar && a.delta0_sq_bar == b.delta0_sq_bar &&
           a.lambda == b.lambda && a.sigma_s_sq == b.sigma_s_sq;
}

// Coefficients of the expansion at one decision time, all length n_arms:
//   c  posterior variance at the nominal point
//   d  sensitivity of that variance to the variance-ratio offset (negated)
//   e  posterior mean at the nominal point
//   f  sensitivity of the mean to the prior-mean offset
//   g  sensitivity of the mean to the variance-ratio offset
struct StepCoefficients {
    Eigen::VectorXd c, d, e, f, g;
};

// One entry per decision time 1..T, computed from the history strictly
// before that decision.
struct LinearizedCoefficients {
    std::vector<StepCoefficients> steps;
    LinearizationPoint point;
};

inline LinearizedCoefficients linearize_coefficients(
    const std::vector<int>& choices, const std::vector<double>& rewards,
    const std::vector<Eigen::Vector2d>& locations, const LinearizationPoint& point) {
    point.validate();
    if (choices.size() != rewards.size()) {
        throw std::invalid_argument("linearize_coefficients: choices/rewards length mismatch");
    }
    if (choices.empty()) throw std::invalid_argument("linearize_coefficients: empty episode");
    if (locations.empty()) throw std::invalid_argument("linearize_coefficients: no arms");
    const int n = static_cast<int>(locations.size());
    for (std::size_t s = 0; s < choices.size(); ++s) {
        if (choices[s] < 0 || choices[s] >= n) {
            throw std::invalid_argument("linearize_coefficients: arm index out of range");
        }
        if (!std::isfinite(rewards[s])) {
            throw std::invalid_argument("linearize_coefficients: non-finite reward");
        }
    }

    const Eigen::MatrixXd identity = Eigen::MatrixXd::Identity(n, n);
    Eigen::MatrixXd prior_precision;
    if (point.lambda == 0.0) {
        prior_precision = identity;
    } else {
        const Eigen::MatrixXd corr = build_spatial_prior(locations, point.lambda);
        prior_precision = corr.llt().solve(identity);
        prior_precision = 0.5 * (prior_precision + prior_precision.transpose());
    }

    LinearizedCoefficients out;
    out.point = point;
    out.steps.reserve(choices.size());
    Eigen::VectorXd counts = Eigen::VectorXd::Zero(n);
    Eigen::VectorXd sums = Eigen::VectorXd::Zero(n);
    for (std::size_t s = 0; s < choices.size(); ++s) {
        Eigen::MatrixXd a = point.delta0_sq_bar * prior_precision;
        a.diagonal() += counts;
        const Eigen::MatrixXd m = a.llt().solve(identity);
        const Eigen::MatrixXd w = prior_precision * m;
        const Eigen::VectorXd residual = sums - point.mu0_bar * counts;
        StepCoefficients step;
        step.c = point.sigma_s_sq * m.diagonal();
        step.d = point.sigma_s_sq * (m.array() * w.array()).colwise().sum().transpose();
        step.e = Eigen::VectorXd::Constant(n, point.mu0_bar) + m * residual;
        step.f = Eigen::VectorXd::Ones(n) - m * counts;
        step.g = -m * (w * residual);
        out.steps.push_back(std::move(step));
        counts(choices[s]) += 1.0;
        sums(choices[s]) += rewards[s];
    }
    return out;
}

// Trust region for the variance-ratio offset. The lower end keeps the
// implied prior variance finite and positive; the upper end keeps every
// linearized credible width nonnegative.
struct DeltaBounds {
    double lower = 0.0;
    double upper = 0.0;
};

inline DeltaBounds delta_bounds(const LinearizedCoefficients& coeffs) {
    DeltaBounds bounds;
    bounds.lower = -coeffs.point.delta0_sq_bar;
    bounds.upper = std::numeric_limits<double>::infinity();
    for (const auto& step : coeffs.steps) {
        for (int i = 0; i < step.c.size(); ++i) {
            if (step.d(i) > 0.0) {
                bounds.upper = std::min(bounds.upper, 2.0 * step.c(i) / step.d(i));
            }
        }
    }
    return bounds;
}

// A bandit episode recast as softmax choice data. Each decision from t = 2
// on contributes one observation with three features per arm; t = 1 carries
// no parameter information (log 1 = 0) and is dropped.
struct UclFeatureDataset {
    ChoiceDataset dataset;
    std::vector<int> decision_times;
    DeltaBounds bounds;
    LinearizationPoint point;
    std::uint64_t episode_seed = 0;
};

inline UclFeatureDataset linearize_episode(const std::vector<int>& choices,
                                           const std::vector<double>& rewards,
                                           const std::vector<Eigen::Vector2d>& locations,
                                           const LinearizationPoint& point,
                                           std::uint64_t episode_seed = 0) {
    if (choices.size() < 2) {
        throw std::invalid_argument("linearize_episode: need at least two decisions");
    }
    const auto coeffs = linearize_coefficients(choices, rewards, locations, point);
    const int n = static_cast<int>(locations.size());
    std::vector<ChoiceObservation> observations;
    std::vector<int> times;
    observations.reserve(choices.size() - 1);
    for (std::size_t s = 1; s < choices.size(); ++s) {
        const int t = static_cast<int>(s) + 1;
        const double log_t = std::log(static_cast<double>(t));
        const double alpha = 1.0 / (std::sqrt(2.0 * M_PI * std::exp(1.0)) * t);
        const double z = normal_quantile(1.0 - alpha);
        const auto& step = coeffs.steps[s];
        ChoiceObservation obs;
        obs.features.resize(n, 3);
        for (int i = 0; i < n; ++i) {
            if (!(step.c(i) > 0.0)) {
                throw std::runtime_error("linearize_episode: nonpositive credible variance");
            }
            const double sd = std::sqrt(step.c(i));
            obs.features(i, 0) = (step.e(i) + sd * z) * log_t;
            obs.features(i, 1) = step.f(i) * log_t;
            obs.features(i, 2) = (step.g(i) - step.d(i) * z / (2.0 * sd)) * log_t;
        }
        obs.chosen = choices[s];
        observations.push_back(std::move(obs));
        times.push_back(t);
    }
    return {ChoiceDataset(std::move(observations)), std::move(times), delta_bounds(coeffs),
            point, episode_seed};
}

// Convenience view of a simulated episode; the point's own lambda and
// sigma_s_sq describe the analyst's assumptions, not the generator's.
inline UclFeatureDataset linearize_episode(const EpisodeLog& log,
                                           const std::vector<Eigen::Vector2d>& locations,
                                           const LinearizationPoint& point) {
    return linearize_episode(log.choices, log.rewards, locations, point, log.seed);
}

// Concatenates episodes linearized around the same nominal point into one
// estimation dataset; bounds tighten to the intersection.
inline UclFeatureDataset merge_feature_datasets(const std::vector<UclFeatureDataset>& parts) {
    if (parts.empty()) throw std::invalid_argument("merge_feature_datasets: nothing to merge");
    const auto& first = parts.front();
    std::vector<ChoiceObservation> observations;
    std::vector<int> times;
    DeltaBounds bounds = first.bounds;
    for (const auto& part : parts) {
        if (!same_point(part.point, first.point)) {
            throw std::invalid_argument("merge_feature_datasets: mismatched nominal points");
        }
        for (std::size_t k = 0; k < part.dataset.size(); ++k) {
            observations.push_back(part.dataset[k]);
        }
        times.insert(times.end(), part.decision_times.begin(), part.decision_times.end());
        bounds.lower = std::max(bounds.lower, part.bounds.lower);
        bounds.upper = std::min(bounds.upper, part.bounds.upper);
    }
    return {ChoiceDataset(std::move(observations)), std::move(times), bounds, first.point,
            parts.size() == 1 ? first.episode_seed : 0};
}

// Raw softmax coefficients implied by true agent parameters at a nominal
// point: (1/nu, (mu0 - mu0_bar)/nu, (delta0^2 - delta0_sq_bar)/nu). Requires
// the agent and the analyst to agree on the observation variance, otherwise
// the ratio offset is not well defined.
inline Eigen::Vector3d theta_for_parameters(const UclParams& params,
                                            const LinearizationPoint& point) {
    params.validate();
    point.validate();
    if (!(params.sigma0_sq > 0.0)) {
        throw std::invalid_argument("theta_for_parameters: need sigma0_sq > 0");
    }
    if (params.sigma_s_sq != point.sigma_s_sq) {
        throw std::invalid_argument("theta_for_parameters: observation variances disagree");
    }
    const double delta0_sq = params.sigma_s_sq / params.sigma0_sq;
    return {1.0 / params.nu, (params.mu0 - point.mu0_bar) / params.nu,
            (delta0_sq - point.delta0_sq_bar) / params.nu};
}

// Fit plus the back-transform to agent parameters. The raw fit is always
// reported; the transform is flagged invalid when the coefficients imply a
// nonpositive decision temperature or leave the trust region.
struct UclEstimate {
    FitResult fit;
    double nu = 0.0;
    double mu0 = 0.0;
    double sigma0_sq = 0.0;
    double delta_mu = 0.0;
    double delta_delta = 0.0;
    std::optional<Eigen::MatrixXd> transformed_covariance;  // (nu, mu0, sigma0_sq) order
    bool transform_valid = false;
    std::string invalid_reason;
};

namespace detail {

inline UclEstimate transform_fit(FitResult fit, const LinearizationPoint& point,
                                 const DeltaBounds& bounds) {
    UclEstimate est;
    est.fit = std::move(fit);
    const double t1 = est.fit.theta_hat(0);
    const double t2 = est.fit.theta_hat(1);
    const double t3 = est.fit.theta_hat(2);
    if (!(t1 > 0.0)) {
        est.invalid_reason = "temperature coefficient is not positive";
        return est;
    }
    est.nu = 1.0 / t1;
    est.delta_mu = t2 / t1;
    est.delta_delta = t3 / t1;
    est.mu0 = point.mu0_bar + est.delta_mu;
    const double delta0_sq = point.delta0_sq_bar + est.delta_delta;
    if (!(delta0_sq > 0.0)) {
        est.invalid_reason = "implied prior variance is not finite and positive";
        return est;
    }
    est.sigma0_sq = point.sigma_s_sq / delta0_sq;
    if (est.delta_delta < bounds.lower || est.delta_delta > bounds.upper) {
        est.invalid_reason = "variance-ratio offset outside the trust bounds";
        return est;
    }
    est.transform_valid = true;
    if (est.fit.covariance) {
        Eigen::Matrix3d jac = Eigen::Matrix3d::Zero();
        jac(0, 0) = -1.0 / (t1 * t1);
        jac(1, 0) = -t2 / (t1 * t1);
        jac(1, 1) = 1.0 / t1;
        const double d_sq = delta0_sq * delta0_sq;
        jac(2, 0) = point.sigma_s_sq * t3 / (d_sq * t1 * t1);
        jac(2, 2) = -point.sigma_s_sq / (d_sq * t1);
        est.transformed_covariance = jac * (*est.fit.covariance) * jac.transpose();
    }
    return est;
}

}  // namespace detail

namespace detail {

// The three feature columns live on wildly different scales (posterior means
// versus ratio sensitivities), so the identification gate runs on a copy with
// each column normalized to unit root-mean-square; a genuinely collinear or
// zero column stays degenerate under this scaling.
inline ChoiceDataset column_equilibrated(const ChoiceDataset& data) {
    const int n_obj = data.feature_count();
    Eigen::VectorXd sum_sq = Eigen::VectorXd::Zero(n_obj);
    long rows = 0;
    for (std::size_t k = 0; k < data.size(); ++k) {
        sum_sq += data[k].features.colwise().squaredNorm();
        rows += data[k].features.rows();
    }
    Eigen::VectorXd scale(n_obj);
    for (int j = 0; j < n_obj; ++j) {
        const double rms = std::sqrt(sum_sq(j) / static_cast<double>(rows));
        scale(j) = rms > 0.0 ? 1.0 / rms : 1.0;
    }
    std::vector<ChoiceObservation> scaled;
    scaled.reserve(data.size());
    for (std::size_t k = 0; k < data.size(); ++k) {
        ChoiceObservation obs = data[k];
        obs.features = obs.features * scale.asDiagonal();
        scaled.push_back(std::move(obs));
    }
    return ChoiceDataset(std::move(scaled));
}

}  // namespace detail

inline UclEstimate fit_ucl(const UclFeatureDataset& data, const Eigen::VectorXd& init,
                           const SolverOptions& options = SolverOptions()) {
    const auto report = check_identification(detail::column_equilibrated(data.dataset));
    if (!report.identified) {
        throw IdentificationError(
            "fit_ucl: feature second moment is numerically singular (min eigenvalue " +
            std::to_string(report.min_eigenvalue) + " vs threshold " +
            std::to_string(report.threshold) + ")");
    }
    return detail::transform_fit(fit_ml(data.dataset, init, options), data.point,
                                 data.bounds);
}

inline UclEstimate fit_ucl(const UclFeatureDataset& data,
                           const SolverOptions& options = SolverOptions()) {
    return fit_ucl(data, (Eigen::Vector3d() << 1.0, 0.0, 0.0).finished(), options);
}

// Per-group pooled estimates plus pairwise coordinate-level comparisons of
// the raw fits across groups.
struct GroupEstimate {
    std::string label;
    std::vector<std::size_t> members;
    std::vector<FitResult> member_fits;
    PooledFit pooled;
    UclEstimate estimate;
};

struct GroupComparison {
    std::string group_a;
    std::string group_b;
    bool available = false;  // both groups need two usable members per coordinate
    std::vector<WelchResult> coordinate_tests;
};

struct PopulationEstimate {
    std::vector<GroupEstimate> groups;
    std::vector<GroupComparison> comparisons;
};

inline PopulationEstimate fit_population(const std::vector<UclFeatureDataset>& subjects,
                                         const std::vector<std::string>& group_labels,
                                         const Eigen::VectorXd& init,
                                         const SolverOptions& options = SolverOptions()) {
    if (subjects.empty()) throw std::invalid_argument("fit_population: no subjects");
    if (subjects.size() != group_labels.size()) {
        throw std::invalid_argument("fit_population: one group label per subject required");
    }
    const auto& point = subjects.front().point;
    for (const auto& subject : subjects) {
        if (!same_point(subject.point, point)) {
            throw std::invalid_argument("fit_population: subjects share one nominal point");
        }
    }

    PopulationEstimate out;
    std::vector<std::string> order;
    for (const auto& label : group_labels) {
        if (std::find(order.begin(), order.end(), label) == order.end()) {
            order.push_back(label);
        }
    }
    for (const auto& label : order) {
        GroupEstimate group;
        group.label = label;
        DeltaBounds bounds{-point.delta0_sq_bar, std::numeric_limits<double>::infinity()};
        for (std::size_t s = 0; s < subjects.size(); ++s) {
            if (group_labels[s] != label) continue;
            group.members.push_back(s);
            group.member_fits.push_back(fit_ucl(subjects[s], init, options).fit);
            bounds.lower = std::max(bounds.lower, subjects[s].bounds.lower);
            bounds.upper = std::min(bounds.upper, subjects[s].bounds.upper);
        }
        group.pooled = pool_fits(group.member_fits);
        group.estimate = detail::transform_fit(group.pooled.fit, point, bounds);
        out.groups.push_back(std::move(group));
    }

    for (std::size_t a = 0; a < out.groups.size(); ++a) {
        for (std::size_t b = a + 1; b < out.groups.size(); ++b) {
            GroupComparison cmp;
            cmp.group_a = out.groups[a].label;
            cmp.group_b = out.groups[b].label;
            const auto& fits_a = out.groups[a].member_fits;
            const auto& fits_b = out.groups[b].member_fits;
            if (fits_a.size() >= 2 && fits_b.size() >= 2) {
                cmp.available = true;
                for (int k = 0; k < 3; ++k) {
                    auto stats = [k](const std::vector<FitResult>& fits) {
                        GroupStats gs;
                        gs.count = static_cast<long>(fits.size());
                        double sum = 0.0;
                        for (const auto& f : fits) sum += f.theta_hat(k);
                        gs.mean = sum / gs.count;
                        double ss = 0.0;
                        for (const auto& f : fits) {
                            const double dev = f.theta_hat(k) - gs.mean;
                            ss += dev * dev;
                        }
                        gs.variance = ss / (gs.count - 1);
                        return gs;
                    };
                    const GroupStats ga = stats(fits_a), gb = stats(fits_b);
                    if (!(ga.variance > 0.0) || !(gb.variance > 0.0)) {
                        cmp.available = false;
                        break;
                    }
                    cmp.coordinate_tests.push_back(welch_t_test(ga, gb));
                }
                if (!cmp.available) cmp.coordinate_tests.clear();
            }
            out.comparisons.push_back(std::move(cmp));
        }
    }
    return out;
}

}  // namespace softmaxfit
