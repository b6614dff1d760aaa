#pragma once

// Softmax choice model with linear objectives: each observation offers m
// options, option i carrying a feature vector x_i, and the probability of
// picking i is exp(theta'x_i) / sum_j exp(theta'x_j).  This header holds the
// dataset container, the log-likelihood with its analytic gradient and
// Hessian, feature builders for common model families, and simulators.

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "softmaxfit/rng.hpp"

namespace softmaxfit {

struct ChoiceObservation {
    Eigen::MatrixXd features;  // m x n_obj, one row per option
    int chosen = 0;            // 0-based index of the selected option
};

// Immutable collection of choice observations with a uniform shape.
class ChoiceDataset {
  public:
    explicit ChoiceDataset(std::vector<ChoiceObservation> observations)
        : observations_(std::move(observations)) {
        if (observations_.empty()) {
            throw std::invalid_argument("ChoiceDataset: need at least one observation");
        }
        m_ = static_cast<int>(observations_.front().features.rows());
        n_obj_ = static_cast<int>(observations_.front().features.cols());
        if (m_ < 2) throw std::invalid_argument("ChoiceDataset: need at least two options");
        if (n_obj_ < 1) throw std::invalid_argument("ChoiceDataset: need at least one feature");
        for (std::size_t k = 0; k < observations_.size(); ++k) {
            const auto& obs = observations_[k];
            if (obs.features.rows() != m_ || obs.features.cols() != n_obj_) {
                throw std::invalid_argument("ChoiceDataset: observation " + std::to_string(k + 1) +
                                            " has shape " + std::to_string(obs.features.rows()) +
                                            "x" + std::to_string(obs.features.cols()) +
                                            ", expected " + std::to_string(m_) + "x" +
                                            std::to_string(n_obj_));
            }
            if (obs.chosen < 0 || obs.chosen >= m_) {
                throw std::invalid_argument("ChoiceDataset: observation " + std::to_string(k + 1) +
                                            " has chosen index out of range");
            }
            if (!obs.features.allFinite()) {
                throw std::invalid_argument("ChoiceDataset: observation " + std::to_string(k + 1) +
                                            " has non-finite features");
            }
        }
    }

    std::size_t size() const { return observations_.size(); }
    int option_count() const { return m_; }
    int feature_count() const { return n_obj_; }
    const ChoiceObservation& operator[](std::size_t k) const { return observations_[k]; }
    const std::vector<ChoiceObservation>& observations() const { return observations_; }

    // First n observations, same shapes (used to sweep sample size over a
    // fixed design).
    ChoiceDataset head(std::size_t n) const {
        if (n < 1 || n > observations_.size()) {
            throw std::invalid_argument("ChoiceDataset::head: n out of range");
        }
        return ChoiceDataset(std::vector<ChoiceObservation>(observations_.begin(),
                                                            observations_.begin() + n));
    }

  private:
    std::vector<ChoiceObservation> observations_;
    int m_ = 0;
    int n_obj_ = 0;
};

// Selection probabilities for one observation.  Exponentials are taken after
// subtracting the max utility, so magnitudes up to ~700 cannot overflow.
inline Eigen::VectorXd choice_probabilities(const Eigen::MatrixXd& features,
                                            const Eigen::VectorXd& theta) {
    if (features.cols() != theta.size()) {
        throw std::invalid_argument("choice_probabilities: feature count " +
                                    std::to_string(features.cols()) + " does not match theta size " +
                                    std::to_string(theta.size()));
    }
    if (!features.allFinite() || !theta.allFinite()) {
        throw std::invalid_argument("choice_probabilities: non-finite input");
    }
    const Eigen::VectorXd utilities = features * theta;
    const double shift = utilities.maxCoeff();
    Eigen::VectorXd p = (utilities.array() - shift).exp();
    p /= p.sum();
    return p;
}

namespace detail {

// Shared evaluation core: log-likelihood with optional gradient and Hessian
// accumulation in a single pass over the data.
inline double evaluate_log_likelihood(const ChoiceDataset& data, const Eigen::VectorXd& theta,
                                      Eigen::VectorXd* gradient, Eigen::MatrixXd* hessian) {
    const int n_obj = data.feature_count();
    if (theta.size() != n_obj) {
        throw std::invalid_argument("log_likelihood: theta size " + std::to_string(theta.size()) +
                                    " does not match feature count " + std::to_string(n_obj));
    }
    if (!theta.allFinite()) throw std::invalid_argument("log_likelihood: non-finite theta");
    double ll = 0.0;
    if (gradient) gradient->setZero(n_obj);
    if (hessian) hessian->setZero(n_obj, n_obj);
    for (const auto& obs : data.observations()) {
        const Eigen::VectorXd utilities = obs.features * theta;
        const double shift = utilities.maxCoeff();
        const Eigen::ArrayXd shifted = utilities.array() - shift;
        const Eigen::VectorXd expu = shifted.exp();
        const double z = expu.sum();
        ll += utilities(obs.chosen) - (shift + std::log(z));
        if (gradient || hessian) {
            const Eigen::VectorXd p = expu / z;
            const Eigen::VectorXd mean_features = obs.features.transpose() * p;
            if (gradient) {
                *gradient += obs.features.row(obs.chosen).transpose() - mean_features;
            }
            if (hessian) {
                *hessian -= obs.features.transpose() * p.asDiagonal() * obs.features -
                            mean_features * mean_features.transpose();
            }
        }
    }
    if (!std::isfinite(ll)) {
        throw std::runtime_error("log_likelihood: non-finite value at theta");
    }
    if (gradient && !gradient->allFinite()) {
        throw std::runtime_error("log_likelihood: non-finite gradient at theta");
    }
    if (hessian && !hessian->allFinite()) {
        throw std::runtime_error("log_likelihood: non-finite Hessian at theta");
    }
    return ll;
}

}  // namespace detail

inline double log_likelihood(const ChoiceDataset& data, const Eigen::VectorXd& theta) {
    return detail::evaluate_log_likelihood(data, theta, nullptr, nullptr);
}

inline Eigen::VectorXd log_likelihood_gradient(const ChoiceDataset& data,
                                               const Eigen::VectorXd& theta) {
    Eigen::VectorXd g;
    detail::evaluate_log_likelihood(data, theta, &g, nullptr);
    return g;
}

// Always symmetric and negative semidefinite (concave log-likelihood).
inline Eigen::MatrixXd log_likelihood_hessian(const ChoiceDataset& data,
                                              const Eigen::VectorXd& theta) {
    Eigen::MatrixXd h;
    detail::evaluate_log_likelihood(data, theta, nullptr, &h);
    return h;
}

// ---- Feature builders for common softmax model families ------------------

// Plain value-directed softmax: one feature per option, x_i = V_i, with the
// inverse temperature 1/tau as the single parameter.
inline Eigen::MatrixXd value_features(const Eigen::VectorXd& values) {
    if (values.size() < 1) throw std::invalid_argument("value_features: empty value vector");
    return values;
}

// Logarithmic cooling: x_i = V_i * log(time).  time = 1 makes every feature
// zero (log 1 = 0), which would silently destroy identification, so times
// <= 1 are rejected rather than accepted.
inline Eigen::MatrixXd cooled_value_features(const Eigen::VectorXd& values, double time) {
    if (values.size() < 1) throw std::invalid_argument("cooled_value_features: empty value vector");
    if (!(time > 1.0)) {
        throw std::invalid_argument(
            "cooled_value_features: time must exceed 1 (log(1) = 0 zeroes all features), got " +
            std::to_string(time));
    }
    return values * std::log(time);
}

// Temporal-difference value updating in its one-step linear form: option i
// carries [previous value, prediction error if i was the previous choice],
// so theta = (1/nu, learning_rate/nu).
inline Eigen::MatrixXd td_softmax_features(const Eigen::VectorXd& prev_values,
                                           double prediction_error, int prev_choice) {
    const int m = static_cast<int>(prev_values.size());
    if (m < 1) throw std::invalid_argument("td_softmax_features: empty value vector");
    if (prev_choice < 0 || prev_choice >= m) {
        throw std::invalid_argument("td_softmax_features: prev_choice out of range");
    }
    Eigen::MatrixXd features = Eigen::MatrixXd::Zero(m, 2);
    features.col(0) = prev_values;
    features(prev_choice, 1) = prediction_error;
    return features;
}

// ---- Simulation -----------------------------------------------------------

// Draws n observations with i.i.d. standard-normal features and responses
// from the model at theta.  Draw order is fixed (features row-major, then the
// response) so a seed pins the dataset exactly.
inline ChoiceDataset simulate_gaussian_dataset(std::size_t n, int m, const Eigen::VectorXd& theta,
                                               Rng& rng) {
    if (n < 1) throw std::invalid_argument("simulate_gaussian_dataset: n must be positive");
    if (m < 2) throw std::invalid_argument("simulate_gaussian_dataset: need at least two options");
    if (theta.size() < 1) throw std::invalid_argument("simulate_gaussian_dataset: empty theta");
    std::vector<ChoiceObservation> observations;
    observations.reserve(n);
    for (std::size_t k = 0; k < n; ++k) {
        ChoiceObservation obs;
        obs.features.resize(m, theta.size());
        for (int i = 0; i < m; ++i) {
            for (int j = 0; j < theta.size(); ++j) obs.features(i, j) = rng.normal();
        }
        obs.chosen = rng.categorical(choice_probabilities(obs.features, theta));
        observations.push_back(std::move(obs));
    }
    return ChoiceDataset(std::move(observations));
}

// Redraws only the responses, keeping the explanatory features fixed; the
// ensemble-recovery experiments resimulate y while holding x.
inline ChoiceDataset resimulate_choices(const ChoiceDataset& base, const Eigen::VectorXd& theta,
                                        Rng& rng) {
    std::vector<ChoiceObservation> observations;
    observations.reserve(base.size());
    for (const auto& obs : base.observations()) {
        ChoiceObservation redrawn;
        redrawn.features = obs.features;
        redrawn.chosen = rng.categorical(choice_probabilities(obs.features, theta));
        observations.push_back(std::move(redrawn));
    }
    return ChoiceDataset(std::move(observations));
}

}  // namespace softmaxfit
