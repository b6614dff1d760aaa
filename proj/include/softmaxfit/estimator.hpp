#pragma once

// Maximum-likelihood and MAP fitting for the softmax choice model, plus the
// identification diagnostics, asymptotic covariances, confidence intervals,
// inverse-variance pooling and Welch tests built on top of the fits.

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "softmaxfit/choice_model.hpp"
#include "softmaxfit/stats.hpp"

namespace softmaxfit {

struct SolverOptions {
    double gradient_tolerance = 1e-8;  // max-norm of the objective gradient
    int max_iterations = 500;
    bool use_newton = false;           // exact-Hessian steps instead of BFGS
    double armijo_c = 1e-4;
    double backtrack_factor = 0.5;
};

struct FitResult {
    Eigen::VectorXd theta_hat;
    // Asymptotic covariance (-H(theta_hat))^-1 of the log-likelihood; absent
    // when the Hessian at the optimum is singular or not negative definite.
    // MAP fits also report the likelihood-based covariance, not a posterior one.
    std::optional<Eigen::MatrixXd> covariance;
    double log_likelihood = 0.0;  // likelihood part only, also for MAP fits
    bool converged = false;
    int iterations = 0;
    double gradient_norm = 0.0;   // max-norm of the maximized objective's gradient
};

struct IdentificationReport {
    Eigen::MatrixXd second_moment;  // average over observations of X X^T
    double min_eigenvalue = 0.0;
    double threshold = 0.0;         // absolute cutoff the minimum eigenvalue is held to
    bool identified = false;
    long n_lower_bound = 0;         // ceil(n_obj / m)
    bool meets_observation_bound = false;
};

struct ConfidenceInterval {
    Eigen::VectorXd lower;
    Eigen::VectorXd upper;
    double level = 0.0;
};

struct PriorSpec {
    std::function<double(const Eigen::VectorXd&)> log_density;
    std::function<Eigen::VectorXd(const Eigen::VectorXd&)> log_density_gradient;
};

inline PriorSpec flat_prior() {
    return {[](const Eigen::VectorXd&) { return 0.0; },
            [](const Eigen::VectorXd& theta) { return Eigen::VectorXd::Zero(theta.size()).eval(); }};
}

inline PriorSpec gaussian_prior(const Eigen::VectorXd& mean, const Eigen::VectorXd& variance) {
    if (mean.size() != variance.size()) {
        throw std::invalid_argument("gaussian_prior: mean and variance sizes differ");
    }
    if ((variance.array() <= 0.0).any()) {
        throw std::invalid_argument("gaussian_prior: variances must be positive");
    }
    const double log_norm =
        -0.5 * (variance.array().log() + std::log(2.0 * M_PI)).sum();
    return {[mean, variance, log_norm](const Eigen::VectorXd& theta) {
                const Eigen::ArrayXd d = (theta - mean).array();
                return log_norm - 0.5 * (d * d / variance.array()).sum();
            },
            [mean, variance](const Eigen::VectorXd& theta) {
                return (-(theta - mean).array() / variance.array()).matrix().eval();
            }};
}

// Raised when an operation requires identified data and the check fails.
class IdentificationError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

// Second-moment identification check.  The feature block of the last option
// is zeroed (only utility differences are observable), the outer products of
// the remaining option features are averaged, and the minimum eigenvalue is
// compared against relative_threshold * trace / n_obj, a scale-free cutoff.
inline IdentificationReport check_identification(const ChoiceDataset& data,
                                                 double relative_threshold = 1e-8) {
    if (!(relative_threshold >= 0.0)) {
        throw std::invalid_argument("check_identification: threshold must be nonnegative");
    }
    const int n_obj = data.feature_count();
    const int m = data.option_count();
    IdentificationReport report;
    report.second_moment = Eigen::MatrixXd::Zero(n_obj, n_obj);
    for (const auto& obs : data.observations()) {
        for (int i = 0; i + 1 < m; ++i) {
            report.second_moment.noalias() +=
                obs.features.row(i).transpose() * obs.features.row(i);
        }
    }
    report.second_moment /= static_cast<double>(data.size());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(report.second_moment);
    report.min_eigenvalue = es.eigenvalues().minCoeff();
    report.threshold = relative_threshold * report.second_moment.trace() / n_obj;
    report.identified = report.min_eigenvalue > report.threshold;
    report.n_lower_bound = (n_obj + m - 1) / m;  // ceil(n_obj / m)
    report.meets_observation_bound = static_cast<long>(data.size()) >= report.n_lower_bound;
    return report;
}

namespace detail {

struct MaximizeResult {
    Eigen::VectorXd x;
    double value = 0.0;
    bool converged = false;
    int iterations = 0;
    double gradient_norm = 0.0;
};

// Maximizes a concave objective by BFGS (inverse-Hessian secant updates on
// the negated objective) or damped Newton, with Armijo backtracking.  The
// objective callback returns the value and fills the gradient; the optional
// Hessian callback enables Newton steps.
inline MaximizeResult maximize(
    const std::function<double(const Eigen::VectorXd&, Eigen::VectorXd&)>& objective,
    const std::function<Eigen::MatrixXd(const Eigen::VectorXd&)>& hessian,
    const Eigen::VectorXd& init, const SolverOptions& options) {
    if (!(options.gradient_tolerance > 0.0)) {
        throw std::invalid_argument("maximize: gradient tolerance must be positive");
    }
    if (options.max_iterations < 1) {
        throw std::invalid_argument("maximize: max_iterations must be positive");
    }
    if (!(options.armijo_c > 0.0 && options.armijo_c < 1.0) ||
        !(options.backtrack_factor > 0.0 && options.backtrack_factor < 1.0)) {
        throw std::invalid_argument("maximize: line-search constants must lie in (0,1)");
    }
    const int d = static_cast<int>(init.size());
    MaximizeResult result;
    result.x = init;
    Eigen::VectorXd grad(d);
    result.value = objective(result.x, grad);
    Eigen::MatrixXd inv_hess = Eigen::MatrixXd::Identity(d, d);

    auto newton_direction = [&](const Eigen::VectorXd& g) -> Eigen::VectorXd {
        if (options.use_newton && hessian) {
            const Eigen::MatrixXd neg_hess = -hessian(result.x);
            Eigen::LDLT<Eigen::MatrixXd> ldlt(neg_hess);
            if (ldlt.info() == Eigen::Success) {
                Eigen::VectorXd dir = ldlt.solve(g);
                if (dir.allFinite() && dir.dot(g) > 0.0) return dir;
            }
        }
        Eigen::VectorXd dir = inv_hess * g;
        if (!dir.allFinite() || dir.dot(g) <= 0.0) {
            dir = g;
            inv_hess.setIdentity();
        }
        return dir;
    };

    // Phase 1: Armijo-backtracked ascent on the objective value.
    while (result.iterations < options.max_iterations) {
        result.gradient_norm = grad.cwiseAbs().maxCoeff();
        if (result.gradient_norm <= options.gradient_tolerance) {
            result.converged = true;
            return result;
        }
        const Eigen::VectorXd direction = newton_direction(grad);
        const double slope = direction.dot(grad);
        double step = 1.0;
        Eigen::VectorXd x_new;
        Eigen::VectorXd grad_new(d);
        double value_new = 0.0;
        bool accepted = false;
        for (int ls = 0; ls < 80; ++ls) {
            x_new = result.x + step * direction;
            value_new = objective(x_new, grad_new);
            if (value_new >= result.value + options.armijo_c * step * slope) {
                accepted = true;
                break;
            }
            step *= options.backtrack_factor;
        }
        ++result.iterations;
        // Stop when the search is exhausted or the accepted step no longer
        // changes x; near the optimum the true improvement drops below one
        // ulp of the value, so further progress must come from phase 2.
        if (!accepted) break;
        const Eigen::VectorXd s = x_new - result.x;
        if (s.cwiseAbs().maxCoeff() == 0.0) break;
        // Secant pair for the negated objective, whose Hessian is PSD.
        const Eigen::VectorXd y = -(grad_new - grad);
        const double sy = s.dot(y);
        if (sy > 1e-12 * s.norm() * y.norm()) {
            const Eigen::VectorXd hy = inv_hess * y;
            const double yhy = y.dot(hy);
            // BFGS inverse-Hessian update in its expanded form.
            inv_hess += ((sy + yhy) / (sy * sy)) * (s * s.transpose());
            inv_hess -= (hy * s.transpose() + s * hy.transpose()) / sy;
        }
        result.x = x_new;
        result.value = value_new;
        grad = grad_new;
    }

    // Phase 2: polish on the gradient norm.  The objective is flat to machine
    // precision here, so steps are accepted when they shrink the gradient,
    // which the value-based line search cannot see.
    result.gradient_norm = grad.cwiseAbs().maxCoeff();
    while (result.iterations < options.max_iterations &&
           result.gradient_norm > options.gradient_tolerance) {
        const Eigen::VectorXd direction = newton_direction(grad);
        double scale = 1.0;
        bool improved = false;
        for (int h = 0; h < 10; ++h) {
            const Eigen::VectorXd x_new = result.x + scale * direction;
            Eigen::VectorXd grad_new(d);
            const double value_new = objective(x_new, grad_new);
            if (grad_new.cwiseAbs().maxCoeff() < result.gradient_norm) {
                result.x = x_new;
                result.value = value_new;
                grad = grad_new;
                result.gradient_norm = grad.cwiseAbs().maxCoeff();
                improved = true;
                break;
            }
            scale *= 0.5;
        }
        ++result.iterations;
        if (!improved) break;
    }
    result.converged = result.gradient_norm <= options.gradient_tolerance;
    return result;
}

// Inverse of a symmetric positive definite matrix via LDLT, or nullopt when
// the matrix is indefinite or numerically singular. Jacobi equilibration
// (unit diagonal) first, so badly scaled but well-conditioned-after-scaling
// information matrices still invert cleanly.
inline std::optional<Eigen::MatrixXd> invert_pd(const Eigen::MatrixXd& matrix) {
    const int d = static_cast<int>(matrix.rows());
    const Eigen::MatrixXd sym = 0.5 * (matrix + matrix.transpose());
    Eigen::VectorXd scale(d);
    for (int i = 0; i < d; ++i) {
        if (!(sym(i, i) > 0.0)) return std::nullopt;  // PD needs a positive diagonal
        scale(i) = 1.0 / std::sqrt(sym(i, i));
    }
    const Eigen::MatrixXd equilibrated =
        scale.asDiagonal() * sym * scale.asDiagonal();
    Eigen::LDLT<Eigen::MatrixXd> ldlt(equilibrated);
    if (ldlt.info() != Eigen::Success || !ldlt.isPositive()) return std::nullopt;
    const Eigen::MatrixXd inv_eq = ldlt.solve(Eigen::MatrixXd::Identity(d, d));
    if (!inv_eq.allFinite()) return std::nullopt;
    // Guard against a semidefinite factorization sneaking through.
    const double residual =
        (equilibrated * inv_eq - Eigen::MatrixXd::Identity(d, d)).cwiseAbs().maxCoeff();
    if (!(residual < 1e-6)) return std::nullopt;
    Eigen::MatrixXd inv = scale.asDiagonal() * inv_eq * scale.asDiagonal();
    inv = 0.5 * (inv + inv.transpose());
    return inv;
}

// (-H)^-1 at the optimum, or nullopt when -H is not positive definite.
inline std::optional<Eigen::MatrixXd> covariance_from_hessian(const Eigen::MatrixXd& hess) {
    return invert_pd(-hess);
}

}  // namespace detail

inline FitResult fit_ml(const ChoiceDataset& data, const Eigen::VectorXd& init,
                        const SolverOptions& options = {}) {
    if (init.size() != data.feature_count()) {
        throw std::invalid_argument("fit_ml: init size does not match feature count");
    }
    auto objective = [&data](const Eigen::VectorXd& theta, Eigen::VectorXd& grad) {
        return detail::evaluate_log_likelihood(data, theta, &grad, nullptr);
    };
    auto hessian = [&data](const Eigen::VectorXd& theta) {
        return log_likelihood_hessian(data, theta);
    };
    const auto opt = detail::maximize(objective, hessian, init, options);
    FitResult fit;
    fit.theta_hat = opt.x;
    fit.log_likelihood = opt.value;
    fit.converged = opt.converged;
    fit.iterations = opt.iterations;
    fit.gradient_norm = opt.gradient_norm;
    fit.covariance = detail::covariance_from_hessian(log_likelihood_hessian(data, opt.x));
    return fit;
}

inline FitResult fit_map(const ChoiceDataset& data, const PriorSpec& prior,
                         const Eigen::VectorXd& init, const SolverOptions& options = {}) {
    if (init.size() != data.feature_count()) {
        throw std::invalid_argument("fit_map: init size does not match feature count");
    }
    if (!prior.log_density || !prior.log_density_gradient) {
        throw std::invalid_argument("fit_map: prior callbacks not set");
    }
    if (!std::isfinite(prior.log_density(init))) {
        throw std::invalid_argument("fit_map: prior log-density not finite at init");
    }
    auto objective = [&data, &prior](const Eigen::VectorXd& theta, Eigen::VectorXd& grad) {
        const double ll = detail::evaluate_log_likelihood(data, theta, &grad, nullptr);
        grad += prior.log_density_gradient(theta);
        return ll + prior.log_density(theta);
    };
    const auto opt = detail::maximize(objective, nullptr, init, options);
    FitResult fit;
    fit.theta_hat = opt.x;
    fit.log_likelihood = log_likelihood(data, opt.x);
    fit.converged = opt.converged;
    fit.iterations = opt.iterations;
    fit.gradient_norm = opt.gradient_norm;
    fit.covariance = detail::covariance_from_hessian(log_likelihood_hessian(data, opt.x));
    return fit;
}

// Per-coordinate normal-approximation intervals theta_i +/- z * sqrt(cov_ii).
inline ConfidenceInterval confidence_intervals(const FitResult& fit, double level) {
    if (!(level > 0.0 && level < 1.0)) {
        throw std::invalid_argument("confidence_intervals: level must lie strictly in (0,1)");
    }
    if (!fit.covariance) {
        throw std::invalid_argument("confidence_intervals: fit has no covariance");
    }
    const double z = normal_quantile(0.5 * (1.0 + level));
    ConfidenceInterval ci;
    ci.level = level;
    const Eigen::ArrayXd sd = fit.covariance->diagonal().array().max(0.0).sqrt();
    ci.lower = fit.theta_hat.array() - z * sd;
    ci.upper = fit.theta_hat.array() + z * sd;
    return ci;
}

struct PooledFit {
    FitResult fit;
    std::vector<std::size_t> excluded;  // indices of members dropped for singular covariance
};

// Inverse-variance (precision-weighted) pooling of independent fits.
inline PooledFit pool_fits(const std::vector<FitResult>& fits) {
    if (fits.empty()) throw std::invalid_argument("pool_fits: no fits given");
    const int d = static_cast<int>(fits.front().theta_hat.size());
    PooledFit pooled;
    Eigen::MatrixXd precision_sum = Eigen::MatrixXd::Zero(d, d);
    Eigen::VectorXd weighted_sum = Eigen::VectorXd::Zero(d);
    double total_ll = 0.0;
    bool all_converged = true;
    std::size_t included = 0;
    for (std::size_t s = 0; s < fits.size(); ++s) {
        const auto& fit = fits[s];
        if (fit.theta_hat.size() != d) {
            throw std::invalid_argument("pool_fits: fits have mismatched parameter dimensions");
        }
        std::optional<Eigen::MatrixXd> precision;
        if (fit.covariance) precision = detail::invert_pd(*fit.covariance);
        if (!precision) {
            pooled.excluded.push_back(s);
            continue;
        }
        precision_sum += *precision;
        weighted_sum += *precision * fit.theta_hat;
        total_ll += fit.log_likelihood;
        all_converged = all_converged && fit.converged;
        ++included;
    }
    if (included == 0) {
        throw std::runtime_error("pool_fits: every member has a singular covariance");
    }
    const auto pooled_cov = detail::invert_pd(precision_sum);
    if (!pooled_cov) {
        throw std::runtime_error("pool_fits: pooled precision matrix is singular");
    }
    pooled.fit.covariance = *pooled_cov;
    pooled.fit.theta_hat = *pooled_cov * weighted_sum;
    pooled.fit.log_likelihood = total_ll;
    pooled.fit.converged = all_converged;
    pooled.fit.iterations = 0;
    pooled.fit.gradient_norm = 0.0;
    return pooled;
}

struct GroupStats {
    double mean = 0.0;
    double variance = 0.0;
    long count = 0;
};

struct WelchResult {
    double t = 0.0;
    double df = 0.0;
    double p_value = 1.0;
};

// Two-sided Welch's t-test with Welch-Satterthwaite degrees of freedom.
inline WelchResult welch_t_test(const GroupStats& a, const GroupStats& b) {
    if (a.count < 2 || b.count < 2) {
        throw std::invalid_argument("welch_t_test: both groups need at least two members");
    }
    if (!(a.variance > 0.0) || !(b.variance > 0.0)) {
        throw std::invalid_argument("welch_t_test: variances must be positive");
    }
    const double va = a.variance / a.count;
    const double vb = b.variance / b.count;
    WelchResult result;
    result.t = (a.mean - b.mean) / std::sqrt(va + vb);
    result.df = (va + vb) * (va + vb) /
                (va * va / (a.count - 1) + vb * vb / (b.count - 1));
    result.p_value = students_t_two_sided_p(result.t, result.df);
    return result;
}

}  // namespace softmaxfit
