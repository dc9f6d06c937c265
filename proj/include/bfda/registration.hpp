#ifndef BFDA_REGISTRATION_HPP
#define BFDA_REGISTRATION_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "basis.hpp"
#include "core.hpp"
#include "error.hpp"
#include "parallel.hpp"
#include "transforms.hpp"

/**
 * @file registration.hpp
 * @brief Joint estimation of latent logit curves and warping functions from binary outcomes.
 *
 * The observation model is Y_ij ~ Bernoulli(expit(nu*_i(gamma_i(s_ij)))), where nu*_i is the
 * subject's aligned logit curve on internal time and gamma_i maps observed to internal time.
 * Estimation alternates a generalized FPCA (variational EM with the Jaakkola-Jordan quadratic
 * bound on the logistic likelihood) with a per-subject maximum-likelihood warp update.
 */

namespace bfda {

struct RegistrationConfig {
    int K_a = 4;
    int K_p = 4;
    int n_components = 10;
    int max_outer_iters = 20;
    double outer_tol = 1e-4;
    double inner_tol = 1e-5;
    int max_inner_iters = 500;
    std::uint64_t seed = 1;
    /** Output grid size; 0 selects the smallest trial count in the data. */
    std::size_t grid_size = 0;
    int warp_max_iters = 200;
    double warp_grad_tol = 1e-6;
    /** Pull toward the identity warp, in units of mean per-trial log-likelihood. */
    double warp_ridge = 1e-6;
    /** Each log-increment stays within this distance of the identity's, via a tanh map. */
    double warp_log_increment_bound = 4.0;
    /** Keep identity warps unless warping pays for itself: cohort-level AIC in `register_curves`, per-subject BIC in `warp_step`. */
    bool warp_selection = true;

    void validate() const {
        if (K_a < 2 || K_p < 2) throw ConfigError("K_a and K_p must be >= 2");
        if (n_components < 1) throw ConfigError("n_components must be >= 1");
        if (!(outer_tol > 0) || !(inner_tol > 0) || !(warp_grad_tol > 0)) throw ConfigError("tolerances must be positive");
        if (max_outer_iters < 1 || max_inner_iters < 1 || warp_max_iters < 1) throw ConfigError("iteration caps must be positive");
        if (warp_ridge < 0) throw ConfigError("warp ridge must be nonnegative");
        if (!(warp_log_increment_bound > 0)) throw ConfigError("warp log-increment bound must be positive");
    }

    SplineBasis amplitude_basis() const { return SplineBasis::uniform(3, K_a); }
    SplineBasis phase_basis() const { return SplineBasis::uniform(3, K_p); }
};

/** A spline-represented curve on [0,1]. */
struct SplineCurve {
    SplineBasis basis;
    Eigen::VectorXd coefficients;

    /** Values and first derivatives at `points`. */
    void evaluate(std::span<const double> points, Eigen::VectorXd& value, Eigen::VectorXd* derivative = nullptr) const {
        value = eval_basis(basis, points) * coefficients;
        if (derivative) *derivative = eval_basis_derivative(basis, points) * coefficients;
    }
};

namespace detail {

inline double log_sigmoid(double x) {
    return x >= 0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x));
}

/** Bernoulli log-likelihood of y given logit x. */
inline double bernoulli_loglik(int y, double x) {
    return y ? log_sigmoid(x) : log_sigmoid(-x);
}

/** Curvature coefficient of the Jaakkola-Jordan bound, tanh(c/2) / (4c), with its limit 1/8 at c = 0. */
inline double jj_lambda(double c) {
    c = std::abs(c);
    if (c < 1e-6) return 0.125 - c * c / 96.0;
    return std::tanh(0.5 * c) / (4 * c);
}

}

/** Binary outcomes of one subject evaluated against the amplitude basis at its current internal times. */
struct SubjectDesign {
    Eigen::MatrixXd basis;
    Eigen::VectorXd outcomes;

    bool all_zero() const { return (outcomes.array() == 0).all(); }
    bool all_one() const { return (outcomes.array() == 1).all(); }
    bool degenerate() const { return all_zero() || all_one(); }
};

/**
 * @brief Fitted generalized FPCA with a logit link.
 *
 * Subject i's aligned logit curve has spline coefficients mean + loadings * score_mean[i];
 * score posteriors are Gaussian N(score_mean[i], score_cov[i]).
 */
struct GfpcaFit {
    Eigen::VectorXd mean;
    Eigen::MatrixXd loadings;
    std::vector<Eigen::VectorXd> score_mean;
    std::vector<Eigen::MatrixXd> score_cov;
    /** Spline coefficients of each subject's aligned logit curve (clamped constants for degenerate subjects). */
    std::vector<Eigen::VectorXd> subject_coefficients;
    std::vector<bool> degenerate;
    std::vector<double> bound_trace;
    int components = 0;
    bool converged = false;
    std::vector<std::string> events;
};

/**
 * Variational EM for the generalized FPCA.
 *
 * Each iteration updates, in order, the Gaussian score posteriors, the per-observation bound
 * parameters and the mean/loadings; each update maximizes the variational lower bound in its block,
 * so the bound never decreases. Subjects whose outcomes are all 0 or all 1 are left out of the fit
 * and assigned the clamped constant curve. `warm` (optional) supplies starting mean, loadings and
 * score posteriors; otherwise the fit starts from splines through the logit of a running mean of
 * outcomes (window N/20).
 */
inline GfpcaFit gfpca_step(std::span<const SubjectDesign> data, const RegistrationConfig& config, const GfpcaFit* warm = nullptr) {
    config.validate();
    const std::size_t n = data.size();
    if (n == 0) throw EmptySample("no subjects");
    const Eigen::Index K = config.K_a;
    for (const auto& d : data) {
        if (d.basis.cols() != K || d.basis.rows() != d.outcomes.size()) throw DomainMismatch("subject design does not match K_a");
    }

    GfpcaFit fit;
    fit.degenerate.resize(n);
    std::vector<std::size_t> active;
    for (std::size_t i = 0; i < n; ++i) {
        fit.degenerate[i] = data[i].degenerate();
        if (fit.degenerate[i]) {
            fit.events.push_back("subject " + std::to_string(i) + " has constant outcomes; curve clamped");
        } else {
            active.push_back(i);
        }
    }
    const std::size_t n_active = active.size();
    int C = std::min(config.n_components, config.K_a);
    if (C < config.n_components) {
        fit.events.push_back("n_components " + std::to_string(config.n_components) + " capped at K_a = " + std::to_string(config.K_a));
    }
    if (n_active >= 2 && static_cast<std::size_t>(C) > n_active - 1) {
        C = static_cast<int>(n_active - 1);
        fit.events.push_back("components capped at " + std::to_string(C) + " by the number of informative subjects");
    }
    C = std::max(C, 1);
    fit.components = C;

    fit.score_mean.assign(n, Eigen::VectorXd::Zero(C));
    fit.score_cov.assign(n, Eigen::MatrixXd::Identity(C, C));
    fit.subject_coefficients.assign(n, Eigen::VectorXd::Zero(K));
    const double bound = logit_bound();
    for (std::size_t i = 0; i < n; ++i) {
        if (fit.degenerate[i]) fit.subject_coefficients[i].setConstant(data[i].all_one() ? bound : -bound);
    }
    if (n_active == 0) {
        fit.mean = Eigen::VectorXd::Zero(K);
        fit.loadings = Eigen::MatrixXd::Zero(K, C);
        fit.converged = true;
        return fit;
    }

    // Starting values.
    Eigen::MatrixXd W(K, C + 1);
    if (warm && warm->mean.size() == K && warm->loadings.rows() == K && warm->loadings.cols() == C && warm->score_mean.size() == n) {
        W.col(0) = warm->mean;
        W.rightCols(C) = warm->loadings;
        for (std::size_t i : active) {
            fit.score_mean[i] = warm->score_mean[i];
            fit.score_cov[i] = warm->score_cov[i];
        }
    } else {
        Eigen::MatrixXd coefs(n_active, K);
        for (std::size_t a = 0; a < n_active; ++a) {
            const auto& d = data[active[a]];
            const Eigen::Index N = d.outcomes.size();
            const Eigen::Index window = std::max<Eigen::Index>(1, N / 20);
            Eigen::VectorXd prefix(N + 1);
            prefix(0) = 0;
            for (Eigen::Index j = 0; j < N; ++j) prefix(j + 1) = prefix(j) + d.outcomes(j);
            Eigen::VectorXd z(N);
            for (Eigen::Index j = 0; j < N; ++j) {
                const Eigen::Index lo = std::max<Eigen::Index>(0, j - window / 2), hi = std::min<Eigen::Index>(N, lo + window);
                const double p = (prefix(hi) - prefix(lo) + 0.5) / static_cast<double>(hi - lo + 1);
                z(j) = logit(p);
            }
            Eigen::MatrixXd gram = d.basis.transpose() * d.basis;
            gram.diagonal().array() += 1e-8;
            coefs.row(static_cast<Eigen::Index>(a)) = gram.ldlt().solve(d.basis.transpose() * z).transpose();
        }
        const Eigen::VectorXd mu = coefs.colwise().mean().transpose();
        W.col(0) = mu;
        Eigen::MatrixXd centred = coefs.rowwise() - mu.transpose();
        Eigen::MatrixXd cov = centred.transpose() * centred / std::max<double>(1.0, static_cast<double>(n_active) - 1);
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
        for (int c = 0; c < C; ++c) {
            const Eigen::Index idx = K - 1 - c;
            W.col(1 + c) = es.eigenvectors().col(idx) * std::sqrt(std::max(es.eigenvalues()(idx), 1e-4));
        }
        Eigen::MatrixXd Theta = W.rightCols(C);
        Eigen::MatrixXd proj = (Theta.transpose() * Theta + 1e-8 * Eigen::MatrixXd::Identity(C, C)).ldlt().solve(Theta.transpose());
        for (std::size_t a = 0; a < n_active; ++a) {
            fit.score_mean[active[a]] = proj * centred.row(static_cast<Eigen::Index>(a)).transpose();
            fit.score_cov[active[a]] = 0.01 * Eigen::MatrixXd::Identity(C, C);
        }
    }

    // Per-observation bound parameters c_ij from the current posterior.
    std::vector<Eigen::VectorXd> cpar(n);
    auto second_moment = [&](std::size_t i) {
        Eigen::MatrixXd Ezz(C + 1, C + 1);
        Ezz(0, 0) = 1;
        Ezz.block(1, 0, C, 1) = fit.score_mean[i];
        Ezz.block(0, 1, 1, C) = fit.score_mean[i].transpose();
        Ezz.block(1, 1, C, C) = fit.score_cov[i] + fit.score_mean[i] * fit.score_mean[i].transpose();
        return Ezz;
    };
    auto update_c = [&](std::size_t i) {
        const auto& B = data[i].basis;
        const Eigen::MatrixXd M = W * second_moment(i) * W.transpose();
        cpar[i] = ((B * M).cwiseProduct(B)).rowwise().sum().cwiseMax(0.0).cwiseSqrt();
    };
    for (std::size_t i : active) update_c(i);

    auto lambda_of = [&](std::size_t i) { return cpar[i].unaryExpr([](double c) { return detail::jj_lambda(c); }).eval(); };

    auto lower_bound = [&]() {
        double total = 0;
        for (std::size_t i : active) {
            const auto& B = data[i].basis;
            const auto& y = data[i].outcomes;
            const Eigen::MatrixXd Ezz = second_moment(i);
            Eigen::VectorXd Ez(C + 1);
            Ez(0) = 1;
            Ez.tail(C) = fit.score_mean[i];
            const Eigen::VectorXd Ex = B * (W * Ez);
            const Eigen::VectorXd Ex2 = ((B * (W * Ezz * W.transpose())).cwiseProduct(B)).rowwise().sum();
            for (Eigen::Index j = 0; j < y.size(); ++j) {
                const double c = cpar[i](j), lam = detail::jj_lambda(c);
                total += detail::log_sigmoid(c) - 0.5 * c + lam * c * c + (y(j) - 0.5) * Ex(j) - lam * Ex2(j);
            }
            const auto& S = fit.score_cov[i];
            const auto& m = fit.score_mean[i];
            const double logdet = S.llt().matrixLLT().diagonal().array().log().sum() * 2;
            total -= 0.5 * (S.trace() + m.squaredNorm() - C - logdet);
        }
        return total;
    };

    double previous = -std::numeric_limits<double>::infinity();
    bool ridge_logged = false;
    for (int iter = 0; iter < config.max_inner_iters; ++iter) {
        const Eigen::VectorXd alpha = W.col(0);
        const Eigen::MatrixXd Theta = W.rightCols(C);

        // Score posteriors.
        parallel_for(n_active, [&](std::size_t a) {
            const std::size_t i = active[a];
            const auto& B = data[i].basis;
            const Eigen::VectorXd lam = lambda_of(i);
            const Eigen::MatrixXd A = B.transpose() * lam.asDiagonal() * B;
            const Eigen::VectorXd r = B.transpose() * (data[i].outcomes.array() - 0.5).matrix();
            Eigen::MatrixXd P = Eigen::MatrixXd::Identity(C, C) + 2 * Theta.transpose() * A * Theta;
            Eigen::LLT<Eigen::MatrixXd> llt(P);
            fit.score_cov[i] = llt.solve(Eigen::MatrixXd::Identity(C, C));
            fit.score_cov[i] = 0.5 * (fit.score_cov[i] + fit.score_cov[i].transpose()).eval();
            fit.score_mean[i] = llt.solve(Theta.transpose() * (r - 2 * A * alpha));
        });

        // Bound parameters.
        parallel_for(n_active, [&](std::size_t a) { update_c(active[a]); });

        // Mean and loadings: sum_i (E[zz'] kron A_i) vec(W) = vec(sum_i r_i E[z]') / 2.
        const Eigen::Index dim = K * (C + 1);
        Eigen::MatrixXd H = Eigen::MatrixXd::Zero(dim, dim);
        Eigen::MatrixXd rhs = Eigen::MatrixXd::Zero(K, C + 1);
        for (std::size_t i : active) {
            const auto& B = data[i].basis;
            const Eigen::VectorXd lam = lambda_of(i);
            const Eigen::MatrixXd A = B.transpose() * lam.asDiagonal() * B;
            const Eigen::VectorXd r = B.transpose() * (data[i].outcomes.array() - 0.5).matrix();
            const Eigen::MatrixXd Ezz = second_moment(i);
            Eigen::VectorXd Ez(C + 1);
            Ez(0) = 1;
            Ez.tail(C) = fit.score_mean[i];
            for (Eigen::Index p = 0; p <= C; ++p) {
                for (Eigen::Index q = 0; q <= C; ++q) {
                    H.block(p * K, q * K, K, K) += Ezz(p, q) * A;
                }
            }
            rhs += 0.5 * r * Ez.transpose();
        }
        Eigen::Map<Eigen::VectorXd> b(rhs.data(), dim);
        Eigen::LLT<Eigen::MatrixXd> hl(H);
        Eigen::VectorXd vecW;
        if (hl.info() == Eigen::Success && hl.matrixLLT().diagonal().minCoeff() > 1e-12 * H.diagonal().maxCoeff()) {
            vecW = hl.solve(b);
        } else {
            H.diagonal().array() += 1e-8;
            vecW = H.ldlt().solve(b);
            if (!ridge_logged) {
                fit.events.push_back("singular score covariance in M-step; ridge 1e-8 added");
                ridge_logged = true;
            }
        }
        W = Eigen::Map<Eigen::MatrixXd>(vecW.data(), K, C + 1);

        const double current = lower_bound();
        fit.bound_trace.push_back(current);
        if (std::isfinite(previous) && std::abs(current - previous) <= config.inner_tol * std::abs(current)) {
            fit.converged = true;
            break;
        }
        previous = current;
    }
    if (!fit.converged) fit.events.push_back("GFPCA EM reached the iteration cap");

    fit.mean = W.col(0);
    fit.loadings = W.rightCols(C);
    for (std::size_t i : active) {
        fit.subject_coefficients[i] = fit.mean + fit.loadings * fit.score_mean[i];
    }
    return fit;
}

/** Outcome of a single-subject warp update. */
struct WarpFit {
    Warp warp;
    double loglik = 0;
    double identity_loglik = 0;
    /** Constant logit level added to the target; 0 unless fitted. */
    double level = 0;
    int iterations = 0;
    bool flagged = false;
};

namespace detail {

/** Scalar logit offset b maximizing the Bernoulli log-likelihood of `outcomes` under `x + b`. */
inline double fit_offset(const Eigen::VectorXd& x, std::span<const int> outcomes) {
    const double bound = logit_bound();
    double b = 0;
    for (int it = 0; it < 50; ++it) {
        double g = 0, h = 0;
        for (Eigen::Index j = 0; j < x.size(); ++j) {
            const double p = inverse_logit(x(j) + b);
            g += outcomes[static_cast<std::size_t>(j)] - p;
            h += p * (1 - p);
        }
        if (!(h > 1e-12)) break;
        const double step = std::clamp(g / h, -1.0, 1.0);
        b = std::clamp(b + step, -bound, bound);
        if (std::abs(step) < 1e-10) break;
    }
    return b;
}

/** Penalized mean negative log-likelihood of a warp and its gradient in log-increment coordinates. */
struct WarpObjective {
    const SplineBasis& phase_basis;
    const Eigen::MatrixXd& phase_design; // N x K_p at the observed times
    std::span<const int> outcomes;
    const SplineCurve& target;
    Eigen::VectorXd identity_coefficients;
    double ridge;
    /** Profile out a constant logit level added to the target. */
    bool fit_level = false;

    double level(const Eigen::VectorXd& coef) const {
        if (!fit_level) return 0.0;
        const Eigen::VectorXd gamma = (phase_design * coef).cwiseMax(0.0).cwiseMin(1.0);
        Eigen::VectorXd nu;
        target.evaluate(std::span<const double>(gamma.data(), static_cast<std::size_t>(gamma.size())), nu);
        return fit_offset(nu, outcomes);
    }

    double loglik(const Eigen::VectorXd& coef) const {
        const Eigen::VectorXd gamma = (phase_design * coef).cwiseMax(0.0).cwiseMin(1.0);
        Eigen::VectorXd nu;
        target.evaluate(std::span<const double>(gamma.data(), static_cast<std::size_t>(gamma.size())), nu);
        if (fit_level) nu.array() += fit_offset(nu, outcomes);
        double ll = 0;
        for (Eigen::Index j = 0; j < nu.size(); ++j) ll += bernoulli_loglik(outcomes[static_cast<std::size_t>(j)], nu(j));
        return ll;
    }

    double operator()(const Eigen::VectorXd& theta, Eigen::VectorXd* grad) const {
        const Warp w = Warp::from_log_increments(phase_basis, theta);
        const Eigen::VectorXd& c = w.coefficients;
        const Eigen::VectorXd gamma = (phase_design * c).cwiseMax(0.0).cwiseMin(1.0);
        Eigen::VectorXd nu, dnu;
        target.evaluate(std::span<const double>(gamma.data(), static_cast<std::size_t>(gamma.size())), nu, grad ? &dnu : nullptr);
        if (fit_level) nu.array() += fit_offset(nu, outcomes);
        const double N = static_cast<double>(nu.size());
        double ll = 0;
        Eigen::VectorXd resid(nu.size());
        for (Eigen::Index j = 0; j < nu.size(); ++j) {
            const int y = outcomes[static_cast<std::size_t>(j)];
            ll += bernoulli_loglik(y, nu(j));
            resid(j) = y - inverse_logit(nu(j));
        }
        const Eigen::VectorXd dev = c - identity_coefficients;
        const double value = -ll / N + ridge * dev.squaredNorm();
        if (grad) {
            // d value / d c
            const Eigen::VectorXd G = -(phase_design.transpose() * resid.cwiseProduct(dnu)) / N + 2 * ridge * dev;
            const Eigen::Index m = theta.size();
            Eigen::VectorXd d(m);
            for (Eigen::Index l = 0; l < m; ++l) d(l) = c(l + 1) - c(l);
            const double Gc = G.dot(c);
            grad->resize(m);
            double tail = 0;
            // dc_k / dtheta_l = d_l ([l < k] - c_k)
            for (Eigen::Index l = m - 1; l >= 0; --l) {
                tail += G(l + 1);
                (*grad)(l) = d(l) * (tail - Gc);
            }
        }
        return value;
    }
};

/** WarpObjective in unbounded coordinates phi, with theta = centre + bound * tanh((phi - centre) / bound). */
struct BoundedWarpObjective {
    const WarpObjective& inner;
    Eigen::VectorXd centre;
    double bound;

    Eigen::VectorXd theta(const Eigen::VectorXd& phi) const { return centre + bound * ((phi - centre) / bound).array().tanh().matrix(); }

    Eigen::VectorXd phi(const Eigen::VectorXd& theta) const {
        const Eigen::ArrayXd r = ((theta - centre) / bound).array().max(-1 + 1e-9).min(1 - 1e-9);
        return centre + bound * (0.5 * ((1 + r) / (1 - r)).log()).matrix();
    }

    double operator()(const Eigen::VectorXd& phi_value, Eigen::VectorXd* grad) const {
        const Eigen::ArrayXd t = ((phi_value - centre) / bound).array().tanh();
        const double value = inner(centre + bound * t.matrix(), grad);
        if (grad) *grad = (grad->array() * (1 - t.square())).matrix();
        return value;
    }
};

/** BFGS with Armijo backtracking. Returns the final point; `value` receives its objective. */
template<class Objective_>
Eigen::VectorXd minimize_bfgs(const Objective_& f, Eigen::VectorXd x, int max_iters, double grad_tol, double& value, int& iterations) {
    const Eigen::Index m = x.size();
    Eigen::VectorXd g;
    value = f(x, &g);
    Eigen::MatrixXd Hinv = Eigen::MatrixXd::Identity(m, m);
    iterations = 0;
    for (int it = 0; it < max_iters; ++it) {
        iterations = it + 1;
        if (g.lpNorm<Eigen::Infinity>() < grad_tol) break;
        Eigen::VectorXd dir = -Hinv * g;
        double slope = g.dot(dir);
        if (slope >= 0) {
            Hinv.setIdentity();
            dir = -g;
            slope = -g.squaredNorm();
        }
        double step = 1.0;
        Eigen::VectorXd xn, gn;
        double fn = value;
        bool accepted = false;
        for (int ls = 0; ls < 60; ++ls) {
            xn = x + step * dir;
            fn = f(xn, &gn);
            if (std::isfinite(fn) && fn <= value + 1e-4 * step * slope) {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if (!accepted) break;
        const Eigen::VectorXd s = xn - x, yv = gn - g;
        const double sy = s.dot(yv);
        if (sy > 1e-14) {
            const double rho = 1.0 / sy;
            const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(m, m);
            Hinv = (I - rho * s * yv.transpose()) * Hinv * (I - rho * yv * s.transpose()) + rho * s * s.transpose();
        }
        const double improvement = value - fn;
        x = xn;
        g = gn;
        value = fn;
        if (improvement <= 1e-15 * (1 + std::abs(value))) break;
    }
    return x;
}

}

/**
 * Maximum-likelihood warp of one subject against its target curve.
 *
 * Optimizes over strictly increasing warps in the K_p phase basis via softmax-normalized log-increments,
 * starting from the identity and from `start` if given, and keeps the better result. The returned warp's
 * likelihood is never below that of the identity warp. With `warp_selection` the identity is also kept
 * when the gain does not pay the BIC cost of the K_p - 2 free coefficients.
 */
inline WarpFit warp_step(std::span<const double> times, std::span<const int> outcomes, const SplineCurve& target, const RegistrationConfig& config,
                         const Warp* start = nullptr, const Eigen::MatrixXd* phase_design = nullptr, bool fit_level = false) {
    config.validate();
    if (times.size() != outcomes.size() || times.empty()) throw InvalidSeries("times and outcomes differ in length");
    if (!target.coefficients.allFinite()) throw DomainMismatch("warp target must be finite");
    const SplineBasis pb = config.phase_basis();
    Eigen::MatrixXd own_design;
    if (!phase_design) {
        own_design = eval_basis(pb, times);
        phase_design = &own_design;
    }
    const Warp identity = Warp::identity(pb);
    detail::WarpObjective objective{pb, *phase_design, outcomes, target, identity.coefficients, config.warp_ridge, fit_level};

    WarpFit out;
    out.identity_loglik = objective.loglik(identity.coefficients);

    std::vector<Eigen::VectorXd> starts{Warp::identity_log_increments(pb)};
    if (start && start->basis == pb) {
        Eigen::VectorXd th(pb.size() - 1);
        bool ok = true;
        for (Eigen::Index k = 0; k + 1 < start->coefficients.size(); ++k) {
            const double inc = start->coefficients(k + 1) - start->coefficients(k);
            if (!(inc > 0)) {
                ok = false;
                break;
            }
            th(k) = std::log(inc);
        }
        if (ok) starts.push_back(th);
    }

    const detail::BoundedWarpObjective bounded{objective, starts.front(), config.warp_log_increment_bound};
    double best = std::numeric_limits<double>::infinity();
    Eigen::VectorXd best_theta = starts.front();
    for (const auto& s0 : starts) {
        double value = 0;
        int iters = 0;
        try {
            Eigen::VectorXd th = bounded.theta(detail::minimize_bfgs(bounded, bounded.phi(s0), config.warp_max_iters, config.warp_grad_tol, value, iters));
            out.iterations += iters;
            if (value < best) {
                best = value;
                best_theta = th;
            }
        } catch (const Error&) {
            out.flagged = true;
        }
    }
    if (!std::isfinite(best)) {
        out.flagged = true;
        out.warp = identity;
        out.loglik = out.identity_loglik;
        out.level = objective.level(identity.coefficients);
        return out;
    }
    out.warp = Warp::from_log_increments(pb, best_theta);
    out.loglik = objective.loglik(out.warp.coefficients);
    const double threshold = config.warp_selection ? 0.5 * (pb.size() - 2) * std::log(static_cast<double>(times.size())) : 0.0;
    if (out.loglik - out.identity_loglik < threshold) {
        out.warp = identity;
        out.loglik = out.identity_loglik;
    }
    out.level = objective.level(out.warp.coefficients);
    return out;
}

/**
 * @brief Output of `register_curves` for one delay condition.
 */
struct RegistrationResult {
    Delay delay = Delay::D0;
    RegistrationConfig config;
    std::vector<std::string> subject_ids;
    std::vector<Group> labels;
    SplineBasis amplitude_basis;
    /** Spline coefficients of each aligned logit curve nu*_i. */
    std::vector<Eigen::VectorXd> aligned_coefficients;
    std::vector<Warp> warps;
    FunctionalSample aligned_logit;
    FunctionalSample aligned_prob;
    /** nu_i = nu*_i o gamma_i on observed time. */
    FunctionalSample unaligned_logit;
    std::vector<double> loglik_trace;
    bool converged = false;
    std::vector<bool> flagged;
    int components = 0;
    std::vector<std::string> events;

    const Grid& grid() const { return aligned_logit.grid; }
};

namespace detail {

inline std::vector<SubjectDesign> amplitude_designs(std::span<const TrialSeries> data, const std::vector<Warp>& warps, const SplineBasis& ab) {
    std::vector<SubjectDesign> out(data.size());
    parallel_for(data.size(), [&](std::size_t i) {
        const auto internal = warp_values(warps[i], data[i].times);
        out[i].basis = eval_basis(ab, internal);
        out[i].outcomes.resize(static_cast<Eigen::Index>(data[i].outcomes.size()));
        for (std::size_t j = 0; j < data[i].outcomes.size(); ++j) out[i].outcomes(static_cast<Eigen::Index>(j)) = data[i].outcomes[j];
    });
    return out;
}

inline double total_loglik(std::span<const SubjectDesign> designs, const GfpcaFit& fit) {
    double total = 0;
    for (std::size_t i = 0; i < designs.size(); ++i) {
        if (fit.degenerate[i]) continue;
        const Eigen::VectorXd nu = designs[i].basis * fit.subject_coefficients[i];
        for (Eigen::Index j = 0; j < nu.size(); ++j) total += bernoulli_loglik(static_cast<int>(designs[i].outcomes(j)), nu(j));
    }
    return total;
}

}

/**
 * Registers the binary learning curves of one delay condition.
 *
 * Starts from identity warps and a GFPCA fit, aligns every subject once to the population mean curve,
 * then alternates warp updates (each subject against its own GFPCA curve) with GFPCA refits until the
 * relative change of the total Bernoulli log-likelihood falls below `outer_tol`. An outer iteration
 * that lowers the likelihood is discarded and ends the loop, so `loglik_trace` never decreases.
 */
inline RegistrationResult register_curves(std::span<const TrialSeries> data, const RegistrationConfig& config) {
    config.validate();
    if (data.size() < 2) throw GroupError("registration needs at least 2 subjects");
    const std::size_t min_len = static_cast<std::size_t>(std::max(config.K_a, config.K_p) + 4);
    for (const auto& s : data) {
        s.validate();
        if (s.size() < min_len) throw InvalidSeries(s.subject_id + ": fewer than " + std::to_string(min_len) + " trials");
        if (s.delay != data.front().delay) throw InvalidSeries("series from different delay conditions");
    }

    const std::size_t n = data.size();
    const SplineBasis ab = config.amplitude_basis();
    const SplineBasis pb = config.phase_basis();

    RegistrationResult res;
    res.delay = data.front().delay;
    res.config = config;
    res.amplitude_basis = ab;

    std::vector<Eigen::MatrixXd> phase_designs(n);
    parallel_for(n, [&](std::size_t i) { phase_designs[i] = eval_basis(pb, data[i].times); });

    std::vector<Warp> warps(n, Warp::identity(pb));
    auto designs = detail::amplitude_designs(data, warps, ab);
    GfpcaFit fit = gfpca_step(designs, config);
    res.events = fit.events;

    RegistrationConfig free_config = config;
    free_config.warp_selection = false;
    bool warping = true;
    std::vector<double> gains(n, 0.0);
    auto update_warps = [&](const GfpcaFit& current, bool to_mean) {
        std::vector<Warp> out(n, Warp::identity(pb));
        std::vector<char> flags(n, 0);
        if (!warping) return out;
        parallel_for(n, [&](std::size_t i) {
            if (current.degenerate[i]) return;
            // Against the mean, each subject also gets its own constant logit level.
            const SplineCurve target{ab, to_mean ? current.mean : current.subject_coefficients[i]};
            WarpFit wf = warp_step(data[i].times, data[i].outcomes, target, free_config, to_mean ? nullptr : &warps[i], &phase_designs[i], to_mean);
            gains[i] = wf.loglik - wf.identity_loglik;
            out[i] = std::move(wf.warp);
            flags[i] = wf.flagged;
        });
        for (std::size_t i = 0; i < n; ++i) {
            if (flags[i]) res.events.push_back("warp optimizer failed for " + data[i].subject_id + "; identity used");
        }
        return out;
    };

    // Initial alignment to the population mean curve. With warp selection the whole cohort stays unwarped
    // unless the summed likelihood gain exceeds the K_p - 2 free coefficients per subject (AIC).
    warps = update_warps(fit, true);
    if (config.warp_selection) {
        double gain = 0, cost = 0;
        for (std::size_t i = 0; i < n; ++i) {
            if (fit.degenerate[i]) continue;
            gain += gains[i];
            cost += static_cast<double>(pb.size() - 2);
        }
        if (gain < cost) {
            warping = false;
            warps.assign(n, Warp::identity(pb));
            res.events.push_back("warping not supported by the data; identity warps kept");
        }
    }
    designs = detail::amplitude_designs(data, warps, ab);
    fit = gfpca_step(designs, config, &fit);
    double loglik = detail::total_loglik(designs, fit);
    res.loglik_trace.push_back(loglik);

    for (int outer = 0; outer < config.max_outer_iters; ++outer) {
        auto new_warps = update_warps(fit, false);
        auto new_designs = detail::amplitude_designs(data, new_warps, ab);
        GfpcaFit new_fit = gfpca_step(new_designs, config, &fit);
        const double new_loglik = detail::total_loglik(new_designs, new_fit);
        if (new_loglik < loglik) {
            res.converged = true;
            break;
        }
        const double change = (new_loglik - loglik) / std::abs(loglik);
        warps = std::move(new_warps);
        designs = std::move(new_designs);
        fit = std::move(new_fit);
        loglik = new_loglik;
        res.loglik_trace.push_back(loglik);
        if (change < config.outer_tol) {
            res.converged = true;
            break;
        }
    }
    if (!res.converged) res.events.push_back("outer loop reached max_outer_iters");
    for (const auto& e : fit.events) {
        if (std::find(res.events.begin(), res.events.end(), e) == res.events.end()) res.events.push_back(e);
    }

    // Curves on the output grid.
    const std::size_t N = config.grid_size ? config.grid_size : common_grid_size(data, res.delay);
    const Grid grid(N);
    const double bound = logit_bound();
    const Eigen::MatrixXd grid_basis = eval_basis(ab, grid);

    res.components = fit.components;
    res.warps = warps;
    res.aligned_coefficients = fit.subject_coefficients;
    res.flagged = fit.degenerate;
    for (const auto& s : data) {
        res.subject_ids.push_back(s.subject_id);
        res.labels.push_back(s.group);
    }
    auto init_sample = [&](SampleKind kind) {
        FunctionalSample fs;
        fs.grid = grid;
        fs.values.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(N));
        fs.labels = res.labels;
        fs.kind = kind;
        return fs;
    };
    res.aligned_logit = init_sample(SampleKind::AlignedLogit);
    res.aligned_prob = init_sample(SampleKind::Probability);
    res.unaligned_logit = init_sample(SampleKind::UnalignedLogit);
    for (std::size_t i = 0; i < n; ++i) {
        const auto r = static_cast<Eigen::Index>(i);
        const Eigen::VectorXd aligned = (grid_basis * fit.subject_coefficients[i]).cwiseMax(-bound).cwiseMin(bound);
        const auto gamma = eval_warp(warps[i], grid);
        const Eigen::VectorXd unaligned = (eval_basis(ab, gamma) * fit.subject_coefficients[i]).cwiseMax(-bound).cwiseMin(bound);
        res.aligned_logit.values.row(r) = aligned.transpose();
        res.unaligned_logit.values.row(r) = unaligned.transpose();
        for (Eigen::Index j = 0; j < aligned.size(); ++j) res.aligned_prob.values(r, j) = inverse_logit(aligned(j));
    }
    return res;
}

/** gamma_i sampled on the result grid, one row per subject. */
inline Eigen::MatrixXd warp_grid_values(const RegistrationResult& res) {
    const auto& grid = res.grid();
    Eigen::MatrixXd out(static_cast<Eigen::Index>(res.warps.size()), static_cast<Eigen::Index>(grid.size()));
    for (std::size_t i = 0; i < res.warps.size(); ++i) {
        const auto g = eval_warp(res.warps[i], grid);
        for (std::size_t j = 0; j < g.size(); ++j) out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = g[j];
    }
    return out;
}

/** CLR transforms of the warps' analytic derivatives. */
inline FunctionalSample warp_clr_sample(const RegistrationResult& res) {
    FunctionalSample fs;
    fs.grid = res.grid();
    fs.labels = res.labels;
    fs.kind = SampleKind::WarpCLR;
    fs.values.resize(static_cast<Eigen::Index>(res.warps.size()), static_cast<Eigen::Index>(fs.grid.size()));
    for (std::size_t i = 0; i < res.warps.size(); ++i) {
        const auto eta = clr_forward(warp_derivative(res.warps[i], fs.grid), fs.grid);
        for (std::size_t j = 0; j < eta.values.size(); ++j) fs.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = eta.values[j];
    }
    return fs;
}

/** mu_i = expit(nu_i) on observed time. */
inline FunctionalSample unaligned_prob_sample(const RegistrationResult& res) {
    FunctionalSample fs = res.unaligned_logit;
    fs.kind = SampleKind::Probability;
    fs.values = res.unaligned_logit.values.unaryExpr([](double v) { return inverse_logit(v); });
    return fs;
}

}

#endif
