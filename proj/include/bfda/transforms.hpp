#ifndef BFDA_TRANSFORMS_HPP
#define BFDA_TRANSFORMS_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "basis.hpp"
#include "core.hpp"
#include "error.hpp"

/**
 * @file transforms.hpp
 * @brief Bijections between constrained curve spaces and unconstrained representations.
 *
 * Warping functions go through their derivative and the centered log-ratio (CLR) transform into
 * the zero-integral subspace of L2; probability curves go through the logit.
 */

namespace bfda {

/** Clamp used before taking logits: mu is forced into [eps, 1 - eps]. */
inline constexpr double logit_epsilon = 1e-6;

/** Bound on |eta| before exponentiation in `clr_inverse`. */
inline constexpr double clr_exponent_bound = 700.0;

/** Counters for clamping events inside the transforms. */
struct TransformDiagnostics {
    std::size_t logit_clamped = 0;
    std::size_t exp_clamped = 0;
};

/** Largest finite logit produced after clamping. */
inline double logit_bound() {
    return std::log((1 - logit_epsilon) / logit_epsilon);
}

inline double logit(double mu, TransformDiagnostics* diag = nullptr) {
    if (mu < logit_epsilon || mu > 1 - logit_epsilon) {
        if (diag) ++diag->logit_clamped;
        return mu < 0.5 ? -logit_bound() : logit_bound();
    }
    return std::log(mu / (1 - mu));
}

inline std::vector<double> logit(std::span<const double> mu, TransformDiagnostics* diag = nullptr) {
    std::vector<double> out(mu.size());
    for (std::size_t i = 0; i < mu.size(); ++i) out[i] = logit(mu[i], diag);
    return out;
}

/** Logistic function, evaluated on the branch that cannot overflow. */
inline double inverse_logit(double nu) {
    if (nu >= 0) {
        return 1 / (1 + std::exp(-nu));
    }
    const double e = std::exp(nu);
    return e / (1 + e);
}

inline std::vector<double> inverse_logit(std::span<const double> nu) {
    std::vector<double> out(nu.size());
    for (std::size_t i = 0; i < nu.size(); ++i) out[i] = inverse_logit(nu[i]);
    return out;
}

/** A CLR-transformed warp: a curve on the grid with zero trapezoidal integral. */
struct ClrCurve {
    Grid grid;
    std::vector<double> values;
};

/**
 * eta(s) = log g(s) - int_0^1 log g, for a strictly positive warp derivative g on the grid.
 */
inline ClrCurve clr_forward(std::span<const double> derivative, const Grid& grid) {
    if (derivative.size() != grid.size()) throw DomainMismatch("derivative length does not match grid");
    std::vector<double> logs(derivative.size());
    for (std::size_t i = 0; i < derivative.size(); ++i) {
        if (!(derivative[i] > 0)) throw NonPositiveDerivative("warp derivative must be positive at every grid point");
        logs[i] = std::log(derivative[i]);
    }
    const double centre = trapz(logs, grid);
    for (auto& v : logs) v -= centre;
    return ClrCurve{grid, std::move(logs)};
}

/**
 * gamma(s) = int_0^s exp(eta) / int_0^1 exp(eta) by cumulative trapezoid.
 * Exponents above the bound are clamped and counted in `diag`.
 */
inline std::vector<double> clr_inverse(const ClrCurve& eta, TransformDiagnostics* diag = nullptr) {
    const auto& grid = eta.grid;
    if (eta.values.size() != grid.size()) throw DomainMismatch("CLR curve length does not match grid");
    std::vector<double> e(eta.values.size());
    for (std::size_t i = 0; i < e.size(); ++i) {
        double v = eta.values[i];
        if (!std::isfinite(v)) throw DomainMismatch("CLR curve must be finite");
        if (v > clr_exponent_bound) {
            v = clr_exponent_bound;
            if (diag) ++diag->exp_clamped;
        }
        e[i] = std::exp(v);
    }
    std::vector<double> out = cumulative_trapz(e, grid);
    const double total = out.back();
    for (auto& v : out) v /= total;
    out.front() = 0;
    out.back() = 1;
    return out;
}

/** Analytic derivative gamma' of a warp on the grid; throws `InvalidWarp` if it is not positive. */
inline std::vector<double> warp_derivative(const Warp& warp, const Grid& grid) {
    warp.validate();
    const Eigen::VectorXd d = eval_basis_derivative(warp.basis, grid) * warp.coefficients;
    std::vector<double> out(d.data(), d.data() + d.size());
    for (double v : out) {
        if (!(v > 0)) throw InvalidWarp("warp derivative not positive on the grid");
    }
    return out;
}

/** Central differences in the interior, one-sided differences at the two ends. */
inline std::vector<double> numerical_derivative(std::span<const double> values, const Grid& grid) {
    const std::size_t n = grid.size();
    const double h = grid.spacing();
    std::vector<double> out(n);
    out[0] = (values[1] - values[0]) / h;
    out[n - 1] = (values[n - 1] - values[n - 2]) / h;
    for (std::size_t i = 1; i + 1 < n; ++i) out[i] = (values[i + 1] - values[i - 1]) / (2 * h);
    return out;
}

/** (f o gamma)(s) for f sampled on the grid, with f evaluated by linear interpolation. */
inline std::vector<double> compose(std::span<const double> f, std::span<const double> gamma, const Grid& grid) {
    std::vector<double> out(gamma.size());
    for (std::size_t i = 0; i < gamma.size(); ++i) out[i] = interpolate_on_grid(grid, f, gamma[i]);
    return out;
}

}

#endif
