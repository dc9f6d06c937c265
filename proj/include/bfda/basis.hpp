#ifndef BFDA_BASIS_HPP
#define BFDA_BASIS_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "core.hpp"
#include "error.hpp"

/**
 * @file basis.hpp
 * @brief Clamped B-spline bases, least-squares fitting and monotone warping functions.
 */

namespace bfda {

/**
 * @brief B-spline basis on [0,1] with an open (clamped) knot vector.
 *
 * The boundary knots are repeated `degree + 1` times, so the first and last basis functions
 * interpolate the endpoints.
 */
class SplineBasis {
public:
    SplineBasis() : SplineBasis(3, std::vector<double>{}) {}

    SplineBasis(int degree, std::vector<double> interior_knots) : degree_(degree), interior_(std::move(interior_knots)) {
        if (degree_ < 0) throw DomainMismatch("spline degree must be nonnegative");
        for (std::size_t i = 0; i < interior_.size(); ++i) {
            if (!(interior_[i] > 0 && interior_[i] < 1)) throw DomainMismatch("interior knots must lie in (0,1)");
            if (i > 0 && interior_[i] < interior_[i - 1]) throw DomainMismatch("interior knots must be nondecreasing");
        }
        knots_.assign(static_cast<std::size_t>(degree_ + 1), 0.0);
        knots_.insert(knots_.end(), interior_.begin(), interior_.end());
        knots_.insert(knots_.end(), static_cast<std::size_t>(degree_ + 1), 1.0);
    }

    /** Basis of dimension `num_basis` with equally spaced interior knots. */
    static SplineBasis uniform(int degree, int num_basis) {
        const int n_interior = num_basis - degree - 1;
        if (n_interior < 0) {
            throw DomainMismatch("basis dimension " + std::to_string(num_basis) + " too small for degree " + std::to_string(degree));
        }
        std::vector<double> interior(static_cast<std::size_t>(n_interior));
        for (int j = 0; j < n_interior; ++j) {
            interior[static_cast<std::size_t>(j)] = static_cast<double>(j + 1) / static_cast<double>(n_interior + 1);
        }
        return SplineBasis(degree, std::move(interior));
    }

    int degree() const { return degree_; }
    int size() const { return degree_ + 1 + static_cast<int>(interior_.size()); }
    const std::vector<double>& interior_knots() const { return interior_; }
    const std::vector<double>& knots() const { return knots_; }

    /** Index k of the knot span [t_k, t_{k+1}) holding x; x = 1 maps to the last nonempty span. */
    int find_span(double x) const {
        const int last = size() - 1;
        if (x >= 1.0) return last;
        if (x <= 0.0) return degree_;
        auto it = std::upper_bound(knots_.begin() + degree_, knots_.begin() + last + 1, x);
        return static_cast<int>(it - knots_.begin()) - 1;
    }

    /**
     * Values of the `order + 1` basis functions of degree `order` that are nonzero on `span`,
     * i.e. functions span-order..span, using the triangular scheme of de Boor.
     */
    void nonzero(int span, double x, int order, std::vector<double>& out) const {
        out.assign(static_cast<std::size_t>(order + 1), 0.0);
        std::vector<double> left(static_cast<std::size_t>(order + 1)), right(static_cast<std::size_t>(order + 1));
        out[0] = 1.0;
        for (int j = 1; j <= order; ++j) {
            left[static_cast<std::size_t>(j)] = x - knots_[static_cast<std::size_t>(span + 1 - j)];
            right[static_cast<std::size_t>(j)] = knots_[static_cast<std::size_t>(span + j)] - x;
            double saved = 0.0;
            for (int r = 0; r < j; ++r) {
                const double denom = right[static_cast<std::size_t>(r + 1)] + left[static_cast<std::size_t>(j - r)];
                const double temp = denom == 0.0 ? 0.0 : out[static_cast<std::size_t>(r)] / denom;
                out[static_cast<std::size_t>(r)] = saved + right[static_cast<std::size_t>(r + 1)] * temp;
                saved = left[static_cast<std::size_t>(j - r)] * temp;
            }
            out[static_cast<std::size_t>(j)] = saved;
        }
    }

    /** Greville abscissae; coefficients equal to these reproduce f(s) = s. */
    Eigen::VectorXd greville() const {
        Eigen::VectorXd g(size());
        for (int k = 0; k < size(); ++k) {
            if (degree_ == 0) {
                g(k) = 0.5 * (knots_[static_cast<std::size_t>(k)] + knots_[static_cast<std::size_t>(k + 1)]);
                continue;
            }
            double acc = 0;
            for (int j = 1; j <= degree_; ++j) acc += knots_[static_cast<std::size_t>(k + j)];
            g(k) = acc / degree_;
        }
        return g;
    }

    bool operator==(const SplineBasis& other) const { return degree_ == other.degree_ && interior_ == other.interior_; }

private:
    int degree_;
    std::vector<double> interior_;
    std::vector<double> knots_;
};

/** N x K matrix of basis values at arbitrary points in [0,1]. */
inline Eigen::MatrixXd eval_basis(const SplineBasis& basis, std::span<const double> points) {
    const int K = basis.size(), p = basis.degree();
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(points.size()), K);
    std::vector<double> vals;
    for (std::size_t i = 0; i < points.size(); ++i) {
        const int span = basis.find_span(points[i]);
        basis.nonzero(span, points[i], p, vals);
        for (int r = 0; r <= p; ++r) {
            out(static_cast<Eigen::Index>(i), span - p + r) = vals[static_cast<std::size_t>(r)];
        }
    }
    return out;
}

inline Eigen::MatrixXd eval_basis(const SplineBasis& basis, const Grid& grid) {
    return eval_basis(basis, grid.points());
}

/** N x K matrix of first derivatives of the basis functions. */
inline Eigen::MatrixXd eval_basis_derivative(const SplineBasis& basis, std::span<const double> points) {
    const int K = basis.size(), p = basis.degree();
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(points.size()), K);
    if (p == 0) return out;
    const auto& t = basis.knots();
    std::vector<double> lower;
    for (std::size_t i = 0; i < points.size(); ++i) {
        const int span = basis.find_span(points[i]);
        // Degree p-1 functions span-p+1..span are nonzero here.
        basis.nonzero(span, points[i], p - 1, lower);
        auto low = [&](int k) -> double {
            const int r = k - (span - p + 1);
            return (r < 0 || r >= p) ? 0.0 : lower[static_cast<std::size_t>(r)];
        };
        for (int k = span - p; k <= span; ++k) {
            double d = 0;
            const double a = t[static_cast<std::size_t>(k + p)] - t[static_cast<std::size_t>(k)];
            const double b = t[static_cast<std::size_t>(k + p + 1)] - t[static_cast<std::size_t>(k + 1)];
            if (a > 0) d += p / a * low(k);
            if (b > 0) d -= p / b * low(k + 1);
            out(static_cast<Eigen::Index>(i), k) = d;
        }
    }
    return out;
}

inline Eigen::MatrixXd eval_basis_derivative(const SplineBasis& basis, const Grid& grid) {
    return eval_basis_derivative(basis, grid.points());
}

/**
 * Ridge-penalized least-squares spline coefficients for values observed at `points`.
 * With `ridge == 0` the unpenalized problem is solved by column-pivoting QR.
 */
inline Eigen::VectorXd fit_least_squares(std::span<const double> values, const SplineBasis& basis, std::span<const double> points, double ridge = 0.0) {
    if (values.size() != points.size()) throw DomainMismatch("values and points differ in length");
    if (values.size() < static_cast<std::size_t>(basis.size())) {
        throw Underdetermined(std::to_string(values.size()) + " points for " + std::to_string(basis.size()) + " coefficients");
    }
    if (ridge < 0) throw DomainMismatch("ridge must be nonnegative");
    const Eigen::MatrixXd B = eval_basis(basis, points);
    const Eigen::Map<const Eigen::VectorXd> y(values.data(), static_cast<Eigen::Index>(values.size()));
    if (ridge == 0) {
        return B.colPivHouseholderQr().solve(y);
    }
    Eigen::MatrixXd gram = B.transpose() * B;
    gram.diagonal().array() += ridge;
    return gram.ldlt().solve(B.transpose() * y);
}

inline Eigen::VectorXd fit_least_squares(std::span<const double> values, const SplineBasis& basis, const Grid& grid, double ridge = 0.0) {
    return fit_least_squares(values, basis, grid.points(), ridge);
}

/**
 * @brief Monotone, boundary-preserving warping function stored as B-spline coefficients.
 *
 * Coefficients start at 0, end at 1 and never decrease, which makes the spline monotone
 * and pins gamma(0) = 0, gamma(1) = 1.
 */
struct Warp {
    SplineBasis basis;
    Eigen::VectorXd coefficients;

    void validate() const {
        constexpr double tol = 1e-12;
        if (coefficients.size() != basis.size()) throw InvalidWarp("coefficient count does not match basis");
        if (std::abs(coefficients(0)) > tol || std::abs(coefficients(coefficients.size() - 1) - 1) > tol) {
            throw InvalidWarp("coefficients must start at 0 and end at 1");
        }
        for (Eigen::Index k = 1; k < coefficients.size(); ++k) {
            if (coefficients(k) < coefficients(k - 1)) throw InvalidWarp("coefficients must be nondecreasing");
        }
    }

    static Warp identity(const SplineBasis& basis) {
        if (basis.degree() < 1) throw InvalidWarp("warps need degree >= 1");
        return Warp{basis, basis.greville()};
    }

    /**
     * Warp whose coefficient increments are the softmax of `log_increments` (length K-1).
     * Every such warp is strictly increasing.
     */
    static Warp from_log_increments(const SplineBasis& basis, const Eigen::VectorXd& log_increments) {
        const Eigen::Index K = basis.size();
        if (log_increments.size() != K - 1) throw InvalidWarp("need K-1 log-increments");
        const double mx = log_increments.maxCoeff();
        Eigen::VectorXd d = (log_increments.array() - mx).exp();
        d /= d.sum();
        Eigen::VectorXd c(K);
        c(0) = 0;
        for (Eigen::Index k = 1; k < K; ++k) c(k) = std::min(1.0, c(k - 1) + d(k - 1));
        c(K - 1) = 1;
        return Warp{basis, c};
    }

    /** Log-increments of the identity warp (logs of the Greville gaps). */
    static Eigen::VectorXd identity_log_increments(const SplineBasis& basis) {
        const Eigen::VectorXd g = basis.greville();
        Eigen::VectorXd out(g.size() - 1);
        for (Eigen::Index k = 0; k + 1 < g.size(); ++k) out(k) = std::log(g(k + 1) - g(k));
        return out;
    }
};

/** Warp values at arbitrary points, without the strictness check. */
inline std::vector<double> warp_values(const Warp& warp, std::span<const double> points) {
    const Eigen::VectorXd v = eval_basis(warp.basis, points) * warp.coefficients;
    std::vector<double> out(v.data(), v.data() + v.size());
    for (auto& x : out) x = std::clamp(x, 0.0, 1.0);
    return out;
}

/** gamma on the grid; throws `InvalidWarp` unless the result is strictly increasing with exact endpoints. */
inline std::vector<double> eval_warp(const Warp& warp, const Grid& grid) {
    warp.validate();
    std::vector<double> out = warp_values(warp, grid.points());
    out.front() = 0;
    out.back() = 1;
    for (std::size_t i = 1; i < out.size(); ++i) {
        if (!(out[i] > out[i - 1])) throw InvalidWarp("warp not strictly increasing on grid");
    }
    return out;
}

}

#endif
