#ifndef BFDA_FPCA_HPP
#define BFDA_FPCA_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "core.hpp"
#include "error.hpp"
#include "parallel.hpp"
#include "transforms.hpp"

/**
 * @file fpca.hpp
 * @brief Univariate and D-weighted bivariate functional PCA on a common grid.
 *
 * Inner products are trapezoidal on the grid. The bivariate system pairs an amplitude curve f
 * (aligned logit) with a phase curve h (warp CLR) under <<(f,h),(g,k)>>_D = int f g + D int h k.
 */

namespace bfda {

struct UnivariateEigenSystem {
    Grid grid;
    Eigen::VectorXd mean;
    Eigen::VectorXd eigenvalues;
    /** N x K, one eigenfunction per column. */
    Eigen::MatrixXd eigenfunctions;
    /** n x K. */
    Eigen::MatrixXd scores;
    /** Share of the total variance per component; NaN when the total variance is zero. */
    Eigen::VectorXd pve;
    double total_variance = 0;
    bool pve_defined = true;

    int components() const { return static_cast<int>(eigenvalues.size()); }
};

struct BivariateEigenSystem {
    Grid grid;
    double D = 1;
    Eigen::VectorXd mean_amplitude;
    Eigen::VectorXd mean_phase;
    Eigen::VectorXd eigenvalues;
    /** psi_k in column k. */
    Eigen::MatrixXd amplitude_eigenfunctions;
    /** phi_k in column k. */
    Eigen::MatrixXd phase_eigenfunctions;
    Eigen::MatrixXd scores;
    Eigen::VectorXd pve;
    double total_variance = 0;
    bool pve_defined = true;
    std::vector<std::string> events;

    int components() const { return static_cast<int>(eigenvalues.size()); }
};

namespace detail {

/** All min(n-1, N) principal components of centred curves X (n x N) on `grid`. */
struct WeightedPca {
    Eigen::VectorXd eigenvalues;
    Eigen::MatrixXd eigenfunctions;
    Eigen::MatrixXd scores;
    double total = 0;
};

inline WeightedPca weighted_pca(const Eigen::MatrixXd& X, const Grid& grid) {
    const Eigen::Index n = X.rows();
    const Eigen::VectorXd w = grid.weights();
    const Eigen::VectorXd sw = w.cwiseSqrt();
    const Eigen::MatrixXd M = X * sw.asDiagonal() / std::sqrt(static_cast<double>(n - 1));
    Eigen::BDCSVD<Eigen::MatrixXd> svd(M, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const Eigen::VectorXd sv = svd.singularValues();
    WeightedPca out;
    out.total = sv.squaredNorm();
    const Eigen::Index r = std::min<Eigen::Index>(n - 1, sv.size());
    out.eigenvalues = sv.head(r).cwiseAbs2();
    out.eigenfunctions = sw.cwiseInverse().asDiagonal() * svd.matrixV().leftCols(r);
    out.scores = X * w.asDiagonal() * out.eigenfunctions;
    return out;
}

/** Variance totals below this fraction of the squared mean level count as zero. */
inline bool negligible_variance(double total, const Eigen::VectorXd& mean, const Grid& grid) {
    return total <= 1e-24 * (1 + grid.weights().dot(mean.cwiseAbs2()));
}

/** Sign rule: int psi >= 0; when that integral vanishes, the first nonnegligible coordinate is positive. */
inline double sign_of(const Eigen::VectorXd& psi, const Grid& grid) {
    const double integral = trapz(psi, grid);
    const double scale = psi.cwiseAbs().maxCoeff();
    if (std::abs(integral) > 1e-10 * std::max(1.0, scale)) return integral > 0 ? 1.0 : -1.0;
    for (Eigen::Index j = 0; j < psi.size(); ++j) {
        if (std::abs(psi(j)) > 1e-10 * scale) return psi(j) > 0 ? 1.0 : -1.0;
    }
    return 1.0;
}

inline Eigen::VectorXd column_mean(const Eigen::MatrixXd& values) {
    return values.colwise().mean().transpose();
}

}

/**
 * Univariate FPCA of the sample, keeping K components. Eigenfunctions are orthonormal under the
 * trapezoidal inner product and scores are xi_ik = int (f_i - mean) psi_k.
 */
inline UnivariateEigenSystem fpca_univariate(const FunctionalSample& sample, int K) {
    sample.validate();
    const Eigen::Index n = sample.values.rows(), N = sample.values.cols();
    if (n < 2) throw EmptySample("FPCA needs at least 2 curves");
    if (K < 1 || K > std::min<Eigen::Index>(n - 1, N)) {
        throw TruncationError("K = " + std::to_string(K) + " outside [1, min(n-1, N)]");
    }
    UnivariateEigenSystem sys;
    sys.grid = sample.grid;
    sys.mean = detail::column_mean(sample.values);
    const Eigen::MatrixXd X = sample.values.rowwise() - sys.mean.transpose();
    auto pca = detail::weighted_pca(X, sys.grid);
    sys.eigenvalues = pca.eigenvalues.head(K);
    sys.eigenfunctions = pca.eigenfunctions.leftCols(K);
    sys.scores = pca.scores.leftCols(K);
    for (int k = 0; k < K; ++k) {
        if (detail::sign_of(sys.eigenfunctions.col(k), sys.grid) < 0) {
            sys.eigenfunctions.col(k) *= -1;
            sys.scores.col(k) *= -1;
        }
    }
    sys.total_variance = pca.total;
    if (!detail::negligible_variance(pca.total, sys.mean, sys.grid)) {
        sys.pve = sys.eigenvalues / pca.total;
    } else {
        sys.pve = Eigen::VectorXd::Constant(K, std::numeric_limits<double>::quiet_NaN());
        sys.pve_defined = false;
    }
    return sys;
}

/** f_i approximated by mean + sum_{k<K} xi_ik psi_k, one row per subject. */
inline Eigen::MatrixXd reconstruct(const UnivariateEigenSystem& sys, int K) {
    if (K < 0 || K > sys.components()) throw TruncationError("reconstruction order exceeds computed components");
    Eigen::MatrixXd out = sys.scores.leftCols(K) * sys.eigenfunctions.leftCols(K).transpose();
    return out.rowwise() + sys.mean.transpose();
}

/**
 * D-weighted bivariate FPCA by the component-wise construction.
 *
 * Each block is expanded in all min(n-1, N) of its univariate components; the joint eigenproblem is then the
 * eigendecomposition of the covariance of the stacked scores [rho_f, sqrt(D) rho_h]. With eigenvector
 * (a, b), psi = sum a_m e_m and phi = sum b_m g_m / sqrt(D), which makes the pairs orthonormal under
 * the D-weighted inner product.
 */
inline BivariateEigenSystem fpca_bivariate(const FunctionalSample& amplitude, const FunctionalSample& phase, double D, int K) {
    amplitude.validate();
    phase.validate();
    if (!(amplitude.grid == phase.grid)) throw PairingError("amplitude and phase samples live on different grids");
    if (amplitude.values.rows() != phase.values.rows()) throw PairingError("amplitude and phase samples have different sizes");
    if (amplitude.labels != phase.labels) throw PairingError("amplitude and phase rows are not paired");
    if (!(D > 0) || !std::isfinite(D)) throw ConfigError("weight D must be positive");
    const Eigen::Index n = amplitude.values.rows();
    if (n < 2) throw EmptySample("FPCA needs at least 2 curves");

    BivariateEigenSystem sys;
    sys.grid = amplitude.grid;
    sys.D = D;
    sys.mean_amplitude = detail::column_mean(amplitude.values);
    sys.mean_phase = detail::column_mean(phase.values);
    const Eigen::MatrixXd Xf = amplitude.values.rowwise() - sys.mean_amplitude.transpose();
    const Eigen::MatrixXd Xh = phase.values.rowwise() - sys.mean_phase.transpose();
    const auto pf = detail::weighted_pca(Xf, sys.grid);
    const auto ph = detail::weighted_pca(Xh, sys.grid);
    const Eigen::Index Mf = pf.eigenvalues.size(), Mh = ph.eigenvalues.size();
    if (K < 1 || K > std::min<Eigen::Index>(n - 1, Mf + Mh)) {
        throw TruncationError("K = " + std::to_string(K) + " outside [1, min(n-1, " + std::to_string(Mf + Mh) + ")]");
    }

    const double rd = std::sqrt(D);
    Eigen::MatrixXd Z(n, Mf + Mh);
    Z << pf.scores, rd * ph.scores;
    const Eigen::MatrixXd S = Z.transpose() * Z / static_cast<double>(n - 1);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(S);
    const Eigen::Index M = Mf + Mh;

    sys.eigenvalues.resize(K);
    sys.amplitude_eigenfunctions.resize(amplitude.values.cols(), K);
    sys.phase_eigenfunctions.resize(amplitude.values.cols(), K);
    sys.scores.resize(n, K);
    bool clamped = false;
    for (int k = 0; k < K; ++k) {
        const Eigen::Index idx = M - 1 - k;
        double lam = es.eigenvalues()(idx);
        if (lam < 0) {
            lam = 0;
            clamped = true;
        }
        Eigen::VectorXd c = es.eigenvectors().col(idx);
        Eigen::VectorXd psi = pf.eigenfunctions * c.head(Mf);
        Eigen::VectorXd phi = ph.eigenfunctions * c.tail(Mh) / rd;
        const double sgn = psi.cwiseAbs().maxCoeff() > 1e-10 ? detail::sign_of(psi, sys.grid) : detail::sign_of(phi, sys.grid);
        c *= sgn;
        sys.eigenvalues(k) = lam;
        sys.amplitude_eigenfunctions.col(k) = sgn * psi;
        sys.phase_eigenfunctions.col(k) = sgn * phi;
        sys.scores.col(k) = Z * c;
    }
    if (clamped) sys.events.push_back("negative eigenvalue from rounding clamped to 0");
    sys.total_variance = S.trace();
    if (!detail::negligible_variance(sys.total_variance, sys.mean_amplitude, sys.grid)) {
        sys.pve = sys.eigenvalues / sys.total_variance;
    } else {
        sys.pve = Eigen::VectorXd::Constant(K, std::numeric_limits<double>::quiet_NaN());
        sys.pve_defined = false;
    }
    return sys;
}

/** Truncated reconstructions of both blocks. */
inline void reconstruct(const BivariateEigenSystem& sys, int K, Eigen::MatrixXd& amplitude, Eigen::MatrixXd& phase) {
    if (K < 0 || K > sys.components()) throw TruncationError("reconstruction order exceeds computed components");
    amplitude = (sys.scores.leftCols(K) * sys.amplitude_eigenfunctions.leftCols(K).transpose()).rowwise() + sys.mean_amplitude.transpose();
    phase = (sys.scores.leftCols(K) * sys.phase_eigenfunctions.leftCols(K).transpose()).rowwise() + sys.mean_phase.transpose();
}

namespace detail {

/** (f o gamma) by linear interpolation of f on the grid. */
inline Eigen::VectorXd compose_on_grid(const Grid& grid, const Eigen::VectorXd& f, std::span<const double> gamma) {
    Eigen::VectorXd out(static_cast<Eigen::Index>(gamma.size()));
    const std::span<const double> fs(f.data(), static_cast<std::size_t>(f.size()));
    for (std::size_t j = 0; j < gamma.size(); ++j) out(static_cast<Eigen::Index>(j)) = interpolate_on_grid(grid, fs, gamma[j]);
    return out;
}

inline std::vector<double> to_std(const Eigen::VectorXd& v) {
    return std::vector<double>(v.data(), v.data() + v.size());
}

inline std::vector<double> probability(const Eigen::VectorXd& nu) {
    const double b = logit_bound();
    std::vector<double> out(static_cast<std::size_t>(nu.size()));
    for (Eigen::Index j = 0; j < nu.size(); ++j) out[static_cast<std::size_t>(j)] = inverse_logit(std::clamp(nu(j), -b, b));
    return out;
}

}

struct WeightSelection {
    double D = 0;
    std::vector<double> candidates;
    /** MISE per candidate; NaN for excluded candidates. */
    std::vector<double> mise;
    std::vector<bool> excluded;
    std::vector<std::string> events;
};

/** Default candidate grid 0.1, 0.2, ..., 5.0. */
inline std::vector<double> default_weight_grid() {
    std::vector<double> out;
    for (int i = 1; i <= 50; ++i) out.push_back(i / 10.0);
    return out;
}

/**
 * MISE of the K-term bivariate reconstruction for one weight: reconstructed phase goes back through
 * clr_inverse, the reconstructed aligned logit is composed with it, and the result is compared with `target`.
 * Returns NaN if the exponent clamp of clr_inverse fired.
 */
inline double reconstruction_mise(const BivariateEigenSystem& sys, int K, const FunctionalSample& target) {
    Eigen::MatrixXd amp, ph;
    reconstruct(sys, K, amp, ph);
    const auto& grid = sys.grid;
    const Eigen::VectorXd w = grid.weights();
    double total = 0;
    for (Eigen::Index i = 0; i < amp.rows(); ++i) {
        TransformDiagnostics diag;
        const auto gamma = clr_inverse(ClrCurve{grid, detail::to_std(ph.row(i).transpose())}, &diag);
        if (diag.exp_clamped) return std::numeric_limits<double>::quiet_NaN();
        const Eigen::VectorXd nu = detail::compose_on_grid(grid, amp.row(i).transpose(), gamma);
        const auto mu = detail::probability(nu);
        double ise = 0;
        for (Eigen::Index j = 0; j < nu.size(); ++j) {
            const double d = mu[static_cast<std::size_t>(j)] - target.values(i, j);
            ise += w(j) * d * d;
        }
        total += ise;
    }
    return total / static_cast<double>(amp.rows());
}

/**
 * Grid search for the weight D minimizing the reconstruction MISE against the unaligned probability curves.
 * Ties within 1e-9 relative go to the smallest candidate.
 */
inline WeightSelection select_weight(const FunctionalSample& aligned_logit, const FunctionalSample& warp_clr, const FunctionalSample& unaligned_prob, int K,
                                     std::vector<double> candidates = default_weight_grid()) {
    if (candidates.empty()) throw ConfigError("empty weight grid");
    for (double d : candidates) {
        if (!(d > 0) || !std::isfinite(d)) throw ConfigError("weight candidates must be positive");
    }
    if (!(unaligned_prob.grid == aligned_logit.grid) || unaligned_prob.values.rows() != aligned_logit.values.rows()) {
        throw PairingError("MISE target does not match the curves");
    }
    std::sort(candidates.begin(), candidates.end());
    WeightSelection out;
    out.candidates = candidates;
    out.mise.assign(candidates.size(), std::numeric_limits<double>::quiet_NaN());
    out.excluded.assign(candidates.size(), false);
    std::vector<std::string> errors(candidates.size());
    parallel_for(candidates.size(), [&](std::size_t c) {
        const auto sys = fpca_bivariate(aligned_logit, warp_clr, candidates[c], K);
        out.mise[c] = reconstruction_mise(sys, K, unaligned_prob);
    });
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < candidates.size(); ++c) {
        if (!std::isfinite(out.mise[c])) {
            out.excluded[c] = true;
            out.events.push_back("D = " + std::to_string(candidates[c]) + " excluded: reconstruction overflow");
        } else {
            best = std::min(best, out.mise[c]);
        }
    }
    if (!std::isfinite(best)) throw DomainMismatch("every weight candidate overflowed");
    const double tol = 1e-9 * std::max(1.0, best);
    for (std::size_t c = 0; c < candidates.size(); ++c) {
        if (!out.excluded[c] && out.mise[c] <= best + tol) {
            out.D = candidates[c];
            break;
        }
    }
    return out;
}

struct ModesOfVariation {
    int k = 1;
    Grid grid;
    double eigenvalue = 0;
    double pve_k = 0;
    std::vector<double> overall_mean_prob;
    std::vector<double> amplitude_minus, amplitude_plus;
    std::vector<double> phase_minus, phase_plus;
    std::vector<double> joint_minus, joint_plus;
    /** gamma-bar and the perturbed warps gamma-+_k. */
    std::vector<double> warp_mean, warp_minus, warp_plus;
    std::vector<std::string> events;
};

/**
 * Modes of variation of component k (1-based) at half-width 2 sqrt(lambda_k), mapped to probability curves.
 * Amplitude modes perturb the mean aligned logit and compose with the mean warp; phase modes perturb the
 * mean warp CLR; joint modes perturb both.
 */
inline ModesOfVariation modes_of_variation(const BivariateEigenSystem& sys, int k, const Eigen::VectorXd& mean_warp_clr) {
    if (k < 1 || k > sys.components()) throw TruncationError("mode index outside computed components");
    const auto& grid = sys.grid;
    if (static_cast<std::size_t>(mean_warp_clr.size()) != grid.size()) throw DomainMismatch("mean warp CLR does not match grid");
    ModesOfVariation m;
    m.k = k;
    m.grid = grid;
    double lam = sys.eigenvalues(k - 1);
    if (lam < 0) {
        m.events.push_back("negative eigenvalue clamped to 0");
        lam = 0;
    }
    m.eigenvalue = lam;
    m.pve_k = sys.pve_defined ? sys.pve(k - 1) : std::numeric_limits<double>::quiet_NaN();
    const double h = 2 * std::sqrt(lam);
    const Eigen::VectorXd psi = sys.amplitude_eigenfunctions.col(k - 1);
    const Eigen::VectorXd phi = sys.phase_eigenfunctions.col(k - 1);
    const Eigen::VectorXd& nu = sys.mean_amplitude;

    TransformDiagnostics diag;
    auto warp_of = [&](const Eigen::VectorXd& eta) { return clr_inverse(ClrCurve{grid, detail::to_std(eta)}, &diag); };
    m.warp_mean = warp_of(mean_warp_clr);
    m.warp_plus = warp_of(mean_warp_clr + h * phi);
    m.warp_minus = warp_of(mean_warp_clr - h * phi);
    if (diag.exp_clamped) m.events.push_back("exponent clamp fired while inverting perturbed warps");

    auto curve = [&](const Eigen::VectorXd& f, const std::vector<double>& gamma) { return detail::probability(detail::compose_on_grid(grid, f, gamma)); };
    m.overall_mean_prob = curve(nu, m.warp_mean);
    m.amplitude_plus = curve(nu + h * psi, m.warp_mean);
    m.amplitude_minus = curve(nu - h * psi, m.warp_mean);
    m.phase_plus = curve(nu, m.warp_plus);
    m.phase_minus = curve(nu, m.warp_minus);
    m.joint_plus = curve(nu + h * psi, m.warp_plus);
    m.joint_minus = curve(nu - h * psi, m.warp_minus);
    return m;
}

}

#endif
