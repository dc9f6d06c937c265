#ifndef BFDA_INFERENCE_HPP
#define BFDA_INFERENCE_HPP

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <memory>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <Eigen/SparseQR>

#include "basis.hpp"
#include "core.hpp"
#include "error.hpp"
#include "parallel.hpp"
#include "registration.hpp"
#include "synthgen.hpp"

/**
 * @file inference.hpp
 * @brief Two-group permutation tests for functional samples: a global L2 test and interval-wise testing.
 */

namespace bfda {

/**
 * @brief Precomputed group reassignments, one row per permutation.
 *
 * Entry (b, i) is 1 when curve i is assigned to group L in replicate b. Every row has exactly n_L ones.
 */
class PermutationPlan {
public:
    PermutationPlan() = default;

    /** B random reassignments drawn from `seed`. */
    PermutationPlan(int n_L, int n_C, int B, std::uint64_t seed) : n_L_(n_L), n_C_(n_C), seed_(seed) {
        if (n_L < 1 || n_C < 1) throw GroupError("both groups must be nonempty");
        if (B < 1) throw ConfigError("number of permutations must be positive");
        const int n = n_L + n_C;
        table_.resize(B, n);
        std::mt19937_64 rng(mix_seed(seed));
        std::vector<int> idx(static_cast<std::size_t>(n));
        for (int b = 0; b < B; ++b) {
            for (int i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
            // Partial Fisher-Yates with an explicit bounded draw, so tables do not depend on the standard library.
            for (int i = 0; i < n_L; ++i) {
                const auto j = i + static_cast<int>(bounded(rng, static_cast<std::uint64_t>(n - i)));
                std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
            }
            table_.row(b).setZero();
            for (int i = 0; i < n_L; ++i) table_(b, idx[static_cast<std::size_t>(i)]) = 1;
        }
    }

    /** Plan with an explicit table (rows of 0/1). */
    PermutationPlan(int n_L, int n_C, Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic> table) : n_L_(n_L), n_C_(n_C), table_(std::move(table)) {
        if (n_L < 1 || n_C < 1) throw GroupError("both groups must be nonempty");
        if (table_.cols() != n_L + n_C || table_.rows() < 1) throw ConfigError("permutation table has the wrong shape");
        for (Eigen::Index b = 0; b < table_.rows(); ++b) {
            if (table_.row(b).cast<int>().sum() != n_L) throw ConfigError("permutation row does not assign n_L curves to L");
        }
    }

    /** All C(n, n_L) reassignments. */
    static PermutationPlan exhaustive(int n_L, int n_C) {
        const int n = n_L + n_C;
        if (n > 30) throw ConfigError("exhaustive enumeration is limited to 30 curves");
        std::vector<std::uint32_t> rows;
        for (std::uint32_t mask = 0; mask < (1u << n); ++mask) {
            if (__builtin_popcount(mask) == n_L) rows.push_back(mask);
        }
        Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic> table(static_cast<Eigen::Index>(rows.size()), n);
        for (std::size_t b = 0; b < rows.size(); ++b)
            for (int i = 0; i < n; ++i) table(static_cast<Eigen::Index>(b), i) = (rows[b] >> i) & 1u;
        return PermutationPlan(n_L, n_C, std::move(table));
    }

    int n_L() const { return n_L_; }
    int n_C() const { return n_C_; }
    int size() const { return n_L_ + n_C_; }
    int B() const { return static_cast<int>(table_.rows()); }
    std::uint64_t seed() const { return seed_; }
    bool in_L(int b, int i) const { return table_(b, i) != 0; }
    const Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic>& table() const { return table_; }

private:
    static std::uint64_t bounded(std::mt19937_64& rng, std::uint64_t range) {
        const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % range;
        std::uint64_t x;
        do {
            x = rng();
        } while (x >= limit);
        return x % range;
    }

    int n_L_ = 0, n_C_ = 0;
    std::uint64_t seed_ = 0;
    Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic> table_;
};

struct GlobalTestResult {
    double T_observed = 0;
    std::vector<double> T_permuted;
    /** Number of permuted statistics >= the observed one. */
    int exceedances = 0;
    double p_value = 1;
};

struct PValueFunction {
    Grid grid;
    std::vector<double> unadjusted;
    std::vector<double> adjusted;
    double alpha = 0.05;
    std::vector<bool> significant_mask;
    int B = 0;
    int coefficients = 0;
    /** Exceedance counts for coefficient intervals [a, e], stored row-major over a <= e. */
    std::vector<std::uint32_t> interval_counts;

    double interval_p(int a, int e) const {
        if (a < 0 || e < a || e >= coefficients) throw DomainMismatch("coefficient interval out of range");
        return static_cast<double>(interval_counts[interval_index(a, e)]) / B;
    }

    std::size_t interval_index(int a, int e) const {
        const auto K = static_cast<std::size_t>(coefficients), A = static_cast<std::size_t>(a);
        return A * K - (A * (A + 1)) / 2 + A + static_cast<std::size_t>(e - a);
    }
};

namespace detail {

/** Row indices of the two groups; throws GroupError when one of them is empty. */
inline void split_groups(const std::vector<Group>& labels, std::vector<int>& L, std::vector<int>& C) {
    L.clear();
    C.clear();
    for (std::size_t i = 0; i < labels.size(); ++i) (labels[i] == Group::L ? L : C).push_back(static_cast<int>(i));
    if (L.empty() || C.empty()) throw GroupError("two nonempty groups are required");
}

/** Per-column squared difference of group means, with the L mask given by `in_L`. */
template<class InL_>
Eigen::VectorXd squared_mean_difference(const Eigen::MatrixXd& values, int n_L, int n_C, InL_ in_L) {
    Eigen::VectorXd sum_L = Eigen::VectorXd::Zero(values.cols()), sum_C = sum_L;
    for (Eigen::Index i = 0; i < values.rows(); ++i) {
        if (in_L(static_cast<int>(i))) {
            sum_L += values.row(i).transpose();
        } else {
            sum_C += values.row(i).transpose();
        }
    }
    return (sum_L / n_L - sum_C / n_C).cwiseAbs2();
}

/** Left-to-right weighted sum; shared by every statistic so equal inputs give equal bits. */
inline double weighted_sum(const Eigen::VectorXd& w, const Eigen::VectorXd& v) {
    double acc = 0;
    for (Eigen::Index j = 0; j < v.size(); ++j) acc += w(j) * v(j);
    return acc;
}

inline void check_plan(const FunctionalSample& sample, const PermutationPlan& plan, std::vector<int>& L, std::vector<int>& C) {
    split_groups(sample.labels, L, C);
    if (plan.size() != static_cast<int>(sample.size()) || plan.n_L() != static_cast<int>(L.size())) {
        throw PairingError("permutation plan does not match the sample's group sizes");
    }
}

}

/**
 * Global test with T = int (mean_L - mean_C)^2 (trapezoidal) and p = #{T_b >= T} / B.
 */
inline GlobalTestResult global_test_weighted(const Eigen::MatrixXd& values, const std::vector<Group>& labels, const Eigen::VectorXd& weights,
                                             const PermutationPlan& plan) {
    std::vector<int> L, C;
    detail::split_groups(labels, L, C);
    if (plan.size() != static_cast<int>(values.rows()) || plan.n_L() != static_cast<int>(L.size())) {
        throw PairingError("permutation plan does not match the sample's group sizes");
    }
    const int nL = plan.n_L(), nC = plan.n_C();
    GlobalTestResult out;
    out.T_observed = detail::weighted_sum(weights, detail::squared_mean_difference(values, nL, nC, [&](int i) { return labels[static_cast<std::size_t>(i)] == Group::L; }));
    out.T_permuted.assign(static_cast<std::size_t>(plan.B()), 0.0);
    parallel_for(static_cast<std::size_t>(plan.B()), [&](std::size_t b) {
        const int row = static_cast<int>(b);
        out.T_permuted[b] = detail::weighted_sum(weights, detail::squared_mean_difference(values, nL, nC, [&](int i) { return plan.in_L(row, i); }));
    });
    for (double t : out.T_permuted) out.exceedances += t >= out.T_observed ? 1 : 0;
    out.p_value = static_cast<double>(out.exceedances) / plan.B();
    return out;
}

inline GlobalTestResult global_permutation_test(const FunctionalSample& sample, const PermutationPlan& plan) {
    sample.validate();
    return global_test_weighted(sample.values, sample.labels, sample.grid.weights(), plan);
}

/**
 * @brief Projection of grid curves onto a B-spline basis with K = N coefficients and knots on the grid.
 *
 * Interior knots are averages of `degree` consecutive grid points, so for odd degree on a uniform grid they
 * are grid points and the interpolation problem is well conditioned. For degree 1 the coefficients are the
 * grid values themselves.
 * `weights` holds int B_k, so that sum_k w_k c_k^2 is the coefficient-space analogue of int f^2.
 */
class SplineProjector {
public:
    SplineProjector(const Grid& grid, int degree) : grid_(grid), basis_(interpolation_basis(grid, degree)) {
        const int K = basis_.size();
        weights_.resize(K);
        const auto& t = basis_.knots();
        for (int k = 0; k < K; ++k) weights_(k) = (t[static_cast<std::size_t>(k + degree + 1)] - t[static_cast<std::size_t>(k)]) / (degree + 1);
        identity_ = degree == 1;
        if (identity_) {
            weights_ = grid.weights();
        } else {
            const Eigen::MatrixXd dense = eval_basis(basis_, grid);
            Eigen::SparseMatrix<double> B = dense.sparseView();
            B.makeCompressed();
            qr_.compute(B);
            if (qr_.info() != Eigen::Success || qr_.rank() < K) throw Underdetermined("spline design for interval-wise testing is rank deficient");
        }
    }

    static SplineBasis interpolation_basis(const Grid& grid, int degree) {
        const int N = static_cast<int>(grid.size());
        if (N < 4) throw DomainMismatch("interval-wise testing needs at least 4 grid points");
        if (degree < 1 || degree > N - 1) throw ConfigError("spline degree must lie in [1, N-1]");
        std::vector<double> interior(static_cast<std::size_t>(N - degree - 1));
        for (std::size_t j = 0; j < interior.size(); ++j) {
            double acc = 0;
            for (int r = 1; r <= degree; ++r) acc += grid[j + static_cast<std::size_t>(r)];
            interior[j] = acc / degree;
        }
        return SplineBasis(degree, std::move(interior));
    }

    const SplineBasis& basis() const { return basis_; }
    const Eigen::VectorXd& weights() const { return weights_; }

    /** Coefficients of each row of `values`, one row per curve. */
    Eigen::MatrixXd coefficients(const Eigen::MatrixXd& values) const {
        if (static_cast<std::size_t>(values.cols()) != grid_.size()) throw DomainMismatch("curves do not match projector grid");
        if (identity_) return values;
        Eigen::MatrixXd rhs = values.transpose();
        Eigen::MatrixXd sol = qr_.solve(rhs);
        return sol.transpose();
    }

private:
    Grid grid_;
    SplineBasis basis_;
    Eigen::VectorXd weights_;
    bool identity_ = false;
    Eigen::SparseQR<Eigen::SparseMatrix<double>, Eigen::COLAMDOrdering<int>> qr_;
};

/**
 * Interval-wise test on spline coefficients.
 *
 * For every contiguous coefficient interval I the statistic is sum_{k in I} w_k (mean_L - mean_C)_k^2,
 * tested with the shared label table. The unadjusted p-value at grid point j is that of the single
 * coefficient j; the adjusted p-value is the largest interval p-value over intervals containing j.
 */
inline PValueFunction interval_wise_test(const FunctionalSample& sample, const PermutationPlan& plan, const SplineProjector& projector, double alpha) {
    sample.validate();
    if (!(alpha > 0 && alpha < 1)) throw ConfigError("alpha must lie in (0,1)");
    std::vector<int> L, C;
    detail::check_plan(sample, plan, L, C);
    const Eigen::MatrixXd coef = projector.coefficients(sample.values);
    const Eigen::VectorXd& w = projector.weights();
    const int K = static_cast<int>(coef.cols());
    const int nL = plan.n_L(), nC = plan.n_C();

    auto prefix_of = [&](auto in_L) {
        const Eigen::VectorXd d = detail::squared_mean_difference(coef, nL, nC, in_L);
        std::vector<double> P(static_cast<std::size_t>(K) + 1, 0.0);
        for (int k = 0; k < K; ++k) P[static_cast<std::size_t>(k) + 1] = P[static_cast<std::size_t>(k)] + w(k) * d(k);
        return P;
    };

    PValueFunction out;
    out.grid = sample.grid;
    out.alpha = alpha;
    out.B = plan.B();
    out.coefficients = K;
    const std::size_t n_intervals = static_cast<std::size_t>(K) * static_cast<std::size_t>(K + 1) / 2;

    const auto P_obs = prefix_of([&](int i) { return sample.labels[static_cast<std::size_t>(i)] == Group::L; });
    std::vector<double> T_obs(n_intervals);
    {
        std::size_t idx = 0;
        for (int a = 0; a < K; ++a)
            for (int e = a; e < K; ++e) T_obs[idx++] = P_obs[static_cast<std::size_t>(e) + 1] - P_obs[static_cast<std::size_t>(a)];
    }

    // Per-worker integer counts, summed afterwards; the result does not depend on scheduling.
    const std::size_t workers = std::max<std::size_t>(1, std::min<std::size_t>(std::thread::hardware_concurrency(), static_cast<std::size_t>(plan.B())));
    std::vector<std::vector<std::uint32_t>> partial(workers, std::vector<std::uint32_t>(n_intervals, 0));
    parallel_for(workers, [&](std::size_t wkr) {
        auto& counts = partial[wkr];
        for (int b = static_cast<int>(wkr); b < plan.B(); b += static_cast<int>(workers)) {
            const auto P = prefix_of([&](int i) { return plan.in_L(b, i); });
            std::size_t idx = 0;
            for (int a = 0; a < K; ++a) {
                const double base = P[static_cast<std::size_t>(a)];
                for (int e = a; e < K; ++e, ++idx) counts[idx] += (P[static_cast<std::size_t>(e) + 1] - base) >= T_obs[idx] ? 1u : 0u;
            }
        }
    }, workers);
    out.interval_counts.assign(n_intervals, 0);
    for (const auto& part : partial)
        for (std::size_t i = 0; i < n_intervals; ++i) out.interval_counts[i] += part[i];

    // Adjusted count at k: max over a <= k <= e, via a running suffix maximum along each row.
    std::vector<std::uint32_t> adjusted(static_cast<std::size_t>(K), 0), unadjusted(static_cast<std::size_t>(K), 0);
    std::vector<std::uint32_t> suffix(static_cast<std::size_t>(K));
    std::size_t row_start = 0;
    for (int a = 0; a < K; ++a) {
        const std::size_t len = static_cast<std::size_t>(K - a);
        std::uint32_t run = 0;
        for (std::size_t off = len; off-- > 0;) {
            run = std::max(run, out.interval_counts[row_start + off]);
            suffix[static_cast<std::size_t>(a) + off] = run;
        }
        unadjusted[static_cast<std::size_t>(a)] = out.interval_counts[row_start];
        for (int k = a; k < K; ++k) adjusted[static_cast<std::size_t>(k)] = std::max(adjusted[static_cast<std::size_t>(k)], suffix[static_cast<std::size_t>(k)]);
        row_start += len;
    }

    const std::size_t N = sample.grid.size();
    out.unadjusted.resize(N);
    out.adjusted.resize(N);
    out.significant_mask.resize(N);
    for (std::size_t j = 0; j < N; ++j) {
        out.unadjusted[j] = static_cast<double>(unadjusted[j]) / plan.B();
        out.adjusted[j] = static_cast<double>(adjusted[j]) / plan.B();
        out.significant_mask[j] = out.adjusted[j] <= alpha;
    }
    return out;
}

inline PValueFunction interval_wise_test(const FunctionalSample& sample, const PermutationPlan& plan, int spline_degree = 3, double alpha = 0.05) {
    return interval_wise_test(sample, plan, SplineProjector(sample.grid, spline_degree), alpha);
}

/** The three curve sets tested per stage. */
enum class CurveSet { Unaligned, Aligned, Warps };

inline const char* to_string(CurveSet s) {
    switch (s) {
        case CurveSet::Unaligned:
            return "unaligned";
        case CurveSet::Aligned:
            return "aligned";
        case CurveSet::Warps:
            return "warps";
    }
    return "?";
}

inline constexpr CurveSet all_curve_sets[] = {CurveSet::Unaligned, CurveSet::Aligned, CurveSet::Warps};

struct TestBattery {
    GlobalTestResult global[3];
    PValueFunction iwt[3];
};

/** Unaligned logit, aligned logit and warp-CLR samples of a registration, in `all_curve_sets` order. */
inline std::vector<FunctionalSample> battery_samples(const RegistrationResult& reg) {
    return {reg.unaligned_logit, reg.aligned_logit, warp_clr_sample(reg)};
}

/** Global and interval-wise tests on three curve sets with one shared label table. */
inline TestBattery run_test_battery(const std::vector<FunctionalSample>& samples, const PermutationPlan& plan, double alpha = 0.05, int spline_degree = 3,
                                    bool with_iwt = true) {
    if (samples.size() != 3) throw ConfigError("the test battery takes exactly three curve sets");
    TestBattery out;
    std::unique_ptr<SplineProjector> projector;
    if (with_iwt) projector = std::make_unique<SplineProjector>(samples.front().grid, spline_degree);
    for (int s = 0; s < 3; ++s) {
        const auto& sample = samples[static_cast<std::size_t>(s)];
        if (!(sample.grid == samples.front().grid)) throw DomainMismatch("curve sets of one battery must share a grid");
        out.global[s] = global_permutation_test(sample, plan);
        if (with_iwt) out.iwt[s] = interval_wise_test(sample, plan, *projector, alpha);
    }
    return out;
}

inline TestBattery run_test_battery(const RegistrationResult& reg, const PermutationPlan& plan, double alpha = 0.05, int spline_degree = 3, bool with_iwt = true) {
    return run_test_battery(battery_samples(reg), plan, alpha, spline_degree, with_iwt);
}

}

#endif
