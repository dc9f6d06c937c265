#ifndef BFDA_SYNTHGEN_HPP
#define BFDA_SYNTHGEN_HPP

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "core.hpp"
#include "error.hpp"
#include "transforms.hpp"

/**
 * @file synthgen.hpp
 * @brief Synthetic binary learning-curve cohorts with known latent curves and warps.
 *
 * Outcomes are drawn as Y_ij ~ Bernoulli(mu_i(gamma_i(s_ij))) where mu_i is the subject's
 * aligned probability curve and gamma_i its warp, at uniformly spaced trial times.
 */

namespace bfda {

/** SplitMix64 finalizer, used to derive independent per-subject seeds. */
inline std::uint64_t mix_seed(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t subject_seed(std::uint64_t seed, std::uint64_t subject) {
    return mix_seed(mix_seed(seed) ^ mix_seed(subject + 0x632be59bd9b4e019ULL));
}

struct TemplateSpec {
    enum class Kind { Sigmoid, Constant, Bump };
    Kind kind = Kind::Sigmoid;
    // Sigmoid: rises from `floor` at 0 to `ceiling` at 1, steepest at `midpoint`.
    double rate = 10, floor = 0.5, ceiling = 0.9, midpoint = 0.3;
    // Constant.
    double p = 0.7;
    // Bump: floor + height * exp(-((t - center) / width)^2 / 2).
    double center = 0.5, width = 0.1, height = 0.3;

    double operator()(double t) const {
        switch (kind) {
            case Kind::Constant:
                return p;
            case Kind::Bump:
                return floor + height * std::exp(-0.5 * std::pow((t - center) / width, 2));
            case Kind::Sigmoid: {
                const double lo = inverse_logit(-rate * midpoint), hi = inverse_logit(rate * (1 - midpoint));
                return floor + (ceiling - floor) * (inverse_logit(rate * (t - midpoint)) - lo) / (hi - lo);
            }
        }
        return p;
    }
};

struct WarpFamilySpec {
    enum class Kind { Identity, Power, LogisticTime };
    Kind kind = Kind::Identity;
    // Power: gamma(s) = s^a with log a uniform on [log a_min, log a_max].
    double a_min = 1, a_max = 1;
    // LogisticTime: normalized logistic of slope b, b uniform on [b_min, b_max]; b -> 0 is the identity.
    double b_min = 1, b_max = 1;
};

/**
 * @brief Full description of a synthetic cohort at one delay condition.
 */
struct ScenarioSpec {
    int n_L = 17;
    int n_C = 16;
    int trials_per_subject = 2000;
    /** Each subject gets an extra uniform 0..trials_jitter trials. */
    int trials_jitter = 0;
    Delay delay = Delay::D0;
    TemplateSpec curve;
    WarpFamilySpec warps;
    /** SD of a subject-level offset added to the logit of the template. */
    double amplitude_sd = 0;
    /** Added to the logit template of every L subject. */
    double amplitude_shift = 0;
    /** Added to log a (power) or b (logistic-time) of every L subject. */
    double phase_shift = 0;
    std::uint64_t seed = 1;

    void validate() const {
        if (n_L < 1 || n_C < 1) throw ConfigError("group sizes must be >= 1");
        if (trials_per_subject < 2 || trials_jitter < 0) throw ConfigError("need at least 2 trials per subject");
        if (warps.kind == WarpFamilySpec::Kind::Power && !(warps.a_min > 0 && warps.a_max >= warps.a_min)) {
            throw ConfigError("power warp exponents must satisfy 0 < a_min <= a_max");
        }
        if (warps.kind == WarpFamilySpec::Kind::LogisticTime && !(warps.b_min > 0 && warps.b_max >= warps.b_min)) {
            throw ConfigError("logistic-time slopes must satisfy 0 < b_min <= b_max");
        }
        for (double t = 0; t <= 1.0; t += 0.01) {
            const double m = curve(t);
            if (!(m > 0 && m < 1)) throw ConfigError("template probability leaves (0,1)");
        }
    }
};

/** Latent truth for one simulated subject. */
struct SubjectTruth {
    std::string subject_id;
    Group group;
    /** Warp parameter: a for power warps, b for logistic-time, 0 for identity. */
    double warp_parameter = 0;
    double amplitude_offset = 0;
    /** gamma_i on the reference grid. */
    std::vector<double> warp;
    /** Observed-time success probability mu_i(gamma_i(s)) on the reference grid. */
    std::vector<double> prob;
    /** Aligned (internal-time) success probability on the reference grid. */
    std::vector<double> aligned_prob;
};

struct GroundTruth {
    Grid grid;
    std::vector<SubjectTruth> subjects;
};

struct SyntheticCohort {
    std::vector<TrialSeries> series;
    GroundTruth truth;
};

inline double apply_warp_family(const WarpFamilySpec& fam, double parameter, double s) {
    switch (fam.kind) {
        case WarpFamilySpec::Kind::Identity:
            return s;
        case WarpFamilySpec::Kind::Power:
            return std::pow(s, parameter);
        case WarpFamilySpec::Kind::LogisticTime: {
            const double lo = inverse_logit(-parameter / 2), hi = inverse_logit(parameter / 2);
            return (inverse_logit(parameter * (s - 0.5)) - lo) / (hi - lo);
        }
    }
    return s;
}

/**
 * Draws a cohort. L subjects come first (ids L01, L02, ...), then C subjects.
 * Subject i uses its own random stream derived from (seed, i), so results do not depend on generation order.
 */
inline SyntheticCohort generate(const ScenarioSpec& spec, std::size_t reference_grid_size = 201) {
    spec.validate();
    SyntheticCohort out;
    out.truth.grid = Grid(reference_grid_size);
    const int n = spec.n_L + spec.n_C;

    for (int i = 0; i < n; ++i) {
        const bool is_L = i < spec.n_L;
        std::mt19937_64 rng(subject_seed(spec.seed, static_cast<std::uint64_t>(i)));
        std::uniform_real_distribution<double> unif(0.0, 1.0);
        std::normal_distribution<double> normal(0.0, 1.0);

        char id[16];
        std::snprintf(id, sizeof(id), "%s%02d", is_L ? "L" : "C", is_L ? i + 1 : i - spec.n_L + 1);

        SubjectTruth truth;
        truth.subject_id = id;
        truth.group = is_L ? Group::L : Group::C;

        const double u_warp = unif(rng);
        switch (spec.warps.kind) {
            case WarpFamilySpec::Kind::Identity:
                truth.warp_parameter = 0;
                break;
            case WarpFamilySpec::Kind::Power: {
                const double la = std::log(spec.warps.a_min) + u_warp * (std::log(spec.warps.a_max) - std::log(spec.warps.a_min));
                truth.warp_parameter = std::exp(la + (is_L ? spec.phase_shift : 0.0));
                break;
            }
            case WarpFamilySpec::Kind::LogisticTime:
                truth.warp_parameter = spec.warps.b_min + u_warp * (spec.warps.b_max - spec.warps.b_min) + (is_L ? spec.phase_shift : 0.0);
                if (truth.warp_parameter <= 0) throw ConfigError("phase shift makes a logistic-time slope nonpositive");
                break;
        }
        truth.amplitude_offset = spec.amplitude_sd * normal(rng) + (is_L ? spec.amplitude_shift : 0.0);

        auto aligned = [&](double t) { return inverse_logit(logit(spec.curve(t)) + truth.amplitude_offset); };
        auto observed = [&](double s) { return aligned(apply_warp_family(spec.warps, truth.warp_parameter, s)); };

        const auto& grid = out.truth.grid;
        for (std::size_t j = 0; j < grid.size(); ++j) {
            truth.warp.push_back(apply_warp_family(spec.warps, truth.warp_parameter, grid[j]));
            truth.prob.push_back(observed(grid[j]));
            truth.aligned_prob.push_back(aligned(grid[j]));
        }

        int trials = spec.trials_per_subject;
        if (spec.trials_jitter > 0) {
            trials += std::uniform_int_distribution<int>(0, spec.trials_jitter)(rng);
        }
        TrialSeries s;
        s.subject_id = truth.subject_id;
        s.group = truth.group;
        s.delay = spec.delay;
        s.times.resize(static_cast<std::size_t>(trials));
        s.outcomes.resize(static_cast<std::size_t>(trials));
        for (int j = 0; j < trials; ++j) {
            const double t = static_cast<double>(j) / (trials - 1);
            s.times[static_cast<std::size_t>(j)] = t;
            s.outcomes[static_cast<std::size_t>(j)] = unif(rng) < observed(t) ? 1 : 0;
        }
        s.times.back() = 1.0;
        out.series.push_back(std::move(s));
        out.truth.subjects.push_back(std::move(truth));
    }
    return out;
}

/**
 * Preset mirroring the layout of the motivating experiment: 17 lesion and 16 control subjects,
 * about 2022 acquisition trials rising from chance (0.5) to a 0.9 plateau, and shorter delay stages.
 */
inline ScenarioSpec experiment_spec(Delay delay, std::uint64_t seed) {
    ScenarioSpec spec;
    spec.n_L = 17;
    spec.n_C = 16;
    spec.delay = delay;
    spec.seed = mix_seed(seed + static_cast<std::uint64_t>(seconds(delay)));
    spec.warps.kind = WarpFamilySpec::Kind::Power;
    spec.warps.a_min = 0.75;
    spec.warps.a_max = 1.35;
    spec.amplitude_sd = 0.2;
    spec.curve.kind = TemplateSpec::Kind::Sigmoid;
    spec.curve.floor = 0.5;
    if (delay == Delay::D0) {
        spec.trials_per_subject = 2022;
        spec.trials_jitter = 60;
        spec.curve.ceiling = 0.9;
        spec.curve.rate = 9;
        spec.curve.midpoint = 0.3;
        spec.phase_shift = 0.25;
    } else {
        const int d = seconds(delay);
        spec.trials_per_subject = d == 2 ? 175 : d == 16 ? 164 : 170;
        spec.trials_jitter = 10;
        spec.curve.ceiling = 0.85 - 0.02 * d;
        spec.curve.rate = 6;
        spec.curve.midpoint = 0.4;
        spec.amplitude_shift = d <= 4 ? -0.3 : 0.0;
    }
    return spec;
}

/** Ground-truth sidecar as a long table: `subject_id,group,delay,s,warp,prob,aligned_prob`. */
inline void write_truth(std::ostream& out, const GroundTruth& truth, Delay delay, bool header = true) {
    if (header) out << "subject_id,group,delay,s,warp,prob,aligned_prob\n";
    char buf[160];
    for (const auto& subj : truth.subjects) {
        for (std::size_t j = 0; j < truth.grid.size(); ++j) {
            std::snprintf(buf, sizeof(buf), "%s,%s,%d,%.10g,%.10g,%.10g,%.10g\n", subj.subject_id.c_str(), to_string(subj.group),
                          seconds(delay), truth.grid[j], subj.warp[j], subj.prob[j], subj.aligned_prob[j]);
            out << buf;
        }
    }
}

/**
 * @brief Two-group functional sample drawn directly on a grid, for testing inference without registration.
 *
 * y_i(s) = a_i + e_i(s) + effect(s) [i in L], with a_i ~ N(0, intercept_var) and independent
 * e_i(s) ~ N(0, 1 - intercept_var), so the pointwise SD is 1 and effects are in SD units.
 */
struct CurveScenario {
    int n_L = 16;
    int n_C = 17;
    std::size_t grid_size = 101;
    double intercept_var = 0.6;
    std::function<double(double)> effect = [](double) { return 0.0; };
    std::uint64_t seed = 1;
};

inline FunctionalSample generate_curves(const CurveScenario& sc) {
    if (sc.n_L < 1 || sc.n_C < 1) throw ConfigError("group sizes must be >= 1");
    if (!(sc.intercept_var >= 0 && sc.intercept_var <= 1)) throw ConfigError("intercept variance must lie in [0,1]");
    FunctionalSample fs;
    fs.grid = Grid(sc.grid_size);
    fs.kind = SampleKind::AlignedLogit;
    const int n = sc.n_L + sc.n_C;
    fs.values.resize(n, static_cast<Eigen::Index>(sc.grid_size));
    std::normal_distribution<double> z(0.0, 1.0);
    const double sa = std::sqrt(sc.intercept_var), se = std::sqrt(1 - sc.intercept_var);
    for (int i = 0; i < n; ++i) {
        const bool in_L = i < sc.n_L;
        fs.labels.push_back(in_L ? Group::L : Group::C);
        std::mt19937_64 rng(subject_seed(sc.seed, static_cast<std::uint64_t>(i)));
        const double a = sa * z(rng);
        for (std::size_t j = 0; j < sc.grid_size; ++j) {
            const double s = fs.grid[j];
            fs.values(i, static_cast<Eigen::Index>(j)) = a + se * z(rng) + (in_L ? sc.effect(s) : 0.0);
        }
    }
    return fs;
}

}

#endif
