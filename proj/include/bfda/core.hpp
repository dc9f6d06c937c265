#ifndef BFDA_CORE_HPP
#define BFDA_CORE_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <istream>
#include <limits>
#include <map>
#include <ostream>
#include <sstream>
#include <span>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "error.hpp"

/**
 * @file core.hpp
 * @brief Containers for binary trial data and sampled curves, plus time normalization and grid interpolation.
 *
 * Everything here is a value type; once built, instances are never mutated by the library.
 * Trapezoidal quadrature on the working grid is the only quadrature rule used anywhere in the library.
 */

namespace bfda {

enum class Group { L, C };

inline const char* to_string(Group g) { return g == Group::L ? "L" : "C"; }

inline Group parse_group(const std::string& s) {
    if (s == "L") return Group::L;
    if (s == "C") return Group::C;
    throw InvalidSeries("unknown group '" + s + "'");
}

/** Delay condition in seconds; 0 is the acquisition stage. */
enum class Delay : int { D0 = 0, D2 = 2, D4 = 4, D8 = 8, D16 = 16 };

inline constexpr Delay all_delays[] = {Delay::D0, Delay::D2, Delay::D4, Delay::D8, Delay::D16};

inline int seconds(Delay d) { return static_cast<int>(d); }

inline Delay parse_delay(int seconds) {
    for (auto d : all_delays) {
        if (static_cast<int>(d) == seconds) return d;
    }
    throw InvalidSeries("unknown delay " + std::to_string(seconds));
}

/**
 * Affine map of strictly increasing observation times onto [0,1].
 * The first time goes to 0, the last to 1, and relative gaps are preserved.
 */
inline std::vector<double> normalize_times(std::span<const double> raw) {
    if (raw.size() < 2) {
        throw InvalidSeries("need at least 2 observation times");
    }
    for (std::size_t i = 1; i < raw.size(); ++i) {
        if (!(raw[i] > raw[i - 1])) {
            throw InvalidSeries("observation times must be strictly increasing");
        }
    }
    const double lo = raw.front(), span = raw.back() - raw.front();
    std::vector<double> out(raw.size());
    for (std::size_t i = 0; i < raw.size(); ++i) {
        out[i] = (raw[i] - lo) / span;
    }
    out.front() = 0;
    out.back() = 1;
    return out;
}

/**
 * One subject's ordered binary outcomes at one delay condition.
 */
struct TrialSeries {
    std::string subject_id;
    Group group = Group::L;
    Delay delay = Delay::D0;
    std::vector<double> times;
    std::vector<int> outcomes;

    /** Throws `InvalidSeries` unless the invariants hold. */
    void validate() const {
        if (times.size() < 2) throw InvalidSeries(subject_id + ": fewer than 2 trials");
        if (times.size() != outcomes.size()) throw InvalidSeries(subject_id + ": times/outcomes length mismatch");
        if (times.front() != 0.0 || times.back() != 1.0) throw InvalidSeries(subject_id + ": times must start at 0 and end at 1");
        for (std::size_t i = 1; i < times.size(); ++i) {
            if (!(times[i] > times[i - 1])) throw InvalidSeries(subject_id + ": times not strictly increasing");
        }
        for (int y : outcomes) {
            if (y != 0 && y != 1) throw InvalidSeries(subject_id + ": outcome outside {0,1}");
        }
    }

    std::size_t size() const { return times.size(); }
};

/** N_d, the smallest number of trials among the series recorded at `delay`. */
inline std::size_t common_grid_size(std::span<const TrialSeries> sample, Delay delay) {
    std::size_t best = std::numeric_limits<std::size_t>::max();
    bool found = false;
    for (const auto& s : sample) {
        if (s.delay == delay) {
            best = std::min(best, s.size());
            found = true;
        }
    }
    if (!found) {
        throw EmptySample("no series with delay " + std::to_string(seconds(delay)));
    }
    return best;
}

/**
 * Uniform grid on [0,1] that includes both endpoints.
 */
class Grid {
public:
    Grid() = default;

    explicit Grid(std::size_t n) {
        if (n < 2) throw DomainMismatch("grid needs at least 2 points");
        points_.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            points_[i] = static_cast<double>(i) / static_cast<double>(n - 1);
        }
        points_.back() = 1.0;
    }

    std::size_t size() const { return points_.size(); }
    double operator[](std::size_t i) const { return points_[i]; }
    double spacing() const { return 1.0 / static_cast<double>(points_.size() - 1); }
    std::span<const double> points() const { return points_; }

    /** Trapezoidal quadrature weights; they sum to 1. */
    Eigen::VectorXd weights() const {
        Eigen::VectorXd w = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(size()), spacing());
        w(0) *= 0.5;
        w(w.size() - 1) *= 0.5;
        return w;
    }

    bool operator==(const Grid& other) const { return points_ == other.points_; }

private:
    std::vector<double> points_;
};

/** Trapezoidal integral over [0,1] of values sampled on `grid`. */
template<class Values>
double trapz(const Values& values, const Grid& grid) {
    const std::size_t n = grid.size();
    double inner = 0;
    for (std::size_t i = 1; i + 1 < n; ++i) {
        inner += values[i];
    }
    return grid.spacing() * (inner + 0.5 * (values[0] + values[n - 1]));
}

/** Running trapezoidal integral from 0 to each grid point. */
inline std::vector<double> cumulative_trapz(std::span<const double> values, const Grid& grid) {
    std::vector<double> out(grid.size(), 0.0);
    const double h = grid.spacing();
    for (std::size_t i = 1; i < grid.size(); ++i) {
        out[i] = out[i - 1] + 0.5 * h * (values[i - 1] + values[i]);
    }
    return out;
}

/**
 * Piecewise-linear evaluation of (x, y) at `q`, with `x` strictly increasing.
 * Queries outside [x.front(), x.back()] are clamped to the end values.
 */
inline double linear_interpolate(std::span<const double> x, std::span<const double> y, double q) {
    if (q <= x.front()) return y.front();
    if (q >= x.back()) return y.back();
    auto it = std::upper_bound(x.begin(), x.end(), q);
    const std::size_t hi = static_cast<std::size_t>(it - x.begin());
    const std::size_t lo = hi - 1;
    const double t = (q - x[lo]) / (x[hi] - x[lo]);
    if (t == 0.0) return y[lo];
    return y[lo] + t * (y[hi] - y[lo]);
}

/** Uniform-grid specialization of `linear_interpolate`; O(1) per query. */
inline double interpolate_on_grid(const Grid& grid, std::span<const double> y, double q) {
    const std::size_t n = grid.size();
    if (q <= 0) return y.front();
    if (q >= 1) return y.back();
    const double pos = q * static_cast<double>(n - 1);
    std::size_t lo = std::min(static_cast<std::size_t>(pos), n - 2);
    const double t = pos - static_cast<double>(lo);
    if (t == 0.0) return y[lo];
    return y[lo] + t * (y[lo + 1] - y[lo]);
}

/**
 * Piecewise-linear resampling of a curve given at increasing abscissae spanning [0,1].
 */
inline std::vector<double> interpolate_to_grid(std::span<const double> abscissae, std::span<const double> values, const Grid& target) {
    constexpr double tol = 1e-12;
    if (abscissae.size() != values.size() || abscissae.size() < 2) {
        throw DomainMismatch("abscissae and values must have equal length >= 2");
    }
    if (std::abs(abscissae.front()) > tol || std::abs(abscissae.back() - 1) > tol) {
        throw DomainMismatch("source abscissae do not span [0,1]");
    }
    for (std::size_t i = 1; i < abscissae.size(); ++i) {
        if (!(abscissae[i] > abscissae[i - 1])) throw DomainMismatch("source abscissae not strictly increasing");
    }
    std::vector<double> out(target.size());
    for (std::size_t i = 0; i < target.size(); ++i) {
        out[i] = linear_interpolate(abscissae, values, target[i]);
    }
    return out;
}

enum class SampleKind { UnalignedLogit, AlignedLogit, WarpCLR, Probability };

inline const char* to_string(SampleKind k) {
    switch (k) {
        case SampleKind::UnalignedLogit: return "unaligned_logit";
        case SampleKind::AlignedLogit: return "aligned_logit";
        case SampleKind::WarpCLR: return "warp_clr";
        case SampleKind::Probability: return "probability";
    }
    return "?";
}

/**
 * A set of curves sampled on one shared grid, one row per curve.
 */
struct FunctionalSample {
    Grid grid;
    Eigen::MatrixXd values;
    std::vector<Group> labels;
    SampleKind kind = SampleKind::AlignedLogit;

    std::size_t size() const { return static_cast<std::size_t>(values.rows()); }

    std::vector<double> row(std::size_t i) const {
        std::vector<double> out(grid.size());
        for (std::size_t j = 0; j < out.size(); ++j) out[j] = values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
        return out;
    }

    void validate() const {
        if (static_cast<std::size_t>(values.cols()) != grid.size()) throw DomainMismatch("sample columns do not match grid");
        if (labels.size() != size()) throw DomainMismatch("label count does not match curve count");
        if (!values.allFinite()) throw DomainMismatch("non-finite curve values");
        if (kind == SampleKind::Probability) {
            if ((values.array() <= 0).any() || (values.array() >= 1).any()) {
                throw DomainMismatch("probability curves must lie in (0,1)");
            }
        }
        if (kind == SampleKind::WarpCLR) {
            for (Eigen::Index i = 0; i < values.rows(); ++i) {
                Eigen::VectorXd r = values.row(i).transpose();
                if (std::abs(trapz(r, grid)) > 1e-8) throw DomainMismatch("CLR curve does not integrate to zero");
            }
        }
    }
};

/**
 * Reads the trial ingestion table (`subject_id,group,delay,trial_index,outcome`).
 *
 * Rows are grouped by subject and delay and sorted by trial index; normalized times are the
 * affine image of the trial indices, so gaps in the index are carried into the time axis.
 */
inline std::vector<TrialSeries> read_trials(std::istream& in) {
    std::string line;
    if (!std::getline(in, line)) throw IoError("empty trial file");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != "subject_id,group,delay,trial_index,outcome") {
        throw IoError("unexpected header '" + line + "'");
    }

    struct Raw {
        Group group;
        std::vector<std::pair<double, int>> rows;
    };
    std::map<std::pair<std::string, int>, Raw> by_key;
    std::vector<std::pair<std::string, int>> order;

    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::stringstream ss(line);
        std::string f;
        while (std::getline(ss, f, ',')) fields.push_back(f);
        if (fields.size() != 5) throw IoError("line " + std::to_string(lineno) + ": expected 5 fields");

        Group g;
        int d, y;
        double idx;
        try {
            g = parse_group(fields[1]);
            d = static_cast<int>(parse_delay(std::stoi(fields[2])));
            idx = std::stod(fields[3]);
            y = std::stoi(fields[4]);
        } catch (const Error&) {
            throw IoError("line " + std::to_string(lineno) + ": bad group or delay");
        } catch (const std::exception&) {
            throw IoError("line " + std::to_string(lineno) + ": malformed number");
        }
        if (y != 0 && y != 1) throw IoError("line " + std::to_string(lineno) + ": outcome must be 0 or 1");

        auto key = std::make_pair(fields[0], d);
        auto it = by_key.find(key);
        if (it == by_key.end()) {
            it = by_key.emplace(key, Raw{g, {}}).first;
            order.push_back(key);
        } else if (it->second.group != g) {
            throw IoError("line " + std::to_string(lineno) + ": subject changes group");
        }
        it->second.rows.emplace_back(idx, y);
    }

    std::vector<TrialSeries> out;
    out.reserve(order.size());
    for (const auto& key : order) {
        auto& raw = by_key.at(key);
        std::stable_sort(raw.rows.begin(), raw.rows.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
        std::vector<double> idx;
        TrialSeries s;
        s.subject_id = key.first;
        s.group = raw.group;
        s.delay = static_cast<Delay>(key.second);
        for (const auto& [i, y] : raw.rows) {
            idx.push_back(i);
            s.outcomes.push_back(y);
        }
        s.times = normalize_times(idx);
        s.validate();
        out.push_back(std::move(s));
    }
    return out;
}

/** Writes series in the ingestion format, using 0-based trial indices. */
inline void write_trials(std::ostream& out, std::span<const TrialSeries> series) {
    out << "subject_id,group,delay,trial_index,outcome\n";
    for (const auto& s : series) {
        for (std::size_t j = 0; j < s.size(); ++j) {
            out << s.subject_id << ',' << to_string(s.group) << ',' << seconds(s.delay) << ',' << j << ',' << s.outcomes[j] << '\n';
        }
    }
}

}

#endif
