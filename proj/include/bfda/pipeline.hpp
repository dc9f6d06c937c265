#ifndef BFDA_PIPELINE_HPP
#define BFDA_PIPELINE_HPP

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "core.hpp"
#include "error.hpp"
#include "fpca.hpp"
#include "inference.hpp"
#include "io.hpp"
#include "parallel.hpp"
#include "registration.hpp"
#include "synthgen.hpp"

/**
 * @file pipeline.hpp
 * @brief Per-stage orchestration (registration, FPCA, weight selection, tests) and artifact output.
 */

namespace bfda {

inline constexpr const char* version_string = "1.0.0";

using ordered_json = nlohmann::ordered_json;

struct PipelineConfig {
    std::string input;
    std::string out;
    std::vector<Delay> stages{std::begin(all_delays), std::end(all_delays)};
    RegistrationConfig registration;
    int components = 10;
    std::vector<double> d_grid = default_weight_grid();
    int permutations = 1000;
    double alpha = 0.05;
    std::uint64_t seed = 1;
    int iwt_degree = 3;
    bool plots = true;

    void validate() const {
        if (input.empty()) throw ConfigError("no input file given");
        if (!std::filesystem::is_regular_file(input)) throw ConfigError("input file '" + input + "' does not exist");
        if (out.empty()) throw ConfigError("no output directory given");
        if (stages.empty()) throw ConfigError("no stages selected");
        if (components < 1) throw ConfigError("components must be >= 1");
        if (d_grid.empty()) throw ConfigError("empty D grid");
        for (double d : d_grid) {
            if (!(d > 0) || !std::isfinite(d)) throw ConfigError("D grid values must be positive");
        }
        if (permutations < 1) throw ConfigError("permutations must be >= 1");
        if (!(alpha > 0 && alpha < 1)) throw ConfigError("alpha must lie in (0,1)");
        if (iwt_degree < 1) throw ConfigError("spline degree must be >= 1");
        registration.validate();
    }
};

/** "all" or a comma-separated list of delays in seconds. */
inline std::vector<Delay> parse_stages(const std::string& text) {
    if (text == "all") return {std::begin(all_delays), std::end(all_delays)};
    std::vector<Delay> out;
    for (const auto& f : io::split(text)) {
        try {
            std::size_t used = 0;
            const int d = std::stoi(f, &used);
            if (used != f.size()) throw ConfigError("");
            const Delay delay = parse_delay(d);
            if (std::find(out.begin(), out.end(), delay) == out.end()) out.push_back(delay);
        } catch (const std::exception&) {
            throw ConfigError("bad stage '" + f + "'; expected one of 0,2,4,8,16");
        }
    }
    if (out.empty()) throw ConfigError("no stages selected");
    std::sort(out.begin(), out.end(), [](Delay a, Delay b) { return seconds(a) < seconds(b); });
    return out;
}

/** "start:step:stop" (inclusive) or a comma-separated list. */
inline std::vector<double> parse_d_grid(const std::string& text) {
    try {
        const auto parts = io::split(text, ':');
        if (parts.size() == 3) {
            const double lo = io::parse_double(parts[0]), step = io::parse_double(parts[1]), hi = io::parse_double(parts[2]);
            if (!(step > 0) || !(hi >= lo)) throw ConfigError("bad D range '" + text + "'");
            std::vector<double> out;
            const long count = std::lround(std::floor((hi - lo) / step + 1e-9)) + 1;
            for (long i = 0; i < count; ++i) out.push_back(std::round((lo + static_cast<double>(i) * step) * 1e12) / 1e12);
            return out;
        }
        std::vector<double> out;
        for (const auto& f : io::split(text)) out.push_back(io::parse_double(f));
        if (out.empty()) throw ConfigError("empty D grid");
        return out;
    } catch (const IoError&) {
        throw ConfigError("bad D grid '" + text + "'");
    }
}

inline std::string stage_name(Delay d) { return "stage_" + std::to_string(seconds(d)); }

inline std::uint64_t stage_seed(std::uint64_t seed, Delay d) { return subject_seed(seed, 0x5a17ULL + static_cast<std::uint64_t>(seconds(d))); }

/**
 * @brief The curve sets of one stage on its common grid, as written to and read from `registration.csv`.
 */
struct StageCurves {
    Delay delay = Delay::D0;
    Grid grid;
    std::vector<std::string> subject_ids;
    std::vector<Group> labels;
    FunctionalSample unaligned_logit;
    FunctionalSample aligned_logit;
    Eigen::MatrixXd warps;
    FunctionalSample warp_clr;

    std::size_t size() const { return subject_ids.size(); }

    FunctionalSample unaligned_prob() const {
        FunctionalSample fs = unaligned_logit;
        fs.kind = SampleKind::Probability;
        fs.values = unaligned_logit.values.unaryExpr([](double v) { return inverse_logit(v); });
        return fs;
    }

    /** Unaligned logit, aligned logit, warp CLR. */
    std::vector<FunctionalSample> battery() const { return {unaligned_logit, aligned_logit, warp_clr}; }
};

inline StageCurves stage_curves(const RegistrationResult& reg) {
    StageCurves sc;
    sc.delay = reg.delay;
    sc.grid = reg.grid();
    sc.subject_ids = reg.subject_ids;
    sc.labels = reg.labels;
    sc.unaligned_logit = reg.unaligned_logit;
    sc.aligned_logit = reg.aligned_logit;
    sc.warps = warp_grid_values(reg);
    sc.warp_clr = warp_clr_sample(reg);
    return sc;
}

inline constexpr const char* stage_curves_header = "subject_id,group,delay,s,unaligned_logit,aligned_logit,warp,warp_clr";

inline std::string stage_curves_csv(const StageCurves& sc) {
    std::string out = std::string(stage_curves_header) + "\n";
    for (std::size_t i = 0; i < sc.size(); ++i) {
        const auto r = static_cast<Eigen::Index>(i);
        for (std::size_t j = 0; j < sc.grid.size(); ++j) {
            const auto c = static_cast<Eigen::Index>(j);
            out += sc.subject_ids[i] + ',' + to_string(sc.labels[i]) + ',' + std::to_string(seconds(sc.delay)) + ',' + io::num(sc.grid[j]) + ',' +
                   io::num(sc.unaligned_logit.values(r, c)) + ',' + io::num(sc.aligned_logit.values(r, c)) + ',' + io::num(sc.warps(r, c)) + ',' +
                   io::num(sc.warp_clr.values(r, c)) + '\n';
        }
    }
    return out;
}

inline StageCurves read_stage_curves(std::istream& in) {
    std::string line;
    if (!std::getline(in, line) || line != stage_curves_header) throw IoError("unexpected registration table header");
    struct Row {
        std::vector<double> s, u, a, w, e;
    };
    std::vector<std::string> ids;
    std::vector<Group> labels;
    std::vector<Row> rows;
    int delay = -1;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        const auto f = io::split(line);
        if (f.size() != 8) throw IoError("registration table line " + std::to_string(lineno) + ": expected 8 fields");
        if (ids.empty() || ids.back() != f[0]) {
            if (std::find(ids.begin(), ids.end(), f[0]) != ids.end()) throw IoError("rows of subject " + f[0] + " are not contiguous");
            ids.push_back(f[0]);
            labels.push_back(parse_group(f[1]));
            rows.emplace_back();
        }
        const int d = std::stoi(f[2]);
        if (delay >= 0 && d != delay) throw IoError("registration table mixes delay conditions");
        delay = d;
        auto& r = rows.back();
        r.s.push_back(io::parse_double(f[3]));
        r.u.push_back(io::parse_double(f[4]));
        r.a.push_back(io::parse_double(f[5]));
        r.w.push_back(io::parse_double(f[6]));
        r.e.push_back(io::parse_double(f[7]));
    }
    if (ids.empty()) throw EmptySample("registration table has no rows");
    StageCurves sc;
    sc.delay = parse_delay(delay);
    const std::size_t N = rows.front().s.size();
    if (N < 2) throw IoError("registration table grid has fewer than 2 points");
    sc.grid = Grid(N);
    sc.subject_ids = ids;
    sc.labels = labels;
    const auto n = static_cast<Eigen::Index>(ids.size());
    auto init = [&](FunctionalSample& fs, SampleKind kind) {
        fs.grid = sc.grid;
        fs.labels = labels;
        fs.kind = kind;
        fs.values.resize(n, static_cast<Eigen::Index>(N));
    };
    init(sc.unaligned_logit, SampleKind::UnalignedLogit);
    init(sc.aligned_logit, SampleKind::AlignedLogit);
    init(sc.warp_clr, SampleKind::WarpCLR);
    sc.warps.resize(n, static_cast<Eigen::Index>(N));
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto& r = rows[static_cast<std::size_t>(i)];
        if (r.s.size() != N) throw DomainMismatch("subject " + ids[static_cast<std::size_t>(i)] + " has a different grid");
        for (std::size_t j = 0; j < N; ++j) {
            if (std::abs(r.s[j] - sc.grid[j]) > 1e-12) throw DomainMismatch("registration table grid is not uniform on [0,1]");
            const auto c = static_cast<Eigen::Index>(j);
            sc.unaligned_logit.values(i, c) = r.u[j];
            sc.aligned_logit.values(i, c) = r.a[j];
            sc.warps(i, c) = r.w[j];
            sc.warp_clr.values(i, c) = r.e[j];
        }
    }
    return sc;
}

inline ordered_json registration_summary(const RegistrationResult& reg) {
    ordered_json j;
    const auto& c = reg.config;
    j["delay"] = seconds(reg.delay);
    j["config"] = {{"K_a", c.K_a},
                   {"K_p", c.K_p},
                   {"n_components", c.n_components},
                   {"max_outer_iters", c.max_outer_iters},
                   {"outer_tol", c.outer_tol},
                   {"inner_tol", c.inner_tol},
                   {"max_inner_iters", c.max_inner_iters},
                   {"grid_size", c.grid_size},
                   {"warp_max_iters", c.warp_max_iters},
                   {"warp_grad_tol", c.warp_grad_tol},
                   {"warp_ridge", c.warp_ridge},
                   {"warp_log_increment_bound", c.warp_log_increment_bound},
                   {"warp_selection", c.warp_selection}};
    j["subjects"] = reg.subject_ids.size();
    j["grid_size"] = reg.grid().size();
    const auto points = reg.grid().points();
    j["grid"] = std::vector<double>(points.begin(), points.end());
    auto basis_json = [](const SplineBasis& b) { return ordered_json{{"degree", b.degree()}, {"knots", b.knots()}}; };
    j["amplitude_basis"] = basis_json(reg.amplitude_basis);
    j["phase_basis"] = basis_json(c.phase_basis());
    ordered_json subjects = ordered_json::array();
    for (std::size_t i = 0; i < reg.subject_ids.size(); ++i) {
        const auto& a = reg.aligned_coefficients[i];
        const auto& w = reg.warps[i].coefficients;
        subjects.push_back({{"subject_id", reg.subject_ids[i]},
                            {"group", to_string(reg.labels[i])},
                            {"aligned_logit_coefficients", std::vector<double>(a.data(), a.data() + a.size())},
                            {"warp_coefficients", std::vector<double>(w.data(), w.data() + w.size())}});
    }
    j["subject_curves"] = subjects;
    j["converged"] = reg.converged;
    j["components"] = reg.components;
    j["loglik_trace"] = reg.loglik_trace;
    std::vector<std::string> flagged;
    for (std::size_t i = 0; i < reg.flagged.size(); ++i)
        if (reg.flagged[i]) flagged.push_back(reg.subject_ids[i]);
    j["flagged_subjects"] = flagged;
    j["events"] = reg.events;
    return j;
}

/** File name per artifact, relative to a stage directory. */
namespace artifact {
inline constexpr const char* registration = "registration.csv";
inline constexpr const char* registration_summary = "registration.json";
inline constexpr const char* weight_selection = "weight_selection.csv";
inline constexpr const char* eigensystem = "eigensystem.json";
inline constexpr const char* modes = "modes.csv";
inline constexpr const char* global_tests = "global_tests.csv";
inline constexpr const char* permutation_statistics = "permutation_statistics.csv";
inline constexpr const char* iwt = "iwt.csv";
inline constexpr const char* test_report = "test_report.json";
}

inline std::string dump(const ordered_json& j) { return j.dump(2) + "\n"; }

struct FpcaOutputs {
    int K = 0;
    WeightSelection selection;
    BivariateEigenSystem system;
    std::vector<ModesOfVariation> modes;
    std::vector<std::string> events;
};

/** Weight selection over `d_grid`, the eigen-system at the selected D, and modes of the first two components. */
inline FpcaOutputs run_fpca(const StageCurves& sc, int components, const std::vector<double>& d_grid) {
    FpcaOutputs out;
    const int n = static_cast<int>(sc.size());
    out.K = std::min(components, n - 1);
    if (out.K < 1) throw TruncationError("FPCA needs at least 2 subjects");
    if (out.K < components) out.events.push_back("components reduced from " + std::to_string(components) + " to n-1 = " + std::to_string(out.K));
    out.selection = select_weight(sc.aligned_logit, sc.warp_clr, sc.unaligned_prob(), out.K, d_grid);
    out.system = fpca_bivariate(sc.aligned_logit, sc.warp_clr, out.selection.D, out.K);
    for (int k = 1; k <= std::min(2, out.system.components()); ++k) out.modes.push_back(modes_of_variation(out.system, k, out.system.mean_phase));
    return out;
}

inline std::string weight_selection_csv(const WeightSelection& ws) {
    std::string out = "D,mise,excluded,selected\n";
    for (std::size_t c = 0; c < ws.candidates.size(); ++c) {
        out += io::num(ws.candidates[c]) + ',' + io::num(ws.mise[c]) + ',' + (ws.excluded[c] ? "1" : "0") + ',' + (ws.candidates[c] == ws.D ? "1" : "0") + '\n';
    }
    return out;
}

namespace detail {

inline ordered_json finite_or_null(double v) { return std::isfinite(v) ? ordered_json(v) : ordered_json(nullptr); }

inline ordered_json vec_json(const Eigen::VectorXd& v) {
    ordered_json a = ordered_json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(finite_or_null(v(i)));
    return a;
}

inline ordered_json columns_json(const Eigen::MatrixXd& m) {
    ordered_json a = ordered_json::array();
    for (Eigen::Index k = 0; k < m.cols(); ++k) a.push_back(vec_json(m.col(k)));
    return a;
}

}

inline ordered_json eigensystem_json(const FpcaOutputs& fo, const StageCurves& sc) {
    const auto& sys = fo.system;
    ordered_json j;
    j["delay"] = seconds(sc.delay);
    j["D"] = sys.D;
    j["components"] = sys.components();
    j["grid_size"] = sys.grid.size();
    j["total_variance"] = detail::finite_or_null(sys.total_variance);
    j["pve_defined"] = sys.pve_defined;
    j["eigenvalues"] = detail::vec_json(sys.eigenvalues);
    j["pve"] = detail::vec_json(sys.pve);
    j["mean_amplitude"] = detail::vec_json(sys.mean_amplitude);
    j["mean_phase"] = detail::vec_json(sys.mean_phase);
    j["amplitude_eigenfunctions"] = detail::columns_json(sys.amplitude_eigenfunctions);
    j["phase_eigenfunctions"] = detail::columns_json(sys.phase_eigenfunctions);
    ordered_json scores = ordered_json::array();
    for (std::size_t i = 0; i < sc.size(); ++i) {
        ordered_json s;
        s["subject_id"] = sc.subject_ids[i];
        s["group"] = to_string(sc.labels[i]);
        s["scores"] = detail::vec_json(sys.scores.row(static_cast<Eigen::Index>(i)).transpose());
        scores.push_back(s);
    }
    j["scores"] = scores;
    std::vector<std::string> events = fo.events;
    events.insert(events.end(), fo.selection.events.begin(), fo.selection.events.end());
    events.insert(events.end(), sys.events.begin(), sys.events.end());
    for (const auto& m : fo.modes) events.insert(events.end(), m.events.begin(), m.events.end());
    j["events"] = events;
    return j;
}

inline std::string modes_csv(const std::vector<ModesOfVariation>& modes) {
    std::string out =
        "component,s,eigenvalue,pve,mean_prob,amplitude_minus,amplitude_plus,phase_minus,phase_plus,joint_minus,joint_plus,warp_mean,warp_minus,warp_plus\n";
    for (const auto& m : modes) {
        for (std::size_t j = 0; j < m.grid.size(); ++j) {
            out += std::to_string(m.k) + ',' + io::num(m.grid[j]) + ',' + io::num(m.eigenvalue) + ',' + io::num(m.pve_k) + ',' + io::num(m.overall_mean_prob[j]) +
                   ',' + io::num(m.amplitude_minus[j]) + ',' + io::num(m.amplitude_plus[j]) + ',' + io::num(m.phase_minus[j]) + ',' +
                   io::num(m.phase_plus[j]) + ',' + io::num(m.joint_minus[j]) + ',' + io::num(m.joint_plus[j]) + ',' + io::num(m.warp_mean[j]) + ',' +
                   io::num(m.warp_minus[j]) + ',' + io::num(m.warp_plus[j]) + '\n';
        }
    }
    return out;
}

inline std::string global_tests_csv(const TestBattery& tb, const PermutationPlan& plan) {
    std::string out = "curve_set,T_observed,p_value,exceedances,B,seed\n";
    for (int s = 0; s < 3; ++s) {
        const auto& g = tb.global[s];
        out += std::string(to_string(all_curve_sets[s])) + ',' + io::num(g.T_observed) + ',' + io::num(g.p_value) + ',' + std::to_string(g.exceedances) + ',' +
               std::to_string(plan.B()) + ',' + std::to_string(plan.seed()) + '\n';
    }
    return out;
}

inline std::string permutation_statistics_csv(const TestBattery& tb) {
    std::string out = "curve_set,b,T\n";
    for (int s = 0; s < 3; ++s) {
        const auto& g = tb.global[s];
        for (std::size_t b = 0; b < g.T_permuted.size(); ++b) out += std::string(to_string(all_curve_sets[s])) + ',' + std::to_string(b) + ',' + io::num(g.T_permuted[b]) + '\n';
    }
    return out;
}

inline std::string iwt_csv(const TestBattery& tb) {
    std::string out = "curve_set,s,unadjusted,adjusted,significant,alpha\n";
    for (int s = 0; s < 3; ++s) {
        const auto& pf = tb.iwt[s];
        for (std::size_t j = 0; j < pf.grid.size(); ++j) {
            out += std::string(to_string(all_curve_sets[s])) + ',' + io::num(pf.grid[j]) + ',' + io::num(pf.unadjusted[j]) + ',' + io::num(pf.adjusted[j]) + ',' +
                   (pf.significant_mask[j] ? "1" : "0") + ',' + io::num(pf.alpha) + '\n';
        }
    }
    return out;
}

inline ordered_json test_report_json(const TestBattery& tb, const PermutationPlan& plan, Delay delay) {
    ordered_json j;
    j["delay"] = seconds(delay);
    j["B"] = plan.B();
    j["seed"] = plan.seed();
    j["alpha"] = tb.iwt[0].alpha;
    for (int s = 0; s < 3; ++s) {
        const auto& g = tb.global[s];
        const auto& pf = tb.iwt[s];
        ordered_json c;
        c["global"] = {{"T_observed", g.T_observed}, {"p_value", g.p_value}, {"exceedances", g.exceedances}};
        ordered_json iwt;
        iwt["grid"] = std::vector<double>(pf.grid.points().begin(), pf.grid.points().end());
        iwt["unadjusted"] = pf.unadjusted;
        iwt["adjusted"] = pf.adjusted;
        std::vector<int> mask(pf.significant_mask.begin(), pf.significant_mask.end());
        iwt["significant"] = mask;
        c["interval_wise"] = iwt;
        j[to_string(all_curve_sets[s])] = c;
    }
    return j;
}

/** Writes `content` to dir/name atomically and records it under `key` in `listing`. */
inline void emit(const std::filesystem::path& dir, const std::string& name, const std::string& content, ordered_json& listing, const std::string& key) {
    io::write_file_atomic(dir / name, content);
    listing[key] = name;
}

inline ordered_json write_registration_artifacts(const std::filesystem::path& dir, const RegistrationResult& reg, const StageCurves& sc) {
    ordered_json files;
    emit(dir, artifact::registration, stage_curves_csv(sc), files, "registration");
    emit(dir, artifact::registration_summary, dump(registration_summary(reg)), files, "registration_summary");
    return files;
}

inline ordered_json write_fpca_artifacts(const std::filesystem::path& dir, const FpcaOutputs& fo, const StageCurves& sc) {
    ordered_json files;
    emit(dir, artifact::weight_selection, weight_selection_csv(fo.selection), files, "weight_selection");
    emit(dir, artifact::eigensystem, dump(eigensystem_json(fo, sc)), files, "eigensystem");
    emit(dir, artifact::modes, modes_csv(fo.modes), files, "modes");
    return files;
}

inline ordered_json write_test_artifacts(const std::filesystem::path& dir, const TestBattery& tb, const PermutationPlan& plan, Delay delay) {
    ordered_json files;
    emit(dir, artifact::global_tests, global_tests_csv(tb, plan), files, "global_tests");
    emit(dir, artifact::permutation_statistics, permutation_statistics_csv(tb), files, "permutation_statistics");
    emit(dir, artifact::iwt, iwt_csv(tb), files, "iwt");
    emit(dir, artifact::test_report, dump(test_report_json(tb, plan, delay)), files, "test_report");
    return files;
}

struct StageOutcome {
    Delay delay = Delay::D0;
    bool ok = false;
    std::string error;
    ordered_json summary;
};

struct PipelineReport {
    std::vector<StageOutcome> stages;
    std::vector<std::string> plots;

    bool ok() const {
        return std::all_of(stages.begin(), stages.end(), [](const StageOutcome& s) { return s.ok; });
    }
};

/** Registration, FPCA and tests for one stage; artifacts go to out/stage_<d>/. */
inline ordered_json run_stage(const PipelineConfig& cfg, std::span<const TrialSeries> series, Delay delay) {
    const std::filesystem::path dir = std::filesystem::path(cfg.out) / stage_name(delay);
    if (series.empty()) throw EmptySample("no subjects recorded at delay " + std::to_string(seconds(delay)));
    const auto reg = register_curves(series, cfg.registration);
    const auto sc = stage_curves(reg);

    std::vector<int> counts(2, 0);
    for (auto g : sc.labels) ++counts[g == Group::L ? 0 : 1];
    if (counts[0] == 0 || counts[1] == 0) throw GroupError("stage " + std::to_string(seconds(delay)) + " has only one group");

    ordered_json summary;
    summary["delay"] = seconds(delay);
    summary["subjects"] = sc.size();
    summary["n_L"] = counts[0];
    summary["n_C"] = counts[1];
    summary["grid_size"] = sc.grid.size();
    ordered_json files = write_registration_artifacts(dir, reg, sc);

    const auto fo = run_fpca(sc, cfg.components, cfg.d_grid);
    files.update(write_fpca_artifacts(dir, fo, sc));
    summary["D_hat"] = fo.selection.D;
    summary["components"] = fo.K;

    const PermutationPlan plan(counts[0], counts[1], cfg.permutations, stage_seed(cfg.seed, delay));
    const auto tb = run_test_battery(sc.battery(), plan, cfg.alpha, cfg.iwt_degree);
    files.update(write_test_artifacts(dir, tb, plan, delay));

    ordered_json tests = ordered_json::array();
    for (const char* family : {"global", "interval_wise"}) {
        for (int s = 0; s < 3; ++s) {
            ordered_json t;
            t["family"] = family;
            t["curve_set"] = to_string(all_curve_sets[s]);
            t["file"] = std::string(family) == "global" ? artifact::global_tests : artifact::iwt;
            if (std::string(family) == "global") t["p_value"] = tb.global[s].p_value;
            tests.push_back(t);
        }
    }
    summary["files"] = files;
    summary["tests"] = tests;
    return summary;
}

inline ordered_json config_json(const PipelineConfig& cfg) {
    ordered_json c;
    c["input"] = cfg.input;
    std::vector<int> stages;
    for (auto d : cfg.stages) stages.push_back(seconds(d));
    c["stages"] = stages;
    c["seed"] = cfg.seed;
    c["permutations"] = cfg.permutations;
    c["alpha"] = cfg.alpha;
    c["d_grid"] = cfg.d_grid;
    c["components"] = cfg.components;
    c["iwt_degree"] = cfg.iwt_degree;
    c["plots"] = cfg.plots;
    const auto& r = cfg.registration;
    c["registration"] = {{"K_a", r.K_a},
                         {"K_p", r.K_p},
                         {"n_components", r.n_components},
                         {"max_outer_iters", r.max_outer_iters},
                         {"outer_tol", r.outer_tol},
                         {"inner_tol", r.inner_tol},
                         {"max_inner_iters", r.max_inner_iters},
                         {"seed", r.seed},
                         {"grid_size", r.grid_size},
                         {"warp_max_iters", r.warp_max_iters},
                         {"warp_grad_tol", r.warp_grad_tol},
                         {"warp_ridge", r.warp_ridge},
                         {"warp_log_increment_bound", r.warp_log_increment_bound},
                         {"warp_selection", r.warp_selection}};
    return c;
}

/** Manifest with config echo, input digest, per-stage status and a digest for every artifact. No timestamps. */
inline ordered_json build_manifest(const PipelineConfig& cfg, const PipelineReport& report) {
    const std::filesystem::path out(cfg.out);
    ordered_json m;
    m["tool"] = "bfda";
    m["version"] = version_string;
    m["eigen_version"] = std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." + std::to_string(EIGEN_MINOR_VERSION);
    m["seed"] = cfg.seed;
    m["config"] = config_json(cfg);
    m["input"] = {{"path", cfg.input}, {"sha256", io::sha256_file(cfg.input)}};
    ordered_json stages = ordered_json::array();
    std::map<std::string, std::string> digests;
    for (const auto& st : report.stages) {
        ordered_json s;
        s["delay"] = seconds(st.delay);
        s["status"] = st.ok ? "ok" : "failed";
        if (!st.ok) s["error"] = st.error;
        if (st.ok) {
            s.update(st.summary);
            for (const auto& [key, name] : st.summary["files"].items()) {
                const std::string rel = stage_name(st.delay) + "/" + name.get<std::string>();
                digests[rel] = io::sha256_file(out / rel);
            }
        }
        stages.push_back(s);
    }
    m["stages"] = stages;
    for (const auto& p : report.plots) digests[p] = io::sha256_file(out / p);
    m["plots"] = report.plots;
    m["files"] = digests;
    return m;
}

inline constexpr const char* manifest_name = "manifest.json";

/**
 * Runs every configured stage (concurrently) and writes the manifest. A failing stage is recorded and
 * does not stop the others. Plotting, if wanted, is passed in so this header stays free of rendering code.
 */
inline PipelineReport run_pipeline(const PipelineConfig& cfg,
                                   const std::function<std::vector<std::string>(const std::filesystem::path&)>& render = nullptr) {
    cfg.validate();
    std::ifstream in(cfg.input);
    if (!in) throw ConfigError("cannot open input '" + cfg.input + "'");
    const auto all = read_trials(in);

    PipelineReport report;
    report.stages.resize(cfg.stages.size());
    parallel_for(cfg.stages.size(), [&](std::size_t k) {
        auto& st = report.stages[k];
        st.delay = cfg.stages[k];
        std::vector<TrialSeries> series;
        for (const auto& s : all)
            if (s.delay == st.delay) series.push_back(s);
        try {
            std::filesystem::remove_all(std::filesystem::path(cfg.out) / stage_name(st.delay));
            st.summary = run_stage(cfg, series, st.delay);
            st.ok = true;
        } catch (const std::exception& e) {
            st.ok = false;
            st.error = e.what();
        }
    });

    const std::filesystem::path out(cfg.out);
    io::write_file_atomic(out / manifest_name, dump(build_manifest(cfg, report)));
    if (cfg.plots && render) {
        report.plots = render(out);
        io::write_file_atomic(out / manifest_name, dump(build_manifest(cfg, report)));
    }
    return report;
}

}

#endif
