#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <spdlog/cfg/env.h>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "bfda/pipeline.hpp"
#include "bfda/plot.hpp"
#include "bfda/synthgen.hpp"

namespace fs = std::filesystem;
using namespace bfda;

namespace {

enum Exit { ok = 0, stage_failure = 1, config_error = 2 };

struct Options {
    std::string input, out, truth;
    std::string stages = "all";
    std::string d_grid = "0.1:0.1:5.0";
    std::uint64_t seed = 1;
    int permutations = 1000;
    double alpha = 0.05;
    int ka = 4, kp = 4;
    int components = 10;
    int iwt_degree = 3;
    bool no_plots = false;
    std::string config;
    int n_L = 17, n_C = 16, trials = 0;
};

void add_config(CLI::App* app, std::string& path) { app->add_option("--config", path, "Flat key = value file; command-line flags take precedence"); }

/** Fills options of `app` that were not given on the command line from a flat key = value file. */
void apply_config(CLI::App* app, const std::string& path) {
    std::vector<CLI::ConfigItem> items;
    try {
        items = CLI::ConfigINI().from_file(path);
    } catch (const CLI::Error& e) {
        throw ConfigError("cannot read config '" + path + "': " + e.what());
    }
    for (const auto& item : items) {
        if (item.name == "++" || item.name == "--") continue;
        if (!item.parents.empty()) throw ConfigError("config '" + path + "': sections are not supported (" + item.fullname() + ")");
        auto* opt = app->get_option_no_throw("--" + item.name);
        if (opt == nullptr || item.name == "config") throw ConfigError("config '" + path + "': unknown key '" + item.name + "'");
        if (opt->count() > 0) continue;
        try {
            for (const auto& v : item.inputs) opt->add_result(v);
            opt->run_callback();
        } catch (const CLI::Error& e) {
            throw ConfigError("config '" + path + "': bad value for '" + item.name + "': " + e.what());
        }
    }
}

PipelineConfig to_config(const Options& o) {
    PipelineConfig cfg;
    cfg.input = o.input;
    cfg.out = o.out;
    cfg.stages = parse_stages(o.stages);
    cfg.d_grid = parse_d_grid(o.d_grid);
    cfg.seed = o.seed;
    cfg.permutations = o.permutations;
    cfg.alpha = o.alpha;
    cfg.components = o.components;
    cfg.iwt_degree = o.iwt_degree;
    cfg.plots = !o.no_plots;
    cfg.registration.K_a = o.ka;
    cfg.registration.K_p = o.kp;
    cfg.registration.seed = o.seed;
    return cfg;
}

std::vector<TrialSeries> load_trials(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open input '" + path + "'");
    return read_trials(in);
}

StageCurves load_curves(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open input '" + path + "'");
    return read_stage_curves(in);
}

int cmd_simulate(const Options& o) {
    if (o.out.empty()) throw ConfigError("--out is required");
    std::ostringstream trials, truth;
    bool header = true;
    for (auto d : parse_stages(o.stages)) {
        auto spec = experiment_spec(d, o.seed);
        spec.n_L = o.n_L;
        spec.n_C = o.n_C;
        if (o.trials > 0) spec.trials_per_subject = o.trials;
        spec.validate();
        const auto cohort = generate(spec);
        std::ostringstream part;
        write_trials(part, cohort.series);
        std::string text = part.str();
        if (!header) text.erase(0, text.find('\n') + 1);
        trials << text;
        write_truth(truth, cohort.truth, d, header);
        header = false;
        spdlog::info("simulated delay {}: {} subjects", seconds(d), cohort.series.size());
    }
    io::write_file_atomic(o.out, trials.str());
    if (!o.truth.empty()) io::write_file_atomic(o.truth, truth.str());
    return ok;
}

int cmd_register(const Options& o) {
    if (o.out.empty()) throw ConfigError("--out is required");
    const auto cfg = to_config(o);
    cfg.registration.validate();
    const auto all = load_trials(o.input);
    int status = ok;
    for (auto d : cfg.stages) {
        std::vector<TrialSeries> series;
        for (const auto& s : all)
            if (s.delay == d) series.push_back(s);
        try {
            if (series.empty()) throw EmptySample("no subjects at this delay");
            const auto reg = register_curves(series, cfg.registration);
            write_registration_artifacts(fs::path(o.out) / stage_name(d), reg, stage_curves(reg));
            spdlog::info("delay {}: registered {} subjects, converged = {}", seconds(d), series.size(), reg.converged);
        } catch (const Error& e) {
            spdlog::error("delay {}: {}", seconds(d), e.what());
            status = stage_failure;
        }
    }
    return status;
}

int cmd_fpca(const Options& o) {
    if (o.out.empty()) throw ConfigError("--out is required");
    const auto grid = parse_d_grid(o.d_grid);
    if (o.components < 1) throw ConfigError("components must be >= 1");
    const auto sc = load_curves(o.input);
    const auto fo = run_fpca(sc, o.components, grid);
    write_fpca_artifacts(o.out, fo, sc);
    spdlog::info("selected D = {} with K = {}", fo.selection.D, fo.K);
    return ok;
}

int cmd_test(const Options& o) {
    if (o.out.empty()) throw ConfigError("--out is required");
    if (o.permutations < 1) throw ConfigError("permutations must be >= 1");
    const auto sc = load_curves(o.input);
    int nL = 0;
    for (auto g : sc.labels) nL += g == Group::L ? 1 : 0;
    const int nC = static_cast<int>(sc.size()) - nL;
    const PermutationPlan plan(nL, nC, o.permutations, stage_seed(o.seed, sc.delay));
    const auto tb = run_test_battery(sc.battery(), plan, o.alpha, o.iwt_degree);
    write_test_artifacts(o.out, tb, plan, sc.delay);
    for (int s = 0; s < 3; ++s) spdlog::info("{}: T = {:.6g}, p = {}", to_string(all_curve_sets[s]), tb.global[s].T_observed, tb.global[s].p_value);
    return ok;
}

int cmd_pipeline(const Options& o) {
    const auto cfg = to_config(o);
    const auto report = run_pipeline(cfg, [](const fs::path& root) { return plot::render_plots(root); });
    for (const auto& st : report.stages) {
        if (st.ok) {
            spdlog::info("delay {}: done, D = {}", seconds(st.delay), st.summary["D_hat"].get<double>());
        } else {
            spdlog::error("delay {}: {}", seconds(st.delay), st.error);
        }
    }
    return report.ok() ? ok : stage_failure;
}

int cmd_plot(const Options& o) {
    for (const auto& f : plot::render_plots(o.input)) spdlog::info("wrote {}", f);
    return ok;
}

}

int main(int argc, char** argv) {
    auto logger = spdlog::stderr_color_mt("bfda");
    spdlog::set_default_logger(logger);
    spdlog::set_pattern("[%l] %v");
    spdlog::cfg::load_env_levels();

    CLI::App app{"Registration, FPCA and permutation inference for binary learning curves"};
    app.require_subcommand(1);
    Options o;

    auto* sim = app.add_subcommand("simulate", "Write a synthetic trial file");
    sim->add_option("--out", o.out, "Trial file to write");
    sim->add_option("--truth", o.truth, "Ground-truth sidecar to write");
    sim->add_option("--seed", o.seed);
    sim->add_option("--stages", o.stages, "all or e.g. 0,2,4");
    sim->add_option("--n-l", o.n_L, "Lesion group size");
    sim->add_option("--n-c", o.n_C, "Control group size");
    sim->add_option("--trials", o.trials, "Trials per subject (0 keeps the stage default)");
    add_config(sim, o.config);

    auto* reg = app.add_subcommand("register", "Register every selected stage of a trial file");
    reg->add_option("--input", o.input);
    reg->add_option("--out", o.out);
    reg->add_option("--stages", o.stages);
    reg->add_option("--seed", o.seed);
    reg->add_option("--ka", o.ka, "Amplitude basis size");
    reg->add_option("--kp", o.kp, "Warp basis size");
    add_config(reg, o.config);

    auto* fpca = app.add_subcommand("fpca", "Weight selection and bivariate FPCA from a registration table");
    fpca->add_option("--input", o.input, "registration.csv");
    fpca->add_option("--out", o.out);
    fpca->add_option("--components", o.components);
    fpca->add_option("--d-grid", o.d_grid, "start:step:stop or a comma list");
    add_config(fpca, o.config);

    auto* test = app.add_subcommand("test", "Global and interval-wise permutation tests from a registration table");
    test->add_option("--input", o.input, "registration.csv");
    test->add_option("--out", o.out);
    test->add_option("--seed", o.seed);
    test->add_option("--permutations", o.permutations);
    test->add_option("--alpha", o.alpha);
    test->add_option("--iwt-degree", o.iwt_degree);
    add_config(test, o.config);

    auto* pipe = app.add_subcommand("pipeline", "Run every stage end to end");
    pipe->add_option("--input", o.input, "Trial file");
    pipe->add_option("--out", o.out, "Output directory");
    pipe->add_option("--stages", o.stages, "all or e.g. 0,2,4");
    pipe->add_option("--seed", o.seed, "Master seed for permutation tables");
    pipe->add_option("--permutations", o.permutations, "Relabellings per test");
    pipe->add_option("--alpha", o.alpha, "IWT significance level");
    pipe->add_option("--d-grid", o.d_grid, "start:step:stop or a comma list");
    pipe->add_option("--ka", o.ka, "Amplitude basis size");
    pipe->add_option("--kp", o.kp, "Warp basis size");
    pipe->add_option("--components", o.components, "Bivariate FPCA components");
    pipe->add_option("--iwt-degree", o.iwt_degree, "Spline degree of the IWT projection");
    pipe->add_flag("--no-plots", o.no_plots, "Skip SVG rendering");
    add_config(pipe, o.config);

    auto* plt = app.add_subcommand("plot", "Render SVG figures from a pipeline output directory");
    plt->add_option("--input", o.input, "Pipeline output directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? ok : config_error;
    }

    try {
        for (auto* sub : app.get_subcommands())
            if (!o.config.empty()) apply_config(sub, o.config);
        if (*sim) return cmd_simulate(o);
        if (*reg) return cmd_register(o);
        if (*fpca) return cmd_fpca(o);
        if (*test) return cmd_test(o);
        if (*pipe) return cmd_pipeline(o);
        if (*plt) return cmd_plot(o);
    } catch (const ConfigError& e) {
        spdlog::error("{}", e.what());
        return config_error;
    } catch (const std::exception& e) {
        spdlog::error("{}", e.what());
        return stage_failure;
    }
    return ok;
}
