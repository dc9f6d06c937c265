#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>
#include <string>
#include <vector>

#include "bfda/io.hpp"
#include "bfda/pipeline.hpp"
#include "bfda/plot.hpp"
#include "bfda/synthgen.hpp"

using namespace bfda;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    auto p = fs::temp_directory_path() / ("bfda_test_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

// Small experiment-like cohort at the given delays.
std::string small_trials(const std::vector<Delay>& delays, int nL, int nC, std::uint64_t seed) {
    std::ostringstream out;
    bool header = true;
    for (auto d : delays) {
        auto spec = experiment_spec(d, seed);
        spec.n_L = nL;
        spec.n_C = nC;
        spec.trials_per_subject = 240;
        spec.trials_jitter = 5;
        std::ostringstream part;
        write_trials(part, generate(spec).series);
        std::string text = part.str();
        if (!header) text.erase(0, text.find('\n') + 1);
        out << text;
        header = false;
    }
    return out.str();
}

PipelineConfig small_config(const fs::path& dir, const std::string& input) {
    PipelineConfig cfg;
    cfg.input = input;
    cfg.out = (dir / "out").string();
    cfg.permutations = 100;
    cfg.components = 4;
    cfg.d_grid = {0.5, 1, 2};
    cfg.seed = 7;
    return cfg;
}

std::map<std::string, std::string> snapshot(const fs::path& root) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = io::read_file(e.path());
    return out;
}

}

TEST(Io, NumbersRoundTrip) {
    for (double v : {0.0, 1.0, -2.5, 0.1, 1.0 / 3, 6.02214076e23, 4.9e-324}) EXPECT_EQ(io::parse_double(io::num(v)), v);
    EXPECT_TRUE(std::isnan(io::parse_double(io::num(std::nan("")))));
    EXPECT_THROW(io::parse_double("1.5x"), IoError);
}

TEST(Io, Sha256KnownVectors) {
    EXPECT_EQ(io::sha256_hex(""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    EXPECT_EQ(io::sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(Io, AtomicWriteReplaces) {
    auto dir = scratch("atomic");
    io::write_file_atomic(dir / "a" / "f.txt", "one");
    io::write_file_atomic(dir / "a" / "f.txt", "two");
    EXPECT_EQ(io::read_file(dir / "a" / "f.txt"), "two");
    EXPECT_FALSE(fs::exists(dir / "a" / "f.txt.tmp"));
}

TEST(Config, ParseStagesAndWeights) {
    EXPECT_EQ(parse_stages("all").size(), 5u);
    auto st = parse_stages("16,0,4");
    ASSERT_EQ(st.size(), 3u);
    EXPECT_EQ(st[0], Delay::D0);
    EXPECT_EQ(st[2], Delay::D16);
    EXPECT_THROW(parse_stages("3"), ConfigError);
    EXPECT_THROW(parse_stages("x"), ConfigError);

    auto d = parse_d_grid("0.1:0.1:5.0");
    ASSERT_EQ(d.size(), 50u);
    EXPECT_EQ(d.front(), 0.1);
    EXPECT_EQ(d[29], 3.0);
    EXPECT_EQ(d.back(), 5.0);
    EXPECT_EQ(d, default_weight_grid());
    EXPECT_EQ(parse_d_grid("0.5,2"), (std::vector<double>{0.5, 2}));
    EXPECT_THROW(parse_d_grid("1:0:2"), ConfigError);
    EXPECT_THROW(parse_d_grid("a,b"), ConfigError);
}

TEST(Config, ValidateRejects) {
    auto dir = scratch("validate");
    io::write_file_atomic(dir / "t.csv", "subject_id,group,delay,trial_index,outcome\n");
    auto cfg = small_config(dir, (dir / "t.csv").string());
    EXPECT_NO_THROW(cfg.validate());
    auto bad = cfg;
    bad.input = (dir / "missing.csv").string();
    EXPECT_THROW(bad.validate(), ConfigError);
    bad = cfg;
    bad.alpha = 1.5;
    EXPECT_THROW(bad.validate(), ConfigError);
    bad = cfg;
    bad.permutations = 0;
    EXPECT_THROW(bad.validate(), ConfigError);
    bad = cfg;
    bad.registration.K_a = 1;
    EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(StageCurves, CsvRoundTripIsExact) {
    ScenarioSpec spec;
    spec.n_L = 3;
    spec.n_C = 3;
    spec.trials_per_subject = 200;
    spec.warps.kind = WarpFamilySpec::Kind::Power;
    spec.warps.a_min = 0.7;
    spec.warps.a_max = 1.4;
    auto reg = register_curves(generate(spec).series, RegistrationConfig{});
    auto sc = stage_curves(reg);
    std::istringstream in(stage_curves_csv(sc));
    auto back = read_stage_curves(in);
    EXPECT_EQ(back.subject_ids, sc.subject_ids);
    EXPECT_EQ(back.labels, sc.labels);
    EXPECT_TRUE(back.grid == sc.grid);
    EXPECT_TRUE(back.unaligned_logit.values == sc.unaligned_logit.values);
    EXPECT_TRUE(back.aligned_logit.values == sc.aligned_logit.values);
    EXPECT_TRUE(back.warps == sc.warps);
    EXPECT_TRUE(back.warp_clr.values == sc.warp_clr.values);
    EXPECT_EQ(stage_curves_csv(back), stage_curves_csv(sc));
}

TEST(Registration, SummaryCoefficientsReproduceCurves) {
    ScenarioSpec spec;
    spec.n_L = 3;
    spec.n_C = 3;
    spec.trials_per_subject = 300;
    spec.warps.kind = WarpFamilySpec::Kind::Power;
    spec.warps.a_min = 0.6;
    spec.warps.a_max = 1.6;
    auto reg = register_curves(generate(spec).series, RegistrationConfig{});
    const auto j = nlohmann::json::parse(dump(registration_summary(reg)));
    EXPECT_EQ(j["config"]["K_a"], 4);
    const auto grid = j["grid"].get<std::vector<double>>();
    ASSERT_EQ(grid.size(), reg.grid().size());
    const SplineBasis ab(j["amplitude_basis"]["degree"].get<int>(), std::vector<double>(j["amplitude_basis"]["knots"].begin() + 4, j["amplitude_basis"]["knots"].end() - 4));
    const Eigen::MatrixXd B = eval_basis(ab, grid);
    const auto gamma = warp_grid_values(reg);
    ASSERT_EQ(j["subject_curves"].size(), 6u);
    for (std::size_t i = 0; i < 6; ++i) {
        const auto& sc = j["subject_curves"][i];
        EXPECT_EQ(sc["subject_id"], reg.subject_ids[i]);
        const auto a = sc["aligned_logit_coefficients"].get<std::vector<double>>();
        const Eigen::VectorXd nu = B * Eigen::Map<const Eigen::VectorXd>(a.data(), static_cast<Eigen::Index>(a.size()));
        for (std::size_t t = 0; t < grid.size(); ++t) EXPECT_NEAR(nu(static_cast<Eigen::Index>(t)), reg.aligned_logit.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(t)), 1e-12);
        const auto w = sc["warp_coefficients"].get<std::vector<double>>();
        Warp warp{reg.config.phase_basis(), Eigen::Map<const Eigen::VectorXd>(w.data(), static_cast<Eigen::Index>(w.size()))};
        const auto g = eval_warp(warp, reg.grid());
        for (std::size_t t = 0; t < grid.size(); ++t) EXPECT_EQ(g[t], gamma(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(t)));
    }
}

TEST(Pipeline, ArtifactsManifestAndDeterminism) {
    auto dir = scratch("pipeline");
    const std::vector<Delay> delays{Delay::D0, Delay::D2, Delay::D4, Delay::D8, Delay::D16};
    io::write_file_atomic(dir / "trials.csv", small_trials(delays, 4, 4, 3));
    auto cfg = small_config(dir, (dir / "trials.csv").string());
    auto render = [](const fs::path& root) { return plot::render_plots(root); };
    auto report = run_pipeline(cfg, render);
    ASSERT_TRUE(report.ok());

    const auto manifest = nlohmann::json::parse(io::read_file(fs::path(cfg.out) / manifest_name));
    ASSERT_EQ(manifest["stages"].size(), 5u);
    for (const auto& st : manifest["stages"]) {
        EXPECT_EQ(st["status"], "ok");
        EXPECT_TRUE(st["files"].contains("registration"));
        EXPECT_TRUE(st["files"].contains("weight_selection"));
        EXPECT_TRUE(st.contains("D_hat"));
        ASSERT_EQ(st["tests"].size(), 6u);
        int global = 0, iwt = 0;
        for (const auto& t : st["tests"]) (t["family"] == "global" ? global : iwt) += 1;
        EXPECT_EQ(global, 3);
        EXPECT_EQ(iwt, 3);
    }
    EXPECT_EQ(manifest["input"]["sha256"], io::sha256_file(cfg.input));
    for (const auto& [rel, digest] : manifest["files"].items()) EXPECT_EQ(digest, io::sha256_file(fs::path(cfg.out) / rel)) << rel;
    EXPECT_EQ(manifest["plots"].size(), 20u);
    EXPECT_EQ(io::read_file(fs::path(cfg.out) / manifest_name).find("time"), std::string::npos);

    const auto first = snapshot(cfg.out);
    ASSERT_TRUE(run_pipeline(cfg, render).ok());
    EXPECT_EQ(snapshot(cfg.out), first);
}

TEST(Pipeline, FailingStageIsIsolated) {
    auto dir = scratch("isolation");
    std::string text = small_trials({Delay::D2}, 3, 3, 5);
    // One subject only at delay 4.
    std::istringstream single(small_trials({Delay::D4}, 1, 1, 6));
    std::string line;
    std::getline(single, line);
    while (std::getline(single, line))
        if (line.rfind("L01,", 0) == 0) text += line + "\n";
    io::write_file_atomic(dir / "trials.csv", text);
    auto cfg = small_config(dir, (dir / "trials.csv").string());
    cfg.stages = {Delay::D2, Delay::D4};
    cfg.plots = false;
    auto report = run_pipeline(cfg);
    ASSERT_EQ(report.stages.size(), 2u);
    EXPECT_TRUE(report.stages[0].ok);
    EXPECT_FALSE(report.stages[1].ok);
    EXPECT_NE(report.stages[1].error.find("GroupError"), std::string::npos);
    EXPECT_FALSE(report.ok());
    EXPECT_TRUE(fs::exists(fs::path(cfg.out) / "stage_2" / artifact::iwt));
    EXPECT_FALSE(fs::exists(fs::path(cfg.out) / "stage_4"));
}

TEST(Plots, SeriesCountsAnnotationsAndObservedStatistic) {
    auto dir = scratch("plots");
    io::write_file_atomic(dir / "trials.csv", small_trials({Delay::D0}, 4, 4, 9));
    auto cfg = small_config(dir, (dir / "trials.csv").string());
    cfg.stages = {Delay::D0};
    cfg.plots = false;
    ASSERT_TRUE(run_pipeline(cfg).ok());
    const fs::path root(cfg.out);
    const auto written = plot::render_plots(root);
    EXPECT_EQ(written.size(), 4u);

    const std::string pv = io::read_file(root / "stage_0" / "pvalues.svg");
    std::size_t series = 0;
    for (std::size_t pos = 0; (pos = pv.find("class=\"series\"", pos)) != std::string::npos; ++pos) ++series;
    EXPECT_EQ(series, 6u);
    EXPECT_NE(pv.find("class=\"threshold\" data-value=\"0.05\""), std::string::npos);

    const std::string modes = io::read_file(root / "stage_0" / "modes.svg");
    std::regex pve_re("component (\\d+) \\(PVE ([0-9.]+)%\\)");
    std::map<std::string, double> pve;
    for (std::sregex_iterator it(modes.begin(), modes.end(), pve_re), end; it != end; ++it) pve[(*it)[1]] = std::stod((*it)[2]);
    ASSERT_FALSE(pve.empty());
    double total = 0;
    for (const auto& [k, v] : pve) total += v;
    EXPECT_LE(total, 100.0 + 1e-9);

    const auto global = plot::read_table(root / "stage_0" / artifact::global_tests);
    const std::string hist = io::read_file(root / "stage_0" / "histograms.svg");
    for (int s = 0; s < 3; ++s) {
        const std::string name = to_string(all_curve_sets[s]);
        const double table_T = plot::column_where(global, "T_observed", "curve_set", name).front();
        std::regex obs_re("data-curve-set=\"" + name + "\" data-value=\"([^\"]+)\"");
        std::smatch m;
        ASSERT_TRUE(std::regex_search(hist, m, obs_re));
        const double plotted = io::parse_double(m[1].str());
        EXPECT_NEAR(plotted, table_T, 1e-6 * std::max(1.0, std::abs(table_T)));
    }

    fs::remove(root / "stage_0" / artifact::iwt);
    try {
        plot::render_plots(root);
        FAIL() << "expected a missing-artifact error";
    } catch (const IoError& e) {
        EXPECT_NE(std::string(e.what()).find("stage_0/iwt.csv"), std::string::npos);
    }
}
