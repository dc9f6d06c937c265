#include <gtest/gtest.h>

#include <random>
#include <sstream>
#include <vector>

#include "bfda/core.hpp"
#include "bfda/transforms.hpp"

using namespace bfda;

namespace {

TrialSeries make_series(const std::string& id, Group g, Delay d, std::size_t n) {
    TrialSeries s;
    s.subject_id = id;
    s.group = g;
    s.delay = d;
    std::vector<double> raw(n);
    for (std::size_t i = 0; i < n; ++i) raw[i] = static_cast<double>(i);
    s.times = normalize_times(raw);
    s.outcomes.assign(n, 0);
    for (std::size_t i = 0; i < n; i += 2) s.outcomes[i] = 1;
    return s;
}

}

TEST(NormalizeTimes, Examples) {
    std::vector<double> a{10, 20, 30};
    EXPECT_EQ(normalize_times(a), (std::vector<double>{0, 0.5, 1}));

    std::vector<double> b{0, 1};
    EXPECT_EQ(normalize_times(b), (std::vector<double>{0, 1}));

    std::vector<double> c{5, 6, 8, 13};
    auto out = normalize_times(c);
    ASSERT_EQ(out.size(), 4u);
    for (std::size_t i = 0; i < c.size(); ++i) {
        EXPECT_NEAR(out[i], (c[i] - 5) / 8, 1e-15);
    }
}

TEST(NormalizeTimes, Idempotent) {
    std::mt19937_64 rng(7);
    std::exponential_distribution<double> gap(1.0);
    for (int rep = 0; rep < 50; ++rep) {
        std::vector<double> raw{gap(rng)};
        for (int i = 0; i < 30; ++i) raw.push_back(raw.back() + 1e-3 + gap(rng));
        auto once = normalize_times(raw);
        auto twice = normalize_times(once);
        for (std::size_t i = 0; i < once.size(); ++i) EXPECT_NEAR(once[i], twice[i], 1e-15);
    }
}

TEST(NormalizeTimes, Errors) {
    std::vector<double> one{1.0};
    EXPECT_THROW(normalize_times(one), InvalidSeries);
    std::vector<double> flat{1.0, 1.0, 2.0};
    EXPECT_THROW(normalize_times(flat), InvalidSeries);
    std::vector<double> down{3.0, 2.0};
    EXPECT_THROW(normalize_times(down), InvalidSeries);
}

TEST(CommonGridSize, MinimumOverSubjects) {
    std::vector<TrialSeries> acq{make_series("a", Group::L, Delay::D0, 2022), make_series("b", Group::C, Delay::D0, 2100),
                                 make_series("c", Group::L, Delay::D0, 2050), make_series("d", Group::L, Delay::D2, 10)};
    EXPECT_EQ(common_grid_size(acq, Delay::D0), 2022u);

    std::vector<TrialSeries> single{make_series("a", Group::L, Delay::D4, 7)};
    EXPECT_EQ(common_grid_size(single, Delay::D4), 7u);

    std::vector<TrialSeries> d2{make_series("a", Group::L, Delay::D2, 175), make_series("b", Group::C, Delay::D2, 180),
                                make_series("c", Group::C, Delay::D2, 176)};
    EXPECT_EQ(common_grid_size(d2, Delay::D2), 175u);
}

TEST(CommonGridSize, EmptySample) {
    std::vector<TrialSeries> none;
    EXPECT_THROW(common_grid_size(none, Delay::D0), EmptySample);
    std::vector<TrialSeries> other{make_series("a", Group::L, Delay::D2, 10)};
    EXPECT_THROW(common_grid_size(other, Delay::D8), EmptySample);
}

TEST(Grid, Invariants) {
    for (std::size_t n : {2u, 3u, 101u, 2022u}) {
        Grid g(n);
        EXPECT_EQ(g[0], 0.0);
        EXPECT_EQ(g[n - 1], 1.0);
        const double h = g.spacing();
        for (std::size_t i = 1; i < n; ++i) EXPECT_NEAR(g[i] - g[i - 1], h, 1e-12 * h);
        EXPECT_NEAR(g.weights().sum(), 1.0, 1e-12);
    }
    EXPECT_THROW(Grid(1), DomainMismatch);
}

TEST(InterpolateToGrid, Examples) {
    Grid g5(5);
    std::vector<double> x{0, 0.13, 0.5, 0.77, 1};
    std::vector<double> c(5, 0.7);
    for (double v : interpolate_to_grid(x, c, Grid(17))) EXPECT_DOUBLE_EQ(v, 0.7);

    std::vector<double> lx{0, 1}, ly{0, 1};
    auto line = interpolate_to_grid(lx, ly, g5);
    std::vector<double> expect{0, 0.25, 0.5, 0.75, 1};
    for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(line[i], expect[i], 1e-15);

    // (0,0),(0.5,1),(1,0) at s = 0.25 -> 0.5 by hand.
    std::vector<double> px{0, 0.5, 1}, py{0, 1, 0};
    auto tent = interpolate_to_grid(px, py, g5);
    EXPECT_NEAR(tent[1], 0.5, 1e-15);
    EXPECT_NEAR(tent[2], 1.0, 1e-15);
    EXPECT_NEAR(tent[3], 0.5, 1e-15);
}

TEST(InterpolateToGrid, ReproducesSourceAndStaysBounded) {
    std::mt19937_64 rng(3);
    std::normal_distribution<double> z;
    for (std::size_t n : {2u, 9u, 64u}) {
        Grid g(n);
        std::vector<double> y(n);
        for (auto& v : y) v = z(rng);
        auto same = interpolate_to_grid(g.points(), y, g);
        for (std::size_t i = 0; i < n; ++i) EXPECT_EQ(same[i], y[i]);

        const double lo = *std::min_element(y.begin(), y.end()), hi = *std::max_element(y.begin(), y.end());
        for (double v : interpolate_to_grid(g.points(), y, Grid(331))) {
            EXPECT_GE(v, lo);
            EXPECT_LE(v, hi);
        }
    }
}

TEST(InterpolateToGrid, DomainMismatch) {
    std::vector<double> x{0.1, 1}, y{1, 2};
    EXPECT_THROW(interpolate_to_grid(x, y, Grid(3)), DomainMismatch);
    std::vector<double> x2{0, 0.9}, y2{1, 2};
    EXPECT_THROW(interpolate_to_grid(x2, y2, Grid(3)), DomainMismatch);
}

TEST(FunctionalSample, ClrRowsIntegrateToZero) {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> u(0.2, 3.0);
    Grid g(257);
    FunctionalSample fs;
    fs.grid = g;
    fs.kind = SampleKind::WarpCLR;
    fs.values.resize(20, static_cast<Eigen::Index>(g.size()));
    for (int i = 0; i < 20; ++i) {
        const double a = u(rng), b = u(rng);
        std::vector<double> deriv(g.size());
        for (std::size_t j = 0; j < g.size(); ++j) deriv[j] = a + b * std::sin(3 * g[j]) * 0.3;
        auto eta = clr_forward(deriv, g);
        for (std::size_t j = 0; j < g.size(); ++j) fs.values(i, static_cast<Eigen::Index>(j)) = eta.values[j];
        EXPECT_LE(std::abs(trapz(eta.values, g)), 1e-8);
        fs.labels.push_back(i % 2 ? Group::L : Group::C);
    }
    EXPECT_NO_THROW(fs.validate());
    fs.values(3, 10) += 1.0;
    EXPECT_THROW(fs.validate(), DomainMismatch);
}

TEST(FunctionalSample, ProbabilityBounds) {
    FunctionalSample fs;
    fs.grid = Grid(3);
    fs.kind = SampleKind::Probability;
    fs.values = Eigen::MatrixXd::Constant(1, 3, 0.5);
    fs.labels = {Group::L};
    EXPECT_NO_THROW(fs.validate());
    fs.values(0, 1) = 1.0;
    EXPECT_THROW(fs.validate(), DomainMismatch);
}

TEST(TrialFile, RoundTripAndSorting) {
    std::stringstream in;
    in << "subject_id,group,delay,trial_index,outcome\n"
       << "m1,L,0,2,1\n"
       << "m1,L,0,0,0\n"
       << "m2,C,0,0,1\n"
       << "m1,L,0,1,1\n"
       << "m2,C,0,1,0\n"
       << "m1,L,2,0,1\n"
       << "m1,L,2,4,0\n";
    auto series = read_trials(in);
    ASSERT_EQ(series.size(), 3u);
    EXPECT_EQ(series[0].subject_id, "m1");
    EXPECT_EQ(series[0].outcomes, (std::vector<int>{0, 1, 1}));
    EXPECT_EQ(series[0].times, (std::vector<double>{0, 0.5, 1}));
    EXPECT_EQ(series[1].group, Group::C);
    EXPECT_EQ(series[2].delay, Delay::D2);
    EXPECT_EQ(series[2].times, (std::vector<double>{0, 1}));

    std::stringstream out;
    write_trials(out, std::span<const TrialSeries>(series.data(), 2));
    auto again = read_trials(out);
    ASSERT_EQ(again.size(), 2u);
    EXPECT_EQ(again[0].outcomes, series[0].outcomes);
    EXPECT_EQ(again[1].outcomes, series[1].outcomes);
}

TEST(TrialFile, Errors) {
    std::stringstream bad_header("a,b,c\n");
    EXPECT_THROW(read_trials(bad_header), IoError);
    std::stringstream bad_delay("subject_id,group,delay,trial_index,outcome\nm,L,3,0,1\nm,L,3,1,1\n");
    EXPECT_THROW(read_trials(bad_delay), IoError);
    std::stringstream bad_outcome("subject_id,group,delay,trial_index,outcome\nm,L,0,0,2\n");
    EXPECT_THROW(read_trials(bad_outcome), IoError);
    std::stringstream single("subject_id,group,delay,trial_index,outcome\nm,L,0,0,1\n");
    EXPECT_THROW(read_trials(single), InvalidSeries);
}
