#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include "bfda/registration.hpp"
#include "bfda/synthgen.hpp"

using namespace bfda;

namespace {

std::vector<SubjectDesign> identity_designs(const std::vector<TrialSeries>& series, const RegistrationConfig& cfg) {
    std::vector<SubjectDesign> out;
    for (const auto& s : series) {
        SubjectDesign d;
        d.basis = eval_basis(cfg.amplitude_basis(), s.times);
        d.outcomes.resize(static_cast<Eigen::Index>(s.size()));
        for (std::size_t j = 0; j < s.size(); ++j) d.outcomes(static_cast<Eigen::Index>(j)) = s.outcomes[j];
        out.push_back(std::move(d));
    }
    return out;
}

TrialSeries constant_series(const std::string& id, double p, int n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::bernoulli_distribution bern(p);
    TrialSeries s;
    s.subject_id = id;
    s.group = Group::C;
    for (int j = 0; j < n; ++j) {
        s.times.push_back(static_cast<double>(j) / (n - 1));
        s.outcomes.push_back(bern(rng) ? 1 : 0);
    }
    return s;
}

std::vector<double> ranks(const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t k = 0; k < idx.size(); ++k) r[idx[k]] = static_cast<double>(k);
    return r;
}

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
    const auto ra = ranks(a), rb = ranks(b);
    const double n = static_cast<double>(a.size());
    const double mean = (n - 1) / 2;
    double num = 0, da = 0, db = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        num += (ra[i] - mean) * (rb[i] - mean);
        da += (ra[i] - mean) * (ra[i] - mean);
        db += (rb[i] - mean) * (rb[i] - mean);
    }
    return num / std::sqrt(da * db);
}

double integrated_variance(const Eigen::MatrixXd& curves, const Grid& grid) {
    const Eigen::RowVectorXd mean = curves.colwise().mean();
    const Eigen::MatrixXd centred = curves.rowwise() - mean;
    const Eigen::VectorXd var = centred.colwise().squaredNorm().transpose() / static_cast<double>(curves.rows() - 1);
    return grid.weights().dot(var);
}

ScenarioSpec warped_sigmoid_spec(int n, std::uint64_t seed) {
    ScenarioSpec spec;
    spec.n_L = n / 2;
    spec.n_C = n - n / 2;
    spec.trials_per_subject = 2000;
    spec.curve.kind = TemplateSpec::Kind::Sigmoid;
    spec.curve.floor = 0.1;
    spec.curve.ceiling = 0.9;
    spec.curve.rate = 12;
    spec.curve.midpoint = 0.5;
    spec.warps.kind = WarpFamilySpec::Kind::Power;
    spec.warps.a_min = 0.6;
    spec.warps.a_max = 1.7;
    spec.seed = seed;
    return spec;
}

}

TEST(Gfpca, JaakkolaJordanLambda) {
    EXPECT_DOUBLE_EQ(detail::jj_lambda(0.0), 0.125);
    for (double c : {1e-3, 0.5, 2.0, 10.0}) EXPECT_NEAR(detail::jj_lambda(c), std::tanh(c / 2) / (4 * c), 1e-12);
    EXPECT_NEAR(detail::jj_lambda(-2.0), detail::jj_lambda(2.0), 1e-15);
    EXPECT_NEAR(detail::log_sigmoid(-800.0), -800.0, 1e-9);
    EXPECT_NEAR(detail::log_sigmoid(0.0), -std::log(2.0), 1e-15);
}

TEST(Gfpca, BoundNeverDecreases) {
    auto spec = warped_sigmoid_spec(12, 3);
    spec.trials_per_subject = 400;
    spec.amplitude_sd = 0.5;
    auto cohort = generate(spec);
    RegistrationConfig cfg;
    cfg.K_a = 6;
    cfg.inner_tol = 1e-9;
    auto fit = gfpca_step(identity_designs(cohort.series, cfg), cfg);
    ASSERT_GE(fit.bound_trace.size(), 3u);
    for (std::size_t t = 1; t < fit.bound_trace.size(); ++t) {
        EXPECT_GE(fit.bound_trace[t], fit.bound_trace[t - 1] - 1e-8) << "iteration " << t;
    }
    EXPECT_EQ(fit.components, 6);
}

TEST(Gfpca, ComponentCapsAreLogged) {
    std::vector<TrialSeries> s{constant_series("a", 0.4, 200, 1), constant_series("b", 0.6, 200, 2), constant_series("c", 0.5, 200, 3)};
    RegistrationConfig cfg;
    auto fit = gfpca_step(identity_designs(s, cfg), cfg);
    EXPECT_EQ(fit.components, 2);
    EXPECT_GE(fit.events.size(), 2u);
}

TEST(Gfpca, AllOnesSubjectIsClamped) {
    std::vector<TrialSeries> s{constant_series("a", 0.6, 300, 1), constant_series("b", 0.4, 300, 2), constant_series("c", 0.5, 300, 3)};
    std::fill(s[1].outcomes.begin(), s[1].outcomes.end(), 1);
    RegistrationConfig cfg;
    auto fit = gfpca_step(identity_designs(s, cfg), cfg);
    ASSERT_TRUE(fit.degenerate[1]);
    EXPECT_FALSE(fit.degenerate[0]);
    const Eigen::VectorXd curve = eval_basis(cfg.amplitude_basis(), Grid(50)) * fit.subject_coefficients[1];
    for (Eigen::Index j = 0; j < curve.size(); ++j) EXPECT_NEAR(curve(j), logit_bound(), 1e-9);
}

TEST(Gfpca, ConstantFrequencies) {
    // With constant outcome rates the binomial MLE of each subject's level is logit of its empirical frequency.
    std::vector<TrialSeries> s{constant_series("a", 0.3, 2000, 11), constant_series("b", 0.7, 2000, 12)};
    RegistrationConfig cfg;
    auto fit = gfpca_step(identity_designs(s, cfg), cfg);
    Grid g(101);
    const auto B = eval_basis(cfg.amplitude_basis(), g);
    for (int i = 0; i < 2; ++i) {
        const double freq = std::accumulate(s[i].outcomes.begin(), s[i].outcomes.end(), 0.0) / 2000.0;
        const Eigen::VectorXd nu = B * fit.subject_coefficients[i];
        EXPECT_NEAR(trapz(nu, g), logit(freq), 0.05);
    }
}

TEST(WarpStep, GradientMatchesFiniteDifferences) {
    RegistrationConfig cfg;
    cfg.K_p = 6;
    const auto pb = cfg.phase_basis();
    std::vector<TrialSeries> s{constant_series("a", 0.5, 500, 4)};
    const Eigen::MatrixXd design = eval_basis(pb, s[0].times);
    SplineCurve target{SplineBasis::uniform(3, 7), Eigen::VectorXd::LinSpaced(7, -2, 2)};
    detail::WarpObjective obj{pb, design, s[0].outcomes, target, Warp::identity(pb).coefficients, 1e-3};
    std::mt19937_64 rng(6);
    std::normal_distribution<double> z(0, 0.5);
    for (int rep = 0; rep < 5; ++rep) {
        Eigen::VectorXd th(pb.size() - 1);
        for (Eigen::Index k = 0; k < th.size(); ++k) th(k) = z(rng);
        Eigen::VectorXd g;
        obj(th, &g);
        for (Eigen::Index k = 0; k < th.size(); ++k) {
            Eigen::VectorXd hi = th, lo = th;
            hi(k) += 1e-6;
            lo(k) -= 1e-6;
            const double fd = (obj(hi, nullptr) - obj(lo, nullptr)) / 2e-6;
            EXPECT_NEAR(g(k), fd, 1e-6 * std::max(1.0, std::abs(fd)));
        }
    }
}

TEST(WarpStep, ConstantTemplateKeepsIdentity) {
    RegistrationConfig cfg;
    auto s = constant_series("a", 0.7, 2000, 9);
    SplineCurve flat{cfg.amplitude_basis(), Eigen::VectorXd::Constant(cfg.K_a, logit(0.7))};
    auto wf = warp_step(s.times, s.outcomes, flat, cfg);
    auto gamma = eval_warp(wf.warp, Grid(501));
    Grid g(501);
    for (std::size_t j = 0; j < g.size(); ++j) EXPECT_NEAR(gamma[j], g[j], 0.05);
    EXPECT_GE(wf.loglik, wf.identity_loglik);
}

TEST(WarpStep, RecoversQuadraticWarp) {
    RegistrationConfig cfg;
    TemplateSpec tpl;
    tpl.floor = 0.05;
    tpl.ceiling = 0.95;
    tpl.rate = 14;
    tpl.midpoint = 0.45;
    // Target curve: spline fit of the template's logit.
    const auto tb = SplineBasis::uniform(3, 12);
    Grid fg(400);
    std::vector<double> lt(fg.size());
    for (std::size_t j = 0; j < fg.size(); ++j) lt[j] = logit(tpl(fg[j]));
    SplineCurve target{tb, fit_least_squares(lt, tb, fg, 0.0)};

    std::vector<double> mids;
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        std::mt19937_64 rng(seed);
        std::uniform_real_distribution<double> u(0, 1);
        std::vector<double> t(2000);
        std::vector<int> y(2000);
        for (int j = 0; j < 2000; ++j) {
            t[j] = j / 1999.0;
            y[j] = u(rng) < tpl(t[j] * t[j]) ? 1 : 0;
        }
        auto wf = warp_step(t, y, target, cfg);
        EXPECT_GE(wf.loglik, wf.identity_loglik);
        std::vector<double> half{0.5};
        mids.push_back(warp_values(wf.warp, half)[0]);
    }
    std::nth_element(mids.begin(), mids.begin() + 5, mids.end());
    EXPECT_GE(mids[5], 0.15);
    EXPECT_LE(mids[5], 0.35);
}

TEST(WarpStep, NeverWorseThanIdentity) {
    RegistrationConfig cfg;
    std::mt19937_64 rng(77);
    std::normal_distribution<double> z(0, 2);
    for (int rep = 0; rep < 20; ++rep) {
        auto s = constant_series("a", 0.5, 300, 100 + rep);
        Eigen::VectorXd c(cfg.K_a);
        for (Eigen::Index k = 0; k < c.size(); ++k) c(k) = z(rng);
        auto wf = warp_step(s.times, s.outcomes, SplineCurve{cfg.amplitude_basis(), c}, cfg);
        EXPECT_GE(wf.loglik, wf.identity_loglik);
        EXPECT_NO_THROW(wf.warp.validate());
    }
}

TEST(WarpStep, ProfiledLevelRecoversOffset) {
    RegistrationConfig cfg;
    cfg.warp_selection = false;
    // Plateaus at both ends pin the level; a linear logit would trade level against warp.
    Eigen::VectorXd tc(6);
    tc << -1.5, -1.5, -1.5, 1.5, 1.5, 1.5;
    SplineCurve target{SplineBasis::uniform(3, 6), tc};
    std::mt19937_64 rng(17);
    TrialSeries s;
    const int n = 4000;
    for (int j = 0; j < n; ++j) s.times.push_back(static_cast<double>(j) / (n - 1));
    Eigen::VectorXd nu;
    target.evaluate(s.times, nu);
    for (int j = 0; j < n; ++j) s.outcomes.push_back(std::bernoulli_distribution(inverse_logit(nu(j) + 0.8))(rng) ? 1 : 0);
    const auto pb = cfg.phase_basis();
    const Eigen::MatrixXd design = eval_basis(pb, s.times);
    auto wf = warp_step(s.times, s.outcomes, target, cfg, nullptr, &design, true);
    EXPECT_NEAR(wf.level, 0.8, 0.15);
    Grid g(201);
    auto gamma = eval_warp(wf.warp, g);
    for (std::size_t j = 0; j < g.size(); ++j) EXPECT_NEAR(gamma[j], g[j], 0.08);
}

TEST(WarpStep, BoundedObjectiveGradientAndRange) {
    RegistrationConfig cfg;
    cfg.K_p = 6;
    const auto pb = cfg.phase_basis();
    std::vector<TrialSeries> s{constant_series("a", 0.5, 500, 4)};
    const Eigen::MatrixXd design = eval_basis(pb, s[0].times);
    SplineCurve target{SplineBasis::uniform(3, 7), Eigen::VectorXd::LinSpaced(7, -2, 2)};
    detail::WarpObjective obj{pb, design, s[0].outcomes, target, Warp::identity(pb).coefficients, 1e-3};
    obj.fit_level = true;
    const Eigen::VectorXd centre = Eigen::VectorXd::Zero(pb.size() - 1);
    detail::BoundedWarpObjective bounded{obj, centre, 2.0};
    std::mt19937_64 rng(8);
    std::normal_distribution<double> z(0, 3.0);
    for (int rep = 0; rep < 5; ++rep) {
        Eigen::VectorXd phi(centre.size());
        for (Eigen::Index k = 0; k < phi.size(); ++k) phi(k) = z(rng);
        EXPECT_LE((bounded.theta(phi) - centre).cwiseAbs().maxCoeff(), 2.0);
        EXPECT_LT((bounded.phi(bounded.theta(phi)) - phi).cwiseAbs().maxCoeff(), 1e-6);
        Eigen::VectorXd g;
        bounded(phi, &g);
        for (Eigen::Index k = 0; k < phi.size(); ++k) {
            Eigen::VectorXd hi = phi, lo = phi;
            hi(k) += 1e-6;
            lo(k) -= 1e-6;
            const double fd = (bounded(hi, nullptr) - bounded(lo, nullptr)) / 2e-6;
            EXPECT_NEAR(g(k), fd, 1e-5 * std::max(1.0, std::abs(fd)));
        }
    }
}

TEST(Register, ConstantProbabilityCohort) {
    ScenarioSpec spec;
    spec.n_L = 10;
    spec.n_C = 10;
    spec.trials_per_subject = 2000;
    spec.curve.kind = TemplateSpec::Kind::Constant;
    spec.curve.p = 0.7;
    spec.seed = 42;
    auto cohort = generate(spec);
    RegistrationConfig cfg;
    auto res = register_curves(cohort.series, cfg);
    const auto gamma = warp_grid_values(res);
    const auto& g = res.grid();
    double worst = 0;
    for (Eigen::Index i = 0; i < gamma.rows(); ++i)
        for (std::size_t j = 0; j < g.size(); ++j) worst = std::max(worst, std::abs(gamma(i, static_cast<Eigen::Index>(j)) - g[j]));
    EXPECT_LE(worst, 0.05);
    EXPECT_NEAR(res.aligned_logit.values.mean(), 0.847, 0.1);
    for (std::size_t t = 1; t < res.loglik_trace.size(); ++t) EXPECT_GE(res.loglik_trace[t], res.loglik_trace[t - 1] - 1e-6);
    EXPECT_NO_THROW(res.aligned_prob.validate());
}

TEST(Register, PowerWarpRecoveryAndVarianceReduction) {
    auto cohort = generate(warped_sigmoid_spec(20, 5));
    RegistrationConfig cfg;
    auto res = register_curves(cohort.series, cfg);
    std::vector<double> truth, estimate;
    std::vector<double> half{0.5};
    for (std::size_t i = 0; i < res.warps.size(); ++i) {
        truth.push_back(std::pow(0.5, cohort.truth.subjects[i].warp_parameter));
        estimate.push_back(warp_values(res.warps[i], half)[0]);
    }
    EXPECT_GE(spearman(truth, estimate), 0.8);
    EXPECT_LT(integrated_variance(res.aligned_logit.values, res.grid()), integrated_variance(res.unaligned_logit.values, res.grid()));

    // Unaligned curves are the aligned spline curves evaluated at the warped times.
    const auto gamma = warp_grid_values(res);
    for (std::size_t i = 0; i < res.warps.size(); ++i) {
        std::vector<double> gi(res.grid().size());
        for (std::size_t j = 0; j < gi.size(); ++j) gi[j] = gamma(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
        Eigen::VectorXd nu;
        SplineCurve{res.amplitude_basis, res.aligned_coefficients[i]}.evaluate(gi, nu);
        for (std::size_t j = 0; j < gi.size(); ++j) {
            const double expect = inverse_logit(std::clamp(nu(static_cast<Eigen::Index>(j)), -logit_bound(), logit_bound()));
            EXPECT_NEAR(inverse_logit(res.unaligned_logit.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j))), expect, 1e-8);
        }
    }
}

TEST(Register, SingleFlipIsStableAndRunsAreDeterministic) {
    auto spec = warped_sigmoid_spec(10, 8);
    auto cohort = generate(spec);
    RegistrationConfig cfg;
    auto a = register_curves(cohort.series, cfg);
    auto b = register_curves(cohort.series, cfg);
    for (std::size_t i = 0; i < a.aligned_coefficients.size(); ++i) {
        EXPECT_TRUE(a.aligned_coefficients[i] == b.aligned_coefficients[i]);
        EXPECT_TRUE(a.warps[i].coefficients == b.warps[i].coefficients);
    }

    auto flipped = cohort.series;
    flipped[3].outcomes[1000] = 1 - flipped[3].outcomes[1000];
    auto c = register_curves(flipped, cfg);
    EXPECT_LT((a.aligned_prob.values - c.aligned_prob.values).cwiseAbs().maxCoeff(), 0.01);
}

TEST(Register, Errors) {
    RegistrationConfig cfg;
    std::vector<TrialSeries> one{constant_series("a", 0.5, 100, 1)};
    EXPECT_THROW(register_curves(one, cfg), GroupError);
    std::vector<TrialSeries> shortish{constant_series("a", 0.5, 100, 1), constant_series("b", 0.5, 7, 2)};
    EXPECT_THROW(register_curves(shortish, cfg), InvalidSeries);
    cfg.K_a = 1;
    EXPECT_THROW(cfg.validate(), ConfigError);
}
