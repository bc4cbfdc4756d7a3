#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "test_helpers.hpp"
#include "tte/comparators.hpp"
#include "tte/random.hpp"
#include "tte/simgen.hpp"
#include "tte/stats.hpp"

using namespace tte;
using tte::testing::RowSpec;
using tte::testing::make_panel;
using tte::testing::lstsq_reference;

TEST_CASE("pooled ols equals an independent normal-equations solve") {
    const auto ds = make_panel(
        {
            {0, 1, 1, 0, 1.0, {0.5}},
            {1, 1, 1, 1, 2.5, {-0.3}},
            {2, 1, 1, 0, 0.2, {0.1}},
            {3, 1, 1, 1, 3.1, {0.9}},
            {4, 1, 1, 0, 0.7, {-0.6}},
        },
        {"L"});
    PooledTerms terms;
    terms.include_lag = false;  // the lag is identically zero on one visit
    const auto report = pooled_ols(ds, terms, 0.95, false);

    std::vector<std::vector<double>> x;
    std::vector<double> y;
    for (long i = 0; i < ds.n_rows(); ++i) {
        x.push_back({1.0, ds.covariates(i, 0), static_cast<double>(ds.treated[i])});
        y.push_back(ds.outcome[i]);
    }
    const auto beta = lstsq_reference(x, y);
    CHECK(report.point == doctest::Approx(beta[2]).epsilon(1e-10));
}

TEST_CASE("pooled ols cluster sandwich runs on panel data") {
    DgpSpec dgp;
    dgp.design = Design::calendar_time;
    const auto data = generate(dgp, 300, 4);
    const auto report = pooled_ols(data.panel);
    CHECK(std::isfinite(report.point));
    CHECK(report.se > 0.0);
    CHECK(report.ci_lower < report.point);
    CHECK(report.ci_upper > report.point);
    // close to the true constant effect at this sample size
    CHECK(report.point == doctest::Approx(1.0).epsilon(0.25));
}

TEST_CASE("g-estimator matches a hand-evaluated ratio of sums") {
    const auto ds = make_panel(
        {
            {0, 1, 1, 1, 2.0, {}},
            {0, 2, 0, 1, 2.5, {}},
            {1, 1, 1, 0, 1.0, {}},
            {1, 2, 1, 1, 3.0, {}},
            {2, 1, 1, 0, 0.5, {}},
            {2, 2, 1, 0, 0.8, {}},
        },
        {});
    Eigen::VectorXd prop(6);
    prop << 0.4, 0.0, 0.3, 0.55, 0.3, 0.25;  // ineligible entries are ignored
    double num = 0.0, den = 0.0;
    for (long i = 0; i < 6; ++i) {
        if (ds.eligible[i] != 1) continue;
        num += (ds.treated[i] - prop[i]) * ds.outcome[i];
        den += (ds.treated[i] - prop[i]) * ds.treated[i];
    }
    CHECK(g_estimate_value(ds, prop) == doctest::Approx(num / den).epsilon(1e-12));
}

TEST_CASE("g-estimator rejects data without residual treatment variation") {
    const auto ds = make_panel({{0, 1, 1, 1, 2.0, {}}, {1, 1, 1, 0, 1.0, {}}}, {});
    Eigen::VectorXd prop(2);
    prop << 1.0, 0.0;  // fitted values equal the treatment itself
    CHECK_THROWS_WITH_AS(g_estimate_value(ds, prop), doctest::Contains("zero denominator"),
                         Error);
}

TEST_CASE("g-estimation with a pooled linear propensity reproduces pooled ols") {
    DgpSpec dgp;
    dgp.design = Design::calendar_time;
    const auto data = generate(dgp, 400, 9);
    const auto& ds = data.panel;

    // pooled OLS with the default terms: intercept, L, treat, lag
    const auto ols = pooled_ols(ds, {}, 0.95, false);

    // least-squares linear "propensity" of A on the same non-treatment terms
    ModelSpec spec;
    spec.response = Response::treatment;
    spec.link = Link::identity;
    spec.terms = {cov_term("L"), lag_term()};
    spec.subset.eligible_only = true;
    const auto linear_fit = fit(spec, ds);
    const auto report = g_estimate(ds, {linear_fit}, 0.95, false);
    CHECK(report.point == doctest::Approx(ols.point).epsilon(1e-8));
}

TEST_CASE("g-estimation with per-visit logistic propensities") {
    DgpSpec dgp;
    dgp.design = Design::calendar_time;
    const auto data = generate(dgp, 500, 13);
    const auto& ds = data.panel;
    FitOptions options;
    options.drop_degenerate_terms = true;
    std::vector<FittedModel> models;
    for (int t = 1; t <= ds.tau; ++t) {
        ModelSpec spec;
        spec.response = Response::treatment;
        spec.link = Link::logit;
        spec.terms = {cov_term("L"), lag_term()};
        spec.subset.t = t;
        models.push_back(fit(spec, ds, options));
    }
    const auto report = g_estimate(ds, models);
    CHECK(std::isfinite(report.point));
    CHECK(report.se > 0.0);
    // constant-effect process: the g-estimator targets the effect itself
    CHECK(report.point == doctest::Approx(1.0).epsilon(0.25));
}

TEST_CASE("pooled logistic mle") {
    DgpSpec dgp;
    dgp.outcome_family = SimOutcomeFamily::binary_logit;
    dgp.design = Design::calendar_time;
    dgp.gamma1 = 0.0;  // outcome independent of treatment
    const auto data = generate(dgp, 2000, 21);
    PooledLogisticSpec spec;
    spec.include_time = true;
    const auto report = pooled_logistic_mle(data.panel, spec);
    CHECK(report.point == doctest::Approx(0.0).epsilon(1.0));
    CHECK(std::abs(report.point) < 3.0 * report.se + 0.05);
    CHECK(report.se > 0.0);

    SUBCASE("single-trial restriction") {
        PooledLogisticSpec one;
        one.only_t = 1;
        const auto t1 = pooled_logistic_mle(data.panel, one);
        CHECK(std::isfinite(t1.point));
        CHECK(t1.estimator == "logistic_mle_t1");
    }
    SUBCASE("continuous outcomes are rejected") {
        DgpSpec cont;
        const auto cdata = generate(cont, 200, 3);
        CHECK_THROWS_AS(pooled_logistic_mle(cdata.panel), Error);
    }
}

TEST_CASE("per-visit marginal log odds drift upward on the shrinking-variance process") {
    const auto ds = noncollapsibility_dgp(120000, 31, OutcomeFamily::binary);
    std::vector<double> estimates;
    for (int t = 1; t <= 5; ++t) {
        ModelSpec marginal;
        marginal.response = Response::outcome;
        marginal.link = Link::logit;
        marginal.terms = {treat_term()};
        marginal.subset.t = t;
        estimates.push_back(fit(marginal, ds).coefficients[1]);
    }
    // one draw: the overall drift is far beyond noise, adjacent late-t
    // gaps are not (the 100-replication average is checked elsewhere)
    CHECK(estimates[4] - estimates[0] > 0.08);
    CHECK(estimates[2] > estimates[0]);
    for (int t = 0; t < 5; ++t)
        CHECK(estimates[t] == doctest::Approx(marginal_logodds_oracle(t + 1)).epsilon(0.08));
}

TEST_CASE("ols limit expression: analytically forced cases") {
    // constant effect and pi_tilde == pi: the misspecification term vanishes
    std::vector<RowSpec> rows;
    RngStream rng(41, 0);
    const double psi = 0.75;
    const long n = 50;
    CounterfactualTable cf;
    cf.y1.resize(n);
    cf.y0.resize(n);
    cf.propensity.resize(n);
    for (long i = 0; i < n; ++i) {
        cf.propensity[i] = 0.2 + 0.6 * rng.next_double();
        cf.y0[i] = rng.next_normal();
        cf.y1[i] = cf.y0[i] + psi;
        rows.push_back({static_cast<int>(i), 1, 1, rng.next_bernoulli(cf.propensity[i]) ? 1 : 0,
                        0.0, {}});
    }
    const auto ds = make_panel(rows, {});
    CHECK(evaluate_ols_limit(ds, cf, cf.propensity) == doctest::Approx(psi).epsilon(1e-12));
    CHECK(evaluate_g_limit(ds, cf) == doctest::Approx(psi).epsilon(1e-12));

    SUBCASE("null effect gives zero") {
        cf.y1 = cf.y0;
        CHECK(evaluate_ols_limit(ds, cf, cf.propensity) == doctest::Approx(0.0).epsilon(1e-12));
        CHECK(evaluate_g_limit(ds, cf) == doctest::Approx(0.0).epsilon(1e-12));
    }
    SUBCASE("limit is invariant to shifting both counterfactuals") {
        CounterfactualTable shifted = cf;
        shifted.y0.array() += 11.0;
        shifted.y1.array() += 11.0;
        CHECK(evaluate_g_limit(ds, shifted) == doctest::Approx(evaluate_g_limit(ds, cf)).epsilon(1e-10));
    }
    SUBCASE("degenerate treatment variance") {
        cf.propensity.setOnes();
        CHECK_THROWS_AS(evaluate_g_limit(ds, cf), Error);
    }
}

TEST_CASE("population limit oracles") {
    DgpSpec dgp;  // constant effect, gamma1 = 1
    dgp.design = Design::calendar_time;

    SUBCASE("precision floor") {
        CHECK_THROWS_AS(ols_population_limit(dgp, 1000, 1), Error);
        CHECK_THROWS_AS(g_population_limit(dgp, 99999, 1), Error);
    }
    SUBCASE("constant effect: the g-limit is the effect") {
        const auto g = g_population_limit(dgp, 150000, 7);
        CHECK(g.limit == doctest::Approx(1.0).epsilon(3e-3));
        CHECK(g.mc_se < 0.01);
        CHECK(g.mc_se > 0.0);
        // deterministic given the seed
        const auto again = g_population_limit(dgp, 150000, 7);
        CHECK(again.limit == g.limit);
        CHECK(again.mc_se == g.mc_se);
    }
    SUBCASE("time-varying effect: the g-limit sits strictly between the trial effects") {
        DgpSpec varying = dgp;
        varying.effect_schedule = EffectSchedule::linear_in_t;
        const auto g = g_population_limit(varying, 150000, 7);
        CHECK(g.limit > 1.0);
        CHECK(g.limit < 2.0);
        const auto ols = ols_population_limit(varying, 150000, 7);
        CHECK(ols.limit > 0.5);
        CHECK(ols.limit < 2.5);
    }
    SUBCASE("limit report serializes to json") {
        LimitReport report;
        report.estimator = "g_estimation";
        report.limit = 1.25;
        report.mc_se = 0.003;
        report.mc_n = 150000;
        report.seed = 7;
        const auto text = limit_json(report);
        CHECK(text.find("\"estimator\":\"g_estimation\"") != std::string::npos);
        CHECK(text.find("\"limit\":1.25") != std::string::npos);
        CHECK(text.find("\"mc_n\":150000") != std::string::npos);
    }
}
