#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <sstream>

#include "test_helpers.hpp"
#include "tte/panel.hpp"

using namespace tte;
using tte::testing::RowSpec;
using tte::testing::make_panel;

namespace {

PanelDataset ingest(const std::string& csv, CsvSchema schema = {}) {
    std::istringstream in(csv);
    return ingest_long_csv(in, schema);
}

}  // namespace

TEST_CASE("ingest a 2x2 long csv") {
    const auto ds = ingest(
        "id,t,elig,treat,y,L\n"
        "a,1,1,0,1.5,0.2\n"
        "a,2,1,1,2.5,0.4\n"
        "b,1,1,0,0.5,-0.1\n"
        "b,2,1,0,1.0,0.0\n");
    CHECK(ds.tau == 2);
    CHECK(ds.n_rows() == 4);
    CHECK(ds.n_patients() == 2);
    CHECK(ds.covariate_names == std::vector<std::string>{"L"});
    CHECK(ds.outcome_family == OutcomeFamily::continuous);
    // lag and baseline are derived
    CHECK(ds.lagged_outcome[0] == 0.0);
    CHECK(ds.lagged_outcome[1] == 1.5);
    CHECK(ds.baseline(1, 0) == 0.2);
    const Observation obs = ds.row(1);
    CHECK(obs.patient_id == "a");
    CHECK(obs.t == 2);
    CHECK(obs.treated == 1);
}

TEST_CASE("ingest rejects malformed input") {
    CHECK_THROWS_WITH_AS(ingest("id,t,treat\na,1,0\n"), doctest::Contains("required column"),
                         Error);
    // non-binary treatment
    CHECK_THROWS_AS(ingest("id,t,treat,y\na,1,2,0.5\n"), Error);
    // duplicate (id, t)
    CHECK_THROWS_AS(ingest("id,t,treat,y\na,1,0,0.5\na,1,0,0.6\n"), Error);
    // non-integer t
    CHECK_THROWS_AS(ingest("id,t,treat,y\na,1.5,0,0.5\n"), Error);
    // treatment non-monotone within patient
    CHECK_THROWS_WITH_AS(ingest("id,t,treat,y\na,1,1,0.5\na,2,0,0.6\n"),
                         doctest::Contains("non-monotone"), Error);
    // missing covariate cell is a hard error
    CHECK_THROWS_AS(ingest("id,t,treat,y,L\na,1,0,0.5,\n"), Error);
}

TEST_CASE("eligibility is derived when the column is absent") {
    const auto ds = ingest(
        "id,t,treat,y\n"
        "a,1,0,1.0\n"
        "a,2,1,2.0\n");
    CHECK(ds.eligible[0] == 1);
    CHECK(ds.eligible[1] == 1);  // I_2 = 1 - A_1 = 1
}

TEST_CASE("treatment-naive eligibility rule") {
    const auto base = make_panel(
        {
            {0, 1, 0, 0, 0.0, {}},
            {0, 2, 0, 0, 0.0, {}},
            {0, 3, 0, 1, 0.0, {}},
            {1, 1, 0, 1, 0.0, {}},
            {1, 2, 0, 1, 0.0, {}},
            {2, 1, 0, 0, 0.0, {}},
            {2, 2, 0, 0, 0.0, {}},
            {2, 3, 0, 0, 0.0, {}},
        },
        {});
    const auto ds = derive_eligibility(base);
    // A = (0,0,1) -> I = (1,1,1)
    CHECK(ds.eligible[0] == 1);
    CHECK(ds.eligible[1] == 1);
    CHECK(ds.eligible[2] == 1);
    // A = (1,1) -> I = (1,0)
    CHECK(ds.eligible[3] == 1);
    CHECK(ds.eligible[4] == 0);
    // never treated -> always eligible
    CHECK(ds.eligible[5] == 1);
    CHECK(ds.eligible[6] == 1);
    CHECK(ds.eligible[7] == 1);

    SUBCASE("idempotent") {
        const auto again = derive_eligibility(ds);
        for (long i = 0; i < ds.n_rows(); ++i) CHECK(again.eligible[i] == ds.eligible[i]);
    }
}

TEST_CASE("round trip: ingest(emit(ds)) preserves every field") {
    const auto ds = ingest(
        "id,t,elig,treat,y,L,Lx\n"
        "p7,1,1,0,1.25e-3,0.125,2\n"
        "p7,2,1,1,-4.5,0.25,3\n"
        "zz,1,1,0,0.3333333333333333,1e-7,4\n");
    std::ostringstream out;
    emit_long_csv(ds, out);
    const auto back = ingest(out.str());
    REQUIRE(back.n_rows() == ds.n_rows());
    CHECK(back.tau == ds.tau);
    CHECK(back.covariate_names == ds.covariate_names);
    for (long i = 0; i < ds.n_rows(); ++i) {
        CHECK(back.patient_name(back.patient[i]) == ds.patient_name(ds.patient[i]));
        CHECK(back.time[i] == ds.time[i]);
        CHECK(back.eligible[i] == ds.eligible[i]);
        CHECK(back.treated[i] == ds.treated[i]);
        CHECK(back.outcome[i] == ds.outcome[i]);
        CHECK(back.lagged_outcome[i] == ds.lagged_outcome[i]);
        for (long k = 0; k < ds.covariates.cols(); ++k) {
            CHECK(back.covariates(i, k) == ds.covariates(i, k));
            CHECK(back.baseline(i, k) == ds.baseline(i, k));
        }
    }
}

TEST_CASE("visit-time design requires entry at the first visit") {
    CHECK_THROWS_WITH_AS(make_panel({{0, 2, 1, 0, 0.0, {}}}, {}),
                         doctest::Contains("enters after t=1"), Error);
    // calendar permits late entry
    const auto ds = make_panel({{0, 2, 1, 0, 0.0, {}}}, {}, Design::calendar_time);
    CHECK(ds.tau == 2);
    CHECK(ds.present_count(1) == 0);
    CHECK(ds.present_count(2) == 1);
}

TEST_CASE("trial emulation counts eligible clones per trial") {
    // 10 eligible at t=1, 4 initiate treatment, so 6 remain eligible at t=2
    std::vector<RowSpec> rows;
    for (int p = 0; p < 10; ++p) {
        const int treat1 = p < 4 ? 1 : 0;
        rows.push_back({p, 1, 0, treat1, 0.0, {}});
        rows.push_back({p, 2, 0, treat1, 0.0, {}});
    }
    auto ds = derive_eligibility(make_panel(rows, {}));
    const auto table = emulate_trials(ds);
    REQUIRE(table.size() == 2);
    CHECK(table[0].n_eligible == 10);
    CHECK(table[1].n_eligible == 6);
    CHECK(table[0].n_treated_arm == 4);
    CHECK(table[0].n_control_arm == 6);
    CHECK_FALSE(table[0].empty);

    // total person-time: sum of eligible counts equals the eligible rows
    long elig_rows = 0;
    for (long i = 0; i < ds.n_rows(); ++i) elig_rows += ds.eligible[i];
    CHECK(table[0].n_eligible + table[1].n_eligible == elig_rows);

    SUBCASE("nobody initiates: everyone in every control pool") {
        std::vector<RowSpec> quiet;
        for (int p = 0; p < 5; ++p)
            for (int t = 1; t <= 3; ++t) quiet.push_back({p, t, 1, 0, 0.0, {}});
        const auto all_control = emulate_trials(make_panel(quiet, {}));
        for (const auto& s : all_control) {
            CHECK(s.n_eligible == 5);
            CHECK(s.n_control_arm == 5);
            CHECK(s.n_treated_arm == 0);
        }
    }
}

TEST_CASE("icu-shaped eligible counts") {
    std::vector<RowSpec> rows;
    for (int p = 0; p < 241; ++p) {
        const int treat1 = p < 81 ? 1 : 0;  // 241 - 81 = 160 remain eligible
        rows.push_back({p, 1, 0, treat1, 0.0, {}});
        rows.push_back({p, 2, 0, treat1, 0.0, {}});
    }
    const auto ds = derive_eligibility(make_panel(rows, {}));
    const auto table = emulate_trials(ds);
    CHECK(table[0].n_eligible == 241);
    CHECK(table[1].n_eligible == 160);
}

TEST_CASE("visit-time eligible counts are non-increasing") {
    std::vector<RowSpec> rows;
    for (int p = 0; p < 30; ++p) {
        int a = 0;
        for (int t = 1; t <= 4; ++t) {
            if (!a && p % (t + 1) == 0) a = 1;
            rows.push_back({p, t, 0, a, 0.0, {}});
        }
    }
    const auto ds = derive_eligibility(make_panel(rows, {}));
    const auto table = emulate_trials(ds);
    for (size_t j = 1; j < table.size(); ++j)
        CHECK(table[j].n_eligible <= table[j - 1].n_eligible);
}

TEST_CASE("positivity diagnostics") {
    const auto ds = make_panel(
        {
            {0, 1, 1, 1, 0.0, {}},
            {1, 1, 1, 0, 0.0, {}},
        },
        {});
    SUBCASE("single occupied bin at 0.5") {
        Eigen::VectorXd prop(2);
        prop << 0.5, 0.5;
        const auto cells = positivity_diagnostics(ds, prop);
        REQUIRE(cells.size() == 2);
        long occupied = 0, total = 0;
        for (const auto& cell : cells) {
            for (size_t b = 0; b < cell.bins.size(); ++b) {
                occupied += cell.bins[b] > 0 ? 1 : 0;
                total += cell.bins[b];
            }
            CHECK(cell.below_threshold == 0);
        }
        CHECK(occupied == 2);  // one bin per arm
        CHECK(total == 2);
    }
    SUBCASE("below-threshold count") {
        Eigen::VectorXd prop(2);
        prop << 0.005, 0.5;
        const auto cells = positivity_diagnostics(ds, prop, 0.01);
        long below = 0;
        for (const auto& cell : cells) below += cell.below_threshold;
        CHECK(below == 1);
    }
    SUBCASE("propensity outside (0,1) rejected") {
        Eigen::VectorXd prop(2);
        prop << 1.0, 0.5;
        CHECK_THROWS_AS(positivity_diagnostics(ds, prop), Error);
    }
    SUBCASE("csv shape") {
        Eigen::VectorXd prop(2);
        prop << 0.4, 0.6;
        std::ostringstream out;
        write_positivity_csv(positivity_diagnostics(ds, prop), out);
        const std::string text = out.str();
        CHECK(text.find("t,arm,bin,bin_lower,bin_upper,count") == 0);
    }
}
