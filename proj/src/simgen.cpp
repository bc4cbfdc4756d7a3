#include "tte/simgen.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <ostream>
#include <thread>

#include "json.hpp"
#include "tte/comparators.hpp"
#include "tte/random.hpp"
#include "tte/stats.hpp"

namespace tte {

double effect_multiplier(const DgpSpec& dgp, int t) {
    return dgp.effect_schedule == EffectSchedule::constant ? 1.0 : static_cast<double>(t);
}

namespace {

void validate_dgp(const DgpSpec& dgp) {
    if (dgp.tau < 1) throw Error("dgp: tau must be >= 1");
    if (!(dgp.exit_probability >= 0.0 && dgp.exit_probability < 1.0))
        throw Error("dgp: exit probability must be in [0,1)");
    if (dgp.noise_sd_covariate <= 0.0) throw Error("dgp: covariate noise sd must be positive");
    if (dgp.outcome_family == SimOutcomeFamily::continuous && dgp.noise_sd_outcome <= 0.0)
        throw Error("dgp: outcome noise sd must be positive");
}

struct PatientState {
    double l_prev = 0.0;
    double y_prev = 0.0;
    int a_prev = 0;
    double frailty = 0.0;
};

struct SimRow {
    int t;
    int elig;
    int treat;
    double l;
    double y;
    double y1;
    double y0;
    double prop;
};

SimRow simulate_period(const DgpSpec& dgp, PatientState& st, RngStream& rng, int t) {
    SimRow row;
    row.t = t;
    row.l = dgp.alpha0 + dgp.alpha1 * st.l_prev + dgp.alpha2 * st.a_prev +
            dgp.noise_sd_covariate * rng.next_normal();
    row.elig = st.a_prev == 1 ? 0 : 1;
    if (st.a_prev == 1) {
        row.treat = 1;
        row.prop = 1.0;
    } else {
        const double lp =
            dgp.beta0 + dgp.beta1 * row.l + dgp.beta2 * st.a_prev + dgp.beta3 * st.y_prev;
        row.prop = dgp.outcome_family == SimOutcomeFamily::binary_probit_frailty ? norm_cdf(lp)
                                                                                 : expit(lp);
        row.treat = rng.next_bernoulli(row.prop) ? 1 : 0;
    }
    const double bump = dgp.gamma1 * effect_multiplier(dgp, t);
    switch (dgp.outcome_family) {
        case SimOutcomeFamily::continuous: {
            const double base = dgp.gamma0 + dgp.gamma2 * row.l + dgp.gamma3 * st.y_prev;
            const double eps = dgp.noise_sd_outcome * rng.next_normal();
            row.y1 = base + bump + eps;
            row.y0 = base + eps;
            break;
        }
        case SimOutcomeFamily::binary_logit: {
            const double base = dgp.gamma0 + dgp.gamma2 * row.l + dgp.gamma3 * st.y_prev;
            const double u = rng.next_double();
            row.y1 = u < expit(base + bump) ? 1.0 : 0.0;
            row.y0 = u < expit(base) ? 1.0 : 0.0;
            break;
        }
        case SimOutcomeFamily::binary_probit_frailty: {
            const double base = dgp.gamma0 + dgp.gamma2 * row.l + st.frailty;
            const double u = rng.next_double();
            row.y1 = u < norm_cdf(base + bump) ? 1.0 : 0.0;
            row.y0 = u < norm_cdf(base) ? 1.0 : 0.0;
            break;
        }
    }
    row.y = row.treat == 1 ? row.y1 : row.y0;
    st.l_prev = row.l;
    st.y_prev = row.y;
    st.a_prev = row.treat;
    return row;
}

PatientState fresh_state(const DgpSpec& dgp, RngStream& rng) {
    PatientState st;
    if (dgp.outcome_family == SimOutcomeFamily::binary_probit_frailty)
        st.frailty = rng.next_normal();
    return st;
}

GeneratedData assemble(const DgpSpec& dgp, const std::vector<std::vector<SimRow>>& by_patient) {
    long n_rows = 0;
    for (const auto& rows : by_patient) n_rows += static_cast<long>(rows.size());

    GeneratedData data;
    PanelDataset& ds = data.panel;
    ds.design = dgp.design;
    ds.outcome_family = dgp.outcome_family == SimOutcomeFamily::continuous
                            ? OutcomeFamily::continuous
                            : OutcomeFamily::binary;
    ds.covariate_names = {"L"};
    ds.patient.resize(n_rows);
    ds.time.resize(n_rows);
    ds.eligible.resize(n_rows);
    ds.treated.resize(n_rows);
    ds.outcome.resize(n_rows);
    ds.covariates.resize(n_rows, 1);
    if (dgp.emit_counterfactuals) {
        data.counterfactuals.emplace();
        data.counterfactuals->y1.resize(n_rows);
        data.counterfactuals->y0.resize(n_rows);
        data.counterfactuals->propensity.resize(n_rows);
    }
    long i = 0;
    for (long p = 0; p < static_cast<long>(by_patient.size()); ++p) {
        for (const auto& row : by_patient[p]) {
            ds.patient[i] = static_cast<int>(p);
            ds.time[i] = row.t;
            ds.eligible[i] = row.elig;
            ds.treated[i] = row.treat;
            ds.outcome[i] = row.y;
            ds.covariates(i, 0) = row.l;
            if (data.counterfactuals) {
                data.counterfactuals->y1[i] = row.y1;
                data.counterfactuals->y0[i] = row.y0;
                data.counterfactuals->propensity[i] = row.prop;
            }
            ++i;
        }
    }
    ds.finalize();
    return data;
}

}  // namespace

GeneratedData generate(const DgpSpec& dgp, long n, std::uint64_t seed) {
    validate_dgp(dgp);
    if (n < 1) throw Error("generate: n must be >= 1");

    std::vector<std::vector<SimRow>> by_patient;
    if (dgp.design == Design::visit_time) {
        by_patient.resize(n);
        for (long p = 0; p < n; ++p) {
            RngStream rng(seed, static_cast<std::uint64_t>(p));
            PatientState st = fresh_state(dgp, rng);
            by_patient[p].reserve(dgp.tau);
            for (int t = 1; t <= dgp.tau; ++t)
                by_patient[p].push_back(simulate_period(dgp, st, rng, t));
        }
    } else {
        // constant number of participants; exits replaced by entrants
        struct Slot {
            long patient;
            PatientState state;
            RngStream rng;
        };
        std::vector<Slot> slots;
        slots.reserve(n);
        long next_patient = 0;
        for (long s = 0; s < n; ++s) {
            RngStream rng(seed, static_cast<std::uint64_t>(next_patient));
            PatientState st = fresh_state(dgp, rng);
            slots.push_back({next_patient++, st, rng});
        }
        by_patient.resize(n);
        for (int t = 1; t <= dgp.tau; ++t) {
            for (auto& slot : slots) {
                by_patient[slot.patient].push_back(simulate_period(dgp, slot.state, slot.rng, t));
                if (t < dgp.tau && slot.rng.next_bernoulli(dgp.exit_probability)) {
                    RngStream rng(seed, static_cast<std::uint64_t>(next_patient));
                    PatientState st = fresh_state(dgp, rng);
                    by_patient.emplace_back();
                    slot = {next_patient++, st, rng};
                }
            }
        }
    }
    return assemble(dgp, by_patient);
}

void write_counterfactual_csv(const GeneratedData& data, std::ostream& out) {
    if (!data.counterfactuals) throw Error("no counterfactual table was generated");
    const auto& ds = data.panel;
    const auto& cf = *data.counterfactuals;
    out << "id,t,y1,y0,propensity\n";
    char buf[40];
    auto num = [&buf](double v) {
        std::snprintf(buf, sizeof(buf), "%.17g", v);
        return std::string(buf);
    };
    for (long i = 0; i < ds.n_rows(); ++i)
        out << ds.patient_name(ds.patient[i]) << ',' << ds.time[i] << ',' << num(cf.y1[i]) << ','
            << num(cf.y0[i]) << ',' << num(cf.propensity[i]) << '\n';
}

PanelDataset noncollapsibility_dgp(long n, std::uint64_t seed, OutcomeFamily family) {
    if (n < 1) throw Error("noncollapsibility_dgp: n must be >= 1");
    constexpr int kTau = 5;
    std::vector<std::vector<SimRow>> by_patient(n);
    for (long p = 0; p < n; ++p) {
        RngStream rng(seed, static_cast<std::uint64_t>(p));
        int a_prev = 0;
        by_patient[p].reserve(kTau);
        for (int t = 1; t <= kTau; ++t) {
            SimRow row{};
            row.t = t;
            const double var = a_prev + (1.0 - a_prev) / static_cast<double>(t);
            row.l = std::sqrt(var) * rng.next_normal();
            row.elig = a_prev == 1 ? 0 : 1;
            row.treat = a_prev == 1 ? 1 : (rng.next_bernoulli(0.2) ? 1 : 0);
            if (family == OutcomeFamily::binary) {
                row.y = rng.next_bernoulli(expit(row.treat + row.l)) ? 1.0 : 0.0;
            } else {
                row.y = row.treat + row.l + rng.next_normal();
            }
            a_prev = row.treat;
            by_patient[p].push_back(row);
        }
    }
    DgpSpec shell;
    shell.design = Design::visit_time;
    shell.outcome_family = family == OutcomeFamily::binary ? SimOutcomeFamily::binary_logit
                                                           : SimOutcomeFamily::continuous;
    shell.emit_counterfactuals = false;
    return assemble(shell, by_patient).panel;
}

double marginal_logodds_oracle_var(double variance) {
    if (variance < 0.0) throw Error("variance must be non-negative");
    if (variance == 0.0) return 1.0;  // degenerate mixture: the conditional log-OR
    static const GaussHermiteRule rule = gauss_hermite(64);
    const double p1 = gauss_hermite_mean(rule, 0.0, variance,
                                         [](double l) { return expit(1.0 + l); });
    const double p0 =
        gauss_hermite_mean(rule, 0.0, variance, [](double l) { return expit(l); });
    return logit(p1) - logit(p0);
}

double marginal_logodds_oracle(int t) {
    if (t < 1 || t > 5) throw Error("marginal log-odds oracle defined for t in 1..5");
    return marginal_logodds_oracle_var(1.0 / static_cast<double>(t));
}

namespace {

// Estimand definition evaluated from the counterfactuals over one strided
// patient block (block < 0 means every patient). Strided membership keeps
// calendar-design entrants, who lack early visits, spread across blocks.
double estimand_value(const GeneratedData& data, Estimand estimand, long block, long n_blocks) {
    const PanelDataset& ds = data.panel;
    const CounterfactualTable& cf = *data.counterfactuals;
    const int tau = ds.tau;
    const auto in_block = [block, n_blocks](long u) {
        return block < 0 || (u % n_blocks) == block;
    };

    std::vector<double> contrast_sum(tau, 0.0);
    std::vector<long> elig_count(tau, 0), pres_count(tau, 0);
    for (long u = 0; u < ds.n_patients(); ++u) {
        if (!in_block(u)) continue;
        const auto [lo, hi] = ds.clusters()[u];
        for (long i = lo; i < hi; ++i) {
            const int tix = ds.time[i] - 1;
            pres_count[tix] += 1;
            if (ds.eligible[i] == 1) {
                elig_count[tix] += 1;
                contrast_sum[tix] += cf.y1[i] - cf.y0[i];
            }
        }
    }

    if (estimand == Estimand::psi_u) {
        double acc = 0.0;
        for (int tix = 0; tix < tau; ++tix) {
            if (elig_count[tix] == 0)
                throw Error("positivity of eligibility violated in the oracle draw");
            acc += contrast_sum[tix] / static_cast<double>(elig_count[tix]);
        }
        return acc / tau;
    }
    if (estimand == Estimand::psi_e) {
        double num = 0.0;
        double den = 0.0;
        for (int tix = 0; tix < tau; ++tix) {
            if (elig_count[tix] == 0) continue;
            const double p = static_cast<double>(elig_count[tix]) / pres_count[tix];
            num += p * contrast_sum[tix] / static_cast<double>(elig_count[tix]);
            den += p;
        }
        if (den <= 0.0) throw Error("positivity of eligibility violated in the oracle draw");
        return num / den;
    }

    // psi_b: standardize the contrast regression to the baseline population
    const long k = ds.covariates.cols();
    double acc = 0.0;
    for (int t = 1; t <= tau; ++t) {
        std::vector<long> rows;
        for (long u = 0; u < ds.n_patients(); ++u) {
            if (!in_block(u)) continue;
            const auto [lo, hi] = ds.clusters()[u];
            for (long i = lo; i < hi; ++i)
                if (ds.time[i] == t && ds.eligible[i] == 1) rows.push_back(i);
        }
        if (rows.empty())
            throw Error("positivity of the probability of participation violated in the oracle");
        Eigen::MatrixXd x(static_cast<long>(rows.size()), 1 + k);
        Eigen::VectorXd y(x.rows());
        for (size_t j = 0; j < rows.size(); ++j) {
            x(j, 0) = 1.0;
            x.row(j).tail(k) = ds.baseline.row(rows[j]);
            y[j] = cf.y1[rows[j]] - cf.y0[rows[j]];
        }
        const Eigen::VectorXd delta = (x.transpose() * x).ldlt().solve(x.transpose() * y);
        double mean_pred = 0.0;
        long n_base = 0;
        for (long u = 0; u < ds.n_patients(); ++u) {
            if (!in_block(u)) continue;
            const long lo = ds.clusters()[u].first;
            if (ds.time[lo] != 1) continue;
            double pred = delta[0];
            for (long c = 0; c < k; ++c) pred += delta[1 + c] * ds.baseline(lo, c);
            mean_pred += pred;
            ++n_base;
        }
        acc += mean_pred / static_cast<double>(n_base);
    }
    return acc / tau;
}

}  // namespace

LimitEstimate estimand_limit_oracle(const DgpSpec& dgp, Estimand estimand, long mc_n,
                                    std::uint64_t seed) {
    if (mc_n < 100000) throw Error("estimand_limit_oracle: mc_n below the 1e5 precision floor");
    if (estimand == Estimand::psi_b && dgp.design != Design::visit_time)
        throw Error("baseline-adjusted estimand undefined for calendar-time designs");
    DgpSpec spec = dgp;
    spec.emit_counterfactuals = true;
    const auto data = generate(spec, mc_n, seed);

    LimitEstimate est;
    est.mc_n = mc_n;
    est.seed = seed;
    est.limit = estimand_value(data, estimand, -1, 1);

    constexpr int kBlocks = 20;
    std::vector<double> blocks;
    blocks.reserve(kBlocks);
    for (int b = 0; b < kBlocks; ++b)
        blocks.push_back(estimand_value(data, estimand, b, kBlocks));
    const double mean = std::accumulate(blocks.begin(), blocks.end(), 0.0) / kBlocks;
    double ss = 0.0;
    for (double v : blocks) ss += (v - mean) * (v - mean);
    est.mc_se = std::sqrt(ss / (kBlocks - 1)) / std::sqrt(static_cast<double>(kBlocks));
    return est;
}

// ---------------------------------------------------------------------------
// JSON configuration

DgpSpec dgp_from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const std::exception& e) {
        throw Error(std::string("invalid DGP config: ") + e.what());
    }
    DgpSpec dgp;
    try {
        if (j.contains("design")) {
            const std::string d = j["design"];
            if (d == "visit" || d == "visit_time")
                dgp.design = Design::visit_time;
            else if (d == "calendar" || d == "calendar_time")
                dgp.design = Design::calendar_time;
            else
                throw Error("invalid DGP config: unknown design '" + d + "'");
        }
        if (j.contains("tau")) dgp.tau = j["tau"];
        if (j.contains("alpha")) {
            const auto& a = j["alpha"];
            if (a.size() != 3) throw Error("invalid DGP config: alpha needs 3 entries");
            dgp.alpha0 = a[0];
            dgp.alpha1 = a[1];
            dgp.alpha2 = a[2];
        }
        if (j.contains("beta")) {
            const auto& b = j["beta"];
            if (b.size() != 4) throw Error("invalid DGP config: beta needs 4 entries");
            dgp.beta0 = b[0];
            dgp.beta1 = b[1];
            dgp.beta2 = b[2];
            dgp.beta3 = b[3];
        }
        if (j.contains("gamma")) {
            const auto& g = j["gamma"];
            if (g.size() != 4) throw Error("invalid DGP config: gamma needs 4 entries");
            dgp.gamma0 = g[0];
            dgp.gamma1 = g[1];
            dgp.gamma2 = g[2];
            dgp.gamma3 = g[3];
        }
        if (j.contains("effect_schedule")) {
            const std::string s = j["effect_schedule"];
            if (s == "constant")
                dgp.effect_schedule = EffectSchedule::constant;
            else if (s == "linear_in_t")
                dgp.effect_schedule = EffectSchedule::linear_in_t;
            else
                throw Error("invalid DGP config: unknown effect_schedule '" + s + "'");
        }
        if (j.contains("outcome_family")) {
            const std::string f = j["outcome_family"];
            if (f == "continuous")
                dgp.outcome_family = SimOutcomeFamily::continuous;
            else if (f == "binary_logit")
                dgp.outcome_family = SimOutcomeFamily::binary_logit;
            else if (f == "binary_probit_frailty")
                dgp.outcome_family = SimOutcomeFamily::binary_probit_frailty;
            else
                throw Error("invalid DGP config: unknown outcome_family '" + f + "'");
        }
        if (j.contains("exit_probability")) dgp.exit_probability = j["exit_probability"];
        if (j.contains("noise_sds")) {
            const auto& s = j["noise_sds"];
            if (s.size() != 2) throw Error("invalid DGP config: noise_sds needs 2 entries");
            dgp.noise_sd_covariate = s[0];
            dgp.noise_sd_outcome = s[1];
        }
        if (j.contains("emit_counterfactuals")) dgp.emit_counterfactuals = j["emit_counterfactuals"];
    } catch (const Error&) {
        throw;
    } catch (const std::exception& e) {
        throw Error(std::string("invalid DGP config: ") + e.what());
    }
    validate_dgp(dgp);
    return dgp;
}

std::string dgp_to_json(const DgpSpec& dgp) {
    nlohmann::json j;
    j["design"] = dgp.design == Design::visit_time ? "visit" : "calendar";
    j["tau"] = dgp.tau;
    j["alpha"] = {dgp.alpha0, dgp.alpha1, dgp.alpha2};
    j["beta"] = {dgp.beta0, dgp.beta1, dgp.beta2, dgp.beta3};
    j["gamma"] = {dgp.gamma0, dgp.gamma1, dgp.gamma2, dgp.gamma3};
    j["effect_schedule"] =
        dgp.effect_schedule == EffectSchedule::constant ? "constant" : "linear_in_t";
    switch (dgp.outcome_family) {
        case SimOutcomeFamily::continuous: j["outcome_family"] = "continuous"; break;
        case SimOutcomeFamily::binary_logit: j["outcome_family"] = "binary_logit"; break;
        case SimOutcomeFamily::binary_probit_frailty:
            j["outcome_family"] = "binary_probit_frailty";
            break;
    }
    j["exit_probability"] = dgp.exit_probability;
    j["noise_sds"] = {dgp.noise_sd_covariate, dgp.noise_sd_outcome};
    j["emit_counterfactuals"] = dgp.emit_counterfactuals;
    return j.dump(2);
}

// ---------------------------------------------------------------------------
// Replication harness

std::string default_label(const EstimatorId& id) {
    if (!id.label.empty()) return id.label;
    if (id.kind == EstimatorId::Kind::pooled_ols) return "pooled_ols";
    std::string label = to_string(id.estimand) + "_" + to_string(id.method);
    if (id.nuisance_link == Link::probit) label += "_probit";
    return label;
}

namespace {

struct RepResult {
    bool ok = false;
    std::string error;
    std::vector<std::array<double, 4>> rows;  // point, se, ci_lower, ci_upper
};

struct LinkKey {
    Link link;
    bool operator<(const LinkKey& other) const {
        return static_cast<int>(link) < static_cast<int>(other.link);
    }
};

RepResult run_replication(const DgpSpec& dgp, const std::vector<EstimatorId>& estimators, long n,
                          std::uint64_t seed) {
    RepResult result;
    try {
        const auto data = generate(dgp, n, seed);
        const PanelDataset& ds = data.panel;

        // one nuisance fit per link, covering every estimator that uses it
        std::map<LinkKey, NuisanceNeeds> need_union;
        for (const auto& id : estimators) {
            if (id.kind != EstimatorId::Kind::proposed) continue;
            auto& needs = need_union[{id.nuisance_link}];
            const auto this_needs = needs_for(id.estimand, id.method);
            needs.propensity |= this_needs.propensity;
            needs.outcome |= this_needs.outcome;
            needs.participation |= this_needs.participation;
            needs.baseline_regression |= this_needs.baseline_regression;
        }
        std::map<LinkKey, NuisanceSet> fits;
        for (const auto& [key, needs] : need_union) {
            FormulaConfig config;
            config.propensity_link = key.link;
            if (ds.outcome_family == OutcomeFamily::binary) config.outcome_link = key.link;
            fits.emplace(key, fit_nuisances(ds, config, needs));
        }

        result.rows.reserve(estimators.size());
        for (const auto& id : estimators) {
            if (id.kind == EstimatorId::Kind::pooled_ols) {
                const auto report = pooled_ols(ds);
                result.rows.push_back({report.point, report.se, report.ci_lower, report.ci_upper});
            } else {
                const auto& nuis = fits.at({id.nuisance_link});
                const auto report = estimate(ds, nuis, id.estimand, id.method);
                result.rows.push_back({report.point, report.se, report.ci_lower, report.ci_upper});
            }
        }
        result.ok = true;
    } catch (const std::exception& e) {
        result.ok = false;
        result.error = e.what();
        result.rows.clear();
    }
    return result;
}

template <typename Fn>
void run_parallel(long jobs, int n_threads, Fn&& fn) {
    int workers = n_threads > 0 ? n_threads : static_cast<int>(std::thread::hardware_concurrency());
    if (workers < 1) workers = 1;
    if (jobs < workers) workers = static_cast<int>(jobs);
    if (workers <= 1) {
        for (long r = 0; r < jobs; ++r) fn(r);
        return;
    }
    std::atomic<long> next{0};
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&]() {
            for (;;) {
                const long r = next.fetch_add(1);
                if (r >= jobs) return;
                fn(r);
            }
        });
    }
    for (auto& th : pool) th.join();
}

}  // namespace

MonteCarloTable replicate_study(const DgpSpec& dgp, const std::vector<EstimatorId>& estimators,
                                long reps, long n, std::uint64_t master_seed,
                                const std::map<std::string, double>& targets, int n_threads) {
    if (reps < 1) throw Error("replicate_study: reps must be >= 1");
    if (estimators.empty()) throw Error("replicate_study: no estimators requested");
    for (const auto& id : estimators)
        if (targets.find(default_label(id)) == targets.end())
            throw Error("replicate_study: no target supplied for estimator '" +
                        default_label(id) + "'");

    std::vector<RepResult> results(reps);
    run_parallel(reps, n_threads, [&](long r) {
        results[r] = run_replication(dgp, estimators, n, derive_seed(master_seed, r));
    });

    long failures = 0;
    for (const auto& res : results) failures += res.ok ? 0 : 1;
    if (static_cast<double>(failures) > 0.01 * static_cast<double>(reps))
        throw Error("replicate_study: more than 1% of replications failed (" +
                    std::to_string(failures) + "/" + std::to_string(reps) + "), first error: " +
                    [&]() -> std::string {
                        for (const auto& res : results)
                            if (!res.ok) return res.error;
                        return "";
                    }());

    MonteCarloTable table;
    table.reps = reps;
    table.n = n;
    table.failures = failures;
    const long used = reps - failures;
    if (used < 1) throw Error("replicate_study: no successful replications");

    for (size_t j = 0; j < estimators.size(); ++j) {
        const auto& id = estimators[j];
        McRow row;
        row.estimator = default_label(id);
        if (id.kind == EstimatorId::Kind::proposed) {
            row.estimand = to_string(id.estimand);
            row.method = to_string(id.method);
        } else {
            row.estimand = "";
            row.method = "pooled_ols";
        }
        row.target = targets.at(row.estimator);

        double sum = 0.0, sum_se = 0.0;
        long covered = 0;
        for (const auto& res : results) {
            if (!res.ok) continue;
            sum += res.rows[j][0];
            sum_se += res.rows[j][1];
            if (res.rows[j][2] <= row.target && row.target <= res.rows[j][3]) ++covered;
        }
        row.mean_estimate = sum / used;
        row.bias = row.mean_estimate - row.target;
        row.mean_se = sum_se / used;
        row.coverage = static_cast<double>(covered) / used;
        if (used > 1) {
            double ss = 0.0;
            for (const auto& res : results) {
                if (!res.ok) continue;
                const double d = res.rows[j][0] - row.mean_estimate;
                ss += d * d;
            }
            row.sd = std::sqrt(ss / (used - 1));
            row.sd_defined = true;
        } else {
            row.sd = 0.0;
            row.sd_defined = false;
        }
        table.rows.push_back(std::move(row));
    }
    return table;
}

void write_mc_csv(const MonteCarloTable& table, std::ostream& out) {
    out << "estimator,estimand,method,estimate,bias,mean_se,sd,coverage,target,reps,n\n";
    char buf[40];
    auto num = [&buf](double v) {
        std::snprintf(buf, sizeof(buf), "%.8g", v);
        return std::string(buf);
    };
    for (const auto& row : table.rows) {
        out << row.estimator << ',' << row.estimand << ',' << row.method << ','
            << num(row.mean_estimate) << ',' << num(row.bias) << ',' << num(row.mean_se) << ','
            << (row.sd_defined ? num(row.sd) : std::string()) << ',' << num(row.coverage) << ','
            << num(row.target) << ',' << table.reps << ',' << table.n << '\n';
    }
}

NoncollapsibilityCurve noncollapsibility_curves(long reps, long n, std::uint64_t seed,
                                                OutcomeFamily family, int n_threads) {
    if (reps < 1) throw Error("noncollapsibility_curves: reps must be >= 1");
    constexpr int kTau = 5;
    std::vector<std::array<double, kTau>> estimates(reps);
    std::vector<std::string> errors(reps);

    run_parallel(reps, n_threads, [&](long r) {
        try {
            const PanelDataset ds = noncollapsibility_dgp(n, derive_seed(seed, r), family);
            for (int t = 1; t <= kTau; ++t) {
                ModelSpec spec;
                spec.response = Response::outcome;
                spec.link = family == OutcomeFamily::binary ? Link::logit : Link::identity;
                spec.terms = {treat_term()};
                spec.subset.t = t;
                spec.subset.eligible_only = true;
                const auto model = fit(spec, ds);
                estimates[r][t - 1] = model.coefficients[1];
            }
        } catch (const std::exception& e) {
            errors[r] = e.what();
        }
    });
    for (long r = 0; r < reps; ++r)
        if (!errors[r].empty())
            throw Error("noncollapsibility demo replication failed: " + errors[r]);

    NoncollapsibilityCurve curve;
    curve.family = family;
    curve.mean_estimate.resize(kTau);
    curve.sd_estimate.resize(kTau);
    curve.oracle.resize(kTau);
    for (int tix = 0; tix < kTau; ++tix) {
        double sum = 0.0;
        for (long r = 0; r < reps; ++r) sum += estimates[r][tix];
        const double mean = sum / reps;
        double ss = 0.0;
        for (long r = 0; r < reps; ++r) {
            const double d = estimates[r][tix] - mean;
            ss += d * d;
        }
        curve.mean_estimate[tix] = mean;
        curve.sd_estimate[tix] = reps > 1 ? std::sqrt(ss / (reps - 1)) : 0.0;
        curve.oracle[tix] =
            family == OutcomeFamily::binary ? marginal_logodds_oracle(tix + 1) : 1.0;
    }
    return curve;
}

}  // namespace tte
