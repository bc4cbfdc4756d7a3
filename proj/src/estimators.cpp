#include "tte/estimators.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <ostream>
#include <sstream>

#include "tte/stats.hpp"

namespace tte {

std::string to_string(Estimand e) {
    switch (e) {
        case Estimand::psi_u: return "psi_u";
        case Estimand::psi_e: return "psi_e";
        case Estimand::psi_b: return "psi_b";
    }
    return "?";
}

std::string to_string(Method m) { return m == Method::ipw ? "ipw" : "gcomp"; }

std::string to_string(Scale s) {
    return s == Scale::risk_difference ? "risk_difference" : "log_odds";
}

Link default_outcome_link(const PanelDataset& ds, const FormulaConfig& config) {
    if (config.outcome_link) return *config.outcome_link;
    return ds.outcome_family == OutcomeFamily::binary ? Link::logit : Link::identity;
}

NuisanceNeeds needs_for(Estimand estimand, Method method) {
    NuisanceNeeds needs;
    if (method == Method::ipw) {
        needs.propensity = true;
        needs.participation = (estimand == Estimand::psi_b);
    } else {
        needs.outcome = true;
        needs.baseline_regression = (estimand == Estimand::psi_b);
    }
    return needs;
}

std::vector<double> truncate_weights(const std::vector<double>& weights, double percentile) {
    if (weights.empty()) throw Error("truncate_weights: empty weight vector");
    for (double w : weights)
        if (w < 0.0) throw Error("truncate_weights: negative weight");
    const double cap = percentile_nearest_rank(weights, percentile);
    std::vector<double> out = weights;
    for (double& w : out) w = std::min(w, cap);
    return out;
}

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

std::vector<std::string> resolved_covariates(const PanelDataset& ds,
                                             const std::vector<std::string>& requested) {
    return requested.empty() ? ds.covariate_names : requested;
}

bool is_treatment_naive(const PanelDataset& ds) {
    for (const auto& [lo, hi] : ds.clusters()) {
        if (ds.eligible[lo] != 1) return false;
        for (long i = lo + 1; i < hi; ++i)
            if (ds.eligible[i] != (ds.treated[i - 1] == 0 ? 1 : 0)) return false;
    }
    return true;
}

// Eligibility status of a patient in trial t; absent patients count as 0.
int eligible_at(const PanelDataset& ds, long unit, int t) {
    const auto [lo, hi] = ds.clusters()[unit];
    const int first_t = ds.time[lo];
    const long i = lo + (t - first_t);
    if (t < first_t || i >= hi) return 0;
    return ds.eligible[i];
}

std::vector<long> first_rows(const PanelDataset& ds) {
    std::vector<long> rows(ds.n_patients());
    for (long u = 0; u < ds.n_patients(); ++u) rows[u] = ds.clusters()[u].first;
    return rows;
}

std::vector<Term> baseline_terms(const PanelDataset& ds) {
    std::vector<Term> terms;
    terms.reserve(ds.covariate_names.size());
    for (const auto& name : ds.covariate_names) terms.push_back(baseline_term(name));
    return terms;
}

// Least-squares / IRLS fit of an externally supplied response on dataset
// terms, with constant columns dropped. Used for the participation models
// and the nested baseline regressions, whose responses are not columns.
FittedModel fit_external_response(const PanelDataset& ds, const std::vector<long>& rows,
                                  const std::vector<Term>& terms, const Eigen::VectorXd& y,
                                  Link link) {
    FittedModel model;
    model.intercept = true;
    model.spec.link = link;
    model.spec.intercept = true;
    model.spec.terms = terms;
    model.n_used = static_cast<long>(rows.size());

    for (const auto& term : terms) {
        FittedModel probe;
        probe.intercept = false;
        probe.used_terms = {term};
        const Eigen::MatrixXd col = design_matrix(probe, ds, rows);
        if ((col.array() == col(0, 0)).all())
            model.dropped_terms.push_back(term);
        else
            model.used_terms.push_back(term);
    }
    FittedModel shape;
    shape.intercept = true;
    shape.used_terms = model.used_terms;
    const Eigen::MatrixXd x = design_matrix(shape, ds, rows);
    FitOptions options;
    model.coefficients = fit_matrix(x, y, link, options, &model.iterations);
    model.converged = true;
    return model;
}

}  // namespace

NuisanceSet fit_nuisances(const PanelDataset& ds, const FormulaConfig& config,
                          const NuisanceNeeds& needs) {
    NuisanceSet nuis;
    nuis.config = config;
    const int tau = ds.tau;
    nuis.propensity.resize(tau);
    nuis.outcome.resize(tau);
    nuis.participation.resize(tau);
    nuis.baseline_regression.resize(tau);
    nuis.eligibility_marginal = Eigen::VectorXd::Zero(tau);

    for (int t = 1; t <= tau; ++t) {
        const long pres = ds.present_count(t);
        if (pres > 0)
            nuis.eligibility_marginal[t - 1] =
                static_cast<double>(ds.eligible_count(t)) / static_cast<double>(pres);
    }

    FitOptions fit_options;
    fit_options.drop_degenerate_terms = true;

    if (needs.propensity) {
        for (int t = 1; t <= tau; ++t) {
            if (ds.eligible_count(t) == 0) continue;
            ModelSpec spec;
            spec.response = Response::treatment;
            spec.link = config.propensity_link;
            for (const auto& name : resolved_covariates(ds, config.propensity_covariates))
                spec.terms.push_back(cov_term(name));
            if (config.propensity_includes_lag) spec.terms.push_back(lag_term());
            spec.subset.t = t;
            spec.subset.eligible_only = true;
            nuis.propensity[t - 1] = fit(spec, ds, fit_options);
        }
    }

    const Link outcome_link = default_outcome_link(ds, config);
    if (needs.outcome) {
        for (int t = 1; t <= tau; ++t) {
            if (ds.eligible_count(t) == 0) continue;
            ModelSpec spec;
            spec.response = Response::outcome;
            spec.link = outcome_link;
            spec.terms.push_back(treat_term());
            for (const auto& name : resolved_covariates(ds, config.outcome_covariates))
                spec.terms.push_back(cov_term(name));
            if (config.outcome_includes_lag) spec.terms.push_back(lag_term());
            spec.subset.t = t;
            spec.subset.eligible_only = true;
            nuis.outcome[t - 1] = fit(spec, ds, fit_options);
        }
    }

    if (needs.participation) {
        if (tau == 2 && is_treatment_naive(ds) && nuis.propensity.size() >= 1 &&
            nuis.propensity[0].has_value()) {
            // P(I_2=1|L_1) = 1 - P(A_1=1|L_1) under the treatment-naive rule
            nuis.participation_reuses_propensity = true;
        } else {
            std::vector<long> base_rows;
            std::vector<long> base_units;
            for (long u = 0; u < ds.n_patients(); ++u) {
                const long lo = ds.clusters()[u].first;
                if (ds.time[lo] == 1) {
                    base_rows.push_back(lo);
                    base_units.push_back(u);
                }
            }
            for (int t = 1; t <= tau; ++t) {
                Eigen::VectorXd resp(static_cast<long>(base_units.size()));
                for (size_t j = 0; j < base_units.size(); ++j)
                    resp[j] = eligible_at(ds, base_units[j], t);
                if ((resp.array() == 1.0).all()) continue;  // identically 1
                if ((resp.array() == 0.0).all()) continue;  // empty trial, surfaced later
                auto model =
                    fit_external_response(ds, base_rows, baseline_terms(ds), resp, Link::logit);
                model.spec.response = Response::eligibility;
                nuis.participation[t - 1] = std::move(model);
            }
        }
    }

    if (needs.baseline_regression) {
        for (int t = 1; t <= tau; ++t) {
            if (!nuis.outcome[t - 1]) continue;
            const auto& rows = ds.eligible_rows_at(t);
            for (int arm = 0; arm <= 1; ++arm) {
                const Eigen::VectorXd pred =
                    predict_mean(*nuis.outcome[t - 1], ds, rows,
                                 {{"treat", static_cast<double>(arm)}});
                nuis.baseline_regression[t - 1][arm] =
                    fit_external_response(ds, rows, baseline_terms(ds), pred, Link::identity);
            }
        }
    }
    return nuis;
}

void validate_positivity(const PanelDataset& ds, Estimand estimand) {
    if (estimand == Estimand::psi_b && ds.design != Design::visit_time)
        throw Error(
            "baseline-adjusted estimand undefined for calendar-time designs: newly eligible "
            "individuals lack baseline covariates");
    long n_nonempty = 0;
    for (int t = 1; t <= ds.tau; ++t) {
        const bool empty = ds.eligible_count(t) == 0;
        n_nonempty += empty ? 0 : 1;
        if (empty && estimand == Estimand::psi_u)
            throw Error("positivity of eligibility violated: trial t=" + std::to_string(t) +
                        " has no eligible patients");
        if (empty && estimand == Estimand::psi_b)
            throw Error("positivity of the probability of participation violated: trial t=" +
                        std::to_string(t) + " has no eligible patients");
    }
    if (n_nonempty == 0)
        throw Error("positivity of eligibility violated: no trial has eligible patients");
}

namespace plugin {

namespace {

// per-row P(I_t=1|L_1) for psi_b rows
Eigen::VectorXd participation_values(const PanelDataset& ds, const NuisanceSet& nuis) {
    Eigen::VectorXd out = Eigen::VectorXd::Constant(ds.n_rows(), 1.0);
    const auto base_rows = first_rows(ds);
    for (int t = 2; t <= ds.tau; ++t) {
        Eigen::VectorXd per_unit;
        if (nuis.participation_reuses_propensity && t == 2) {
            if (!nuis.propensity[0])
                throw Error("participation reuse requires the t=1 propensity fit");
            per_unit =
                (1.0 - predict_mean(*nuis.propensity[0], ds, base_rows).array()).matrix();
        } else if (t - 1 < static_cast<int>(nuis.participation.size()) &&
                   nuis.participation[t - 1]) {
            per_unit = predict_mean(*nuis.participation[t - 1], ds, base_rows);
        } else {
            continue;  // identically 1
        }
        for (long i : ds.rows_at(t)) out[i] = per_unit[ds.patient[i]];
    }
    return out;
}

struct TrialAggregates {
    std::vector<int> ts;
    std::vector<double> stat1, stat0;  // per active trial, by arm
    std::vector<double> p_hat;
};

// Shared plug-in evaluation: per-trial arm aggregates under either method.
TrialAggregates trial_aggregates(const PanelDataset& ds, Estimand estimand, Method method,
                                 const Values& values, std::optional<double> truncation) {
    validate_positivity(ds, estimand);

    TrialAggregates agg;
    const long n_base = ds.baseline_count();

    // combined (eligibility x treatment) inverse weights, in row order
    Eigen::VectorXd weight_by_row;
    if (method == Method::ipw) {
        std::vector<double> weights;
        std::vector<long> weight_rowids;
        for (long i = 0; i < ds.n_rows(); ++i) {
            if (ds.eligible[i] != 1) continue;
            const int t = ds.time[i];
            const double pi = values.propensity[i];
            if (!(pi > 0.0 && pi < 1.0))
                throw Error("positivity of treatment violated: fitted propensity outside (0,1) "
                            "on an eligible row at t=" + std::to_string(t));
            const double arm_w = ds.treated[i] == 1 ? 1.0 / pi : 1.0 / (1.0 - pi);
            double elig_w;
            if (estimand == Estimand::psi_b) {
                const double part = values.participation[i];
                if (!(part > 0.0 && part <= 1.0))
                    throw Error("positivity of the probability of participation violated: "
                                "fitted P(I_t=1|L_1) outside (0,1] at t=" + std::to_string(t));
                elig_w = 1.0 / part;
            } else {
                elig_w = 1.0 / values.marginal[t - 1];
            }
            weights.push_back(arm_w * elig_w);
            weight_rowids.push_back(i);
        }
        if (truncation) weights = truncate_weights(weights, *truncation);
        weight_by_row = Eigen::VectorXd::Zero(ds.n_rows());
        for (size_t j = 0; j < weight_rowids.size(); ++j)
            weight_by_row[weight_rowids[j]] = weights[j];
    }

    for (int t = 1; t <= ds.tau; ++t) {
        const long elig = ds.eligible_count(t);
        if (elig == 0) continue;  // only reachable for psi_e (zero-weight skip)
        agg.ts.push_back(t);
        agg.p_hat.push_back(values.marginal[t - 1]);
        double s1 = 0.0;
        double s0 = 0.0;
        if (method == Method::ipw) {
            for (long i : ds.eligible_rows_at(t)) {
                const double wy = weight_by_row[i] * ds.outcome[i];
                (ds.treated[i] == 1 ? s1 : s0) += wy;
            }
            // eligibility factors live in the weights; the divisor is the
            // population each definition averages over
            const double denom = estimand == Estimand::psi_b
                                     ? static_cast<double>(n_base)
                                     : static_cast<double>(ds.present_count(t));
            s1 /= denom;
            s0 /= denom;
        } else if (estimand != Estimand::psi_b) {
            for (long i : ds.eligible_rows_at(t)) {
                s1 += values.m1[i];
                s0 += values.m0[i];
            }
            s1 /= static_cast<double>(elig);
            s0 /= static_cast<double>(elig);
        } else {
            // nested regression of the predictions on baseline covariates,
            // averaged over the baseline population (columns constant
            // within the trial are dropped, as in the model-based path)
            const auto& rows = ds.eligible_rows_at(t);
            const long k = ds.covariates.cols();
            std::vector<long> keep;
            for (long c = 0; c < k; ++c) {
                bool constant = true;
                for (size_t j = 1; j < rows.size() && constant; ++j)
                    constant = ds.baseline(rows[j], c) == ds.baseline(rows[0], c);
                if (!constant) keep.push_back(c);
            }
            Eigen::MatrixXd x(static_cast<long>(rows.size()), 1 + static_cast<long>(keep.size()));
            Eigen::VectorXd y1(x.rows()), y0(x.rows());
            for (size_t j = 0; j < rows.size(); ++j) {
                x(j, 0) = 1.0;
                for (size_t c = 0; c < keep.size(); ++c) x(j, 1 + c) = ds.baseline(rows[j], keep[c]);
                y1[j] = values.m1[rows[j]];
                y0[j] = values.m0[rows[j]];
            }
            Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(x);
            qr.setThreshold(1e-10);
            if (qr.rank() < x.cols())
                throw Error("baseline regression design is rank deficient at t=" +
                            std::to_string(t));
            const Eigen::VectorXd d1 = qr.solve(y1);
            const Eigen::VectorXd d0 = qr.solve(y0);
            for (long u = 0; u < ds.n_patients(); ++u) {
                const long lo = ds.clusters()[u].first;
                if (ds.time[lo] != 1) continue;
                double pred1 = d1[0];
                double pred0 = d0[0];
                for (size_t c = 0; c < keep.size(); ++c) {
                    pred1 += d1[1 + c] * ds.baseline(lo, keep[c]);
                    pred0 += d0[1 + c] * ds.baseline(lo, keep[c]);
                }
                s1 += pred1;
                s0 += pred0;
            }
            s1 /= static_cast<double>(n_base);
            s0 /= static_cast<double>(n_base);
        }
        agg.stat1.push_back(s1);
        agg.stat0.push_back(s0);
    }
    return agg;
}

std::array<double, 2> combine(const PanelDataset& ds, Estimand estimand,
                              const TrialAggregates& agg) {
    double a1 = 0.0;
    double a0 = 0.0;
    if (estimand == Estimand::psi_e) {
        double total = 0.0;
        for (size_t j = 0; j < agg.ts.size(); ++j) {
            a1 += agg.p_hat[j] * agg.stat1[j];
            a0 += agg.p_hat[j] * agg.stat0[j];
            total += agg.p_hat[j];
        }
        if (total <= 0.0) throw Error("positivity of eligibility violated: no eligible patients");
        a1 /= total;
        a0 /= total;
    } else {
        for (size_t j = 0; j < agg.ts.size(); ++j) {
            a1 += agg.stat1[j];
            a0 += agg.stat0[j];
        }
        a1 /= static_cast<double>(ds.tau);
        a0 /= static_cast<double>(ds.tau);
    }
    return {a1, a0};
}

}  // namespace

Values from_models(const PanelDataset& ds, const NuisanceSet& nuis, const NuisanceNeeds& needs) {
    Values values;
    const long n = ds.n_rows();
    const double nan = std::numeric_limits<double>::quiet_NaN();
    values.marginal = nuis.eligibility_marginal;
    values.propensity = Eigen::VectorXd::Constant(n, nan);
    values.m1 = Eigen::VectorXd::Constant(n, nan);
    values.m0 = Eigen::VectorXd::Constant(n, nan);
    values.participation = Eigen::VectorXd::Constant(n, nan);

    for (int t = 1; t <= ds.tau; ++t) {
        const auto& rows = ds.eligible_rows_at(t);
        if (rows.empty()) continue;
        if (needs.propensity) {
            if (!nuis.propensity[t - 1])
                throw Error("missing propensity fit at t=" + std::to_string(t));
            const auto fitted = predict_mean(*nuis.propensity[t - 1], ds, rows);
            for (size_t j = 0; j < rows.size(); ++j) values.propensity[rows[j]] = fitted[j];
        }
        if (needs.outcome) {
            if (!nuis.outcome[t - 1]) throw Error("missing outcome fit at t=" + std::to_string(t));
            const auto pred1 = predict_mean(*nuis.outcome[t - 1], ds, rows, {{"treat", 1.0}});
            const auto pred0 = predict_mean(*nuis.outcome[t - 1], ds, rows, {{"treat", 0.0}});
            for (size_t j = 0; j < rows.size(); ++j) {
                values.m1[rows[j]] = pred1[j];
                values.m0[rows[j]] = pred0[j];
            }
        }
    }
    if (needs.participation) values.participation = participation_values(ds, nuis);
    return values;
}

double point(const PanelDataset& ds, Estimand estimand, Method method, const Values& values,
             std::optional<double> truncation) {
    const auto agg = trial_aggregates(ds, estimand, method, values, truncation);
    const auto arms = combine(ds, estimand, agg);
    return arms[0] - arms[1];
}

std::array<double, 2> arm_means(const PanelDataset& ds, Estimand estimand, Method method,
                                const Values& values, std::optional<double> truncation) {
    const auto agg = trial_aggregates(ds, estimand, method, values, truncation);
    return combine(ds, estimand, agg);
}

}  // namespace plugin

// ---------------------------------------------------------------------------
// Stacked estimating equations for the full nuisance + estimand system.

namespace {

struct ParamBlock {
    long offset = -1;
    long size = 0;
};

enum class ParticipationKind { one, reuse, fitted };

struct TrialStack {
    int t = 1;
    long pres = 0;
    long elig = 0;
    ParamBlock coef;    // propensity (ipw) or outcome (gcomp) coefficients
    ParamBlock base0;   // baseline regression, arm 0 (psi_b gcomp)
    ParamBlock base1;
    ParamBlock part;    // participation model (psi_b ipw, fitted case)
    ParamBlock p;       // marginal eligibility
    ParamBlock stat;    // trial statistic: contrast (size 1) or arm means (size 2)
    Eigen::MatrixXd x;  // nuisance design over eligible rows at t
    long treat_col = -1;
    Eigen::VectorXd a;  // treatment over eligible rows
    Eigen::VectorXd y;  // outcome over eligible rows
    ParticipationKind part_kind = ParticipationKind::one;
    Eigen::MatrixXd x_base0, x_base1;  // per-unit designs of the t-specific baseline fits
    Eigen::MatrixXd x_part;            // per-unit design of the participation fit
    Eigen::VectorXd part_resp;         // per-unit participation response
};

class StackEngine {
  public:
    StackEngine(const PanelDataset& ds, const NuisanceSet& nuis, Estimand estimand, Method method,
                bool arm_split, std::optional<double> truncation)
        : ds_(ds), nuis_(nuis), estimand_(estimand), method_(method), arm_split_(arm_split) {
        plink_ = nuis.config.propensity_link;
        olink_ = default_outcome_link(ds, nuis.config);
        needs_ = needs_for(estimand, method);
        values_ = plugin::from_models(ds, nuis, needs_);
        build_layout();
        compute_cap(truncation);
        assemble_theta();
    }

    long dim() const { return dim_; }
    const Eigen::VectorXd& theta_hat() const { return theta_hat_; }
    long final_offset() const { return final_.offset; }
    long final_size() const { return final_.size; }

    EstimatingSystem system() const {
        EstimatingSystem sys;
        sys.dim = dim_;
        sys.n_units = ds_.n_patients();
        sys.theta_hat = theta_hat_;
        sys.psi = [this](long unit, const Eigen::VectorXd& th) { return unit_psi(unit, th); };
        return sys;
    }

    Eigen::VectorXd unit_psi(long unit, const Eigen::VectorXd& th) const;

  private:
    const PanelDataset& ds_;
    const NuisanceSet& nuis_;
    Estimand estimand_;
    Method method_;
    bool arm_split_;
    Link plink_ = Link::logit;
    Link olink_ = Link::identity;
    NuisanceNeeds needs_;
    plugin::Values values_;

    std::vector<TrialStack> trials_;
    std::vector<int> trial_of_t_;  // tau entries, -1 = skipped trial
    ParamBlock final_;
    long dim_ = 0;
    double cap_ = kInf;
    bool use_p_ = false;
    Eigen::VectorXd theta_hat_;
    std::vector<long> pos_in_elig_;
    Eigen::MatrixXd x_prop_base_;  // per unit: t=1 propensity design at the first record
    std::vector<char> is_baseline_;

    void build_layout();
    void compute_cap(std::optional<double> truncation);
    void assemble_theta();
    std::array<double, 2> trial_statistic(const TrialStack& trial) const;
    std::array<double, 2> aggregate_from_theta(const Eigen::VectorXd& th) const;
    double participation_value(long unit, const TrialStack& trial,
                               const Eigen::VectorXd& th) const;
    void add_stat(Eigen::VectorXd& out, const TrialStack& trial, double v1, double v0) const;
    void subtract_stat(Eigen::VectorXd& out, const TrialStack& trial,
                       const Eigen::VectorXd& th) const;
};

void StackEngine::build_layout() {
    const int tau = ds_.tau;
    trial_of_t_.assign(tau, -1);
    use_p_ = (estimand_ == Estimand::psi_e) ||
             (method_ == Method::ipw && estimand_ != Estimand::psi_b);
    pos_in_elig_.assign(ds_.n_rows(), -1);
    const auto base_rows = first_rows(ds_);
    long dim = 0;

    for (int t = 1; t <= tau; ++t) {
        if (ds_.eligible_count(t) == 0) continue;  // psi_e skip; others validated upstream
        TrialStack trial;
        trial.t = t;
        trial.pres = ds_.present_count(t);
        trial.elig = ds_.eligible_count(t);
        const auto& rows = ds_.eligible_rows_at(t);
        for (size_t j = 0; j < rows.size(); ++j) pos_in_elig_[rows[j]] = static_cast<long>(j);

        const FittedModel& model = method_ == Method::ipw ? nuis_.propensity[t - 1].value()
                                                          : nuis_.outcome[t - 1].value();
        trial.x = design_matrix(model, ds_, rows);
        trial.coef = {dim, model.coefficients.size()};
        dim += trial.coef.size;
        if (method_ == Method::gcomp) {
            long col = model.intercept ? 1 : 0;
            for (const auto& term : model.used_terms) {
                if (term.kind == TermKind::treatment) trial.treat_col = col;
                ++col;
            }
            if (trial.treat_col < 0) throw Error("outcome model must include the treatment term");
        }
        trial.a.resize(static_cast<long>(rows.size()));
        trial.y.resize(static_cast<long>(rows.size()));
        for (size_t j = 0; j < rows.size(); ++j) {
            trial.a[j] = ds_.treated[rows[j]];
            trial.y[j] = ds_.outcome[rows[j]];
        }

        if (estimand_ == Estimand::psi_b && method_ == Method::gcomp) {
            const auto& base = nuis_.baseline_regression[t - 1];
            if (!base[0] || !base[1])
                throw Error("missing baseline regression at t=" + std::to_string(t));
            trial.base0 = {dim, base[0]->coefficients.size()};
            dim += trial.base0.size;
            trial.base1 = {dim, base[1]->coefficients.size()};
            dim += trial.base1.size;
            trial.x_base0 = design_matrix(*base[0], ds_, base_rows);
            trial.x_base1 = design_matrix(*base[1], ds_, base_rows);
        }
        if (estimand_ == Estimand::psi_b && method_ == Method::ipw) {
            if (nuis_.participation_reuses_propensity && t == 2) {
                trial.part_kind = ParticipationKind::reuse;
            } else if (nuis_.participation[t - 1]) {
                trial.part_kind = ParticipationKind::fitted;
                trial.part = {dim, nuis_.participation[t - 1]->coefficients.size()};
                dim += trial.part.size;
                trial.x_part = design_matrix(*nuis_.participation[t - 1], ds_, base_rows);
                trial.part_resp.resize(ds_.n_patients());
                for (long u = 0; u < ds_.n_patients(); ++u)
                    trial.part_resp[u] = eligible_at(ds_, u, t);
            }
        }
        if (use_p_) {
            trial.p = {dim, 1};
            dim += 1;
        }
        trial.stat = {dim, arm_split_ ? 2 : 1};
        dim += trial.stat.size;
        trial_of_t_[t - 1] = static_cast<int>(trials_.size());
        trials_.push_back(std::move(trial));
    }
    final_ = {dim, arm_split_ ? 2 : 1};
    dim += final_.size;
    dim_ = dim;

    is_baseline_.assign(ds_.n_patients(), 0);
    for (long u = 0; u < ds_.n_patients(); ++u)
        is_baseline_[u] = ds_.time[ds_.clusters()[u].first] == 1 ? 1 : 0;

    if (estimand_ == Estimand::psi_b && method_ == Method::ipw &&
        nuis_.participation_reuses_propensity)
        x_prop_base_ = design_matrix(nuis_.propensity[0].value(), ds_, base_rows);
}

void StackEngine::compute_cap(std::optional<double> truncation) {
    cap_ = kInf;
    if (!truncation || method_ != Method::ipw) return;
    std::vector<double> weights;
    for (long i = 0; i < ds_.n_rows(); ++i) {
        if (ds_.eligible[i] != 1) continue;
        const int t = ds_.time[i];
        if (trial_of_t_[t - 1] < 0) continue;
        const double pi = values_.propensity[i];
        const double arm_w = ds_.treated[i] == 1 ? 1.0 / pi : 1.0 / (1.0 - pi);
        const double elig_w = estimand_ == Estimand::psi_b ? 1.0 / values_.participation[i]
                                                           : 1.0 / values_.marginal[t - 1];
        weights.push_back(arm_w * elig_w);
    }
    cap_ = percentile_nearest_rank(weights, *truncation);
}

void StackEngine::assemble_theta() {
    theta_hat_ = Eigen::VectorXd::Zero(dim_);
    for (const auto& trial : trials_) {
        const int t = trial.t;
        const FittedModel& model = method_ == Method::ipw ? nuis_.propensity[t - 1].value()
                                                          : nuis_.outcome[t - 1].value();
        theta_hat_.segment(trial.coef.offset, trial.coef.size) = model.coefficients;
        if (trial.base0.offset >= 0) {
            theta_hat_.segment(trial.base0.offset, trial.base0.size) =
                nuis_.baseline_regression[t - 1][0]->coefficients;
            theta_hat_.segment(trial.base1.offset, trial.base1.size) =
                nuis_.baseline_regression[t - 1][1]->coefficients;
        }
        if (trial.part_kind == ParticipationKind::fitted)
            theta_hat_.segment(trial.part.offset, trial.part.size) =
                nuis_.participation[t - 1]->coefficients;
        if (use_p_) theta_hat_[trial.p.offset] = values_.marginal[t - 1];
    }
    for (auto& trial : trials_) {
        const auto stats = trial_statistic(trial);
        if (arm_split_) {
            theta_hat_[trial.stat.offset] = stats[0];
            theta_hat_[trial.stat.offset + 1] = stats[1];
        } else {
            theta_hat_[trial.stat.offset] = stats[0] - stats[1];
        }
    }
    const auto final_stats = aggregate_from_theta(theta_hat_);
    theta_hat_[final_.offset] = final_stats[0];
    if (arm_split_) theta_hat_[final_.offset + 1] = final_stats[1];
}

std::array<double, 2> StackEngine::trial_statistic(const TrialStack& trial) const {
    const int t = trial.t;
    double s1 = 0.0;
    double s0 = 0.0;
    const auto& rows = ds_.eligible_rows_at(t);
    if (method_ == Method::ipw) {
        for (size_t j = 0; j < rows.size(); ++j) {
            const long i = rows[j];
            const double pi = values_.propensity[i];
            const double arm_w = ds_.treated[i] == 1 ? 1.0 / pi : 1.0 / (1.0 - pi);
            const double elig_w = estimand_ == Estimand::psi_b ? 1.0 / values_.participation[i]
                                                               : 1.0 / values_.marginal[t - 1];
            const double w = std::min(arm_w * elig_w, cap_);
            (ds_.treated[i] == 1 ? s1 : s0) += w * ds_.outcome[i];
        }
        const double denom = estimand_ == Estimand::psi_b
                                 ? static_cast<double>(ds_.baseline_count())
                                 : static_cast<double>(trial.pres);
        s1 /= denom;
        s0 /= denom;
    } else if (estimand_ != Estimand::psi_b) {
        for (long i : rows) {
            s1 += values_.m1[i];
            s0 += values_.m0[i];
        }
        s1 /= static_cast<double>(trial.elig);
        s0 /= static_cast<double>(trial.elig);
    } else {
        const auto& d1 = nuis_.baseline_regression[t - 1][1]->coefficients;
        const auto& d0 = nuis_.baseline_regression[t - 1][0]->coefficients;
        long n_base = 0;
        for (long u = 0; u < ds_.n_patients(); ++u) {
            if (!is_baseline_[u]) continue;
            s1 += trial.x_base1.row(u).dot(d1);
            s0 += trial.x_base0.row(u).dot(d0);
            ++n_base;
        }
        s1 /= static_cast<double>(n_base);
        s0 /= static_cast<double>(n_base);
    }
    return {s1, s0};
}

std::array<double, 2> StackEngine::aggregate_from_theta(const Eigen::VectorXd& th) const {
    double a1 = 0.0;
    double a0 = 0.0;
    if (estimand_ == Estimand::psi_e) {
        double total = 0.0;
        for (const auto& trial : trials_) {
            const double p = th[trial.p.offset];
            total += p;
            a1 += p * th[trial.stat.offset];
            if (arm_split_) a0 += p * th[trial.stat.offset + 1];
        }
        a1 /= total;
        a0 /= total;
    } else {
        for (const auto& trial : trials_) {
            a1 += th[trial.stat.offset];
            if (arm_split_) a0 += th[trial.stat.offset + 1];
        }
        a1 /= static_cast<double>(ds_.tau);
        a0 /= static_cast<double>(ds_.tau);
    }
    return {a1, a0};
}

double StackEngine::participation_value(long unit, const TrialStack& trial,
                                        const Eigen::VectorXd& th) const {
    switch (trial.part_kind) {
        case ParticipationKind::one: return 1.0;
        case ParticipationKind::reuse: {
            const auto& t1 = trials_[trial_of_t_[0]];
            const auto beta = th.segment(t1.coef.offset, t1.coef.size);
            return 1.0 - inverse_link(plink_, x_prop_base_.row(unit).dot(beta));
        }
        case ParticipationKind::fitted: {
            const auto eta = th.segment(trial.part.offset, trial.part.size);
            return expit(trial.x_part.row(unit).dot(eta));
        }
    }
    return 1.0;
}

Eigen::VectorXd StackEngine::unit_psi(long unit, const Eigen::VectorXd& th) const {
    Eigen::VectorXd out = Eigen::VectorXd::Zero(dim_);
    const auto [lo, hi] = ds_.clusters()[unit];
    for (long i = lo; i < hi; ++i) {
        const int trial_ix = trial_of_t_[ds_.time[i] - 1];
        if (trial_ix < 0) continue;
        const TrialStack& trial = trials_[trial_ix];
        const bool elig = ds_.eligible[i] == 1;
        if (use_p_) out[trial.p.offset] += (elig ? 1.0 : 0.0) - th[trial.p.offset];

        double val1 = 0.0;
        double val0 = 0.0;
        if (elig) {
            const long pe = pos_in_elig_[i];
            if (method_ == Method::ipw) {
                const auto beta = th.segment(trial.coef.offset, trial.coef.size);
                const double eta = trial.x.row(pe).dot(beta);
                const double pi = inverse_link(plink_, eta);
                out.segment(trial.coef.offset, trial.coef.size) +=
                    trial.x.row(pe).transpose() * score_residual(plink_, eta, trial.a[pe]);
                const double arm_w = trial.a[pe] == 1.0 ? 1.0 / pi : 1.0 / (1.0 - pi);
                const double elig_w = estimand_ == Estimand::psi_b
                                          ? 1.0 / participation_value(unit, trial, th)
                                          : 1.0 / th[trial.p.offset];
                const double wy = std::min(arm_w * elig_w, cap_) * trial.y[pe];
                val1 = trial.a[pe] * wy;
                val0 = (1.0 - trial.a[pe]) * wy;
            } else {
                const auto gamma = th.segment(trial.coef.offset, trial.coef.size);
                const double eta_obs = trial.x.row(pe).dot(gamma);
                out.segment(trial.coef.offset, trial.coef.size) +=
                    trial.x.row(pe).transpose() * score_residual(olink_, eta_obs, trial.y[pe]);
                const double gt = gamma[trial.treat_col];
                const double a = trial.a[pe];
                val1 = inverse_link(olink_, eta_obs + gt * (1.0 - a));
                val0 = inverse_link(olink_, eta_obs - gt * a);
                if (trial.base0.offset >= 0) {
                    const auto d0 = th.segment(trial.base0.offset, trial.base0.size);
                    const auto d1 = th.segment(trial.base1.offset, trial.base1.size);
                    out.segment(trial.base0.offset, trial.base0.size) +=
                        trial.x_base0.row(unit).transpose() *
                        (val0 - trial.x_base0.row(unit).dot(d0));
                    out.segment(trial.base1.offset, trial.base1.size) +=
                        trial.x_base1.row(unit).transpose() *
                        (val1 - trial.x_base1.row(unit).dot(d1));
                }
            }
        }

        // trial-statistic moments; the normalizing population differs per
        // estimand: present rows, eligible rows, or baseline units
        if (estimand_ == Estimand::psi_b) {
            if (method_ == Method::ipw) add_stat(out, trial, val1, val0);
        } else if (method_ == Method::ipw) {
            add_stat(out, trial, val1, val0);
            subtract_stat(out, trial, th);
        } else if (elig) {
            add_stat(out, trial, val1, val0);
            subtract_stat(out, trial, th);
        }
    }

    if (estimand_ == Estimand::psi_b && is_baseline_[unit]) {
        for (const auto& trial : trials_) {
            if (method_ == Method::gcomp) {
                const auto d0 = th.segment(trial.base0.offset, trial.base0.size);
                const auto d1 = th.segment(trial.base1.offset, trial.base1.size);
                add_stat(out, trial, trial.x_base1.row(unit).dot(d1),
                         trial.x_base0.row(unit).dot(d0));
            }
            subtract_stat(out, trial, th);
            if (trial.part_kind == ParticipationKind::fitted) {
                const auto eta = th.segment(trial.part.offset, trial.part.size);
                const double fitted = expit(trial.x_part.row(unit).dot(eta));
                out.segment(trial.part.offset, trial.part.size) +=
                    trial.x_part.row(unit).transpose() * (trial.part_resp[unit] - fitted);
            }
        }
    }

    // aggregate moment, identical across units (a pure transformation)
    const auto agg = aggregate_from_theta(th);
    if (estimand_ == Estimand::psi_e) {
        double total = 0.0;
        for (const auto& trial : trials_) total += th[trial.p.offset];
        out[final_.offset] += (th[final_.offset] - agg[0]) * total;
        if (arm_split_) out[final_.offset + 1] += (th[final_.offset + 1] - agg[1]) * total;
    } else {
        out[final_.offset] += th[final_.offset] - agg[0];
        if (arm_split_) out[final_.offset + 1] += th[final_.offset + 1] - agg[1];
    }
    return out;
}

void StackEngine::add_stat(Eigen::VectorXd& out, const TrialStack& trial, double v1,
                           double v0) const {
    if (arm_split_) {
        out[trial.stat.offset] += v1;
        out[trial.stat.offset + 1] += v0;
    } else {
        out[trial.stat.offset] += v1 - v0;
    }
}

void StackEngine::subtract_stat(Eigen::VectorXd& out, const TrialStack& trial,
                                const Eigen::VectorXd& th) const {
    for (long j = 0; j < trial.stat.size; ++j)
        out[trial.stat.offset + j] -= th[trial.stat.offset + j];
}

EstimateReport finish_report(const PanelDataset& ds, const NuisanceSet& nuis, Estimand estimand,
                             Method method, Scale scale, const EstimateOptions& options) {
    const auto truncation =
        method == Method::ipw ? options.truncation_percentile : std::optional<double>{};
    const NuisanceNeeds needs = needs_for(estimand, method);
    const auto values = plugin::from_models(ds, nuis, needs);

    EstimateReport report;
    report.estimand = estimand;
    report.method = method;
    report.scale = scale;
    report.level = options.level;
    report.truncation_percentile = truncation;

    // validation and plug-in point via the value layer
    const auto arms = plugin::arm_means(ds, estimand, method, values, truncation);
    const bool arm_split = scale == Scale::log_odds;
    if (arm_split) {
        if (ds.outcome_family != OutcomeFamily::binary)
            throw Error("log-odds scale requires a binary outcome family");
        for (double a : arms)
            if (!(a > 0.0 && a < 1.0)) throw Error("arm-specific mean at 0 or 1: logit undefined");
        report.point = logit(arms[0]) - logit(arms[1]);
    } else {
        report.point = arms[0] - arms[1];
    }

    if (options.with_variance) {
        StackEngine engine(ds, nuis, estimand, method, arm_split, truncation);
        auto system = engine.system();
        const Eigen::MatrixXd vcov = sandwich_variance(system);
        const long off = engine.final_offset();
        if (arm_split) {
            const double p1 = engine.theta_hat()[off];
            const double p0 = engine.theta_hat()[off + 1];
            report.point = logit(p1) - logit(p0);
            Eigen::VectorXd grad(2);
            grad << 1.0 / (p1 * (1.0 - p1)), -1.0 / (p0 * (1.0 - p0));
            report.se = delta_method_se(grad, vcov.block(off, off, 2, 2));
        } else {
            report.point = engine.theta_hat()[off];
            report.se = std::sqrt(std::max(vcov(off, off), 0.0));
        }
    }
    const Interval ci = wald_ci(report.point, report.se, options.level);
    report.ci_lower = ci.lower;
    report.ci_upper = ci.upper;
    return report;
}

}  // namespace

EstimateReport estimate(const PanelDataset& ds, const NuisanceSet& nuis, Estimand estimand,
                        Method method, const EstimateOptions& options) {
    return finish_report(ds, nuis, estimand, method, Scale::risk_difference, options);
}

EstimateReport estimate_psi_u(const PanelDataset& ds, const NuisanceSet& nuis, Method method,
                              const EstimateOptions& options) {
    return estimate(ds, nuis, Estimand::psi_u, method, options);
}

EstimateReport estimate_psi_e(const PanelDataset& ds, const NuisanceSet& nuis, Method method,
                              const EstimateOptions& options) {
    return estimate(ds, nuis, Estimand::psi_e, method, options);
}

EstimateReport estimate_psi_b(const PanelDataset& ds, const NuisanceSet& nuis, Method method,
                              const EstimateOptions& options) {
    return estimate(ds, nuis, Estimand::psi_b, method, options);
}

EstimateReport estimate_odds_scale(const PanelDataset& ds, const NuisanceSet& nuis,
                                   Estimand estimand, Method method,
                                   const EstimateOptions& options) {
    return finish_report(ds, nuis, estimand, method, Scale::log_odds, options);
}

std::string report_json(const EstimateReport& report) {
    std::ostringstream out;
    char buf[40];
    auto num = [&buf](double v) {
        std::snprintf(buf, sizeof(buf), "%.12g", v);
        return std::string(buf);
    };
    out << "{\"estimand\":\"" << to_string(report.estimand) << "\",\"method\":\""
        << to_string(report.method) << "\",\"scale\":\"" << to_string(report.scale)
        << "\",\"point\":" << num(report.point) << ",\"se\":" << num(report.se)
        << ",\"ci_lower\":" << num(report.ci_lower) << ",\"ci_upper\":" << num(report.ci_upper)
        << ",\"level\":" << num(report.level) << ",\"truncation_percentile\":";
    if (report.truncation_percentile)
        out << num(*report.truncation_percentile);
    else
        out << "null";
    out << "}";
    return out.str();
}

void write_reports_csv(const std::vector<EstimateReport>& reports, std::ostream& out) {
    out << "estimand,method,scale,point,se,ci_lower,ci_upper\n";
    char buf[40];
    for (const auto& r : reports) {
        auto num = [&buf](double v) {
            std::snprintf(buf, sizeof(buf), "%.12g", v);
            return std::string(buf);
        };
        out << to_string(r.estimand) << ',' << to_string(r.method) << ',' << to_string(r.scale)
            << ',' << num(r.point) << ',' << num(r.se) << ',' << num(r.ci_lower) << ','
            << num(r.ci_upper) << '\n';
    }
}

}  // namespace tte
