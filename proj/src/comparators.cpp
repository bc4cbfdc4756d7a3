#include "tte/comparators.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include "tte/mestim.hpp"
#include "tte/stats.hpp"

namespace tte {

namespace {

// cluster-robust sandwich for a single pooled regression fit
Eigen::MatrixXd regression_sandwich(const PanelDataset& ds, const FittedModel& model) {
    const auto rows = subset_rows(ds, model.spec.subset);
    const Eigen::MatrixXd x = design_matrix(model, ds, rows);
    const Eigen::VectorXd y = response_vector(model.spec.response, ds, rows);

    // row -> position in the fit subset
    std::vector<long> pos(ds.n_rows(), -1);
    for (size_t j = 0; j < rows.size(); ++j) pos[rows[j]] = static_cast<long>(j);

    const Link link = model.spec.link;
    EstimatingSystem system;
    system.dim = model.coefficients.size();
    system.n_units = ds.n_patients();
    system.theta_hat = model.coefficients;
    system.psi = [&ds, &x, &y, &pos, link, dim = system.dim](long unit,
                                                             const Eigen::VectorXd& th) {
        Eigen::VectorXd out = Eigen::VectorXd::Zero(dim);
        const auto [lo, hi] = ds.clusters()[unit];
        for (long i = lo; i < hi; ++i) {
            const long j = pos[i];
            if (j < 0) continue;
            const double eta = x.row(j).dot(th);
            out += x.row(j).transpose() * score_residual(link, eta, y[j]);
        }
        return out;
    };
    return sandwich_variance(system);
}

long treatment_column(const FittedModel& model) {
    long col = model.intercept ? 1 : 0;
    for (const auto& term : model.used_terms) {
        if (term.kind == TermKind::treatment) return col;
        ++col;
    }
    throw Error("model has no treatment term");
}

ComparatorReport report_from(const std::string& name, const FittedModel& model, double point,
                             double se, double level) {
    ComparatorReport report;
    report.estimator = name;
    report.point = point;
    report.se = se;
    report.level = level;
    report.coefficients = model.coefficients;
    const Interval ci = wald_ci(point, se, level);
    report.ci_lower = ci.lower;
    report.ci_upper = ci.upper;
    return report;
}

}  // namespace

ComparatorReport pooled_ols(const PanelDataset& ds, const PooledTerms& terms, double level,
                            bool with_variance) {
    ModelSpec spec;
    spec.response = Response::outcome;
    spec.link = Link::identity;
    const auto covs = terms.covariates.empty() ? ds.covariate_names : terms.covariates;
    for (const auto& name : covs) spec.terms.push_back(cov_term(name));
    spec.terms.push_back(treat_term());
    if (terms.include_lag) spec.terms.push_back(lag_term());
    if (terms.include_time) spec.terms.push_back(time_term());
    spec.subset.eligible_only = true;

    const FittedModel model = fit(spec, ds);
    const long a_col = treatment_column(model);
    double se = 0.0;
    if (with_variance) {
        const Eigen::MatrixXd vcov = regression_sandwich(ds, model);
        se = std::sqrt(std::max(vcov(a_col, a_col), 0.0));
    }
    return report_from("pooled_ols", model, model.coefficients[a_col], se, level);
}

double g_estimate_value(const PanelDataset& ds, const Eigen::VectorXd& propensity) {
    if (propensity.size() != ds.n_rows())
        throw Error("g_estimate: propensity vector must align with dataset rows");
    double num = 0.0;
    double den = 0.0;
    long n_elig = 0;
    for (long i = 0; i < ds.n_rows(); ++i) {
        if (ds.eligible[i] != 1) continue;
        const double resid = ds.treated[i] - propensity[i];
        num += resid * ds.outcome[i];
        den += resid * ds.treated[i];
        ++n_elig;
    }
    if (n_elig == 0) throw Error("g_estimate: no eligible rows");
    if (std::abs(den) <= 1e-12 * static_cast<double>(n_elig))
        throw Error("g_estimate: zero denominator, no residual treatment variation");
    return num / den;
}

ComparatorReport g_estimate(const PanelDataset& ds, const std::vector<FittedModel>& propensity,
                            double level, bool with_variance) {
    if (propensity.empty()) throw Error("g_estimate: no propensity models supplied");
    const bool pooled = propensity.size() == 1;
    if (!pooled && static_cast<int>(propensity.size()) != ds.tau)
        throw Error("g_estimate: expected one propensity model per visit or a single pooled fit");

    // fitted values per eligible row
    Eigen::VectorXd fitted = Eigen::VectorXd::Zero(ds.n_rows());
    for (int t = 1; t <= ds.tau; ++t) {
        const auto& rows = ds.eligible_rows_at(t);
        if (rows.empty()) continue;
        const FittedModel& model = pooled ? propensity[0] : propensity[t - 1];
        const Eigen::VectorXd pred = predict_mean(model, ds, rows);
        for (size_t j = 0; j < rows.size(); ++j) fitted[rows[j]] = pred[j];
    }
    const double psi_hat = g_estimate_value(ds, fitted);

    double se = 0.0;
    if (with_variance) {
        // stack: propensity scores per model block, then the ratio moment
        struct ModelBlock {
            long offset;
            long size;
            Eigen::MatrixXd x;           // design over its rows
            Eigen::VectorXd a;           // response
            std::vector<long> pos;       // row -> local index
            Link link;
        };
        std::vector<ModelBlock> blocks;
        std::vector<int> block_of_t(ds.tau, -1);
        long dim = 0;
        const long n_models = pooled ? 1 : ds.tau;
        for (long m = 0; m < n_models; ++m) {
            const FittedModel& model = propensity[m];
            std::vector<long> rows;
            if (pooled) {
                for (int t = 1; t <= ds.tau; ++t)
                    for (long i : ds.eligible_rows_at(t)) rows.push_back(i);
                std::sort(rows.begin(), rows.end());
            } else {
                rows = ds.eligible_rows_at(static_cast<int>(m + 1));
            }
            if (rows.empty()) continue;
            ModelBlock block;
            block.offset = dim;
            block.size = model.coefficients.size();
            block.x = design_matrix(model, ds, rows);
            block.a = response_vector(Response::treatment, ds, rows);
            block.pos.assign(ds.n_rows(), -1);
            for (size_t j = 0; j < rows.size(); ++j) block.pos[rows[j]] = static_cast<long>(j);
            block.link = model.spec.link;
            dim += block.size;
            if (pooled)
                for (int t = 1; t <= ds.tau; ++t) block_of_t[t - 1] = 0;
            else
                block_of_t[m] = static_cast<int>(blocks.size());
            blocks.push_back(std::move(block));
        }
        const long psi_off = dim;
        dim += 1;

        Eigen::VectorXd theta(dim);
        for (long m = 0; m < n_models; ++m) {
            const int bix = pooled ? 0 : block_of_t[m];
            if (bix < 0) continue;
            theta.segment(blocks[bix].offset, blocks[bix].size) = propensity[m].coefficients;
        }
        theta[psi_off] = psi_hat;

        EstimatingSystem system;
        system.dim = dim;
        system.n_units = ds.n_patients();
        system.theta_hat = theta;
        system.psi = [&, dim, psi_off](long unit, const Eigen::VectorXd& th) {
            Eigen::VectorXd out = Eigen::VectorXd::Zero(dim);
            const auto [lo, hi] = ds.clusters()[unit];
            for (long i = lo; i < hi; ++i) {
                if (ds.eligible[i] != 1) continue;
                const int bix = block_of_t[ds.time[i] - 1];
                if (bix < 0) continue;
                const ModelBlock& block = blocks[bix];
                const long j = block.pos[i];
                if (j < 0) continue;
                const double eta = block.x.row(j).dot(th.segment(block.offset, block.size));
                out.segment(block.offset, block.size) +=
                    block.x.row(j).transpose() * score_residual(block.link, eta, block.a[j]);
                const double resid = block.a[j] - inverse_link(block.link, eta);
                out[psi_off] += resid * (ds.outcome[i] - th[psi_off] * ds.treated[i]);
            }
            return out;
        };
        const Eigen::MatrixXd vcov = sandwich_variance(system);
        se = std::sqrt(std::max(vcov(psi_off, psi_off), 0.0));
    }

    ComparatorReport report;
    report.estimator = "g_estimation";
    report.point = psi_hat;
    report.se = se;
    report.level = level;
    const Interval ci = wald_ci(psi_hat, se, level);
    report.ci_lower = ci.lower;
    report.ci_upper = ci.upper;
    return report;
}

ComparatorReport pooled_logistic_mle(const PanelDataset& ds, const PooledLogisticSpec& spec,
                                     double level, bool with_variance) {
    if (ds.outcome_family != OutcomeFamily::binary)
        throw Error("pooled logistic regression requires a binary outcome");
    ModelSpec model_spec;
    model_spec.response = Response::outcome;
    model_spec.link = Link::logit;
    if (spec.include_time && !spec.only_t) model_spec.terms.push_back(time_term());
    const auto covs = spec.covariates.empty() ? ds.covariate_names : spec.covariates;
    for (const auto& name : covs) model_spec.terms.push_back(cov_term(name));
    model_spec.terms.push_back(treat_term());
    if (spec.include_lag) model_spec.terms.push_back(lag_term());
    model_spec.subset.eligible_only = true;
    model_spec.subset.t = spec.only_t;

    FitOptions options;
    options.drop_degenerate_terms = true;
    const FittedModel model = fit(model_spec, ds, options);
    const long a_col = treatment_column(model);
    double se = 0.0;
    if (with_variance) {
        const Eigen::MatrixXd vcov = regression_sandwich(ds, model);
        se = std::sqrt(std::max(vcov(a_col, a_col), 0.0));
    }
    const std::string name =
        spec.only_t ? "logistic_mle_t" + std::to_string(*spec.only_t) : "pooled_logistic_mle";
    return report_from(name, model, model.coefficients[a_col], se, level);
}

// ---------------------------------------------------------------------------
// Population limits

double evaluate_ols_limit(const PanelDataset& panel, const CounterfactualTable& cf,
                          const Eigen::VectorXd& pi_tilde) {
    if (pi_tilde.size() != panel.n_rows())
        throw Error("evaluate_ols_limit: pi_tilde must align with rows");
    double num = 0.0;
    double den = 0.0;
    for (long i = 0; i < panel.n_rows(); ++i) {
        if (panel.eligible[i] != 1) continue;
        const double pi = cf.propensity[i];
        const double pt = pi_tilde[i];
        num += pi * (1.0 - pt) * (cf.y1[i] - cf.y0[i]) + (pi - pt) * cf.y0[i];
        den += pi * (1.0 - pt);
    }
    if (den == 0.0) throw Error("evaluate_ols_limit: zero denominator");
    return num / den;
}

double evaluate_g_limit(const PanelDataset& panel, const CounterfactualTable& cf) {
    double num = 0.0;
    double den = 0.0;
    for (long i = 0; i < panel.n_rows(); ++i) {
        if (panel.eligible[i] != 1) continue;
        const double v = cf.propensity[i] * (1.0 - cf.propensity[i]);
        num += v * (cf.y1[i] - cf.y0[i]);
        den += v;
    }
    if (den == 0.0)
        throw Error("g-estimator limit undefined: treatment variance is zero everywhere");
    return num / den;
}

namespace {

constexpr long kLimitFloor = 100000;
constexpr int kLimitBlocks = 20;

double block_se(const std::vector<double>& blocks) {
    const double k = static_cast<double>(blocks.size());
    double mean = 0.0;
    for (double v : blocks) mean += v;
    mean /= k;
    double ss = 0.0;
    for (double v : blocks) ss += (v - mean) * (v - mean);
    return std::sqrt(ss / (k - 1.0)) / std::sqrt(k);
}

// population OLS projection of A on the chosen eligible-row regressors
Eigen::VectorXd fit_pi_tilde(const PanelDataset& ds, const OlsLimitTerms& terms,
                             std::vector<long>* elig_rows_out) {
    std::vector<long> rows;
    for (long i = 0; i < ds.n_rows(); ++i)
        if (ds.eligible[i] == 1) rows.push_back(i);
    const long k = ds.covariates.cols();
    const long p = 1 + (terms.include_time ? 1 : 0) + k + (terms.include_lag ? 1 : 0);
    Eigen::MatrixXd x(static_cast<long>(rows.size()), p);
    Eigen::VectorXd a(x.rows());
    for (size_t j = 0; j < rows.size(); ++j) {
        const long i = rows[j];
        long c = 0;
        x(j, c++) = 1.0;
        if (terms.include_time) x(j, c++) = ds.time[i];
        for (long cc = 0; cc < k; ++cc) x(j, c++) = ds.covariates(i, cc);
        if (terms.include_lag) x(j, c++) = ds.lagged_outcome[i];
        a[j] = ds.treated[i];
    }
    const Eigen::VectorXd coef = (x.transpose() * x).ldlt().solve(x.transpose() * a);
    Eigen::VectorXd fitted = Eigen::VectorXd::Zero(ds.n_rows());
    const Eigen::VectorXd vals = x * coef;
    for (size_t j = 0; j < rows.size(); ++j) fitted[rows[j]] = vals[j];
    if (elig_rows_out) *elig_rows_out = std::move(rows);
    return fitted;
}

// strided patient block: calendar entrants, who lack early visits, stay
// spread across blocks so every block sees every visit
PanelDataset subset_units(const PanelDataset& ds, const CounterfactualTable& cf, long block,
                          long n_blocks, CounterfactualTable& cf_out) {
    std::vector<long> rows;
    for (long u = 0; u < ds.n_patients(); ++u) {
        if (u % n_blocks != block) continue;
        const auto [lo, hi] = ds.clusters()[u];
        for (long i = lo; i < hi; ++i) rows.push_back(i);
    }
    const long m = static_cast<long>(rows.size());
    PanelDataset out;
    out.design = ds.design;
    out.outcome_family = ds.outcome_family;
    out.covariate_names = ds.covariate_names;
    out.patient.resize(m);
    out.time.resize(m);
    out.eligible.resize(m);
    out.treated.resize(m);
    out.outcome.resize(m);
    out.covariates.resize(m, ds.covariates.cols());
    cf_out.y1.resize(m);
    cf_out.y0.resize(m);
    cf_out.propensity.resize(m);
    for (long j = 0; j < m; ++j) {
        const long i = rows[j];
        out.patient[j] = ds.patient[i];
        out.time[j] = ds.time[i];
        out.eligible[j] = ds.eligible[i];
        out.treated[j] = ds.treated[i];
        out.outcome[j] = ds.outcome[i];
        out.covariates.row(j) = ds.covariates.row(i);
        cf_out.y1[j] = cf.y1[i];
        cf_out.y0[j] = cf.y0[i];
        cf_out.propensity[j] = cf.propensity[i];
    }
    out.finalize();
    return out;
}

}  // namespace

LimitReport ols_population_limit(const DgpSpec& dgp, long mc_n, std::uint64_t seed,
                                 const OlsLimitTerms& terms) {
    if (mc_n < kLimitFloor) throw Error("ols_population_limit: mc_n below the 1e5 precision floor");
    DgpSpec spec = dgp;
    spec.emit_counterfactuals = true;
    const auto data = generate(spec, mc_n, seed);
    const auto& ds = data.panel;
    const auto& cf = *data.counterfactuals;

    LimitReport report;
    report.estimator = "pooled_ols";
    report.mc_n = mc_n;
    report.seed = seed;
    report.limit = evaluate_ols_limit(ds, cf, fit_pi_tilde(ds, terms, nullptr));

    std::vector<double> blocks;
    blocks.reserve(kLimitBlocks);
    for (int b = 0; b < kLimitBlocks; ++b) {
        CounterfactualTable cf_block;
        const PanelDataset block = subset_units(ds, cf, b, kLimitBlocks, cf_block);
        blocks.push_back(evaluate_ols_limit(block, cf_block, fit_pi_tilde(block, terms, nullptr)));
    }
    report.mc_se = block_se(blocks);
    return report;
}

LimitReport g_population_limit(const DgpSpec& dgp, long mc_n, std::uint64_t seed) {
    if (mc_n < kLimitFloor) throw Error("g_population_limit: mc_n below the 1e5 precision floor");
    DgpSpec spec = dgp;
    spec.emit_counterfactuals = true;
    const auto data = generate(spec, mc_n, seed);
    const auto& ds = data.panel;
    const auto& cf = *data.counterfactuals;

    LimitReport report;
    report.estimator = "g_estimation";
    report.mc_n = mc_n;
    report.seed = seed;
    report.limit = evaluate_g_limit(ds, cf);

    std::vector<double> blocks;
    blocks.reserve(kLimitBlocks);
    for (int b = 0; b < kLimitBlocks; ++b) {
        CounterfactualTable cf_block;
        const PanelDataset block = subset_units(ds, cf, b, kLimitBlocks, cf_block);
        blocks.push_back(evaluate_g_limit(block, cf_block));
    }
    report.mc_se = block_se(blocks);
    return report;
}

std::string limit_json(const LimitReport& report) {
    std::ostringstream out;
    char buf[40];
    auto num = [&buf](double v) {
        std::snprintf(buf, sizeof(buf), "%.12g", v);
        return std::string(buf);
    };
    out << "{\"estimator\":\"" << report.estimator << "\",\"limit\":" << num(report.limit)
        << ",\"mc_se\":" << num(report.mc_se) << ",\"mc_n\":" << report.mc_n
        << ",\"seed\":" << report.seed << "}";
    return out.str();
}

}  // namespace tte
