#include "tte/glm.hpp"

#include <cmath>

#include "tte/stats.hpp"

namespace tte {

Term cov_term(const std::string& name) { return {TermKind::covariate, name}; }
Term baseline_term(const std::string& name) { return {TermKind::baseline_covariate, name}; }
Term lag_term() { return {TermKind::lagged_outcome, "y_lag"}; }
Term treat_term() { return {TermKind::treatment, "treat"}; }
Term time_term() { return {TermKind::time_index, "t"}; }

namespace {

long covariate_index(const PanelDataset& ds, const std::string& name) {
    for (size_t k = 0; k < ds.covariate_names.size(); ++k)
        if (ds.covariate_names[k] == name) return static_cast<long>(k);
    throw Error("unknown covariate column '" + name + "'");
}

double term_value(const Term& term, const PanelDataset& ds, long row) {
    switch (term.kind) {
        case TermKind::covariate: return ds.covariates(row, covariate_index(ds, term.name));
        case TermKind::baseline_covariate: return ds.baseline(row, covariate_index(ds, term.name));
        case TermKind::lagged_outcome: return ds.lagged_outcome[row];
        case TermKind::treatment: return ds.treated[row];
        case TermKind::time_index: return ds.time[row];
    }
    throw Error("unreachable term kind");
}

}  // namespace

std::vector<long> subset_rows(const PanelDataset& ds, const Subset& subset) {
    std::vector<long> rows;
    if (subset.t) {
        const auto& src = subset.eligible_only ? ds.eligible_rows_at(*subset.t)
                                               : ds.rows_at(*subset.t);
        rows = src;
    } else {
        rows.reserve(ds.n_rows());
        for (long i = 0; i < ds.n_rows(); ++i)
            if (!subset.eligible_only || ds.eligible[i] == 1) rows.push_back(i);
    }
    if (subset.predicate) {
        std::vector<long> kept;
        kept.reserve(rows.size());
        for (long i : rows)
            if (subset.predicate(ds, i)) kept.push_back(i);
        rows = std::move(kept);
    }
    return rows;
}

double inverse_link(Link link, double eta) {
    switch (link) {
        case Link::identity: return eta;
        case Link::logit: return expit(eta);
        case Link::probit: return norm_cdf(eta);
    }
    throw Error("unreachable link");
}

double score_residual(Link link, double eta, double y) {
    switch (link) {
        case Link::identity: return y - eta;
        case Link::logit: return y - expit(eta);
        case Link::probit: {
            const double p = norm_cdf(eta);
            const double denom = std::max(p * (1.0 - p), 1e-300);
            return norm_pdf(eta) * (y - p) / denom;
        }
    }
    throw Error("unreachable link");
}

Eigen::VectorXd fit_matrix(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, Link link,
                           const FitOptions& options, int* iterations_out) {
    const long n = x.rows();
    const long p = x.cols();
    if (n < p + 1) throw Error("glm: subset has fewer rows than terms + 1");

    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(x);
    qr.setThreshold(options.rank_tolerance);
    if (qr.rank() < p) throw Error("glm: design matrix is rank deficient");

    if (iterations_out) *iterations_out = 0;
    if (link == Link::identity) return qr.solve(y);

    Eigen::VectorXd beta = Eigen::VectorXd::Zero(p);
    bool last_extreme = false;
    for (int iter = 1; iter <= options.max_iterations; ++iter) {
        const Eigen::VectorXd eta = x * beta;
        Eigen::VectorXd score_factor(n), weight(n);
        bool prob_extreme = false;
        for (long i = 0; i < n; ++i) {
            const double mu = inverse_link(link, eta[i]);
            prob_extreme = prob_extreme || mu <= 1e-8 || mu >= 1.0 - 1e-8;
            score_factor[i] = score_residual(link, eta[i], y[i]);
            if (link == Link::logit) {
                weight[i] = mu * (1.0 - mu);
            } else {
                const double phi = norm_pdf(eta[i]);
                weight[i] = phi * phi / std::max(mu * (1.0 - mu), 1e-300);
            }
        }
        // compensated summation keeps the score's floating-point floor
        // below the tolerance for large subsets
        Eigen::VectorXd score = Eigen::VectorXd::Zero(p);
        Eigen::VectorXd comp = Eigen::VectorXd::Zero(p);
        for (long i = 0; i < n; ++i) {
            for (long c = 0; c < p; ++c) {
                const double term = x(i, c) * score_factor[i] - comp[c];
                const double acc = score[c] + term;
                comp[c] = (acc - score[c]) - term;
                score[c] = acc;
            }
        }
        if (prob_extreme && beta.norm() > 1e3)
            throw Error("glm: complete separation detected (fitted probabilities pinned at "
                        "0/1 with diverging coefficients)");
        // fitted probabilities at the boundary stall the score at the
        // rounding floor; keep iterating so true separation surfaces
        if (!prob_extreme && score.cwiseAbs().maxCoeff() <= options.tolerance) {
            if (iterations_out) *iterations_out = iter - 1;
            return beta;
        }

        const Eigen::MatrixXd info = x.transpose() * weight.asDiagonal() * x;
        Eigen::LDLT<Eigen::MatrixXd> ldlt(info);
        const Eigen::VectorXd step =
            ldlt.info() == Eigen::Success ? ldlt.solve(score).eval() : Eigen::VectorXd();
        if (step.size() != p || !step.allFinite()) {
            if (prob_extreme)
                throw Error("glm: complete separation detected (information matrix collapsed)");
            throw Error("glm: information matrix not positive definite");
        }
        beta += step;
        last_extreme = prob_extreme;
        if (!beta.allFinite()) throw Error("glm: divergence during IRLS");
    }
    if (last_extreme)
        throw Error("glm: fitted probabilities pinned at the 0/1 boundary "
                    "(separation-like fit)");
    throw Error("glm: IRLS failed to converge");
}

FittedModel fit(const ModelSpec& spec, const PanelDataset& ds, const FitOptions& options) {
    if (!spec.intercept && spec.terms.empty()) throw Error("glm: empty model");
    const auto rows = subset_rows(ds, spec.subset);
    const long n = static_cast<long>(rows.size());

    FittedModel model;
    model.spec = spec;
    model.intercept = spec.intercept;
    model.n_used = n;
    if (n == 0) throw Error("glm: empty fit subset");

    for (const auto& term : spec.terms) {
        bool constant = true;
        const double first = term_value(term, ds, rows[0]);
        for (long i = 1; i < n && constant; ++i)
            constant = (term_value(term, ds, rows[i]) == first);
        if (constant && options.drop_degenerate_terms && term.kind != TermKind::treatment)
            model.dropped_terms.push_back(term);
        else
            model.used_terms.push_back(term);
    }

    const long p = static_cast<long>(model.used_terms.size()) + (spec.intercept ? 1 : 0);
    Eigen::MatrixXd x(n, p);
    long col = 0;
    if (spec.intercept) x.col(col++).setOnes();
    for (const auto& term : model.used_terms) {
        for (long i = 0; i < n; ++i) x(i, col) = term_value(term, ds, rows[i]);
        ++col;
    }
    const Eigen::VectorXd y = response_vector(spec.response, ds, rows);

    model.coefficients = fit_matrix(x, y, spec.link, options, &model.iterations);
    if (!model.coefficients.allFinite()) throw Error("glm: non-finite coefficients");
    model.converged = true;
    return model;
}

Eigen::MatrixXd design_matrix(const FittedModel& model, const PanelDataset& ds,
                              const std::vector<long>& rows,
                              const std::map<std::string, double>& overrides) {
    for (const auto& [key, value] : overrides) {
        bool known = false;
        for (const auto& term : model.used_terms) known = known || term.name == key;
        for (const auto& term : model.dropped_terms) known = known || term.name == key;
        if (!known) throw Error("unknown column '" + key + "' in prediction overrides");
    }
    const long n = static_cast<long>(rows.size());
    const long p = static_cast<long>(model.used_terms.size()) + (model.intercept ? 1 : 0);
    Eigen::MatrixXd x(n, p);
    long col = 0;
    if (model.intercept) x.col(col++).setOnes();
    for (const auto& term : model.used_terms) {
        const auto it = overrides.find(term.name);
        if (it != overrides.end()) {
            x.col(col).setConstant(it->second);
        } else {
            for (long i = 0; i < n; ++i) x(i, col) = term_value(term, ds, rows[i]);
        }
        ++col;
    }
    return x;
}

Eigen::VectorXd response_vector(Response response, const PanelDataset& ds,
                                const std::vector<long>& rows) {
    Eigen::VectorXd y(static_cast<long>(rows.size()));
    for (size_t i = 0; i < rows.size(); ++i) {
        switch (response) {
            case Response::outcome: y[i] = ds.outcome[rows[i]]; break;
            case Response::treatment: y[i] = ds.treated[rows[i]]; break;
            case Response::eligibility: y[i] = ds.eligible[rows[i]]; break;
        }
    }
    return y;
}

Eigen::VectorXd predict_mean(const FittedModel& model, const PanelDataset& ds,
                             const std::vector<long>& rows,
                             const std::map<std::string, double>& overrides) {
    const Eigen::MatrixXd x = design_matrix(model, ds, rows, overrides);
    Eigen::VectorXd eta = x * model.coefficients;
    for (long i = 0; i < eta.size(); ++i) eta[i] = inverse_link(model.spec.link, eta[i]);
    return eta;
}

}  // namespace tte
