#ifndef TTE_GLM_HPP
#define TTE_GLM_HPP

#include <Eigen/Dense>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tte/panel.hpp"

namespace tte {

enum class Link { identity, logit, probit };

// Columns a regression term can draw from. Names identify covariates;
// the fixed kinds carry canonical names ("treat", "y_lag", "t") used for
// prediction-time overrides.
enum class TermKind { covariate, baseline_covariate, lagged_outcome, treatment, time_index };

struct Term {
    TermKind kind;
    std::string name;  // covariate column for (baseline_)covariate kinds
};

Term cov_term(const std::string& name);
Term baseline_term(const std::string& name);
Term lag_term();
Term treat_term();
Term time_term();

enum class Response { outcome, treatment, eligibility };

struct Subset {
    std::optional<int> t;        // restrict to one visit
    bool eligible_only = true;   // restrict to I_t = 1 rows
    std::function<bool(const PanelDataset&, long)> predicate;  // optional extra filter
};

struct ModelSpec {
    Response response = Response::outcome;
    bool intercept = true;
    std::vector<Term> terms;
    Link link = Link::identity;
    Subset subset;
};

struct FittedModel {
    ModelSpec spec;
    bool intercept = true;
    std::vector<Term> used_terms;     // after degenerate-column drops
    std::vector<Term> dropped_terms;  // constant within the fit subset
    Eigen::VectorXd coefficients;     // [intercept?, used_terms...]
    bool converged = false;
    int iterations = 0;
    long n_used = 0;
};

struct FitOptions {
    double tolerance = 1e-10;  // max absolute score entry
    int max_iterations = 100;
    double rank_tolerance = 1e-10;
    // Drop non-treatment terms that are constant in the fit subset
    // instead of failing on rank deficiency (e.g. the lagged outcome at
    // t=1, which is identically zero).
    bool drop_degenerate_terms = false;
};

std::vector<long> subset_rows(const PanelDataset& ds, const Subset& subset);

FittedModel fit(const ModelSpec& spec, const PanelDataset& ds, const FitOptions& options = {});

// Design matrix aligned with model.coefficients for arbitrary rows.
Eigen::MatrixXd design_matrix(const FittedModel& model, const PanelDataset& ds,
                              const std::vector<long>& rows,
                              const std::map<std::string, double>& overrides = {});

Eigen::VectorXd response_vector(Response response, const PanelDataset& ds,
                                const std::vector<long>& rows);

// Inverse link applied to the linear predictor over the given rows.
Eigen::VectorXd predict_mean(const FittedModel& model, const PanelDataset& ds,
                             const std::vector<long>& rows,
                             const std::map<std::string, double>& overrides = {});

double inverse_link(Link link, double eta);

// Per-row score factor s such that the likelihood score is sum_i x_i s_i.
double score_residual(Link link, double eta, double y);

// Core solver on an explicit design matrix; identity link is least
// squares, logit/probit run Fisher-scoring IRLS from the zero vector.
Eigen::VectorXd fit_matrix(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, Link link,
                           const FitOptions& options, int* iterations_out = nullptr);

}  // namespace tte

#endif
