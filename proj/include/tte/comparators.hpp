#ifndef TTE_COMPARATORS_HPP
#define TTE_COMPARATORS_HPP

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "tte/glm.hpp"
#include "tte/panel.hpp"
#include "tte/simgen.hpp"

namespace tte {

struct ComparatorReport {
    std::string estimator;
    double point = 0.0;
    double se = 0.0;
    double ci_lower = 0.0;
    double ci_upper = 0.0;
    double level = 0.95;
    Eigen::VectorXd coefficients;  // full fit, treatment coefficient included
};

// Pooled linear model over the eligible person-time rows: intercept,
// covariates, treatment and the lagged outcome by default. Returns the
// treatment coefficient with a cluster-robust sandwich SE by patient.
struct PooledTerms {
    std::vector<std::string> covariates;  // empty = all
    bool include_lag = true;
    bool include_time = false;
};

ComparatorReport pooled_ols(const PanelDataset& ds, const PooledTerms& terms = {},
                            double level = 0.95, bool with_variance = true);

// Ratio-of-sums g-estimator over eligible rows:
//   sum (A - pihat) Y I / sum (A - pihat) A I
// propensity holds one fitted model per visit, or a single pooled fit.
ComparatorReport g_estimate(const PanelDataset& ds, const std::vector<FittedModel>& propensity,
                            double level = 0.95, bool with_variance = true);

// Value-level variant with the fitted propensities supplied per row.
double g_estimate_value(const PanelDataset& ds, const Eigen::VectorXd& propensity);

// Pooled (or single-trial) logistic regression; the treatment coefficient
// is the conditional log odds ratio.
struct PooledLogisticSpec {
    std::vector<std::string> covariates;  // empty = all
    bool include_time = false;
    bool include_lag = false;
    std::optional<int> only_t;  // restrict to one trial
};

ComparatorReport pooled_logistic_mle(const PanelDataset& ds,
                                     const PooledLogisticSpec& spec = {}, double level = 0.95,
                                     bool with_variance = true);

// ---------------------------------------------------------------------------
// Population limits of the misspecified pooled estimators, evaluated by
// Monte Carlo on one large counterfactual draw.

struct OlsLimitTerms {
    bool include_time = true;  // the (1, t, L) projection
    bool include_lag = false;
};

struct LimitReport {
    std::string estimator;
    double limit = 0.0;
    double mc_se = 0.0;
    long mc_n = 0;
    std::uint64_t seed = 0;
};

std::string limit_json(const LimitReport& report);

// Weighted-contrast term plus the misspecification term:
//   { sum I pi (1-pitilde)(Y1-Y0) + sum I (pi - pitilde) Y0 } / sum I pi (1-pitilde)
double evaluate_ols_limit(const PanelDataset& panel, const CounterfactualTable& cf,
                          const Eigen::VectorXd& pi_tilde);

//   sum I pi (1-pi) (Y1-Y0) / sum I pi (1-pi)
double evaluate_g_limit(const PanelDataset& panel, const CounterfactualTable& cf);

LimitReport ols_population_limit(const DgpSpec& dgp, long mc_n, std::uint64_t seed,
                                 const OlsLimitTerms& terms = {});
LimitReport g_population_limit(const DgpSpec& dgp, long mc_n, std::uint64_t seed);

}  // namespace tte

#endif
