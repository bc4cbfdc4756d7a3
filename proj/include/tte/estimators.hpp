#ifndef TTE_ESTIMATORS_HPP
#define TTE_ESTIMATORS_HPP

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "tte/glm.hpp"
#include "tte/mestim.hpp"
#include "tte/panel.hpp"

namespace tte {

enum class Estimand { psi_u, psi_e, psi_b };
enum class Method { ipw, gcomp };
enum class Scale { risk_difference, log_odds };

std::string to_string(Estimand e);
std::string to_string(Method m);
std::string to_string(Scale s);

// Which columns enter the nuisance regressions. Empty covariate lists
// mean "all covariate columns of the dataset".
struct FormulaConfig {
    std::vector<std::string> propensity_covariates;
    bool propensity_includes_lag = true;
    std::vector<std::string> outcome_covariates;
    bool outcome_includes_lag = true;
    Link propensity_link = Link::logit;
    std::optional<Link> outcome_link;  // default: identity / logit by outcome family
};

Link default_outcome_link(const PanelDataset& ds, const FormulaConfig& config);

struct NuisanceSet {
    // per t, fitted on eligible rows; absent entry = empty trial
    std::vector<std::optional<FittedModel>> propensity;
    std::vector<std::optional<FittedModel>> outcome;
    Eigen::VectorXd eligibility_marginal;  // per t: eligible / present
    // P(I_t=1|L_1): absent entry means identically 1 at that t. With two
    // time points under the treatment-naive rule the t=2 probability is
    // 1 - P(A_1=1|L_1) and reuses the t=1 propensity fit.
    std::vector<std::optional<FittedModel>> participation;
    bool participation_reuses_propensity = false;
    // per t: regressions of predicted outcomes on baseline covariates,
    // indexed by forced arm (0/1)
    std::vector<std::array<std::optional<FittedModel>, 2>> baseline_regression;
    FormulaConfig config;
};

struct NuisanceNeeds {
    bool propensity = false;
    bool outcome = false;
    bool participation = false;
    bool baseline_regression = false;
};

NuisanceNeeds needs_for(Estimand estimand, Method method);

NuisanceSet fit_nuisances(const PanelDataset& ds, const FormulaConfig& config,
                          const NuisanceNeeds& needs);

// Eligibility-positivity and design preconditions of one estimand, with
// the violated assumption named in the error. Runs before any model fit.
void validate_positivity(const PanelDataset& ds, Estimand estimand);

struct EstimateReport {
    Estimand estimand = Estimand::psi_u;
    Method method = Method::ipw;
    Scale scale = Scale::risk_difference;
    double point = 0.0;
    double se = 0.0;
    double ci_lower = 0.0;
    double ci_upper = 0.0;
    double level = 0.95;
    std::optional<double> truncation_percentile;
};

std::string report_json(const EstimateReport& report);
void write_reports_csv(const std::vector<EstimateReport>& reports, std::ostream& out);

struct EstimateOptions {
    std::optional<double> truncation_percentile;  // combined inverse weights, ipw only
    double level = 0.95;
    bool with_variance = true;  // stacked sandwich; point estimate only when false
};

EstimateReport estimate_psi_u(const PanelDataset& ds, const NuisanceSet& nuis, Method method,
                              const EstimateOptions& options = {});
EstimateReport estimate_psi_e(const PanelDataset& ds, const NuisanceSet& nuis, Method method,
                              const EstimateOptions& options = {});
EstimateReport estimate_psi_b(const PanelDataset& ds, const NuisanceSet& nuis, Method method,
                              const EstimateOptions& options = {});
EstimateReport estimate(const PanelDataset& ds, const NuisanceSet& nuis, Estimand estimand,
                        Method method, const EstimateOptions& options = {});

// Log-odds analogs: logit of the aggregated counterfactual arm means,
// with the delta method through the sandwich covariance of the two arms.
EstimateReport estimate_odds_scale(const PanelDataset& ds, const NuisanceSet& nuis,
                                   Estimand estimand, Method method,
                                   const EstimateOptions& options = {});

// Caps values above the nearest-rank percentile, preserving order.
std::vector<double> truncate_weights(const std::vector<double>& weights, double percentile);

// Value-level plug-in estimators: nuisance quantities supplied per row
// instead of as fitted models. Only eligible rows are read.
namespace plugin {

struct Values {
    Eigen::VectorXd propensity;     // P(A_t=1 | W_t, I_t=1), ipw
    Eigen::VectorXd m1;             // E(Y_t | A_t=1, W_t, I_t=1), gcomp
    Eigen::VectorXd m0;
    Eigen::VectorXd participation;  // P(I_t=1 | L_1), psi_b
    Eigen::VectorXd marginal;       // per t: P(I_t=1)
};

Values from_models(const PanelDataset& ds, const NuisanceSet& nuis, const NuisanceNeeds& needs);

double point(const PanelDataset& ds, Estimand estimand, Method method, const Values& values,
             std::optional<double> truncation = {});

std::array<double, 2> arm_means(const PanelDataset& ds, Estimand estimand, Method method,
                                const Values& values, std::optional<double> truncation = {});

}  // namespace plugin

}  // namespace tte

#endif
