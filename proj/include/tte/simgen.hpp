#ifndef TTE_SIMGEN_HPP
#define TTE_SIMGEN_HPP

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tte/estimators.hpp"
#include "tte/panel.hpp"

namespace tte {

enum class EffectSchedule { constant, linear_in_t };
enum class SimOutcomeFamily { continuous, binary_logit, binary_probit_frailty };

// Sequential data-generating process:
//   L_t ~ N(alpha0 + alpha1 L_{t-1} + alpha2 A_{t-1}, sd_cov)
//   A_t = A_{t-1} + (1-A_{t-1}) Bernoulli{ g(beta0 + beta1 L_t + beta2 A_{t-1} + beta3 Y_{t-1}) }
//   Y_t: continuous N(gamma0 + gamma1 s(t) A_t + gamma2 L_t + gamma3 Y_{t-1}, sd_out),
//        binary logit expit(same linear predictor), or binary probit
//        Phi(gamma0 + gamma1 s(t) A_t + gamma2 L_t + u) with patient frailty u.
// g is expit except for the probit-frailty family; s(t) is the effect
// schedule. Lags are 0 at a patient's first occurrence. The calendar
// design replaces exiting participants with treatment-naive entrants.
struct DgpSpec {
    Design design = Design::calendar_time;
    int tau = 2;
    double alpha0 = 0.0, alpha1 = 0.5, alpha2 = 0.3;
    double beta0 = -1.0, beta1 = 1.0, beta2 = 0.0, beta3 = 0.5;
    double gamma0 = 0.0, gamma1 = 1.0, gamma2 = 1.0, gamma3 = 0.3;
    EffectSchedule effect_schedule = EffectSchedule::constant;
    SimOutcomeFamily outcome_family = SimOutcomeFamily::continuous;
    double exit_probability = 0.3;
    double noise_sd_covariate = 0.2;
    double noise_sd_outcome = 0.5;
    bool emit_counterfactuals = false;
};

double effect_multiplier(const DgpSpec& dgp, int t);

DgpSpec dgp_from_json(const std::string& text);
std::string dgp_to_json(const DgpSpec& dgp);

// Per-row counterfactual outcomes under a point intervention at that
// visit, sharing the realized noise, plus the true treatment probability
// of the draw (1 on carried-forward treated rows).
struct CounterfactualTable {
    Eigen::VectorXd y1;
    Eigen::VectorXd y0;
    Eigen::VectorXd propensity;
};

struct GeneratedData {
    PanelDataset panel;
    std::optional<CounterfactualTable> counterfactuals;
};

GeneratedData generate(const DgpSpec& dgp, long n, std::uint64_t seed);

void write_counterfactual_csv(const GeneratedData& data, std::ostream& out);

// Five-visit randomized-treatment process whose covariate variance
// shrinks as 1/t among eligible rows; the noncollapsibility demo data.
PanelDataset noncollapsibility_dgp(long n, std::uint64_t seed, OutcomeFamily family);

// Marginal log odds ratio of the shrinking-variance process at visit t,
// by 64-node Gauss-Hermite quadrature over the covariate mixture.
double marginal_logodds_oracle(int t);
double marginal_logodds_oracle_var(double variance);

struct LimitEstimate {
    double limit = 0.0;
    double mc_se = 0.0;
    long mc_n = 0;
    std::uint64_t seed = 0;
};

// Monte Carlo evaluation of the estimand definitions from the emitted
// counterfactuals on one large draw; mc_se from patient-block batching.
LimitEstimate estimand_limit_oracle(const DgpSpec& dgp, Estimand estimand, long mc_n,
                                    std::uint64_t seed);

struct EstimatorId {
    enum class Kind { proposed, pooled_ols };
    Kind kind = Kind::proposed;
    Estimand estimand = Estimand::psi_u;
    Method method = Method::ipw;
    Link nuisance_link = Link::logit;  // both nuisance links for proposed estimators
    std::string label;                 // row name, also the target key
};

std::string default_label(const EstimatorId& id);

struct McRow {
    std::string estimator;
    std::string estimand;
    std::string method;
    double mean_estimate = 0.0;
    double bias = 0.0;
    double mean_se = 0.0;
    double sd = 0.0;
    bool sd_defined = true;
    double coverage = 0.0;
    double target = 0.0;
};

struct MonteCarloTable {
    std::vector<McRow> rows;
    long reps = 0;
    long n = 0;
    long failures = 0;
};

void write_mc_csv(const MonteCarloTable& table, std::ostream& out);

// Replication harness: generate -> fit working models -> estimate ->
// sandwich -> aggregate bias / mean SE / SD / coverage against targets.
// Replication r uses the seed derived from (master_seed, r); results are
// identical for any worker count. Failed replications are excluded and
// counted; more than 1% failures aborts.
MonteCarloTable replicate_study(const DgpSpec& dgp, const std::vector<EstimatorId>& estimators,
                                long reps, long n, std::uint64_t master_seed,
                                const std::map<std::string, double>& targets, int n_threads = 0);

struct NoncollapsibilityCurve {
    OutcomeFamily family = OutcomeFamily::binary;
    std::vector<double> mean_estimate;  // per t
    std::vector<double> sd_estimate;
    std::vector<double> oracle;  // quadrature value (binary) or the true effect
};

NoncollapsibilityCurve noncollapsibility_curves(long reps, long n, std::uint64_t seed,
                                                OutcomeFamily family, int n_threads = 0);

}  // namespace tte

#endif
