#ifndef TTE_PANEL_HPP
#define TTE_PANEL_HPP

#include <Eigen/Dense>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "tte/error.hpp"

namespace tte {

enum class Design { visit_time, calendar_time };
enum class OutcomeFamily { continuous, binary };

// One person-time record, materialized from the columnar storage.
struct Observation {
    std::string patient_id;
    int t = 0;
    int eligible = 0;
    int treated = 0;
    Eigen::VectorXd covariates;
    double outcome = 0.0;
    double lagged_outcome = 0.0;
    Eigen::VectorXd baseline_covariates;
};

// Long-format person-time data, grouped by patient (order of first
// appearance) and sorted by visit within patient. Immutable once built;
// shared freely across worker threads.
class PanelDataset {
  public:
    Design design = Design::visit_time;
    OutcomeFamily outcome_family = OutcomeFamily::continuous;
    int tau = 0;

    Eigen::VectorXi patient;  // per-row patient index, contiguous runs
    Eigen::VectorXi time;     // 1-based visit index
    Eigen::VectorXi eligible;
    Eigen::VectorXi treated;
    Eigen::VectorXd outcome;
    Eigen::VectorXd lagged_outcome;  // 0 at a patient's first record
    Eigen::MatrixXd covariates;      // n_rows x n_cov
    Eigen::MatrixXd baseline;        // first-record covariates, per row
    std::vector<std::string> covariate_names;
    std::vector<std::string> patient_names;  // may be empty (synthesized)

    long n_rows() const { return time.size(); }
    long n_patients() const { return static_cast<long>(cluster_ranges_.size()); }
    std::string patient_name(long p) const;
    Observation row(long i) const;

    // half-open row range of one patient
    const std::vector<std::pair<long, long>>& clusters() const { return cluster_ranges_; }
    const std::vector<long>& rows_at(int t) const;
    const std::vector<long>& eligible_rows_at(int t) const;
    long present_count(int t) const { return static_cast<long>(rows_at(t).size()); }
    long eligible_count(int t) const { return static_cast<long>(eligible_rows_at(t).size()); }
    // number of patients with a record at t=1 (the baseline population)
    long baseline_count() const { return baseline_count_; }

    // Validates invariants and builds the row indexes. Called by the
    // factory functions below; must be re-run if columns are replaced.
    void finalize();

  private:
    std::vector<std::pair<long, long>> cluster_ranges_;
    std::vector<std::vector<long>> rows_by_time_;
    std::vector<std::vector<long>> elig_rows_by_time_;
    long baseline_count_ = 0;
};

struct CsvSchema {
    std::string id = "id";
    std::string t = "t";
    std::string elig = "elig";    // optional column
    std::string treat = "treat";
    std::string y = "y";
    // empty: every column whose name starts with "L" is a covariate
    std::vector<std::string> covariates;
    Design design = Design::visit_time;
    std::optional<OutcomeFamily> outcome_family;  // default: detect from y
};

PanelDataset ingest_long_csv(std::istream& in, const CsvSchema& schema = {});
void emit_long_csv(const PanelDataset& ds, std::ostream& out);

// Predicate form of an eligibility rule: judged per row, with full access
// to the patient's history through the dataset.
using EligibilityRule = std::function<bool(const PanelDataset&, long row)>;

// I_t = 1 - A_{t-1}, with A_0 = 0 at a patient's first record.
EligibilityRule treatment_naive_rule();

PanelDataset derive_eligibility(const PanelDataset& ds,
                                const EligibilityRule& rule = treatment_naive_rule());

struct TrialSummary {
    int t = 0;
    long n_present = 0;
    long n_eligible = 0;
    long n_treated_arm = 0;  // eligible clones assigned to the active arm at baseline
    long n_control_arm = 0;
    bool empty = false;
};

std::vector<TrialSummary> emulate_trials(const PanelDataset& ds);

struct PositivityCell {
    int t = 0;
    int arm = 0;
    std::vector<long> bins;  // 20 equal bins on [0,1]
    double min = 0.0;
    double max = 0.0;
    long n = 0;
    long below_threshold = 0;
};

// Distribution of fitted propensities per trial and arm, over eligible
// rows. `propensity` is aligned with dataset rows; only eligible rows are
// read and must lie strictly inside (0,1).
std::vector<PositivityCell> positivity_diagnostics(const PanelDataset& ds,
                                                   const Eigen::VectorXd& propensity,
                                                   double threshold = 0.01);

void write_positivity_csv(const std::vector<PositivityCell>& cells, std::ostream& out);

}  // namespace tte

#endif
