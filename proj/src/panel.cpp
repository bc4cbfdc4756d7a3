#include "tte/panel.hpp"

#include <algorithm>
#include <cstdio>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <unordered_map>

namespace tte {

namespace {

bool is_binary01(double v) { return v == 0.0 || v == 1.0; }

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string field;
    std::stringstream ss(line);
    while (std::getline(ss, field, ',')) out.push_back(field);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

double parse_double(const std::string& s, const std::string& what, long line_no) {
    if (s.empty())
        throw Error("missing value for '" + what + "' on data line " + std::to_string(line_no));
    size_t pos = 0;
    double v;
    try {
        v = std::stod(s, &pos);
    } catch (const std::exception&) {
        throw Error("cannot parse '" + s + "' as a number for column '" + what + "'");
    }
    if (pos != s.size()) throw Error("cannot parse '" + s + "' as a number for column '" + what + "'");
    return v;
}

int parse_time(const std::string& s, long line_no) {
    const double v = parse_double(s, "t", line_no);
    const int t = static_cast<int>(v);
    if (static_cast<double>(t) != v) throw Error("non-integer visit index '" + s + "'");
    return t;
}

}  // namespace

std::string PanelDataset::patient_name(long p) const {
    if (p >= 0 && p < static_cast<long>(patient_names.size()) && !patient_names[p].empty())
        return patient_names[p];
    return "p" + std::to_string(p);
}

Observation PanelDataset::row(long i) const {
    Observation obs;
    obs.patient_id = patient_name(patient[i]);
    obs.t = time[i];
    obs.eligible = eligible[i];
    obs.treated = treated[i];
    obs.covariates = covariates.row(i).transpose();
    obs.outcome = outcome[i];
    obs.lagged_outcome = lagged_outcome[i];
    obs.baseline_covariates = baseline.row(i).transpose();
    return obs;
}

const std::vector<long>& PanelDataset::rows_at(int t) const {
    if (t < 1 || t > tau) throw Error("visit index out of range: " + std::to_string(t));
    return rows_by_time_[t - 1];
}

const std::vector<long>& PanelDataset::eligible_rows_at(int t) const {
    if (t < 1 || t > tau) throw Error("visit index out of range: " + std::to_string(t));
    return elig_rows_by_time_[t - 1];
}

void PanelDataset::finalize() {
    const long n = n_rows();
    if (patient.size() != n || eligible.size() != n || treated.size() != n ||
        outcome.size() != n || covariates.rows() != n)
        throw Error("panel columns have inconsistent lengths");

    tau = 0;
    for (long i = 0; i < n; ++i) {
        if (time[i] < 1) throw Error("visit index must be >= 1");
        tau = std::max(tau, time[i]);
        if (!is_binary01(treated[i])) throw Error("treatment values must be 0 or 1");
        if (!is_binary01(eligible[i])) throw Error("eligibility values must be 0 or 1");
    }

    cluster_ranges_.clear();
    long begin = 0;
    for (long i = 0; i <= n; ++i) {
        if (i == n || (i > 0 && patient[i] != patient[i - 1])) {
            if (i > begin) cluster_ranges_.emplace_back(begin, i);
            begin = i;
        }
    }
    for (long p = 0; p + 1 < static_cast<long>(cluster_ranges_.size()); ++p)
        if (patient[cluster_ranges_[p].first] == patient[cluster_ranges_[p + 1].first])
            throw Error("patient rows must be contiguous");

    lagged_outcome.resize(n);
    baseline.resize(n, covariates.cols());
    for (const auto& [lo, hi] : cluster_ranges_) {
        for (long i = lo; i < hi; ++i) {
            if (i > lo) {
                if (time[i] == time[i - 1])
                    throw Error("duplicate (patient, visit) record for patient " +
                                patient_name(patient[i]) + " at t=" + std::to_string(time[i]));
                if (time[i] != time[i - 1] + 1)
                    throw Error("non-contiguous visits for patient " + patient_name(patient[i]));
                if (treated[i - 1] == 1 && treated[i] == 0)
                    throw Error("treatment non-monotone for patient " + patient_name(patient[i]));
            }
            lagged_outcome[i] = (i == lo) ? 0.0 : outcome[i - 1];
            baseline.row(i) = covariates.row(lo);
        }
        if (design == Design::visit_time && time[lo] != 1)
            throw Error("visit-time design: patient " + patient_name(patient[lo]) +
                        " enters after t=1");
    }

    rows_by_time_.assign(tau, {});
    elig_rows_by_time_.assign(tau, {});
    for (long i = 0; i < n; ++i) {
        rows_by_time_[time[i] - 1].push_back(i);
        if (eligible[i] == 1) elig_rows_by_time_[time[i] - 1].push_back(i);
    }
    baseline_count_ = 0;
    for (const auto& [lo, hi] : cluster_ranges_)
        if (time[lo] == 1) ++baseline_count_;

    if (outcome_family == OutcomeFamily::binary)
        for (long i = 0; i < n; ++i)
            if (!is_binary01(outcome[i])) throw Error("binary outcome family with non-0/1 outcome");
}

PanelDataset ingest_long_csv(std::istream& in, const CsvSchema& schema) {
    std::string line;
    if (!std::getline(in, line)) throw Error("empty CSV input");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto header = split_csv_line(line);

    auto find_col = [&](const std::string& name) -> int {
        for (size_t j = 0; j < header.size(); ++j)
            if (header[j] == name) return static_cast<int>(j);
        return -1;
    };

    const int c_id = find_col(schema.id);
    const int c_t = find_col(schema.t);
    const int c_treat = find_col(schema.treat);
    const int c_y = find_col(schema.y);
    const int c_elig = find_col(schema.elig);
    for (auto [col, name] : {std::pair{c_id, schema.id}, {c_t, schema.t},
                             {c_treat, schema.treat}, {c_y, schema.y}})
        if (col < 0) throw Error("required column '" + name + "' not found in CSV header");

    std::vector<std::string> cov_names = schema.covariates;
    std::vector<int> cov_cols;
    if (cov_names.empty()) {
        for (size_t j = 0; j < header.size(); ++j) {
            const int js = static_cast<int>(j);
            if (js == c_id || js == c_t || js == c_treat || js == c_y || js == c_elig) continue;
            if (!header[j].empty() && header[j][0] == 'L') {
                cov_names.push_back(header[j]);
                cov_cols.push_back(js);
            }
        }
    } else {
        for (const auto& name : cov_names) {
            const int col = find_col(name);
            if (col < 0) throw Error("covariate column '" + name + "' not found in CSV header");
            cov_cols.push_back(col);
        }
    }

    struct RawRow {
        int t;
        int elig;
        int treat;
        double y;
        std::vector<double> covs;
    };
    std::vector<std::string> patient_order;
    std::unordered_map<std::string, long> patient_index;
    std::vector<std::vector<RawRow>> by_patient;

    long line_no = 1;
    bool all_binary_y = true;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto fields = split_csv_line(line);
        if (fields.size() < header.size())
            throw Error("data line " + std::to_string(line_no) + " has too few fields");

        RawRow r;
        r.t = parse_time(fields[c_t], line_no);
        const double treat_v = parse_double(fields[c_treat], schema.treat, line_no);
        if (!is_binary01(treat_v)) throw Error("non-binary treatment value on line " +
                                               std::to_string(line_no));
        r.treat = static_cast<int>(treat_v);
        r.y = parse_double(fields[c_y], schema.y, line_no);
        all_binary_y = all_binary_y && is_binary01(r.y);
        if (c_elig >= 0) {
            const double e = parse_double(fields[c_elig], schema.elig, line_no);
            if (!is_binary01(e)) throw Error("non-binary eligibility value on line " +
                                             std::to_string(line_no));
            r.elig = static_cast<int>(e);
        } else {
            r.elig = -1;
        }
        r.covs.reserve(cov_cols.size());
        for (size_t k = 0; k < cov_cols.size(); ++k)
            r.covs.push_back(parse_double(fields[cov_cols[k]], cov_names[k], line_no));

        const std::string& id = fields[c_id];
        auto it = patient_index.find(id);
        if (it == patient_index.end()) {
            it = patient_index.emplace(id, static_cast<long>(patient_order.size())).first;
            patient_order.push_back(id);
            by_patient.emplace_back();
        }
        by_patient[it->second].push_back(std::move(r));
    }
    if (patient_order.empty()) throw Error("CSV contains no data rows");

    long n = 0;
    for (auto& rows : by_patient) {
        std::stable_sort(rows.begin(), rows.end(),
                         [](const RawRow& a, const RawRow& b) { return a.t < b.t; });
        n += static_cast<long>(rows.size());
    }

    PanelDataset ds;
    ds.design = schema.design;
    ds.outcome_family = schema.outcome_family.value_or(all_binary_y ? OutcomeFamily::binary
                                                                    : OutcomeFamily::continuous);
    ds.covariate_names = cov_names;
    ds.patient_names = patient_order;
    ds.patient.resize(n);
    ds.time.resize(n);
    ds.eligible.resize(n);
    ds.treated.resize(n);
    ds.outcome.resize(n);
    ds.covariates.resize(n, static_cast<long>(cov_names.size()));

    long i = 0;
    for (long p = 0; p < static_cast<long>(by_patient.size()); ++p) {
        for (const auto& r : by_patient[p]) {
            ds.patient[i] = static_cast<int>(p);
            ds.time[i] = r.t;
            ds.eligible[i] = std::max(r.elig, 0);
            ds.treated[i] = r.treat;
            ds.outcome[i] = r.y;
            for (size_t k = 0; k < r.covs.size(); ++k) ds.covariates(i, k) = r.covs[k];
            ++i;
        }
    }
    ds.finalize();
    if (c_elig < 0) ds = derive_eligibility(ds);
    return ds;
}

void emit_long_csv(const PanelDataset& ds, std::ostream& out) {
    out << "id,t,elig,treat,y";
    for (const auto& name : ds.covariate_names) out << ',' << name;
    out << '\n';
    char buf[40];
    for (long i = 0; i < ds.n_rows(); ++i) {
        out << ds.patient_name(ds.patient[i]) << ',' << ds.time[i] << ',' << ds.eligible[i] << ','
            << ds.treated[i];
        std::snprintf(buf, sizeof(buf), "%.17g", ds.outcome[i]);
        out << ',' << buf;
        for (long k = 0; k < ds.covariates.cols(); ++k) {
            std::snprintf(buf, sizeof(buf), "%.17g", ds.covariates(i, k));
            out << ',' << buf;
        }
        out << '\n';
    }
}

EligibilityRule treatment_naive_rule() {
    return [](const PanelDataset& ds, long row) {
        const long p = ds.patient[row];
        const long first = ds.clusters()[p].first;
        if (row == first) return true;  // A_0 = 0 at the first record
        return ds.treated[row - 1] == 0;
    };
}

PanelDataset derive_eligibility(const PanelDataset& ds, const EligibilityRule& rule) {
    PanelDataset out = ds;
    for (long i = 0; i < out.n_rows(); ++i) out.eligible[i] = rule(ds, i) ? 1 : 0;
    out.finalize();
    return out;
}

std::vector<TrialSummary> emulate_trials(const PanelDataset& ds) {
    std::vector<TrialSummary> table;
    table.reserve(ds.tau);
    for (int t = 1; t <= ds.tau; ++t) {
        TrialSummary s;
        s.t = t;
        s.n_present = ds.present_count(t);
        s.n_eligible = ds.eligible_count(t);
        for (long i : ds.eligible_rows_at(t))
            (ds.treated[i] == 1 ? s.n_treated_arm : s.n_control_arm) += 1;
        s.empty = (s.n_eligible == 0);
        table.push_back(s);
    }
    return table;
}

std::vector<PositivityCell> positivity_diagnostics(const PanelDataset& ds,
                                                   const Eigen::VectorXd& propensity,
                                                   double threshold) {
    if (propensity.size() != ds.n_rows())
        throw Error("propensity vector must align with dataset rows");
    constexpr int kBins = 20;
    std::vector<PositivityCell> cells;
    for (int t = 1; t <= ds.tau; ++t) {
        for (int arm = 0; arm <= 1; ++arm) {
            PositivityCell cell;
            cell.t = t;
            cell.arm = arm;
            cell.bins.assign(kBins, 0);
            cell.min = 1.0;
            cell.max = 0.0;
            cells.push_back(cell);
        }
        for (long i : ds.eligible_rows_at(t)) {
            const double p = propensity[i];
            if (!(p > 0.0 && p < 1.0))
                throw Error("fitted propensity outside (0,1) at row " + std::to_string(i));
            auto& cell = cells[cells.size() - 2 + ds.treated[i]];
            const int b = std::min(kBins - 1, static_cast<int>(p * kBins));
            cell.bins[b] += 1;
            cell.min = std::min(cell.min, p);
            cell.max = std::max(cell.max, p);
            cell.n += 1;
            if (p < threshold) cell.below_threshold += 1;
        }
    }
    for (auto& cell : cells)
        if (cell.n == 0) cell.min = cell.max = 0.0;
    return cells;
}

void write_positivity_csv(const std::vector<PositivityCell>& cells, std::ostream& out) {
    out << "t,arm,bin,bin_lower,bin_upper,count,prop_min,prop_max,n,below_threshold\n";
    for (const auto& cell : cells) {
        const int k = static_cast<int>(cell.bins.size());
        for (int b = 0; b < k; ++b) {
            out << cell.t << ',' << cell.arm << ',' << b << ',' << static_cast<double>(b) / k << ','
                << static_cast<double>(b + 1) / k << ',' << cell.bins[b] << ',' << cell.min << ','
                << cell.max << ',' << cell.n << ',' << cell.below_threshold << '\n';
        }
    }
}

}  // namespace tte
