#ifndef TTE_TEST_HELPERS_HPP
#define TTE_TEST_HELPERS_HPP

#include <string>
#include <vector>

#include "tte/panel.hpp"

namespace tte::testing {

struct RowSpec {
    int patient = 0;
    int t = 1;
    int elig = 1;
    int treat = 0;
    double y = 0.0;
    std::vector<double> covs;
};

inline PanelDataset make_panel(const std::vector<RowSpec>& rows,
                               const std::vector<std::string>& cov_names,
                               Design design = Design::visit_time,
                               OutcomeFamily family = OutcomeFamily::continuous) {
    PanelDataset ds;
    ds.design = design;
    ds.outcome_family = family;
    ds.covariate_names = cov_names;
    const long n = static_cast<long>(rows.size());
    ds.patient.resize(n);
    ds.time.resize(n);
    ds.eligible.resize(n);
    ds.treated.resize(n);
    ds.outcome.resize(n);
    ds.covariates.resize(n, static_cast<long>(cov_names.size()));
    for (long i = 0; i < n; ++i) {
        ds.patient[i] = rows[i].patient;
        ds.time[i] = rows[i].t;
        ds.eligible[i] = rows[i].elig;
        ds.treated[i] = rows[i].treat;
        ds.outcome[i] = rows[i].y;
        for (size_t k = 0; k < cov_names.size(); ++k) ds.covariates(i, k) = rows[i].covs.at(k);
    }
    ds.finalize();
    return ds;
}

// Gauss-Jordan solve of a small normal-equations system, kept deliberately
// independent of the Eigen-based fitting path.
inline std::vector<double> solve_normal_equations(std::vector<std::vector<double>> a,
                                                  std::vector<double> b) {
    const size_t p = b.size();
    for (size_t col = 0; col < p; ++col) {
        size_t pivot = col;
        for (size_t r = col + 1; r < p; ++r)
            if (std::abs(a[r][col]) > std::abs(a[pivot][col])) pivot = r;
        std::swap(a[col], a[pivot]);
        std::swap(b[col], b[pivot]);
        const double d = a[col][col];
        for (size_t c = 0; c < p; ++c) a[col][c] /= d;
        b[col] /= d;
        for (size_t r = 0; r < p; ++r) {
            if (r == col) continue;
            const double f = a[r][col];
            for (size_t c = 0; c < p; ++c) a[r][c] -= f * a[col][c];
            b[r] -= f * b[col];
        }
    }
    return b;
}

// least squares of y on columns x (row major), via the normal equations
inline std::vector<double> lstsq_reference(const std::vector<std::vector<double>>& x,
                                           const std::vector<double>& y) {
    const size_t p = x[0].size();
    std::vector<std::vector<double>> xtx(p, std::vector<double>(p, 0.0));
    std::vector<double> xty(p, 0.0);
    for (size_t i = 0; i < x.size(); ++i) {
        for (size_t r = 0; r < p; ++r) {
            xty[r] += x[i][r] * y[i];
            for (size_t c = 0; c < p; ++c) xtx[r][c] += x[i][r] * x[i][c];
        }
    }
    return solve_normal_equations(std::move(xtx), std::move(xty));
}

}  // namespace tte::testing

#endif
