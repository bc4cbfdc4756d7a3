#ifndef TTE_MESTIM_HPP
#define TTE_MESTIM_HPP

#include <Eigen/Dense>
#include <functional>

#include "tte/error.hpp"

namespace tte {

// Stacked estimating equations over independent units (clusters). psi
// returns one unit's summed moment contributions; the estimator is the
// root of the unit-averaged system. All rows of one patient form one
// unit, which is what absorbs the clone correlation.
struct EstimatingSystem {
    std::function<Eigen::VectorXd(long unit, const Eigen::VectorXd& theta)> psi;
    long dim = 0;
    long n_units = 0;
    Eigen::VectorXd theta_hat;  // solved, or supplied by a plug-in fit
};

Eigen::VectorXd mean_psi(const EstimatingSystem& system, const Eigen::VectorXd& theta);

// Newton iteration with a finite-difference Jacobian; stops when
// max |mean psi| <= 1e-10. Stores and returns the root.
Eigen::VectorXd solve_stacked(EstimatingSystem& system, const Eigen::VectorXd& init);

// Cluster-robust sandwich A^{-1} B A^{-T} / m at theta_hat, with
// A = -(1/m) sum d psi_c / d theta (central differences) and
// B = (1/m) sum psi_c psi_c^T.
Eigen::MatrixXd sandwich_variance(const EstimatingSystem& system);

struct Interval {
    double lower = 0.0;
    double upper = 0.0;
};

Interval wald_ci(double point, double se, double level);

double delta_method_se(const Eigen::VectorXd& gradient, const Eigen::MatrixXd& vcov);

}  // namespace tte

#endif
