#include "tte/mestim.hpp"

#include <cmath>

#include "tte/stats.hpp"

namespace tte {

namespace {

// step max(1e-6, 1e-6|theta_k|), snapped up to a power of two so the
// perturbed coordinates round exactly where the mantissa allows
double fd_step(double theta_k) {
    return std::exp2(std::ceil(std::log2(std::max(1e-6, 1e-6 * std::abs(theta_k)))));
}

// Central-difference Jacobian of the unit-averaged system. Differencing
// per unit before accumulating keeps the cancellation error per column
// near machine precision instead of the 1e-10 a naive mean-then-subtract
// evaluation would produce.
Eigen::MatrixXd mean_psi_jacobian(const EstimatingSystem& system, const Eigen::VectorXd& theta) {
    Eigen::MatrixXd jac(system.dim, system.dim);
    Eigen::VectorXd point = theta;
    for (long k = 0; k < system.dim; ++k) {
        const double h = fd_step(theta[k]);
        const double up_at = theta[k] + h;
        const double down_at = theta[k] - h;
        Eigen::VectorXd acc = Eigen::VectorXd::Zero(system.dim);
        for (long u = 0; u < system.n_units; ++u) {
            point[k] = up_at;
            const Eigen::VectorXd up = system.psi(u, point);
            point[k] = down_at;
            acc += up - system.psi(u, point);
        }
        point[k] = theta[k];
        jac.col(k) = acc / ((up_at - down_at) * static_cast<double>(system.n_units));
    }
    return jac;
}

}  // namespace

Eigen::VectorXd mean_psi(const EstimatingSystem& system, const Eigen::VectorXd& theta) {
    Eigen::VectorXd acc = Eigen::VectorXd::Zero(system.dim);
    for (long u = 0; u < system.n_units; ++u) acc += system.psi(u, theta);
    return acc / static_cast<double>(system.n_units);
}

Eigen::VectorXd solve_stacked(EstimatingSystem& system, const Eigen::VectorXd& init) {
    if (init.size() != system.dim) throw Error("solve_stacked: init has wrong dimension");
    Eigen::VectorXd theta = init;
    constexpr int kMaxIterations = 50;
    constexpr double kTolerance = 1e-10;
    for (int iter = 0; iter < kMaxIterations; ++iter) {
        const Eigen::VectorXd g = mean_psi(system, theta);
        if (!g.allFinite()) throw Error("solve_stacked: non-finite moment values");
        if (g.cwiseAbs().maxCoeff() <= kTolerance) {
            system.theta_hat = theta;
            return theta;
        }
        const Eigen::MatrixXd jac = mean_psi_jacobian(system, theta);
        Eigen::FullPivLU<Eigen::MatrixXd> lu(jac);
        if (!lu.isInvertible()) throw Error("solve_stacked: singular Jacobian");
        theta -= lu.solve(g);
        if (!theta.allFinite()) throw Error("solve_stacked: divergence");
    }
    throw Error("solve_stacked: no convergence within 50 iterations");
}

Eigen::MatrixXd sandwich_variance(const EstimatingSystem& system) {
    if (system.theta_hat.size() != system.dim)
        throw Error("sandwich_variance: theta_hat not set");
    const long m = system.n_units;
    if (m < system.dim + 1)
        throw Error("sandwich_variance: needs at least dim+1 clusters");

    const Eigen::VectorXd g = mean_psi(system, system.theta_hat);
    if (g.cwiseAbs().maxCoeff() > 1e-6)
        throw Error("sandwich_variance: theta_hat does not solve the stacked equations");

    const Eigen::MatrixXd bread = -mean_psi_jacobian(system, system.theta_hat);
    Eigen::MatrixXd meat = Eigen::MatrixXd::Zero(system.dim, system.dim);
    for (long u = 0; u < m; ++u) {
        const Eigen::VectorXd contrib = system.psi(u, system.theta_hat);
        meat.noalias() += contrib * contrib.transpose();
    }
    meat /= static_cast<double>(m);

    Eigen::FullPivLU<Eigen::MatrixXd> lu(bread);
    if (!lu.isInvertible()) throw Error("sandwich_variance: singular bread matrix");
    const Eigen::MatrixXd bread_inv = lu.inverse();
    Eigen::MatrixXd vcov =
        bread_inv * meat * bread_inv.transpose() / static_cast<double>(m);
    vcov = 0.5 * (vcov + vcov.transpose()).eval();
    return vcov;
}

Interval wald_ci(double point, double se, double level) {
    if (se < 0.0) throw Error("wald_ci: negative standard error");
    if (!(level > 0.0 && level < 1.0)) throw Error("wald_ci: level must be in (0,1)");
    const double z = norm_quantile(0.5 * (1.0 + level));
    return {point - z * se, point + z * se};
}

double delta_method_se(const Eigen::VectorXd& gradient, const Eigen::MatrixXd& vcov) {
    if (vcov.rows() != gradient.size() || vcov.cols() != gradient.size())
        throw Error("delta_method: dimension mismatch");
    const double quad = gradient.dot(vcov * gradient);
    if (quad < -1e-12) throw Error("delta_method: negative quadratic form");
    return std::sqrt(std::max(quad, 0.0));
}

}  // namespace tte
