#ifndef TTE_STATS_HPP
#define TTE_STATS_HPP

#include <Eigen/Dense>
#include <cmath>
#include <vector>

namespace tte {

// expit(h) = 1/(1+exp(-h)), evaluated without overflow for large |h|
inline double expit(double h) {
    if (h >= 0.0) return 1.0 / (1.0 + std::exp(-h));
    const double e = std::exp(h);
    return e / (1.0 + e);
}

inline double logit(double p) { return std::log(p) - std::log1p(-p); }

inline double norm_pdf(double x) {
    static const double inv_sqrt_2pi = 0.3989422804014326779;
    return inv_sqrt_2pi * std::exp(-0.5 * x * x);
}

inline double norm_cdf(double x) { return 0.5 * std::erfc(-x * M_SQRT1_2); }

// Inverse standard normal cdf (Wichura's algorithm AS 241, PPND16).
double norm_quantile(double p);

struct GaussHermiteRule {
    Eigen::VectorXd nodes;    // abscissae for weight exp(-x^2)
    Eigen::VectorXd weights;  // sum to sqrt(pi)
};

// Golub-Welsch nodes/weights for the physicists' Hermite weight.
GaussHermiteRule gauss_hermite(int n);

// E[f(Z)] for Z ~ N(mean, var) by Gauss-Hermite quadrature.
template <typename F>
double gauss_hermite_mean(const GaussHermiteRule& rule, double mean, double var, F&& f) {
    const double scale = std::sqrt(2.0 * var);
    double acc = 0.0;
    for (Eigen::Index i = 0; i < rule.nodes.size(); ++i)
        acc += rule.weights[i] * f(mean + scale * rule.nodes[i]);
    return acc / std::sqrt(M_PI);
}

// Nearest-rank percentile: the ceil(q/100 * n)-th smallest value.
double percentile_nearest_rank(std::vector<double> values, double q);

}  // namespace tte

#endif
