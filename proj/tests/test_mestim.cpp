#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "test_helpers.hpp"
#include "tte/glm.hpp"
#include "tte/mestim.hpp"
#include "tte/random.hpp"
#include "tte/stats.hpp"

using namespace tte;
using tte::testing::RowSpec;
using tte::testing::make_panel;

TEST_CASE("solve_stacked recovers the sample mean") {
    const std::vector<double> y{0.0, 2.0};
    EstimatingSystem system;
    system.dim = 1;
    system.n_units = 2;
    system.psi = [&y](long u, const Eigen::VectorXd& th) {
        Eigen::VectorXd out(1);
        out[0] = y[u] - th[0];
        return out;
    };
    const auto root = solve_stacked(system, Eigen::VectorXd::Zero(1));
    CHECK(root[0] == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(system.theta_hat[0] == root[0]);
}

TEST_CASE("a logistic-score stack reproduces the IRLS fit") {
    RngStream rng(21, 0);
    std::vector<RowSpec> rows;
    for (int i = 0; i < 80; ++i) {
        const double x = rng.next_normal();
        rows.push_back({i, 1, 1, 0, rng.next_bernoulli(expit(0.5 - x)) ? 1.0 : 0.0, {x}});
    }
    const auto ds = make_panel(rows, {"L"}, Design::visit_time, OutcomeFamily::binary);
    ModelSpec spec;
    spec.response = Response::outcome;
    spec.link = Link::logit;
    spec.terms = {cov_term("L")};
    const auto model = fit(spec, ds);

    const auto idx = subset_rows(ds, spec.subset);
    const auto x = design_matrix(model, ds, idx);
    const auto y = response_vector(spec.response, ds, idx);
    EstimatingSystem system;
    system.dim = 2;
    system.n_units = static_cast<long>(idx.size());
    system.psi = [&x, &y](long u, const Eigen::VectorXd& th) {
        const double eta = x.row(u).dot(th);
        return Eigen::VectorXd(x.row(u).transpose() * (y[u] - expit(eta)));
    };
    const auto root = solve_stacked(system, Eigen::VectorXd::Zero(2));
    CHECK(root[0] == doctest::Approx(model.coefficients[0]).epsilon(1e-8));
    CHECK(root[1] == doctest::Approx(model.coefficients[1]).epsilon(1e-8));
}

TEST_CASE("inconsistent systems fail to converge") {
    EstimatingSystem system;
    system.dim = 1;
    system.n_units = 3;
    system.psi = [](long, const Eigen::VectorXd&) { return Eigen::VectorXd::Ones(1); };
    CHECK_THROWS_AS(solve_stacked(system, Eigen::VectorXd::Zero(1)), Error);
}

TEST_CASE("sandwich of the mean functional has the closed form") {
    const std::vector<double> y{0.0, 2.0};
    EstimatingSystem system;
    system.dim = 1;
    system.n_units = 2;
    system.theta_hat = Eigen::VectorXd::Ones(1);
    system.psi = [&y](long u, const Eigen::VectorXd& th) {
        Eigen::VectorXd out(1);
        out[0] = y[u] - th[0];
        return out;
    };
    const auto vcov = sandwich_variance(system);
    CHECK(vcov(0, 0) == doctest::Approx(0.5).epsilon(1e-10));
    CHECK(std::sqrt(vcov(0, 0)) == doctest::Approx(0.7071067811865476).epsilon(1e-9));

    SUBCASE("general closed form sum (y - ybar)^2 / m^2") {
        RngStream rng(4, 4);
        std::vector<double> z;
        for (int i = 0; i < 37; ++i) z.push_back(rng.next_normal() * 2.0 + 1.0);
        double mean = 0.0;
        for (double v : z) mean += v;
        mean /= static_cast<double>(z.size());
        EstimatingSystem sys2;
        sys2.dim = 1;
        sys2.n_units = static_cast<long>(z.size());
        sys2.theta_hat = Eigen::VectorXd::Constant(1, mean);
        sys2.psi = [&z](long u, const Eigen::VectorXd& th) {
            Eigen::VectorXd out(1);
            out[0] = z[u] - th[0];
            return out;
        };
        double closed = 0.0;
        for (double v : z) closed += (v - mean) * (v - mean);
        closed /= static_cast<double>(z.size()) * static_cast<double>(z.size());
        CHECK(sandwich_variance(sys2)(0, 0) == doctest::Approx(closed).epsilon(1e-10));
    }
}

TEST_CASE("sandwich validates its preconditions") {
    EstimatingSystem system;
    system.dim = 1;
    system.n_units = 2;
    system.psi = [](long, const Eigen::VectorXd& th) {
        Eigen::VectorXd out(1);
        out[0] = 1.0 - th[0];
        return out;
    };
    SUBCASE("theta_hat must be set") { CHECK_THROWS_AS(sandwich_variance(system), Error); }
    SUBCASE("theta_hat must be a root") {
        system.theta_hat = Eigen::VectorXd::Zero(1);
        CHECK_THROWS_WITH_AS(sandwich_variance(system), doctest::Contains("does not solve"),
                             Error);
    }
    SUBCASE("needs dim+1 clusters") {
        system.n_units = 1;
        system.theta_hat = Eigen::VectorXd::Ones(1);
        CHECK_THROWS_AS(sandwich_variance(system), Error);
    }
}

TEST_CASE("finite-difference jacobian matches an analytic jacobian") {
    // psi(u, th) = (y_u - th0, th0 * th1 - z_u): analytic derivative known
    const std::vector<double> y{1.0, 3.0, 2.0};
    const std::vector<double> z{2.1, 1.9, 2.0};
    EstimatingSystem system;
    system.dim = 2;
    system.n_units = 3;
    system.psi = [&](long u, const Eigen::VectorXd& th) {
        Eigen::VectorXd out(2);
        out[0] = y[u] - th[0];
        out[1] = th[0] * th[1] - z[u];
        return out;
    };
    Eigen::VectorXd init(2);
    init << 1.5, 1.0;
    const auto root = solve_stacked(system, init);
    CHECK(root[0] == doctest::Approx(2.0).epsilon(1e-9));
    CHECK(root[1] == doctest::Approx(1.0).epsilon(1e-9));

    // probe the Jacobian implicitly through the sandwich bread: for this
    // system A = -[[-1, 0], [th1, th0]] evaluated at the root
    const auto vcov = sandwich_variance(system);
    CHECK(vcov.rows() == 2);
    // symmetric and PSD
    CHECK((vcov - vcov.transpose()).cwiseAbs().maxCoeff() <= 1e-12);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(vcov);
    CHECK(eig.eigenvalues().minCoeff() >= -1e-10);
}

TEST_CASE("wald intervals") {
    const auto ci = wald_ci(0.0, 1.0, 0.95);
    CHECK(ci.lower == doctest::Approx(-1.959963984540054).epsilon(1e-12));
    CHECK(ci.upper == doctest::Approx(1.959963984540054).epsilon(1e-12));

    const auto table2 = wald_ci(1.221, 0.032, 0.95);
    CHECK(table2.lower == doctest::Approx(1.158).epsilon(5e-4));
    CHECK(table2.upper == doctest::Approx(1.284).epsilon(5e-4));
    CHECK(table2.upper < 1.5);  // the interval excludes the uniform-effect limit

    const auto degenerate = wald_ci(0.7, 0.0, 0.95);
    CHECK(degenerate.lower == 0.7);
    CHECK(degenerate.upper == 0.7);

    CHECK_THROWS_AS(wald_ci(0.0, -1.0, 0.95), Error);
    CHECK_THROWS_AS(wald_ci(0.0, 1.0, 1.0), Error);
}

TEST_CASE("delta method") {
    Eigen::VectorXd g1(1);
    g1 << 1.0;
    Eigen::MatrixXd v1(1, 1);
    v1 << 4.0;
    CHECK(delta_method_se(g1, v1) == 2.0);

    Eigen::VectorXd g2(2);
    g2 << 1.0, -1.0;
    CHECK(delta_method_se(g2, Eigen::MatrixXd::Identity(2, 2)) ==
          doctest::Approx(std::sqrt(2.0)).epsilon(1e-14));

    SUBCASE("logit transform of arm means vs a finite-difference oracle") {
        const double p1 = 0.75, p0 = 0.5;
        Eigen::MatrixXd vcov(2, 2);
        vcov << 0.01, 0.002, 0.002, 0.02;
        Eigen::VectorXd grad(2);
        grad << 1.0 / (p1 * (1.0 - p1)), -1.0 / (p0 * (1.0 - p0));
        const double se = delta_method_se(grad, vcov);

        const double h = 1e-6;
        auto f = [](double a, double b) { return logit(a) - logit(b); };
        Eigen::VectorXd fd(2);
        fd << (f(p1 + h, p0) - f(p1 - h, p0)) / (2 * h), (f(p1, p0 + h) - f(p1, p0 - h)) / (2 * h);
        const double se_fd = std::sqrt(fd.dot(vcov * fd));
        CHECK(se == doctest::Approx(se_fd).epsilon(1e-6));
    }

    SUBCASE("negative quadratic form rejected") {
        Eigen::MatrixXd bad(1, 1);
        bad << -1.0;
        CHECK_THROWS_AS(delta_method_se(g1, bad), Error);
    }
}

TEST_CASE("one row per cluster: cluster-robust equals row-robust") {
    RngStream rng(8, 8);
    std::vector<double> y;
    for (int i = 0; i < 25; ++i) y.push_back(rng.next_normal());
    double mean = 0.0;
    for (double v : y) mean += v;
    mean /= static_cast<double>(y.size());

    EstimatingSystem by_cluster;
    by_cluster.dim = 1;
    by_cluster.n_units = static_cast<long>(y.size());
    by_cluster.theta_hat = Eigen::VectorXd::Constant(1, mean);
    by_cluster.psi = [&y](long u, const Eigen::VectorXd& th) {
        Eigen::VectorXd out(1);
        out[0] = y[u] - th[0];
        return out;
    };
    // row-robust reference: same thing computed directly
    double meat = 0.0;
    for (double v : y) meat += (v - mean) * (v - mean);
    const double reference = meat / (static_cast<double>(y.size()) * y.size());
    CHECK(sandwich_variance(by_cluster)(0, 0) == doctest::Approx(reference).epsilon(1e-12));
}

TEST_CASE("two-step plug-in equals the jointly solved point estimate") {
    // stack: nuisance mean mu of x, then functional psi = mean of (y - mu)
    RngStream rng(14, 1);
    std::vector<double> xs, ys;
    for (int i = 0; i < 40; ++i) {
        xs.push_back(rng.next_normal() + 1.0);
        ys.push_back(2.0 * xs.back() + rng.next_normal());
    }
    EstimatingSystem joint;
    joint.dim = 2;
    joint.n_units = 40;
    joint.psi = [&](long u, const Eigen::VectorXd& th) {
        Eigen::VectorXd out(2);
        out[0] = xs[u] - th[0];
        out[1] = (ys[u] - th[0]) - th[1];
        return out;
    };
    const auto solved = solve_stacked(joint, Eigen::VectorXd::Zero(2));

    double mu = 0.0;
    for (double v : xs) mu += v;
    mu /= 40.0;
    double psi = 0.0;
    for (double v : ys) psi += v - mu;
    psi /= 40.0;
    CHECK(solved[1] == doctest::Approx(psi).epsilon(1e-10));
}
