#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "smolcoal/mechanism.hpp"
#include "smolcoal/rng.hpp"

using namespace smolcoal;

namespace {

// Independent oracle: adaptive RK4 integration of xdot = -psi(x), halving the
// step until two refinements agree. Deliberately does not touch the
// closed-form flow it is used to check.
double rk_flow_oracle(double c, double gamma, double x0, double t, double tol = 1e-12) {
    auto psi = [&](double x) { return c * std::pow(x, gamma); };
    auto integrate = [&](int steps) {
        double x = x0;
        const double h = t / steps;
        for (int i = 0; i < steps; ++i) {
            const double k1 = -psi(x);
            const double k2 = -psi(std::max(x + 0.5 * h * k1, 0.0));
            const double k3 = -psi(std::max(x + 0.5 * h * k2, 0.0));
            const double k4 = -psi(std::max(x + h * k3, 0.0));
            x += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            if (x < 0.0) x = 0.0;
        }
        return x;
    };
    // resolve the initial decay rate psi(x0)/x0, then refine until two
    // consecutive halvings agree
    const double stiffness = c * std::pow(x0, gamma - 1.0) * t;
    int steps = 64;
    while (steps < 16.0 * stiffness && steps < (1 << 22)) steps *= 2;
    double prev = integrate(steps);
    int agreements = 0;
    for (int i = 0; i < 14; ++i) {
        steps *= 2;
        const double cur = integrate(steps);
        if (std::fabs(cur - prev) <= tol * (std::fabs(cur) + 1e-30)) {
            if (++agreements == 2) return cur;
        } else {
            agreements = 0;
        }
        prev = cur;
    }
    return prev;
}

} // namespace

TEST_CASE("eval of the stable depletion function") {
    auto m = BranchingMechanism::stable(1.0, 2.0);
    CHECK(m.eval(0.0) == 0.0);
    CHECK(m.eval(3.0) == 9.0);
    auto half = BranchingMechanism::stable(0.5, 2.0);
    CHECK(half.eval(2.0) == 2.0);
    CHECK_THROWS_AS(m.eval(-1.0), std::domain_error);
    CHECK_THROWS_AS(m.eval(std::numeric_limits<double>::infinity()), std::domain_error);
    CHECK_THROWS_AS(BranchingMechanism::stable(0.0, 2.0), std::domain_error);
    CHECK_THROWS_AS(BranchingMechanism::stable(1.0, 1.0), std::domain_error);
    CHECK(BranchingMechanism::quadratic(0.5).gamma() == 2.0);
    CHECK(BranchingMechanism::quadratic(0.5).kind() == BranchingMechanism::Kind::Quadratic);
}

TEST_CASE("flow closed form") {
    FlowEvaluator f(BranchingMechanism::stable(1.0, 2.0));
    CHECK(f.flow(1.0, 1.0) == Catch::Approx(0.5).epsilon(1e-14));
    CHECK(f.flow(kInf, 1.0) == Catch::Approx(1.0).epsilon(1e-14));
    CHECK(f.flow(7.0, 0.0) == 7.0);
    CHECK(f.flow(0.0, 3.0) == 0.0);
    CHECK_THROWS_AS(f.flow(1.0, -0.5), std::domain_error);

    FlowEvaluator g(BranchingMechanism::stable(2.0, 1.5));
    CHECK(g.flow(5.0, 0.0) == 5.0);
    CHECK(g.flow(0.0, 1.0) == 0.0);
}

TEST_CASE("q and phi closed forms and consistency") {
    FlowEvaluator f(BranchingMechanism::stable(1.0, 2.0));
    CHECK(f.q(2.0) == Catch::Approx(0.5).epsilon(1e-14));
    CHECK(f.phi(4.0) == Catch::Approx(0.25).epsilon(1e-14));
    CHECK(f.phi(1.0 + f.q(1.0)) == Catch::Approx(f.flow(1.0, 1.0)).epsilon(1e-12));
    CHECK_THROWS_AS(f.q(0.0), std::domain_error);
    CHECK_THROWS_AS(f.phi(-1.0), std::domain_error);

    // flow(x0, t) == phi(t + q(x0)) across mechanisms
    for (double gamma : {1.3, 2.0, 2.7}) {
        FlowEvaluator fe(BranchingMechanism::stable(0.7, gamma));
        for (double x0 : {0.2, 1.0, 8.0}) {
            for (double t : {0.05, 1.0, 12.0}) {
                const double lhs = fe.flow(x0, t);
                const double rhs = fe.phi(t + fe.q(x0));
                CHECK(lhs == Catch::Approx(rhs).epsilon(1e-12));
            }
        }
    }
}

TEST_CASE("flow matches the RK oracle") {
    for (double gamma : {1.5, 2.0, 2.5}) {
        for (double c : {0.5, 1.0}) {
            FlowEvaluator f(BranchingMechanism::stable(c, gamma));
            for (double x0 : {0.1, 1.0, 10.0}) {
                for (double t : {0.01, 0.5, 2.0, 20.0}) {
                    const double closed = f.flow(x0, t);
                    const double oracle = rk_flow_oracle(c, gamma, x0, t);
                    CHECK(closed == Catch::Approx(oracle).epsilon(1e-8));
                }
            }
        }
    }
}

TEST_CASE("flow semigroup property") {
    for (double gamma : {1.5, 2.0}) {
        FlowEvaluator f(BranchingMechanism::stable(1.0, gamma));
        for (double x0 : {0.1, 1.0, 10.0, kInf}) {
            for (double s : {0.1, 1.0, 10.0}) {
                for (double t : {0.1, 1.0, 10.0}) {
                    const double two_step = f.flow(f.flow(x0, s), t);
                    const double one_step = f.flow(x0, s + t);
                    CHECK(two_step == Catch::Approx(one_step).epsilon(1e-10));
                }
            }
        }
    }
}

TEST_CASE("flow monotonicity in x0 and t") {
    FlowEvaluator f(BranchingMechanism::stable(1.3, 1.8));
    double prev = 0.0;
    for (double x0 : {0.0, 0.5, 1.0, 2.0, 100.0, 1e6}) {
        const double v = f.flow(x0, 0.7);
        CHECK(v >= prev);
        prev = v;
    }
    CHECK(f.flow(kInf, 0.7) >= prev);
    prev = kInf;
    for (double t : {0.01, 0.1, 1.0, 10.0}) {
        const double v = f.flow(3.0, t);
        CHECK(v <= prev);
        prev = v;
    }
}

TEST_CASE("superlinearity gap") {
    FlowEvaluator f(BranchingMechanism::stable(1.0, 2.0));
    // closed-form arithmetic: 2*flow(1,1) - flow(2,1) = 1 - 2/3 = 1/3,
    // frozen after checking the pieces against the RK oracle
    const double gap = f.superlinearity_gap(1.0, 1.0, 1.0);
    const double oracle =
        2.0 * rk_flow_oracle(1.0, 2.0, 1.0, 1.0) - rk_flow_oracle(1.0, 2.0, 2.0, 1.0);
    CHECK(gap == Catch::Approx(oracle).epsilon(1e-8));
    CHECK(gap == Catch::Approx(1.0 / 3.0).epsilon(1e-12));

    // continuity at t -> 0+
    CHECK(f.superlinearity_gap(1.0, 1.0, 1e-9) < 1e-8);
    // degenerate second branch
    CHECK(f.superlinearity_gap(1.0, 1e-12, 1.0) < 1e-10);
    CHECK_THROWS_AS(f.superlinearity_gap(0.0, 1.0, 1.0), std::domain_error);

    // nonnegative over random draws with gamma in (1, 3]
    RngStream rng(99, 0);
    for (int i = 0; i < 500; ++i) {
        const double gamma = 1.0 + 2.0 * rng.uniform();
        FlowEvaluator fe(BranchingMechanism::stable(0.1 + 3.0 * rng.uniform(), gamma));
        const double a = 0.01 + 5.0 * rng.uniform();
        const double b = 0.01 + 5.0 * rng.uniform();
        const double t = 0.01 + 5.0 * rng.uniform();
        CHECK(fe.superlinearity_gap(a, b, t) >= 0.0);
    }
}
