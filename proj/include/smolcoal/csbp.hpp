#ifndef SMOLCOAL_CSBP_HPP
#define SMOLCOAL_CSBP_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "smolcoal/mechanism.hpp"
#include "smolcoal/rng.hpp"
#include "smolcoal/stats.hpp"

namespace smolcoal {

// CSBP with branching mechanism psi(lambda) - r*lambda. r = 0 is the plain
// CSBP; r = beta gives the drifted process whose branching system realizes
// the self-similar profile.
struct ShiftedMechanism {
    BranchingMechanism base;
    double shift = 0.0;

    double beta() const { return base.beta(); }
};

// varphi_r(t): the Laplace-exponent value such that P_x(T_0 < t) = exp(-x varphi_r(t)).
inline double extinction_exponent(const ShiftedMechanism& sm, double t) {
    if (!(t > 0.0)) throw std::domain_error("extinction_exponent: t must be > 0");
    const double c = sm.base.rate();
    const double beta = sm.beta();
    const double r = sm.shift;
    if (r == 0.0) return std::pow(beta / (c * t), beta);
    return std::pow((r / c) / (1.0 - std::exp(-r * t / beta)), beta);
}

inline double extinction_time_cdf(const ShiftedMechanism& sm, double x, double t) {
    if (!(x > 0.0)) throw std::domain_error("extinction_time_cdf: x must be > 0");
    return std::exp(-x * extinction_exponent(sm, t));
}

// P_x(T_0 < infinity): 1 for r <= 0, exp(-x (r/c)^beta) for r > 0.
inline double extinction_prob_total(const ShiftedMechanism& sm, double x) {
    if (sm.shift <= 0.0) return 1.0;
    return std::exp(-x * std::pow(sm.shift / sm.base.rate(), sm.beta()));
}

// Fractional-linear Laplace flow of the Feller case (gamma = 2, beta = 1):
// E_x exp(-lambda Z_t) = exp(-x * lambda / (D + Q lambda)) with
//   D = exp(-r t),  Q = c (1 - exp(-r t)) / r   (Q = c t when r = 0).
// Solves udot = -(c u^2 - r u), u_0 = lambda; checked against direct ODE
// integration in the tests.
struct FellerFlowCoeffs {
    double D;
    double Q;
};

inline FellerFlowCoeffs feller_flow_coeffs(const ShiftedMechanism& sm, double t) {
    if (sm.base.gamma() != 2.0)
        throw std::domain_error("feller flow: exact transitions require gamma == 2");
    if (!(t > 0.0)) throw std::domain_error("feller flow: t must be > 0");
    const double c = sm.base.rate();
    const double r = sm.shift;
    if (r == 0.0) return {1.0, c * t};
    const double e = std::exp(-r * t);
    return {e, c * (1.0 - e) / r};
}

inline double feller_laplace_exponent(const ShiftedMechanism& sm, double lambda, double t) {
    const auto [D, Q] = feller_flow_coeffs(sm, t);
    return lambda / (D + Q * lambda);
}

// Exact transition sample of the (possibly drifted) Feller CSBP:
// Z_t | Z_0 = x is Poisson(x/Q) many iid Exponential(mean Q/D) jumps.
inline double feller_transition_sample(const ShiftedMechanism& sm, double x, double t,
                                       RngStream& rng) {
    if (!(x >= 0.0)) throw std::domain_error("feller_transition_sample: x must be >= 0");
    const auto [D, Q] = feller_flow_coeffs(sm, t);
    if (x == 0.0) return 0.0;
    const std::int64_t n = rng.poisson(x / Q);
    if (n == 0) return 0.0;
    return rng.gamma(static_cast<double>(n)) * (Q / D);
}

namespace detail {

inline std::int64_t truncated_poisson_positive(double mean, RngStream& rng) {
    if (mean >= 30.0) {
        for (;;) {
            const std::int64_t n = rng.poisson(mean);
            if (n >= 1) return n;
        }
    }
    const double p0 = std::exp(-mean);
    const double v = p0 + rng.uniform_co() * (1.0 - p0);
    double cum = p0;
    double pmf = p0;
    std::int64_t n = 0;
    while (cum < v && n < 4096) {
        ++n;
        pmf *= mean / static_cast<double>(n);
        cum += pmf;
    }
    return std::max<std::int64_t>(n, 1);
}

} // namespace detail

// Z_t | Z_0 = x conditioned on Z_t > 0.
inline double feller_transition_sample_positive(const ShiftedMechanism& sm, double x, double t,
                                                RngStream& rng) {
    const auto [D, Q] = feller_flow_coeffs(sm, t);
    if (!(x > 0.0)) throw std::domain_error("conditioned sample: x must be > 0");
    const std::int64_t n = detail::truncated_poisson_positive(x / Q, rng);
    return rng.gamma(static_cast<double>(n)) * (Q / D);
}

struct ExtinctionBracket {
    MeanStderr lower;        // depth-cap trajectories scored survived
    MeanStderr upper;        // depth-cap trajectories scored extinct
    double cap_fraction = 0.0;
    bool inconclusive = false;
};

// Recursive Monte Carlo for the total-mass-extinction probability h(x) of the
// branching particle system: particles branch at rate 1, masses follow the
// r = beta Feller CSBP. A lineage of mass m dies before its branch time tau
// with probability exp(-m varphi_beta(tau)); otherwise both children restart
// from Z_tau | Z_tau > 0. Trajectories of depth > depth_cap are ambiguous and
// are reported through the two brackets, never silently collapsed.
inline ExtinctionBracket branching_extinction_mc(const ShiftedMechanism& sm, double x,
                                                 int depth_cap, int replicates,
                                                 std::uint64_t seed,
                                                 double bracket_tolerance = 1.0) {
    if (sm.base.gamma() != 2.0)
        throw std::domain_error("branching_extinction_mc: requires gamma == 2");
    if (sm.shift != sm.beta())
        throw std::domain_error("branching_extinction_mc: requires shift r == beta");
    if (depth_cap < 10) throw std::invalid_argument("branching_extinction_mc: depth_cap >= 10");
    if (replicates < 2) throw std::invalid_argument("branching_extinction_mc: replicates >= 2");
    if (!(x > 0.0)) throw std::domain_error("branching_extinction_mc: x must be > 0");

    std::vector<double> low(static_cast<std::size_t>(replicates));
    std::vector<double> high(static_cast<std::size_t>(replicates));
    std::int64_t caps = 0;

    struct Node {
        double mass;
        int depth;
    };

    for (int rep = 0; rep < replicates; ++rep) {
        RngStream rng(seed, static_cast<std::uint64_t>(rep));
        std::vector<Node> stack;
        stack.push_back({x, 0});
        bool capped = false;
        while (!stack.empty()) {
            const Node node = stack.back();
            stack.pop_back();
            const double tau = rng.exponential(1.0);
            const auto [D, Q] = feller_flow_coeffs(sm, tau);
            const double p_dead = std::exp(-node.mass / Q);
            if (rng.uniform_co() < p_dead) continue; // this line extinct before branching
            if (node.depth + 1 > depth_cap) {
                capped = true;
                break;
            }
            double z;
            if (1.0 - p_dead < 1e-12) {
                continue; // conditioning mass indistinguishable from extinct
            } else {
                const std::int64_t njumps =
                    detail::truncated_poisson_positive(node.mass / Q, rng);
                z = rng.gamma(static_cast<double>(njumps)) * (Q / D);
            }
            stack.push_back({z, node.depth + 1});
            stack.push_back({z, node.depth + 1});
        }
        if (capped) {
            ++caps;
            low[static_cast<std::size_t>(rep)] = 0.0;
            high[static_cast<std::size_t>(rep)] = 1.0;
        } else {
            low[static_cast<std::size_t>(rep)] = 1.0;
            high[static_cast<std::size_t>(rep)] = 1.0;
        }
    }

    ExtinctionBracket out;
    out.lower = mean_stderr(low);
    out.upper = mean_stderr(high);
    out.cap_fraction = static_cast<double>(caps) / static_cast<double>(replicates);
    out.inconclusive = (out.upper.mean - out.lower.mean) > bracket_tolerance;
    return out;
}

struct ProfileSolution {
    std::vector<double> xs;
    std::vector<double> hs;
    std::vector<double> hps; // h'
    double hprime0 = 0.0;
    double e_upsilon = 0.0;
    int bisection_iterations = 0;
    double bracket_width = 0.0;
};

namespace detail {

// One adaptive RK45 (Cash-Karp) integration of the profile ODE
//   x (c h'' + beta h') + h^2 - h = 0
// from x = eps with the series start h = 1 + a x + b x^2 + e3 x^3.
// Returns +1 if the trajectory crossed below zero (slope too steep),
// -1 if it turned upward while still positive (slope too shallow),
// 0 if it reached x_max without either event.
struct ProfileShot {
    int classification = 0;
    std::vector<double> xs, hs, hps;
};

inline ProfileShot profile_shot(double a, double c, double beta, double x_max, double tol,
                                const std::vector<double>& grid) {
    const double b = -a * (1.0 + beta) / (2.0 * c);
    const double e3 = -(a * a + b * (1.0 + 2.0 * beta)) / (6.0 * c);
    const double eps = 1e-6;
    double x = eps;
    double h = 1.0 + a * eps + b * eps * eps + e3 * eps * eps * eps;
    double hp = a + 2.0 * b * eps + 3.0 * e3 * eps * eps;

    auto rhs = [&](double xx, double hh, double pp, double& dh, double& dp) {
        dh = pp;
        dp = ((hh - hh * hh) / xx - beta * pp) / c;
    };

    ProfileShot shot;
    std::size_t gi = 0;
    while (gi < grid.size() && grid[gi] <= x) {
        shot.xs.push_back(grid[gi]);
        shot.hs.push_back(grid[gi] == 0.0 ? 1.0
                                          : 1.0 + a * grid[gi] + b * grid[gi] * grid[gi]);
        shot.hps.push_back(a + 2.0 * b * grid[gi]);
        ++gi;
    }

    double dt = 1e-4;
    while (x < x_max) {
        double target = x_max;
        if (gi < grid.size()) target = std::min(target, grid[gi]);
        double step = std::min(dt, target - x);
        if (step <= 0.0) step = 1e-14;

        // Cash-Karp embedded pair
        static const double a2 = 0.2, a3 = 0.3, a4 = 0.6, a5 = 1.0, a6 = 0.875;
        double k1h, k1p, k2h, k2p, k3h, k3p, k4h, k4p, k5h, k5p, k6h, k6p;
        rhs(x, h, hp, k1h, k1p);
        rhs(x + a2 * step, h + step * 0.2 * k1h, hp + step * 0.2 * k1p, k2h, k2p);
        rhs(x + a3 * step, h + step * (3.0 / 40 * k1h + 9.0 / 40 * k2h),
            hp + step * (3.0 / 40 * k1p + 9.0 / 40 * k2p), k3h, k3p);
        rhs(x + a4 * step, h + step * (0.3 * k1h - 0.9 * k2h + 1.2 * k3h),
            hp + step * (0.3 * k1p - 0.9 * k2p + 1.2 * k3p), k4h, k4p);
        rhs(x + a5 * step,
            h + step * (-11.0 / 54 * k1h + 2.5 * k2h - 70.0 / 27 * k3h + 35.0 / 27 * k4h),
            hp + step * (-11.0 / 54 * k1p + 2.5 * k2p - 70.0 / 27 * k3p + 35.0 / 27 * k4p),
            k5h, k5p);
        rhs(x + a6 * step,
            h + step * (1631.0 / 55296 * k1h + 175.0 / 512 * k2h + 575.0 / 13824 * k3h +
                        44275.0 / 110592 * k4h + 253.0 / 4096 * k5h),
            hp + step * (1631.0 / 55296 * k1p + 175.0 / 512 * k2p + 575.0 / 13824 * k3p +
                         44275.0 / 110592 * k4p + 253.0 / 4096 * k5p),
            k6h, k6p);

        const double h5 = h + step * (37.0 / 378 * k1h + 250.0 / 621 * k3h +
                                      125.0 / 594 * k4h + 512.0 / 1771 * k6h);
        const double p5 = hp + step * (37.0 / 378 * k1p + 250.0 / 621 * k3p +
                                       125.0 / 594 * k4p + 512.0 / 1771 * k6p);
        const double h4 = h + step * (2825.0 / 27648 * k1h + 18575.0 / 48384 * k3h +
                                      13525.0 / 55296 * k4h + 277.0 / 14336 * k5h +
                                      0.25 * k6h);
        const double p4 = hp + step * (2825.0 / 27648 * k1p + 18575.0 / 48384 * k3p +
                                       13525.0 / 55296 * k4p + 277.0 / 14336 * k5p +
                                       0.25 * k6p);
        const double err = std::max(std::fabs(h5 - h4), std::fabs(p5 - p4));
        const double scale = tol * (1.0 + std::fabs(h) + std::fabs(hp));
        if (err > scale && step > 1e-13) {
            dt = std::max(0.2 * step, 0.9 * step * std::pow(scale / err, 0.25));
            continue;
        }
        x += step;
        h = h5;
        hp = p5;
        dt = std::min(0.25, 0.9 * step * std::pow(scale / std::max(err, 1e-300), 0.2));

        while (gi < grid.size() && grid[gi] <= x + 1e-12) {
            shot.xs.push_back(grid[gi]);
            shot.hs.push_back(h);
            shot.hps.push_back(hp);
            ++gi;
        }
        if (h < -1e-12) {
            shot.classification = +1; // overshoot: slope too steep
            return shot;
        }
        if (hp > 1e-12 && h > 1e-9) {
            shot.classification = -1; // turned back up: slope too shallow
            return shot;
        }
    }
    shot.classification = 0;
    return shot;
}

} // namespace detail

// Shooting solver for the self-similar profile: h(0) = 1, h decreasing to 0,
// E(Upsilon) = -h'(0). Bisection bracket for -h'(0) is
// [(beta/c)^beta, 20 (beta/c)^beta]; the lower end is forced by the bound
// h(x) <= exp(-x (beta/c)^beta).
inline ProfileSolution profile_solve(const BranchingMechanism& m, double x_max = 40.0,
                                     double tol = 1e-10, int grid_points = 2001) {
    if (m.gamma() != 2.0)
        throw std::domain_error("profile_solve: second-order ODE form requires gamma == 2");
    const double c = m.rate();
    const double beta = m.beta();
    const double floor_slope = std::pow(beta / c, beta);

    std::vector<double> grid(static_cast<std::size_t>(grid_points));
    for (int i = 0; i < grid_points; ++i)
        grid[static_cast<std::size_t>(i)] = x_max * static_cast<double>(i) / (grid_points - 1);

    double lo = -20.0 * floor_slope; // steep end
    double hi = -floor_slope;        // shallow end
    auto classify = [&](double a) {
        return detail::profile_shot(a, c, beta, x_max, tol, {}).classification;
    };
    const int cl_lo = classify(lo);
    const int cl_hi = classify(hi);
    if (cl_lo != +1 || cl_hi != -1)
        throw std::runtime_error(
            "profile_solve: no sign change in shooting bracket [" + std::to_string(lo) + ", " +
            std::to_string(hi) + "] (classifications " + std::to_string(cl_lo) + ", " +
            std::to_string(cl_hi) + ")");

    int iters = 0;
    while (hi - lo > 1e-13 * std::fabs(lo) && iters < 200) {
        const double mid = 0.5 * (lo + hi);
        if (classify(mid) == +1)
            lo = mid;
        else
            hi = mid;
        ++iters;
    }
    const double a = 0.5 * (lo + hi);
    auto shot = detail::profile_shot(a, c, beta, x_max, tol, grid);

    ProfileSolution sol;
    sol.xs = std::move(shot.xs);
    sol.hs = std::move(shot.hs);
    sol.hps = std::move(shot.hps);
    sol.hprime0 = a;
    sol.e_upsilon = -a;
    sol.bisection_iterations = iters;
    sol.bracket_width = hi - lo;

    // beyond the point where the shot leaves [0,1] the unstable manifold owns
    // the digits; the true solution is below 1e-9 there
    std::size_t cut = sol.hs.size();
    for (std::size_t i = 0; i < sol.hs.size(); ++i) {
        if (sol.hs[i] < 1e-9 || sol.hps[i] > 0.0) {
            cut = i;
            break;
        }
    }
    for (std::size_t i = cut; i < sol.hs.size(); ++i) {
        sol.hs[i] = 0.0;
        sol.hps[i] = 0.0;
    }
    // pad grid values the shot never reached (classification fired early)
    while (sol.xs.size() < grid.size()) {
        sol.xs.push_back(grid[sol.xs.size()]);
        sol.hs.push_back(0.0);
        sol.hps.push_back(0.0);
    }
    return sol;
}

} // namespace smolcoal

#endif
