#ifndef SMOLCOAL_SMOLUCHOWSKI_HPP
#define SMOLCOAL_SMOLUCHOWSKI_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "smolcoal/csbp.hpp"
#include "smolcoal/mechanism.hpp"
#include "smolcoal/rng.hpp"
#include "smolcoal/stats.hpp"

namespace smolcoal {

// ---------------------------------------------------------------------------
// Grid solver for the Laplace-transform equation
//   du/dt = b * lambda * d^2u/dlambda^2 + (u^2 - u)/(t + delta)
// (Feller case psi(lambda) = b lambda^2). Explicit time stepping on a
// log-spaced lambda grid with a pinned u = 1 node at lambda = 0; the
// degenerate factor lambda tames the origin. Right boundary uses a
// zero-curvature (outflow) closure, monitored by comparing two lambda_max
// values.
// ---------------------------------------------------------------------------

struct LaplaceGrid {
    std::vector<double> lambda; // lambda[0] == 0
    std::vector<double> u;
    double t = 0.0;
    double delta = 0.0;
};

inline std::vector<double> make_lambda_grid(double lambda_min, double lambda_max, int n,
                                            std::vector<double> must_include = {}) {
    if (!(lambda_min > 0.0) || !(lambda_max > lambda_min) || n < 8)
        throw std::invalid_argument("make_lambda_grid: bad parameters");
    std::vector<double> g;
    g.push_back(0.0);
    const double l0 = std::log(lambda_min), l1 = std::log(lambda_max);
    for (int i = 0; i < n; ++i)
        g.push_back(std::exp(l0 + (l1 - l0) * static_cast<double>(i) / (n - 1)));
    for (double v : must_include) {
        if (v <= 0.0 || v > lambda_max) throw std::invalid_argument("grid probe out of range");
        g.push_back(v);
    }
    std::sort(g.begin(), g.end());
    g.erase(std::unique(g.begin(), g.end(),
                        [](double a, double b) { return std::fabs(a - b) < 1e-12 * (a + b); }),
            g.end());
    return g;
}

inline LaplaceGrid make_laplace_grid(std::vector<double> lambda, double delta,
                                     const std::function<double(double)>& initial_transform,
                                     double t0 = 0.0) {
    if (delta < 0.0) throw std::domain_error("make_laplace_grid: delta must be >= 0");
    if (delta == 0.0 && !(t0 > 0.0))
        throw std::domain_error(
            "make_laplace_grid: delta == 0 requires a restart time t0 > 0 with an admissible "
            "profile");
    LaplaceGrid g;
    g.lambda = std::move(lambda);
    g.delta = delta;
    g.t = t0;
    g.u.resize(g.lambda.size());
    for (std::size_t j = 0; j < g.lambda.size(); ++j) {
        const double v = initial_transform(g.lambda[j]);
        if (v < -1e-12 || v > 1.0 + 1e-12)
            throw std::domain_error("make_laplace_grid: initial transform outside [0,1]");
        g.u[j] = std::clamp(v, 0.0, 1.0);
    }
    if (std::fabs(g.u[0] - 1.0) > 1e-12)
        throw std::domain_error("make_laplace_grid: u(lambda=0) must be 1");
    return g;
}

struct PdeStability : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Advance the grid to time T, recording rows at the requested snapshot times.
// Returns one u-row per snapshot (in time order).
inline std::vector<std::vector<double>> solve_laplace_pde(LaplaceGrid& g,
                                                          const BranchingMechanism& m, double T,
                                                          std::vector<double> snapshots = {},
                                                          double safety = 0.5) {
    if (m.gamma() != 2.0)
        throw std::domain_error("solve_laplace_pde: grid scheme requires gamma == 2");
    const double b = m.rate();
    const std::size_t n = g.lambda.size();
    if (n < 4) throw std::invalid_argument("solve_laplace_pde: grid too small");
    std::sort(snapshots.begin(), snapshots.end());
    for (double s : snapshots)
        if (s < g.t - 1e-12 || s > T + 1e-12)
            throw std::invalid_argument("solve_laplace_pde: snapshot outside [t0, T]");

    double dt_max = std::numeric_limits<double>::infinity();
    for (std::size_t j = 1; j + 1 < n; ++j) {
        const double hl = g.lambda[j] - g.lambda[j - 1];
        const double hr = g.lambda[j + 1] - g.lambda[j];
        dt_max = std::min(dt_max, hl * hr / (2.0 * b * g.lambda[j]));
    }
    dt_max = std::min(dt_max * safety, 0.25 * (g.delta + g.t));

    std::vector<std::vector<double>> rows;
    std::vector<double> unew(n);
    std::size_t si = 0;
    while (si < snapshots.size() && snapshots[si] <= g.t + 1e-15) {
        rows.push_back(g.u);
        ++si;
    }
    while (g.t < T - 1e-15) {
        double target = T;
        if (si < snapshots.size()) target = std::min(target, snapshots[si]);
        const double dt = std::min(dt_max, target - g.t);
        const double a = 1.0 / (g.t + g.delta);
        unew[0] = 1.0;
        for (std::size_t j = 1; j < n; ++j) {
            double d2;
            if (j + 1 < n) {
                const double hl = g.lambda[j] - g.lambda[j - 1];
                const double hr = g.lambda[j + 1] - g.lambda[j];
                d2 = 2.0 * ((g.u[j + 1] - g.u[j]) / hr - (g.u[j] - g.u[j - 1]) / hl) / (hl + hr);
            } else {
                d2 = 0.0; // outflow closure at lambda_max
            }
            const double uj = g.u[j];
            unew[j] = uj + dt * (b * g.lambda[j] * d2 + a * (uj * uj - uj));
        }
        for (std::size_t j = 0; j < n; ++j) {
            if (unew[j] < -1e-10 || unew[j] > 1.0 + 1e-10)
                throw PdeStability("solve_laplace_pde: u left [0,1] at t=" +
                                   std::to_string(g.t) + ", lambda=" +
                                   std::to_string(g.lambda[j]) +
                                   "; reduce the time step (current dt=" + std::to_string(dt) +
                                   ")");
            unew[j] = std::clamp(unew[j], 0.0, 1.0);
        }
        g.u.swap(unew);
        g.t += dt;
        while (si < snapshots.size() && g.t >= snapshots[si] - 1e-12) {
            rows.push_back(g.u);
            ++si;
        }
    }
    return rows;
}

inline double grid_value_at(const LaplaceGrid& g, const std::vector<double>& row,
                            double lambda) {
    for (std::size_t j = 0; j < g.lambda.size(); ++j)
        if (std::fabs(g.lambda[j] - lambda) < 1e-9 * (1.0 + lambda)) return row[j];
    throw std::invalid_argument("grid_value_at: lambda " + std::to_string(lambda) +
                                " is not a grid node");
}

// ---------------------------------------------------------------------------
// Time-inhomogeneous Yule tree with birth rate 1/(T - t + delta), stopped at
// time T, and leaf-to-root mark propagation (flow along branches, addition at
// merges).
// ---------------------------------------------------------------------------

struct MarkedTree {
    struct Node {
        double time = 0.0;  // branch time of this node (leaves: time == T)
        int child[2] = {-1, -1};
    };
    std::vector<Node> nodes; // nodes[0] is the first branch point or the single leaf
    std::vector<int> leaves; // indices of leaves, in creation order
    double depth = 0.0;      // T
};

inline MarkedTree sample_inhomogeneous_yule(double T, double delta, RngStream& rng) {
    if (!(T > 0.0)) throw std::domain_error("sample_inhomogeneous_yule: T must be > 0");
    if (!(delta > 0.0))
        throw std::domain_error(
            "sample_inhomogeneous_yule: delta == 0 yields infinitely many leaves; use the "
            "self-similar route instead");
    MarkedTree tree;
    tree.depth = T;
    // branch time from age s: solve int_s^tau dt/(T-t+delta) = E
    auto next_branch = [&](double s) { return T + delta - (T - s + delta) * rng.exponential(); };

    struct Work {
        double born;
        int parent;
        int slot;
    };
    std::vector<Work> stack;
    stack.push_back({0.0, -1, 0});
    while (!stack.empty()) {
        const Work w = stack.back();
        stack.pop_back();
        const double tb = next_branch(w.born);
        int idx = static_cast<int>(tree.nodes.size());
        tree.nodes.push_back({});
        if (w.parent >= 0) tree.nodes[static_cast<std::size_t>(w.parent)].child[w.slot] = idx;
        if (tb < T) {
            tree.nodes[static_cast<std::size_t>(idx)].time = tb;
            stack.push_back({tb, idx, 0});
            stack.push_back({tb, idx, 1});
        } else {
            tree.nodes[static_cast<std::size_t>(idx)].time = T;
            tree.leaves.push_back(idx);
        }
    }
    return tree;
}

// F(tree, marks): propagate leaf marks to the root. Flow over each branch
// segment, add at internal nodes, and flow the first node's value up the root
// edge to time 0.
inline double propagate_marks(const MarkedTree& tree, const std::vector<double>& leaf_marks,
                              const FlowEvaluator& flow) {
    if (leaf_marks.size() != tree.leaves.size())
        throw std::invalid_argument("propagate_marks: leaf count mismatch");
    for (double m : leaf_marks)
        if (std::isnan(m) || m < 0.0) throw std::domain_error("propagate_marks: mark < 0");

    std::vector<double> value(tree.nodes.size(), -1.0);
    std::size_t leaf_idx = 0;
    for (int li : tree.leaves) value[static_cast<std::size_t>(li)] = leaf_marks[leaf_idx++];
    // nodes were created parent-before-child, so a reverse sweep is post-order
    for (std::size_t i = tree.nodes.size(); i-- > 0;) {
        const auto& nd = tree.nodes[i];
        if (nd.child[0] < 0) continue;
        const auto& c0 = tree.nodes[static_cast<std::size_t>(nd.child[0])];
        const auto& c1 = tree.nodes[static_cast<std::size_t>(nd.child[1])];
        const double v0 = flow.flow(value[static_cast<std::size_t>(nd.child[0])], c0.time - nd.time);
        const double v1 = flow.flow(value[static_cast<std::size_t>(nd.child[1])], c1.time - nd.time);
        value[i] = v0 + v1;
    }
    return flow.flow(value[0], tree.nodes[0].time);
}

// Closed-form star/degenerate brackets for F: flow of the pooled marks from
// depth T (lower) and sum of individually flowed marks (upper).
inline std::pair<double, double> tree_brackets(const MarkedTree& tree,
                                               const std::vector<double>& leaf_marks,
                                               const FlowEvaluator& flow) {
    double pooled = 0.0;
    double upper = 0.0;
    for (double m : leaf_marks) {
        pooled += m;
        upper += flow.flow(m, tree.depth);
    }
    return {flow.flow(pooled, tree.depth), upper};
}

struct WeakSolutionEstimate {
    std::vector<double> lambda_probes;
    std::vector<MeanStderr> u_estimates;
    std::vector<double> samples; // mu_T samples (root values F)
};

// Monte Carlo weak solution: mu_T is the law of F(tree, iid leaf marks).
inline WeakSolutionEstimate mc_weak_solution(double T, double delta,
                                             const std::function<double(RngStream&)>& nu_sampler,
                                             const BranchingMechanism& m,
                                             const std::vector<double>& lambda_probes,
                                             int replicates, std::uint64_t seed) {
    if (!(delta > 0.0)) throw std::domain_error("mc_weak_solution: delta must be > 0");
    if (replicates < 2) throw std::invalid_argument("mc_weak_solution: replicates >= 2");
    FlowEvaluator flow(m);
    WeakSolutionEstimate est;
    est.lambda_probes = lambda_probes;
    est.samples.resize(static_cast<std::size_t>(replicates));
    std::vector<std::vector<double>> probe_vals(lambda_probes.size());
    for (auto& v : probe_vals) v.resize(static_cast<std::size_t>(replicates));
    std::vector<double> marks;
    for (int r = 0; r < replicates; ++r) {
        RngStream rng(seed, static_cast<std::uint64_t>(r));
        const auto tree = sample_inhomogeneous_yule(T, delta, rng);
        marks.resize(tree.leaves.size());
        for (auto& w : marks) w = nu_sampler(rng);
        const double f = propagate_marks(tree, marks, flow);
        est.samples[static_cast<std::size_t>(r)] = f;
        for (std::size_t p = 0; p < lambda_probes.size(); ++p)
            probe_vals[p][static_cast<std::size_t>(r)] = std::exp(-lambda_probes[p] * f);
    }
    for (auto& v : probe_vals) est.u_estimates.push_back(mean_stderr(v));
    return est;
}

// Proper (delta = 0) solution via the self-similar identity: u(T, lambda) is
// the Upsilon-bank average of exp(-lambda T^{-beta} Upsilon).
inline WeakSolutionEstimate infinite_pop_weak_solution(double T, const BranchingMechanism& m,
                                                       const std::vector<double>& lambda_probes,
                                                       const std::vector<double>& upsilon_bank) {
    if (upsilon_bank.size() < 2)
        throw std::invalid_argument("infinite_pop_weak_solution: empty Upsilon bank");
    if (!(T > 0.0)) throw std::domain_error("infinite_pop_weak_solution: T must be > 0");
    const double scale = std::pow(T, -m.beta());
    WeakSolutionEstimate est;
    est.lambda_probes = lambda_probes;
    est.samples.reserve(upsilon_bank.size());
    for (double y : upsilon_bank) est.samples.push_back(scale * y);
    std::vector<double> vals(upsilon_bank.size());
    for (double lp : lambda_probes) {
        for (std::size_t i = 0; i < upsilon_bank.size(); ++i)
            vals[i] = std::exp(-lp * scale * upsilon_bank[i]);
        est.u_estimates.push_back(mean_stderr(vals));
    }
    return est;
}

// Branching particle system conditioned on a fixed tree genealogy: one
// particle of mass x at the root, masses duplicate at branch points and
// evolve as independent Feller CSBPs along edges. Returns MC mean/stderr of
// exp(-sum_i lambda_i Z_i) for comparison against exp(-x F(tree, lambda)).
inline MeanStderr branching_csbp_on_tree(const MarkedTree& tree, double x,
                                         const std::vector<double>& leaf_lambdas,
                                         const BranchingMechanism& m, int replicates,
                                         std::uint64_t seed) {
    if (m.gamma() != 2.0)
        throw std::domain_error("branching_csbp_on_tree: exact transitions require gamma == 2");
    if (leaf_lambdas.size() != tree.leaves.size())
        throw std::invalid_argument("branching_csbp_on_tree: lambda count mismatch");
    const ShiftedMechanism sm{m, 0.0};
    std::vector<double> vals(static_cast<std::size_t>(replicates));
    std::vector<double> mass(tree.nodes.size());
    for (int r = 0; r < replicates; ++r) {
        RngStream rng(seed, static_cast<std::uint64_t>(r));
        // nodes are parent-before-child: forward sweep evolves masses down
        for (std::size_t i = 0; i < tree.nodes.size(); ++i) {
            const auto& nd = tree.nodes[i];
            const double start = (i == 0) ? x : mass[i];
            const double dt = (i == 0) ? nd.time : 0.0;
            double z = start;
            if (dt > 0.0) z = feller_transition_sample(sm, start, dt, rng);
            if (nd.child[0] >= 0) {
                for (int s = 0; s < 2; ++s) {
                    const auto ci = static_cast<std::size_t>(nd.child[s]);
                    const double seg = tree.nodes[ci].time - nd.time;
                    mass[ci] = (seg > 0.0) ? feller_transition_sample(sm, z, seg, rng) : z;
                }
            } else {
                mass[i] = z;
            }
        }
        double dot = 0.0;
        std::size_t li = 0;
        for (int leaf : tree.leaves) dot += leaf_lambdas[li++] * mass[static_cast<std::size_t>(leaf)];
        vals[static_cast<std::size_t>(r)] = std::exp(-dot);
    }
    return mean_stderr(vals);
}

} // namespace smolcoal

#endif
