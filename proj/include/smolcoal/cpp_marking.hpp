#ifndef SMOLCOAL_CPP_MARKING_HPP
#define SMOLCOAL_CPP_MARKING_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "smolcoal/mechanism.hpp"
#include "smolcoal/rng.hpp"
#include "smolcoal/stats.hpp"

namespace smolcoal {

// ---------------------------------------------------------------------------
// Brownian coalescent point process: Poisson points (l, t) on (0, L] x
// [floor, inf) with intensity dl x dt/t^2. The eternal branch at l = 0 is
// implicit. A branch at l with height t dies at time t, merging into the
// nearest branch on its left still alive.
// ---------------------------------------------------------------------------

struct CppPoint {
    double l;
    double t;
};

struct CppSample {
    double window = 0.0;      // L
    double floor_level = 0.0; // smallest height sampled
    std::vector<CppPoint> points; // sorted by l
};

inline CppSample sample_cpp(double window, double floor_level, RngStream& rng) {
    if (!(window > 0.0) || !(floor_level > 0.0))
        throw std::domain_error("sample_cpp: window and floor must be > 0");
    CppSample s;
    s.window = window;
    s.floor_level = floor_level;
    const std::int64_t n = rng.poisson(window / floor_level);
    s.points.resize(static_cast<std::size_t>(n));
    for (auto& p : s.points) {
        p.l = window * rng.uniform();
        p.t = floor_level / rng.uniform();
    }
    std::sort(s.points.begin(), s.points.end(),
              [](const CppPoint& a, const CppPoint& b) { return a.l < b.l; });
    return s;
}

// Append fresh points on (window, new_window]; existing points are untouched,
// so markings on the old window stay coupled.
inline void extend_window(CppSample& s, double new_window, RngStream& rng) {
    if (!(new_window > s.window)) throw std::invalid_argument("extend_window: must grow");
    const std::int64_t n = rng.poisson((new_window - s.window) / s.floor_level);
    std::vector<CppPoint> extra(static_cast<std::size_t>(n));
    for (auto& p : extra) {
        p.l = s.window + (new_window - s.window) * rng.uniform();
        p.t = s.floor_level / rng.uniform();
    }
    std::sort(extra.begin(), extra.end(),
              [](const CppPoint& a, const CppPoint& b) { return a.l < b.l; });
    const std::size_t old = s.points.size();
    s.points.insert(s.points.end(), extra.begin(), extra.end());
    std::inplace_merge(s.points.begin(), s.points.begin() + static_cast<std::ptrdiff_t>(old),
                       s.points.end(),
                       [](const CppPoint& a, const CppPoint& b) { return a.l < b.l; });
    s.window = new_window;
}

// Add the independent) slab of points with heights in [new_floor, floor):
// thinning the intensity keeps previously sampled points valid, which is what
// makes markings at successive levels pathwise comparable.
inline void extend_floor(CppSample& s, double new_floor, RngStream& rng) {
    if (!(new_floor > 0.0) || !(new_floor < s.floor_level))
        throw std::invalid_argument("extend_floor: must lower the floor");
    const double rate = s.window * (1.0 / new_floor - 1.0 / s.floor_level);
    const std::int64_t n = rng.poisson(rate);
    std::vector<CppPoint> extra(static_cast<std::size_t>(n));
    for (auto& p : extra) {
        p.l = s.window * rng.uniform();
        const double u = rng.uniform();
        p.t = 1.0 / (1.0 / s.floor_level + u * (1.0 / new_floor - 1.0 / s.floor_level));
    }
    std::sort(extra.begin(), extra.end(),
              [](const CppPoint& a, const CppPoint& b) { return a.l < b.l; });
    const std::size_t old = s.points.size();
    s.points.insert(s.points.end(), extra.begin(), extra.end());
    std::inplace_merge(s.points.begin(), s.points.begin() + static_cast<std::ptrdiff_t>(old),
                       s.points.end(),
                       [](const CppPoint& a, const CppPoint& b) { return a.l < b.l; });
    s.floor_level = new_floor;
}

// Scaling map (l, t) -> (tau l, tau t).
inline CppSample rescale_cpp(const CppSample& s, double tau) {
    if (!(tau > 0.0)) throw std::domain_error("rescale_cpp: tau must be > 0");
    CppSample out = s;
    out.window *= tau;
    out.floor_level *= tau;
    for (auto& p : out.points) {
        p.l *= tau;
        p.t *= tau;
    }
    return out;
}

struct WindowExhausted : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct MarkInit {
    enum class Kind { Infinite, Constant, Sampled };
    Kind kind = Kind::Infinite;
    double constant = 0.0;
    std::function<double(RngStream&)> sampler;

    static MarkInit infinite() { return {Kind::Infinite, 0.0, nullptr}; }
    static MarkInit constant_value(double v) {
        if (!(v >= 0.0)) throw std::domain_error("MarkInit: negative mark");
        return {Kind::Constant, v, nullptr};
    }
    static MarkInit sampled(std::function<double(RngStream&)> f) {
        return {Kind::Sampled, 0.0, std::move(f)};
    }
};

struct MarkingResult {
    std::vector<double> times;      // requested grid (absolute, >= level)
    std::vector<double> m0;         // eternal-branch mark at the grid times
    std::vector<double> jump_times; // coalescences onto the eternal branch
};

// Partial marking of the CPP above `level`: init marks left to right at the
// level, deterministic flow along branches, addition at merges; returns the
// eternal-branch trajectory. Only points left of the first "barrier" branch
// with height > max(grid) can influence the eternal branch within the
// horizon, so anything to its right is skipped; if no barrier exists inside
// the window the caller must enlarge it.
inline MarkingResult mark_sweep(const CppSample& sample, double level, const MarkInit& init,
                                const FlowEvaluator& flow, const std::vector<double>& grid,
                                RngStream* init_rng = nullptr) {
    if (!(level >= sample.floor_level))
        throw std::domain_error("mark_sweep: level below the sampled floor");
    if (grid.empty()) throw std::invalid_argument("mark_sweep: empty time grid");
    for (std::size_t i = 0; i < grid.size(); ++i) {
        if (grid[i] < level) throw std::domain_error("mark_sweep: grid time below level");
        if (i > 0 && grid[i] < grid[i - 1])
            throw std::invalid_argument("mark_sweep: grid must be sorted");
    }
    const double t_max = grid.back();

    // barrier: first branch (in l) outliving the horizon
    std::size_t barrier = sample.points.size();
    for (std::size_t i = 0; i < sample.points.size(); ++i) {
        if (sample.points[i].t > t_max) {
            barrier = i;
            break;
        }
    }
    if (barrier == sample.points.size())
        throw WindowExhausted("mark_sweep: no branch outlives t=" + std::to_string(t_max) +
                              " inside window L=" + std::to_string(sample.window) +
                              "; resample with a larger window");

    struct Entry {
        double t;      // death time (+inf for eternal/barrier within horizon)
        double mark;
        double mark_t; // time the mark was last evaluated
        std::int32_t prev;
        std::int32_t next;
    };
    std::vector<Entry> entries;
    entries.reserve(barrier + 2);
    const double inf = std::numeric_limits<double>::infinity();
    entries.push_back({inf, 0.0, level, -1, -1}); // eternal branch sentinel
    for (std::size_t i = 0; i <= barrier; ++i) {
        const auto& p = sample.points[i];
        if (p.t >= level) entries.push_back({p.t, 0.0, level, -1, -1});
    }
    for (std::size_t i = 0; i < entries.size(); ++i) {
        entries[i].prev = static_cast<std::int32_t>(i) - 1;
        entries[i].next = (i + 1 < entries.size()) ? static_cast<std::int32_t>(i + 1) : -1;
        switch (init.kind) {
            case MarkInit::Kind::Infinite: entries[i].mark = kInf; break;
            case MarkInit::Kind::Constant: entries[i].mark = init.constant; break;
            case MarkInit::Kind::Sampled:
                if (init_rng == nullptr)
                    throw std::invalid_argument("mark_sweep: sampled init needs an RNG");
                entries[i].mark = init.sampler(*init_rng);
                if (entries[i].mark < 0.0)
                    throw std::domain_error("mark_sweep: sampled mark < 0");
                break;
        }
    }
    // the barrier entry never dies within the horizon
    entries.back().t = inf;

    std::vector<std::int32_t> order;
    order.reserve(entries.size());
    for (std::size_t i = 1; i + 1 < entries.size(); ++i)
        order.push_back(static_cast<std::int32_t>(i));
    std::sort(order.begin(), order.end(),
              [&](std::int32_t a, std::int32_t b) { return entries[a].t < entries[b].t; });

    MarkingResult res;
    res.times = grid;
    res.m0.reserve(grid.size());
    std::size_t gi = 0;
    // cadlag convention: a grid time equal to a jump time reads the
    // post-jump mark
    auto record_until = [&](double t, bool strict) {
        while (gi < grid.size() && (strict ? grid[gi] < t : grid[gi] <= t)) {
            res.m0.push_back(flow.flow(entries[0].mark, grid[gi] - entries[0].mark_t));
            ++gi;
        }
    };
    for (std::int32_t ei : order) {
        Entry& e = entries[static_cast<std::size_t>(ei)];
        if (e.t > t_max) break;
        record_until(e.t, true);
        const double incoming = flow.flow(e.mark, e.t - e.mark_t);
        Entry& left = entries[static_cast<std::size_t>(e.prev)];
        left.mark = flow.flow(left.mark, e.t - left.mark_t) + incoming;
        left.mark_t = e.t;
        left.next = e.next;
        if (e.next >= 0) entries[static_cast<std::size_t>(e.next)].prev = e.prev;
        if (e.prev == 0) res.jump_times.push_back(e.t);
    }
    record_until(t_max, false);
    return res;
}

// mark_sweep with the geometric (x2) window growth policy. Each attempt uses
// a copy of the init stream so the realized marks do not depend on how many
// growth rounds were needed.
inline MarkingResult eternal_branch_mark(CppSample& sample, double level, const MarkInit& init,
                                         const FlowEvaluator& flow,
                                         const std::vector<double>& grid, RngStream& rng,
                                         RngStream* init_rng = nullptr) {
    for (int attempt = 0; attempt < 48; ++attempt) {
        try {
            RngStream init_copy;
            RngStream* ip = nullptr;
            if (init_rng != nullptr) {
                init_copy = *init_rng;
                ip = &init_copy;
            }
            MarkingResult res = mark_sweep(sample, level, init, flow, grid, ip);
            if (init_rng != nullptr) *init_rng = init_copy;
            return res;
        } catch (const WindowExhausted&) {
            extend_window(sample, 2.0 * sample.window, rng);
        }
    }
    throw WindowExhausted("eternal_branch_mark: window growth did not find a barrier");
}

// ---------------------------------------------------------------------------
// Upsilon bank: the maximal marking at successive levels delta_k -> 0 on a
// shared realization; replicate converges when consecutive levels agree to
// tol_rel at the evaluation time.
// ---------------------------------------------------------------------------

struct UpsilonBankOptions {
    double delta0 = 0.1;
    double ratio = 0.5;
    double tol_rel = 1e-3;
    int max_levels = 18;
    double window0 = 0.0; // 0: pick from t_eval
    double max_flag_fraction = 0.01;
};

struct UpsilonBank {
    std::vector<double> samples;
    int flagged = 0;
    double mean_levels = 0.0;
};

inline UpsilonBank maximal_marking_upsilon(const BranchingMechanism& m, double t_eval,
                                           int replicates, std::uint64_t seed,
                                           const UpsilonBankOptions& opts = {}) {
    if (!(t_eval > 0.0)) throw std::domain_error("maximal_marking_upsilon: t_eval must be > 0");
    if (replicates < 2) throw std::invalid_argument("maximal_marking_upsilon: replicates >= 2");
    FlowEvaluator flow(m);
    UpsilonBank bank;
    bank.samples.reserve(static_cast<std::size_t>(replicates));
    const double L0 = opts.window0 > 0.0 ? opts.window0 : std::max(2.0 * t_eval, 2.0);
    double levels_sum = 0.0;
    for (int r = 0; r < replicates; ++r) {
        RngStream rng(seed, static_cast<std::uint64_t>(r));
        const double delta_start = std::min(opts.delta0, 0.5 * t_eval);
        CppSample sample = sample_cpp(L0, delta_start, rng);
        double level = delta_start;
        double prev =
            eternal_branch_mark(sample, level, MarkInit::infinite(), flow, {t_eval}, rng).m0[0];
        bool converged = false;
        int k = 1;
        for (; k <= opts.max_levels; ++k) {
            level *= opts.ratio;
            extend_floor(sample, level, rng);
            const double v =
                eternal_branch_mark(sample, level, MarkInit::infinite(), flow, {t_eval}, rng)
                    .m0[0];
            if (std::fabs(v - prev) <= opts.tol_rel * std::fabs(v)) {
                converged = true;
                prev = v;
                break;
            }
            prev = v;
        }
        if (converged) {
            bank.samples.push_back(prev);
            levels_sum += k;
        } else {
            ++bank.flagged;
        }
    }
    if (!bank.samples.empty())
        bank.mean_levels = levels_sum / static_cast<double>(bank.samples.size());
    if (static_cast<double>(bank.flagged) >
        opts.max_flag_fraction * static_cast<double>(replicates))
        throw std::runtime_error("maximal_marking_upsilon: flagged-replicate rate above " +
                                 std::to_string(opts.max_flag_fraction));
    return bank;
}

// ---------------------------------------------------------------------------
// Picard iteration for the McKean-Vlasov equation
//   dx = -psi(x) dt + v dJ,  J inhomogeneous Poisson with rate 1/(t+delta),
// v drawn from the previous iterate's time marginal. Jump times by time
// change: from t the next jump is (t+delta) e^E - delta.
// ---------------------------------------------------------------------------

struct PicardResult {
    std::vector<double> grid_times;
    std::vector<std::vector<double>> ensemble; // [trajectory][grid index]
    std::vector<double> iterate_w1;            // successive final-marginal W1 distances
};

inline PicardResult picard_mkv(const std::function<double(RngStream&)>& nu_sampler, double delta,
                               const BranchingMechanism& m, double T, int ensemble_size,
                               int iterations, std::uint64_t seed, int grid_points = 256) {
    if (ensemble_size < 100)
        throw std::invalid_argument("picard_mkv: ensemble below 100 is too noisy to define the "
                                    "jump marginal; refusing");
    if (iterations < 1) throw std::invalid_argument("picard_mkv: iterations >= 1");
    if (!(delta > 0.0)) throw std::domain_error("picard_mkv: delta must be > 0");
    FlowEvaluator flow(m);

    PicardResult res;
    res.grid_times.resize(static_cast<std::size_t>(grid_points));
    for (int j = 0; j < grid_points; ++j)
        res.grid_times[static_cast<std::size_t>(j)] =
            T * static_cast<double>(j) / (grid_points - 1);

    const std::size_t ne = static_cast<std::size_t>(ensemble_size);
    const std::size_t ng = static_cast<std::size_t>(grid_points);
    std::vector<std::vector<double>> prev(ne, std::vector<double>(ng, 0.0));
    std::vector<std::vector<double>> cur(ne, std::vector<double>(ng, 0.0));

    auto nearest = [&](double t) {
        const double idx = t / T * static_cast<double>(grid_points - 1);
        const auto j = static_cast<std::size_t>(std::llround(idx));
        return std::min(j, ng - 1);
    };

    for (int it = 1; it <= iterations; ++it) {
        for (std::size_t i = 0; i < ne; ++i) {
            RngStream rng(seed, 0x100000ULL * static_cast<std::uint64_t>(it) + i);
            double x = nu_sampler(rng);
            if (x < 0.0) throw std::domain_error("picard_mkv: negative initial mass");
            double t = 0.0;
            std::size_t gi = 0;
            double t_jump = (t + delta) * std::exp(rng.exponential()) - delta;
            while (gi < ng) {
                if (t_jump <= res.grid_times[gi] && t_jump <= T) {
                    x = flow.flow(x, t_jump - t);
                    t = t_jump;
                    const std::size_t donor = static_cast<std::size_t>(rng.uniform_index(ne));
                    x += prev[donor][nearest(t_jump)];
                    t_jump = (t + delta) * std::exp(rng.exponential()) - delta;
                } else {
                    cur[i][gi] = flow.flow(x, res.grid_times[gi] - t);
                    ++gi;
                }
            }
        }
        std::vector<double> fin_prev(ne), fin_cur(ne);
        for (std::size_t i = 0; i < ne; ++i) {
            fin_prev[i] = prev[i][ng - 1];
            fin_cur[i] = cur[i][ng - 1];
        }
        res.iterate_w1.push_back(wasserstein1(fin_prev, fin_cur));
        prev.swap(cur);
    }
    res.ensemble = std::move(prev);
    return res;
}

// ---------------------------------------------------------------------------
// Dust solutions: partial markings with initial law delta_k * L(X); reports
// the empirical trajectory against both readings of the exponential envelope
// and the simulated lower bracket.
// ---------------------------------------------------------------------------

struct DustOptions {
    double delta0 = 0.1;
    double ratio = 0.5;
    double tol_rel = 1e-3;
    int max_levels = 16;
    double window0 = 0.0;
};

struct DustReport {
    std::vector<double> times;
    std::vector<double> mean;
    std::vector<double> stderr_;
    std::vector<double> frac_above_tenth; // P(m0(t) > 0.1)
    std::vector<std::int64_t> zero_count;
    std::vector<double> envelope_mean_t; // E(X) * t       (E(t) with mean t)
    std::vector<double> envelope_rate_t; // E(X) / t       (E(t) with rate t)
    std::vector<double> lower_bracket;   // simulated flow(E(X) Exp(mean t), t)
    std::vector<std::vector<double>> samples; // [time index][replicate]
    int flagged = 0;
};

inline DustReport dust_solution(const std::function<double(RngStream&)>& x_sampler,
                                double x_mean, const BranchingMechanism& m,
                                const std::vector<double>& grid, int replicates,
                                std::uint64_t seed, const DustOptions& opts = {}) {
    if (!(x_mean > 0.0)) throw std::domain_error("dust_solution: E(X) must be positive");
    if (grid.empty()) throw std::invalid_argument("dust_solution: empty grid");
    FlowEvaluator flow(m);
    const double t_max = grid.back();
    const double L0 = opts.window0 > 0.0 ? opts.window0 : std::max(2.0 * t_max, 2.0);

    DustReport rep;
    rep.times = grid;
    rep.samples.assign(grid.size(), {});
    for (auto& v : rep.samples) v.reserve(static_cast<std::size_t>(replicates));

    for (int r = 0; r < replicates; ++r) {
        RngStream rng(seed, static_cast<std::uint64_t>(r));
        const double delta_start = std::min(opts.delta0, 0.5 * grid.front());
        CppSample sample = sample_cpp(L0, delta_start, rng);
        double level = delta_start;
        std::uint64_t init_ctr = 0;
        auto run_level = [&](double lev) {
            RngStream init_rng(seed ^ 0xd6e8feb86659fd93ULL,
                               (static_cast<std::uint64_t>(r) << 20) + init_ctr++);
            auto init = MarkInit::sampled(
                [&](RngStream& g) { return lev * x_sampler(g); });
            return eternal_branch_mark(sample, lev, init, flow, grid, rng, &init_rng).m0;
        };
        std::vector<double> prev = run_level(level);
        bool converged = false;
        for (int k = 1; k <= opts.max_levels; ++k) {
            level *= opts.ratio;
            extend_floor(sample, level, rng);
            std::vector<double> curv = run_level(level);
            double worst = 0.0;
            for (std::size_t i = 0; i < curv.size(); ++i)
                worst = std::max(worst,
                                 std::fabs(curv[i] - prev[i]) / std::max(std::fabs(curv[i]), 1e-300));
            prev = std::move(curv);
            if (worst <= opts.tol_rel) {
                converged = true;
                break;
            }
        }
        if (!converged) {
            ++rep.flagged;
            continue;
        }
        for (std::size_t i = 0; i < grid.size(); ++i) rep.samples[i].push_back(prev[i]);
    }

    RngStream env_rng(seed ^ 0xa3c59ac2ULL, 0);
    const int env_draws = 20000;
    for (std::size_t i = 0; i < grid.size(); ++i) {
        const double t = grid[i];
        auto ms = mean_stderr(rep.samples[i]);
        rep.mean.push_back(ms.mean);
        rep.stderr_.push_back(ms.stderr_);
        std::int64_t zeros = 0, above = 0;
        for (double v : rep.samples[i]) {
            if (v == 0.0) ++zeros;
            if (v > 0.1) ++above;
        }
        rep.zero_count.push_back(zeros);
        rep.frac_above_tenth.push_back(static_cast<double>(above) /
                                       static_cast<double>(rep.samples[i].size()));
        rep.envelope_mean_t.push_back(x_mean * t);
        rep.envelope_rate_t.push_back(x_mean / t);
        double acc = 0.0;
        for (int d = 0; d < env_draws; ++d)
            acc += flow.flow(x_mean * env_rng.exponential(t), t);
        rep.lower_bracket.push_back(acc / env_draws);
    }
    return rep;
}

} // namespace smolcoal

#endif
