#ifndef SMOLCOAL_COALESCENT_HPP
#define SMOLCOAL_COALESCENT_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <stdexcept>
#include <vector>

#include "smolcoal/empirical.hpp"
#include "smolcoal/rng.hpp"
#include "smolcoal/stats.hpp"

namespace smolcoal {

inline constexpr std::int64_t kInfCount = std::numeric_limits<std::int64_t>::max();

namespace detail {

// tail2(a) = sum_{j>a} 1/(j(j-1))^2 = 1/(3a^3) - 1/(15a^5) + O(a^-7)
inline double tail2(double a) {
    if (a >= 64.0) {
        const double a3 = a * a * a;
        return 1.0 / (3.0 * a3) - 1.0 / (15.0 * a3 * a * a);
    }
    double s = 0.0;
    double j = a + 1.0;
    for (; j <= 2048.0; j += 1.0) {
        const double d = j * (j - 1.0);
        s += 1.0 / (d * d);
    }
    return s + tail2(j - 1.0);
}

// Cancellation-free difference tail2(m) - tail2(k) for k > m >= 64
// (leading order; the a^-5 correction is a relative 1/m^2 and irrelevant
// at the counts where the fluid phase operates).
inline double tail2_diff(double m, double k) {
    if (k == std::numeric_limits<double>::infinity()) return tail2(m);
    const double num = (k - m) * (k * k + k * m + m * m);
    return num / (3.0 * m * m * m * k * k * k);
}

} // namespace detail

// Pure-death block-counting chain of a Kingman coalescent with per-pair rate
// `pair_rate`: from k blocks the next merge occurs at rate pair_rate*k*(k-1)/2.
//
// Counts at or below `handoff` are simulated jump by jump (exact). Above the
// handoff the chain is advanced through its hitting times: the time to fall
// from k to m is a sum of independent exponentials with exactly computable
// mean and variance, and is sampled as a comonotone Gaussian path in m. At
// handoff counts >= 1e5 the non-Gaussian correction is a relative O(1/count)
// effect, far below the statistical resolution of anything observed at those
// scales; everything observable below the handoff is exact. kInfCount is a
// legal starting count.
class KingmanChain {
  public:
    KingmanChain() = default;
    KingmanChain(std::int64_t count, double pair_rate, double t0, RngStream rng,
                 std::int64_t handoff = 100000)
        : count_(count), rate_(pair_rate), t_(t0), rng_(rng), handoff_(handoff) {
        if (count <= 0) throw std::domain_error("KingmanChain: count must be >= 1");
        if (!(pair_rate > 0.0)) throw std::domain_error("KingmanChain: rate must be > 0");
    }

    std::int64_t count() const { return count_; }
    double last_time() const { return t_; }
    std::int64_t jumps() const { return jumps_; }
    RngStream& rng() { return rng_; }

    void add(std::int64_t extra) {
        if (count_ == kInfCount || extra == kInfCount) {
            count_ = kInfCount;
            return;
        }
        std::int64_t s = 0;
        if (__builtin_add_overflow(count_, extra, &s))
            throw std::overflow_error("KingmanChain: gene count overflow");
        count_ = s;
    }

    void advance(double to) {
        if (to < t_) throw std::domain_error("KingmanChain: cannot advance backwards");
        while (t_ < to && count_ > 1) {
            if (count_ <= handoff_)
                advance_exact(to);
            else
                advance_fluid(to);
        }
        t_ = to;
    }

    // run the chain to absorption at a single block; returns absorption time
    double absorb() {
        while (count_ > 1) {
            if (count_ > handoff_)
                throw std::logic_error("KingmanChain::absorb: count above exact regime");
            const double k = static_cast<double>(count_);
            t_ += rng_.exponential(2.0 / (rate_ * k * (k - 1.0)));
            --count_;
            ++jumps_;
        }
        return t_;
    }

  private:
    void advance_exact(double to) {
        while (count_ > 1) {
            const double k = static_cast<double>(count_);
            const double dt = rng_.exponential(2.0 / (rate_ * k * (k - 1.0)));
            if (t_ + dt > to) {
                t_ = to;
                return;
            }
            t_ += dt;
            --count_;
            ++jumps_;
        }
        t_ = to;
    }

    double mu(double k, double m) const {
        if (k == std::numeric_limits<double>::infinity()) return 2.0 / (rate_ * m);
        return 2.0 * (k - m) / (rate_ * m * k);
    }

    double sigma(double k, double m) const {
        const double v = 4.0 / (rate_ * rate_) * detail::tail2_diff(m, k);
        return std::sqrt(std::max(v, 0.0));
    }

    void advance_fluid(double to) {
        const double delta = to - t_;
        const double k = (count_ == kInfCount) ? std::numeric_limits<double>::infinity()
                                               : static_cast<double>(count_);
        double z = rng_.normal();
        z = std::clamp(z, -8.0, 8.0);
        const double hand = static_cast<double>(handoff_);
        const auto hit = [&](double m) { return std::max(mu(k, m) + sigma(k, m) * z, 0.0); };

        const double t_hand = hit(hand);
        if (t_hand <= delta) {
            count_ = handoff_;
            t_ += t_hand;
            return; // caller loops into the exact regime
        }
        // crossing level m in (hand, k): hit(m) decreasing in m
        double lo = hand; // hit(lo) > delta
        double hi;
        if (k == std::numeric_limits<double>::infinity()) {
            hi = std::max(2.0 * hand, 4.0 / (rate_ * delta));
            while (hit(hi) > delta) hi *= 2.0;
        } else {
            hi = k;
        }
        for (int it = 0; it < 200 && hi - lo > 0.5; ++it) {
            const double mid = 0.5 * (lo + hi);
            if (hit(mid) > delta)
                lo = mid;
            else
                hi = mid;
        }
        double m = std::floor(hi);
        if (k != std::numeric_limits<double>::infinity()) m = std::min(m, k);
        count_ = std::max<std::int64_t>(static_cast<std::int64_t>(m), handoff_ + 1);
        t_ = to;
    }

    std::int64_t count_ = 1;
    double rate_ = 1.0;
    double t_ = 0.0;
    RngStream rng_;
    std::int64_t handoff_ = 100000;
    std::int64_t jumps_ = 0;
};

// Nested-coalescent state: per-species gene-lineage counts, each >= 1.
struct GeneticComposition {
    std::vector<std::int64_t> species;

    std::int64_t species_count() const { return static_cast<std::int64_t>(species.size()); }
    std::int64_t gene_count() const {
        std::int64_t s = 0;
        for (auto k : species) s += k;
        return s;
    }
};

inline EmpiricalMeasure empirical(const GeneticComposition& pi) {
    if (pi.species.empty()) throw std::invalid_argument("empirical: no species");
    std::vector<double> masses(pi.species.begin(), pi.species.end());
    return EmpiricalMeasure::uniform(masses);
}

struct InitGenes {
    enum class Mode { Constant, Iid, Infinite };
    Mode mode = Mode::Constant;
    std::int64_t constant = 1;
    std::function<std::int64_t(RngStream&)> sampler;

    static InitGenes constant_count(std::int64_t k) {
        if (k <= 0) throw std::domain_error("InitGenes: constant count must be >= 1");
        return {Mode::Constant, k, nullptr};
    }
    static InitGenes iid(std::function<std::int64_t(RngStream&)> f) {
        return {Mode::Iid, 1, std::move(f)};
    }
    static InitGenes infinite() { return {Mode::Infinite, 1, nullptr}; }
};

struct TrajectoryRecord {
    std::vector<double> times;
    std::vector<std::int64_t> species_counts;
    std::vector<double> gene_counts;
    std::vector<EmpiricalMeasure> measures;
    std::int64_t total_events = 0; // species merges + gene coalescences seen
};

struct NestedOptions {
    std::int64_t handoff = 100000;
    bool run_to_absorption = false;
};

// Exact simulation of the nested Kingman coalescent: species pairs coalesce
// at rate 1, gene pairs within a species at rate c. Decomposition used here:
// the species-merge skeleton is an autonomous Markov chain (its rates do not
// depend on gene counts), and conditionally on it the per-species gene counts
// are independent Kingman death chains that pool additively at merges. Each
// block owns its own RNG substream so the skeleton is invariant under
// permutations of the initial gene assignment.
inline TrajectoryRecord simulate_nested(std::int64_t s0, const InitGenes& init, double c,
                                        std::vector<double> snapshot_times, std::uint64_t seed,
                                        const NestedOptions& opts = {}) {
    if (s0 < 1) throw std::domain_error("simulate_nested: s0 must be >= 1");
    if (!(c > 0.0)) throw std::domain_error("simulate_nested: gene rate c must be > 0");
    std::sort(snapshot_times.begin(), snapshot_times.end());
    for (double t : snapshot_times)
        if (!(t >= 0.0)) throw std::domain_error("simulate_nested: snapshot times must be >= 0");

    RngStream skeleton(seed, 0);
    std::vector<KingmanChain> blocks;
    blocks.reserve(static_cast<std::size_t>(s0));
    for (std::int64_t i = 0; i < s0; ++i) {
        RngStream gene_rng(seed, 1000 + static_cast<std::uint64_t>(i));
        std::int64_t k = 1;
        switch (init.mode) {
            case InitGenes::Mode::Constant: k = init.constant; break;
            case InitGenes::Mode::Iid:
                k = init.sampler(gene_rng);
                if (k < 1) throw std::domain_error("simulate_nested: iid init produced count < 1");
                break;
            case InitGenes::Mode::Infinite: k = kInfCount; break;
        }
        blocks.emplace_back(k, c, 0.0, gene_rng, opts.handoff);
    }

    TrajectoryRecord rec;
    std::int64_t merges = 0;
    double t = 0.0;
    std::size_t snap = 0;

    auto take_snapshot = [&](double at) {
        std::vector<double> masses;
        masses.reserve(blocks.size());
        double total = 0.0;
        for (auto& b : blocks) {
            b.advance(at);
            masses.push_back(static_cast<double>(b.count()));
            total += static_cast<double>(b.count());
        }
        rec.times.push_back(at);
        rec.species_counts.push_back(static_cast<std::int64_t>(blocks.size()));
        rec.gene_counts.push_back(total);
        rec.measures.push_back(EmpiricalMeasure::uniform(masses));
    };

    while (true) {
        double t_merge = std::numeric_limits<double>::infinity();
        if (blocks.size() > 1) {
            const double s = static_cast<double>(blocks.size());
            t_merge = t + skeleton.exponential(2.0 / (s * (s - 1.0)));
        }
        while (snap < snapshot_times.size() && snapshot_times[snap] <= t_merge)
            take_snapshot(snapshot_times[snap++]);
        if (snap == snapshot_times.size() && !opts.run_to_absorption) break;
        if (blocks.size() <= 1) break;

        // uniform unordered species pair
        const std::size_t n = blocks.size();
        std::size_t i = static_cast<std::size_t>(skeleton.uniform_index(n));
        std::size_t j = static_cast<std::size_t>(skeleton.uniform_index(n - 1));
        if (j >= i) ++j;
        blocks[i].advance(t_merge);
        blocks[j].advance(t_merge);
        blocks[i].add(blocks[j].count());
        blocks[j] = std::move(blocks.back());
        blocks.pop_back();
        ++merges;
        t = t_merge;
    }

    std::int64_t gene_jumps = 0;
    if (opts.run_to_absorption) {
        for (auto& b : blocks) b.absorb();
    }
    for (auto& b : blocks) gene_jumps += b.jumps();
    rec.total_events = merges + gene_jumps;
    return rec;
}

// Block count of a plain Kingman coalescent (per-pair rate) at requested
// times; k0 may be kInfCount.
inline std::vector<std::int64_t> kingman_block_counts(std::int64_t k0, double pair_rate,
                                                      const std::vector<double>& times,
                                                      RngStream rng,
                                                      std::int64_t handoff = 100000) {
    KingmanChain chain(k0, pair_rate, 0.0, rng, handoff);
    std::vector<std::int64_t> out;
    out.reserve(times.size());
    for (double t : times) {
        chain.advance(t);
        out.push_back(chain.count());
    }
    return out;
}

// Monte Carlo estimate of n^{-2} * rho_{t/n} for the nested coalescent.
inline MeanStderr cdi_speed_estimate(std::int64_t n, double t, double c,
                                     const InitGenes& init, int replicates, std::uint64_t seed,
                                     const NestedOptions& opts = {}) {
    if (replicates < 2)
        throw std::invalid_argument("cdi_speed_estimate: stderr undefined for < 2 replicates");
    std::vector<double> vals(static_cast<std::size_t>(replicates));
    const double tau = t / static_cast<double>(n);
    for (int r = 0; r < replicates; ++r) {
        const std::uint64_t rep_seed = seed ^ (0x9e3779b97f4a7c15ULL * (r + 1));
        auto rec = simulate_nested(n, init, c, {tau}, rep_seed, opts);
        vals[static_cast<std::size_t>(r)] =
            rec.gene_counts.at(0) / (static_cast<double>(n) * static_cast<double>(n));
    }
    return mean_stderr(vals);
}

} // namespace smolcoal

#endif
