#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "smolcoal/coalescent.hpp"
#include "smolcoal/empirical.hpp"
#include "smolcoal/stats.hpp"

using namespace smolcoal;

namespace {

// Reference engine for cross-validation: textbook Gillespie over the full
// nested state (one exponential clock against the total rate, linear scan for
// the gene pick). Only usable at small sizes; exercised distributionally
// against the production engine.
std::vector<std::int64_t> gillespie_reference(std::vector<std::int64_t> state, double c,
                                              double horizon, RngStream& rng) {
    double t = 0.0;
    for (;;) {
        const double s = static_cast<double>(state.size());
        double gene_rate = 0.0;
        for (auto k : state) gene_rate += c * static_cast<double>(k) * (k - 1.0) / 2.0;
        const double species_rate = s * (s - 1.0) / 2.0;
        const double total = gene_rate + species_rate;
        if (total <= 0.0) break;
        t += rng.exponential(1.0 / total);
        if (t > horizon) break;
        if (rng.uniform_co() * total < species_rate) {
            const std::size_t i = static_cast<std::size_t>(rng.uniform_index(state.size()));
            std::size_t j = static_cast<std::size_t>(rng.uniform_index(state.size() - 1));
            if (j >= i) ++j;
            state[i] += state[j];
            state[j] = state.back();
            state.pop_back();
        } else {
            double u = rng.uniform_co() * gene_rate;
            for (std::size_t i = 0; i < state.size(); ++i) {
                const double w = c * static_cast<double>(state[i]) * (state[i] - 1.0) / 2.0;
                if (u < w) {
                    state[i] -= 1;
                    break;
                }
                u -= w;
            }
        }
    }
    return state;
}

} // namespace

TEST_CASE("initial rate bookkeeping") {
    // s0=2 species with genes (2,2), c=1: species rate 1, gene rate 2
    const double species_rate = 2.0 * 1.0 / 2.0;
    const double gene_rate = 2.0 * (1.0 * 2.0 * 1.0 / 2.0);
    CHECK(species_rate + gene_rate == 3.0);
}

TEST_CASE("empirical measure and rescaling") {
    GeneticComposition pi;
    pi.species = {3};
    auto m = empirical(pi);
    REQUIRE(m.size() == 1);
    CHECK(m.atoms()[0].mass == 3.0);
    CHECK(m.atoms()[0].weight == 1.0);

    pi.species = {1, 1, 2};
    auto m2 = empirical(pi);
    CHECK(m2.moment(1) == Catch::Approx(4.0 / 3.0));

    pi.species = {2, 4};
    CHECK(empirical(pi).moment(1) == Catch::Approx(3.0));

    auto r = EmpiricalMeasure::uniform({10.0}).rescaled(10.0);
    CHECK(r.atoms()[0].mass == 1.0);
    CHECK(r.atoms()[0].weight == 1.0);

    auto base = EmpiricalMeasure::uniform({2.0, 6.0, 9.0});
    auto ab = base.rescaled(2.0).rescaled(3.0);
    auto once = base.rescaled(6.0);
    for (std::size_t i = 0; i < 3; ++i)
        CHECK(ab.atoms()[i].mass == Catch::Approx(once.atoms()[i].mass).epsilon(1e-15));
    CHECK(base.rescaled(4.0).moment(1) == Catch::Approx(base.moment(1) / 4.0).epsilon(1e-14));
    CHECK(base.total_weight() == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("absorption event count is exact") {
    // s0 species, G total genes: exactly (s0-1) + (G-1) events to one
    // species holding one gene
    NestedOptions opts;
    opts.run_to_absorption = true;
    for (std::uint64_t seed : {11ULL, 12ULL, 13ULL}) {
        auto rec = simulate_nested(5, InitGenes::constant_count(3), 1.0, {}, seed, opts);
        CHECK(rec.total_events == (5 - 1) + (15 - 1));
    }
}

TEST_CASE("trajectories are monotone and counts stay positive") {
    std::vector<double> snaps = {0.01, 0.05, 0.1, 0.5, 1.0, 2.0};
    auto rec = simulate_nested(50, InitGenes::constant_count(4), 2.0, snaps, 77);
    REQUIRE(rec.times.size() == snaps.size());
    for (std::size_t i = 1; i < rec.times.size(); ++i) {
        CHECK(rec.species_counts[i] <= rec.species_counts[i - 1]);
        CHECK(rec.gene_counts[i] <= rec.gene_counts[i - 1]);
    }
    for (std::size_t i = 0; i < rec.times.size(); ++i) {
        CHECK(rec.species_counts[i] >= 1);
        for (const auto& atom : rec.measures[i].atoms()) CHECK(atom.mass >= 1.0);
    }
}

TEST_CASE("species skeleton is invariant under initial gene permutation") {
    std::vector<double> snaps = {0.05, 0.2};
    std::vector<std::int64_t> counts = {1, 5, 2, 9, 3, 7, 4, 8, 6, 10};
    std::size_t cursor = 0;
    auto from_list = [&](RngStream&) { return counts[(cursor++) % counts.size()]; };
    auto rec1 = simulate_nested(10, InitGenes::iid(from_list), 1.0, snaps, 4242);
    std::reverse(counts.begin(), counts.end());
    cursor = 0;
    auto rec2 = simulate_nested(10, InitGenes::iid(from_list), 1.0, snaps, 4242);
    REQUIRE(rec1.species_counts.size() == rec2.species_counts.size());
    for (std::size_t i = 0; i < rec1.species_counts.size(); ++i)
        CHECK(rec1.species_counts[i] == rec2.species_counts[i]);

    // distributional check on the gene side across seeds
    std::vector<double> a, b;
    for (std::uint64_t s = 0; s < 120; ++s) {
        std::vector<std::int64_t> c1 = {1, 5, 2, 9, 3, 7, 4, 8, 6, 10};
        std::vector<std::int64_t> c2 = c1;
        std::reverse(c2.begin(), c2.end());
        std::size_t ia = 0, ib = 0;
        auto inita = InitGenes::iid([&](RngStream&) { return c1[(ia++) % c1.size()]; });
        auto initb = InitGenes::iid([&](RngStream&) { return c2[(ib++) % c2.size()]; });
        auto ra = simulate_nested(10, inita, 1.0, {0.2}, 900 + s);
        auto rb = simulate_nested(10, initb, 1.0, {0.2}, 5000 + s);
        a.push_back(ra.gene_counts[0]);
        b.push_back(rb.gene_counts[0]);
    }
    CHECK(ks_two_sample(a, b).p_value > 0.01);
}

TEST_CASE("species marginal: first-merge waiting time has mean 2/(k(k-1))") {
    for (std::int64_t k : {4, 9}) {
        std::vector<double> waits;
        for (int rep = 0; rep < 4000; ++rep) {
            RngStream rng(31337 + static_cast<std::uint64_t>(rep), 5);
            KingmanChain chain(k, 1.0, 0.0, rng);
            waits.push_back(chain.absorb());
        }
        // absorption time mean: sum_{j=2..k} 2/(j(j-1)) = 2(1 - 1/k)
        auto msw = mean_stderr(waits);
        const double t_target = 2.0 * (1.0 - 1.0 / static_cast<double>(k));
        CHECK(std::fabs(msw.mean - t_target) <= 4.0 * msw.stderr_);

        // first k -> k-1 holding time
        std::vector<double> first;
        for (int rep = 0; rep < 4000; ++rep) {
            RngStream rng(77001 + static_cast<std::uint64_t>(rep), 6);
            KingmanChain chain(k, 1.0, 0.0, rng);
            double lo = 0.0, hi = 4.0;
            // bisect the first jump time through advance() queries
            KingmanChain probe = chain;
            probe.advance(hi);
            while (probe.count() == k) {
                hi *= 2.0;
                probe.advance(hi);
            }
            for (int it = 0; it < 40; ++it) {
                KingmanChain mid_chain = chain;
                const double mid = 0.5 * (lo + hi);
                mid_chain.advance(mid);
                if (mid_chain.count() < k)
                    hi = mid;
                else
                    lo = mid;
            }
            first.push_back(0.5 * (lo + hi));
        }
        auto ms = mean_stderr(first);
        const double target = 2.0 / (static_cast<double>(k) * (k - 1.0));
        CHECK(std::fabs(ms.mean - target) <= 3.5 * ms.stderr_);
    }
}

TEST_CASE("single species reduces to a rate-c Kingman block count") {
    // t*K_t -> 2/c for the chain started from infinity
    const double c = 1.0;
    std::vector<double> at1e3;
    for (int rep = 0; rep < 24; ++rep) {
        RngStream rng(555 + static_cast<std::uint64_t>(rep), 1);
        auto counts = kingman_block_counts(kInfCount, c, {1e-3}, rng);
        at1e3.push_back(1e-3 * static_cast<double>(counts[0]));
    }
    auto ms = mean_stderr(at1e3);
    CHECK(ms.mean == Catch::Approx(2.0 / c).epsilon(0.05));
}

TEST_CASE("fluid advance agrees with the exact jump chain in law") {
    // Chain from k=50000 over a horizon that drops it to ~1000: force the
    // Gaussian phase with a low handoff and compare against pure-exact.
    const double rate = 1.0;
    const double horizon = 2e-3;
    std::vector<double> fluid, exact;
    for (int rep = 0; rep < 1500; ++rep) {
        RngStream r1(2024 + static_cast<std::uint64_t>(rep), 7);
        KingmanChain c1(50000, rate, 0.0, r1, /*handoff=*/2000);
        c1.advance(horizon);
        fluid.push_back(static_cast<double>(c1.count()));
        RngStream r2(909090 + static_cast<std::uint64_t>(rep), 8);
        KingmanChain c2(50000, rate, 0.0, r2, /*handoff=*/1 << 30);
        c2.advance(horizon);
        exact.push_back(static_cast<double>(c2.count()));
    }
    CHECK(ks_two_sample(fluid, exact).p_value > 0.005);
}

TEST_CASE("engine matches the reference Gillespie in law") {
    std::vector<double> prod, ref;
    for (int rep = 0; rep < 400; ++rep) {
        auto rec = simulate_nested(8, InitGenes::constant_count(4), 1.5, {0.15},
                                   111111 + static_cast<std::uint64_t>(rep));
        prod.push_back(rec.gene_counts[0]);
        RngStream rng(777777 + static_cast<std::uint64_t>(rep), 3);
        auto state = gillespie_reference(std::vector<std::int64_t>(8, 4), 1.5, 0.15, rng);
        ref.push_back(static_cast<double>(
            std::accumulate(state.begin(), state.end(), std::int64_t{0})));
    }
    CHECK(ks_two_sample(prod, ref).p_value > 0.005);
}

TEST_CASE("gene count overflow is an explicit failure") {
    const std::int64_t half = std::numeric_limits<std::int64_t>::max() / 2 + 10;
    RngStream rng(5, 5);
    KingmanChain a(half, 1.0, 0.0, rng);
    CHECK_THROWS_AS(a.add(half), std::overflow_error);
}

TEST_CASE("cdi speed estimator basics") {
    CHECK_THROWS_AS(
        cdi_speed_estimate(100, 1.0, 1.0, InitGenes::constant_count(1), 1, 9),
        std::invalid_argument);

    // limit independence of n: estimates at n and 2n agree within noise
    auto e1 = cdi_speed_estimate(600, 1.0, 1.0, InitGenes::constant_count(1), 40, 1001);
    auto e2 = cdi_speed_estimate(1200, 1.0, 1.0, InitGenes::constant_count(1), 40, 1002);
    const double sigma = std::hypot(e1.stderr_, e2.stderr_);
    CHECK(std::fabs(e1.mean - e2.mean) <= 3.5 * sigma + 0.05 * e1.mean);

    // t-dependence: ratio between t=1 and t=2 near 4
    auto a = cdi_speed_estimate(1200, 1.0, 1.0, InitGenes::infinite(), 40, 1003);
    auto b = cdi_speed_estimate(1200, 2.0, 1.0, InitGenes::infinite(), 40, 1004);
    const double ratio = a.mean / b.mean;
    const double rel = std::sqrt(std::pow(a.stderr_ / a.mean, 2) +
                                 std::pow(b.stderr_ / b.mean, 2));
    CHECK(std::fabs(ratio - 4.0) <= 4.0 * (ratio * rel) + 0.4);
}

TEST_CASE("minimal and infinite initializations bracket report") {
    // exploratory gap between genes=1 and the infinite proxy; the
    // entrance-law uniqueness behind their agreement is conjectural, so
    // this reports rather than asserts closeness
    auto lo = cdi_speed_estimate(2000, 1.0, 1.0, InitGenes::constant_count(1), 30, 42);
    auto hi = cdi_speed_estimate(2000, 1.0, 1.0, InitGenes::infinite(), 30, 43);
    WARN("initialization bracket at n=2000, t=1: minimal " << lo.mean << " +- " << lo.stderr_
         << " vs infinite " << hi.mean << " +- " << hi.stderr_
         << " (gap " << hi.mean - lo.mean << ", conjectured to vanish as n grows)");
    CHECK(lo.mean <= hi.mean + 3.0 * std::hypot(lo.stderr_, hi.stderr_));
}
