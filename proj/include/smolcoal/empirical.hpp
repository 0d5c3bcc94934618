#ifndef SMOLCOAL_EMPIRICAL_HPP
#define SMOLCOAL_EMPIRICAL_HPP

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

namespace smolcoal {

// Weighted atoms on [0, inf) with moment and Laplace queries. Weights are
// kept normalized to total 1.
class EmpiricalMeasure {
  public:
    struct Atom {
        double mass;
        double weight;
    };

    EmpiricalMeasure() = default;

    static EmpiricalMeasure uniform(const std::vector<double>& masses) {
        if (masses.empty()) throw std::invalid_argument("EmpiricalMeasure: no atoms");
        EmpiricalMeasure m;
        const double w = 1.0 / static_cast<double>(masses.size());
        m.atoms_.reserve(masses.size());
        for (double x : masses) {
            if (x < 0.0) throw std::domain_error("EmpiricalMeasure: negative mass");
            m.atoms_.push_back({x, w});
        }
        return m;
    }

    static EmpiricalMeasure weighted(std::vector<Atom> atoms) {
        if (atoms.empty()) throw std::invalid_argument("EmpiricalMeasure: no atoms");
        double tot = 0.0;
        for (const auto& a : atoms) {
            if (a.mass < 0.0 || a.weight < 0.0)
                throw std::domain_error("EmpiricalMeasure: negative atom");
            tot += a.weight;
        }
        if (tot <= 0.0) throw std::domain_error("EmpiricalMeasure: zero total weight");
        for (auto& a : atoms) a.weight /= tot;
        EmpiricalMeasure m;
        m.atoms_ = std::move(atoms);
        return m;
    }

    const std::vector<Atom>& atoms() const { return atoms_; }
    std::size_t size() const { return atoms_.size(); }

    double total_weight() const {
        double s = 0.0;
        for (const auto& a : atoms_) s += a.weight;
        return s;
    }

    double moment(int k) const {
        double s = 0.0;
        for (const auto& a : atoms_) s += a.weight * std::pow(a.mass, k);
        return s;
    }

    double laplace(double lambda) const {
        double s = 0.0;
        for (const auto& a : atoms_) s += a.weight * std::exp(-lambda * a.mass);
        return s;
    }

    // Divide every atom mass by n; weights unchanged.
    EmpiricalMeasure rescaled(double n) const {
        if (!(n > 0.0)) throw std::domain_error("rescale: n must be positive");
        EmpiricalMeasure m = *this;
        for (auto& a : m.atoms_) a.mass /= n;
        return m;
    }

  private:
    std::vector<Atom> atoms_;
};

} // namespace smolcoal

#endif
