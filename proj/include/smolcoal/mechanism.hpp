#ifndef SMOLCOAL_MECHANISM_HPP
#define SMOLCOAL_MECHANISM_HPP

#include <cmath>
#include <limits>
#include <stdexcept>

namespace smolcoal {

inline constexpr double kInf = std::numeric_limits<double>::infinity();

// Mass-depletion function psi(x) = c * x^gamma of the stable family.
// Quadratic(b) is the alias Stable(c=b, gamma=2), kept as a distinct kind so
// the Feller-exact code paths (closed-form transitions, grid PDE) stay
// explicit. gamma > 1 guarantees convexity and integrability of 1/psi at
// infinity, i.e. the deterministic flow comes down from infinity.
class BranchingMechanism {
  public:
    enum class Kind { Stable, Quadratic };

    static BranchingMechanism stable(double c, double gamma) {
        return BranchingMechanism(Kind::Stable, c, gamma);
    }
    static BranchingMechanism quadratic(double b) {
        return BranchingMechanism(Kind::Quadratic, b, 2.0);
    }

    Kind kind() const { return kind_; }
    double rate() const { return c_; }
    double gamma() const { return gamma_; }
    bool is_feller() const { return gamma_ == 2.0; }

    // beta = 1/(gamma-1), the self-similar mass exponent
    double beta() const { return 1.0 / (gamma_ - 1.0); }

    double eval(double x) const {
        if (!(x >= 0.0) || !std::isfinite(x))
            throw std::domain_error("mechanism eval: x must be finite and >= 0");
        if (gamma_ == 2.0) return c_ * x * x;
        return c_ * std::pow(x, gamma_);
    }

  private:
    BranchingMechanism(Kind kind, double c, double gamma) : kind_(kind), c_(c), gamma_(gamma) {
        if (!(c > 0.0) || !std::isfinite(c))
            throw std::domain_error("mechanism: rate c must be positive and finite");
        if (!(gamma > 1.0) || !std::isfinite(gamma))
            throw std::domain_error("mechanism: exponent gamma must be > 1");
    }

    Kind kind_;
    double c_;
    double gamma_;
};

// Deterministic flow of xdot = -psi(x) and its closed-form companions
//   q(x)   = int_x^inf ds/psi(s) = beta * x^(1-gamma) / c
//   phi(t) = q^{-1}(t)           = (c*t/beta)^(-beta)
//   flow(x0, t) = (c*(gamma-1)*t + x0^(1-gamma))^(-beta),  flow(inf, t) = phi(t).
// +infinity is a first-class initial mass, never a large float stand-in.
class FlowEvaluator {
  public:
    explicit FlowEvaluator(BranchingMechanism m) : m_(m) {}

    const BranchingMechanism& mechanism() const { return m_; }

    double q(double x) const {
        if (!(x > 0.0)) throw std::domain_error("q: argument must be > 0");
        if (x == kInf) return 0.0;
        const double g = m_.gamma();
        return m_.beta() * std::pow(x, 1.0 - g) / m_.rate();
    }

    double phi(double t) const {
        if (!(t > 0.0)) throw std::domain_error("phi: argument must be > 0");
        return std::pow(m_.rate() * t / m_.beta(), -m_.beta());
    }

    double flow(double x0, double t) const {
        if (!(t >= 0.0) || std::isnan(t)) throw std::domain_error("flow: t must be >= 0");
        if (std::isnan(x0) || x0 < 0.0) throw std::domain_error("flow: x0 must be >= 0");
        if (x0 == 0.0) return 0.0; // absorbing
        if (t == 0.0) return x0;
        const double g = m_.gamma();
        const double drift = m_.rate() * (g - 1.0) * t;
        if (g == 2.0) {
            // Feller fast path: 1/(c t + 1/x0)
            if (x0 == kInf) return 1.0 / drift;
            return 1.0 / (drift + 1.0 / x0);
        }
        const double base = (x0 == kInf) ? drift : drift + std::pow(x0, 1.0 - g);
        return std::pow(base, -m_.beta());
    }

    // r_t^1 + r_t^2 - r_t where r starts from a+b and r^i from a, b.
    // Nonnegative by convexity of psi: collapsing two branches into one
    // depletes the pooled mass faster.
    double superlinearity_gap(double a, double b, double t) const {
        if (!(a > 0.0) || !(b > 0.0) || !(t > 0.0))
            throw std::domain_error("superlinearity_gap: a, b, t must be > 0");
        const double gap = flow(a, t) + flow(b, t) - flow(a + b, t);
        if (gap < -1e-9 * (std::fabs(flow(a, t)) + std::fabs(flow(b, t)) + 1.0))
            throw std::logic_error("superlinearity_gap: convexity violated");
        return gap < 0.0 ? 0.0 : gap;
    }

  private:
    BranchingMechanism m_;
};

} // namespace smolcoal

#endif
