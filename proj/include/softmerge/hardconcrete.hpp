#pragma once

// Binary concrete and hard concrete (stretched + clamped) distributions.
//
// Conventions used throughout:
//   alpha = exp(log_alpha), beta in (0, 1), stretch interval (gamma, zeta)
//   sampling  s = logistic((logit(u) + log_alpha) / beta),  u ~ U(0, 1)
//   cdf       F(s) = logistic(beta * logit(s) - log_alpha)
//   gate      g = clamp(s * (zeta - gamma) + gamma, 0, 1)
// F is the exact probability-integral inverse of the sampler.

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "random.hpp"

namespace softmerge {

inline constexpr double kDefaultBeta = 0.5;
inline constexpr double kDefaultGamma = -0.1;
inline constexpr double kDefaultZeta = 1.1;

inline double logistic(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline double logit(double p) { return std::log(p) - std::log1p(-p); }

class DomainError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

// Parameters of one stochastic gate. beta is held through an unconstrained
// raw value (beta = logistic(raw_beta)) so gradient steps keep it in (0, 1).
class GateParams {
public:
    GateParams() : GateParams(0.0) {}

    explicit GateParams(double log_alpha, double beta = kDefaultBeta, double gamma = kDefaultGamma,
                        double zeta = kDefaultZeta)
        : log_alpha(log_alpha), gamma_(gamma), zeta_(zeta) {
        if (!(beta > 0.0 && beta < 1.0))
            throw DomainError("GateParams: beta must lie in (0,1), got " + std::to_string(beta));
        if (!(gamma < 0.0)) throw DomainError("GateParams: gamma must be < 0, got " + std::to_string(gamma));
        if (!(zeta > 1.0)) throw DomainError("GateParams: zeta must be > 1, got " + std::to_string(zeta));
        raw_beta = logit(beta);
    }

    static GateParams from_raw(double log_alpha, double raw_beta, double gamma = kDefaultGamma,
                               double zeta = kDefaultZeta) {
        GateParams p(log_alpha, kDefaultBeta, gamma, zeta);
        p.raw_beta = raw_beta;
        return p;
    }

    double beta() const { return logistic(raw_beta); }
    double gamma() const { return gamma_; }
    double zeta() const { return zeta_; }
    double alpha() const { return std::exp(log_alpha); }

    double log_alpha = 0.0;
    double raw_beta = 0.0;

private:
    double gamma_ = kDefaultGamma;
    double zeta_ = kDefaultZeta;
};

namespace detail {
inline void require_open_unit(double x, const char* what) {
    if (!(x > 0.0 && x < 1.0))
        throw DomainError(std::string(what) + " must lie in (0,1), got " + std::to_string(x));
}
}  // namespace detail

inline double concrete_pdf(double s, const GateParams& p) {
    detail::require_open_unit(s, "concrete_pdf: s");
    // Evaluated as F(1-F) * beta / (s(1-s)) in log space; algebraically equal to
    // alpha*beta*s^(beta-1)*(1-s)^(beta-1) / (s^beta + alpha*(1-s)^beta)^2.
    const double beta = p.beta();
    const double x = beta * logit(s) - p.log_alpha;
    const double f = logistic(x);
    const double fc = logistic(-x);
    return f * fc * beta / (s * (1.0 - s));
}

inline double concrete_cdf(double s, const GateParams& p) {
    detail::require_open_unit(s, "concrete_cdf: s");
    return logistic(p.beta() * logit(s) - p.log_alpha);
}

inline double sample_concrete(const GateParams& p, double u) {
    detail::require_open_unit(u, "sample_concrete: u");
    return logistic((logit(u) + p.log_alpha) / p.beta());
}

inline double stretch(double s, const GateParams& p) { return s * p.zeta() + (1.0 - s) * p.gamma(); }

inline double stretch_and_fold(double s, const GateParams& p) {
    detail::require_open_unit(s, "stretch_and_fold: s");
    return std::clamp(stretch(s, p), 0.0, 1.0);
}

inline double prob_zero(const GateParams& p) {
    return concrete_cdf(-p.gamma() / (p.zeta() - p.gamma()), p);
}

inline double prob_one(const GateParams& p) {
    return 1.0 - concrete_cdf((1.0 - p.gamma()) / (p.zeta() - p.gamma()), p);
}

// Density of the continuous part of the hard concrete gate at g in (0,1),
// including the 1/(zeta-gamma) change-of-variables factor. Integrates to
// 1 - prob_zero - prob_one.
inline double hard_concrete_density(double g, const GateParams& p) {
    detail::require_open_unit(g, "hard_concrete_density: g");
    const double width = p.zeta() - p.gamma();
    return concrete_pdf((g - p.gamma()) / width, p) / width;
}

inline double sample_gate(const GateParams& p, double u) { return stretch_and_fold(sample_concrete(p, u), p); }

inline double sample_gate(const GateParams& p, Rng& rng) { return sample_gate(p, rng.uniform_open()); }

inline double deterministic_gate(const GateParams& p) {
    return std::clamp(logistic(p.log_alpha) * (p.zeta() - p.gamma()) + p.gamma(), 0.0, 1.0);
}

// Gate value together with its partial derivatives w.r.t. log_alpha and
// raw_beta. Derivatives are zero in the clamped regions.
struct GateDraw {
    double value = 0.0;
    double d_log_alpha = 0.0;
    double d_raw_beta = 0.0;
};

inline GateDraw sample_gate_with_grad(const GateParams& p, double u) {
    detail::require_open_unit(u, "sample_gate: u");
    const double beta = p.beta();
    const double z = logit(u) + p.log_alpha;
    const double s = logistic(z / beta);
    const double width = p.zeta() - p.gamma();
    const double stretched = s * width + p.gamma();
    GateDraw out;
    out.value = std::clamp(stretched, 0.0, 1.0);
    if (stretched > 0.0 && stretched < 1.0) {
        const double ds = s * (1.0 - s);
        out.d_log_alpha = width * ds / beta;
        // d beta / d raw_beta = beta (1 - beta)
        out.d_raw_beta = width * ds * (-z / (beta * beta)) * beta * (1.0 - beta);
    }
    return out;
}

inline GateDraw deterministic_gate_with_grad(const GateParams& p) {
    const double width = p.zeta() - p.gamma();
    const double sig = logistic(p.log_alpha);
    const double stretched = sig * width + p.gamma();
    GateDraw out;
    out.value = std::clamp(stretched, 0.0, 1.0);
    if (stretched > 0.0 && stretched < 1.0) out.d_log_alpha = width * sig * (1.0 - sig);
    return out;
}

}  // namespace softmerge
