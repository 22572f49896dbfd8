#pragma once

// Heteroscedastic losses and the cyclic time-of-day codec. The numeric loss
// is the log-variance attenuation form; the categorical loss draws Gaussian
// logit noise and averages softmax probabilities before taking the negative
// log, so with zero noise it reduces exactly to cross-entropy.

#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include "ustad/linalg.hpp"
#include "ustad/rng.hpp"
#include "ustad/types.hpp"

namespace ustad::uncertainty {

/// 0.5*exp(-r)*(y-yhat)^2 + 0.5*r, with r the predicted log-variance.
template <class Real>
Real loss_numeric(Real y, Real yhat, Real r) {
    const Real d = y - yhat;
    return Real(0.5) * std::exp(-r) * d * d + Real(0.5) * r;
}

/// Analytic d/d(yhat) and d/dr of loss_numeric.
template <class Real>
void loss_numeric_grad(Real y, Real yhat, Real r, Real& d_yhat, Real& d_r) {
    const Real d = y - yhat;
    const Real inv_var = std::exp(-r);
    d_yhat = -inv_var * d;
    d_r = Real(0.5) - Real(0.5) * inv_var * d * d;
}

/// Standard normal draws for the sampled-logit loss; one row per draw.
template <class Real>
std::vector<Real> sample_logit_noise(int t_draws, int n_classes, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<Real> eps(static_cast<std::size_t>(t_draws) * n_classes);
    for (auto& e : eps) e = static_cast<Real>(rng.normal());
    return eps;
}

/// -log( (1/T) sum_t softmax(u + sigma .* eps_t)[c] ) for the provided noise
/// draws. sigma enters elementwise and must be nonnegative.
template <class Real>
Real loss_categorical_with_noise(const Real* u, const Real* sigma, int n_classes, int true_class,
                                 const Real* eps, int t_draws) {
    if (true_class < 0 || true_class >= n_classes)
        throw std::invalid_argument("loss_categorical: class out of range");
    if (t_draws < 1) throw std::invalid_argument("loss_categorical: need at least one draw");
    std::vector<Real> m(static_cast<std::size_t>(n_classes));
    // log-mean-exp of per-draw log-probabilities keeps this stable
    Real max_ls = -std::numeric_limits<Real>::infinity();
    std::vector<Real> ls(static_cast<std::size_t>(t_draws));
    for (int t = 0; t < t_draws; ++t) {
        const Real* et = eps + static_cast<std::size_t>(t) * n_classes;
        for (int c = 0; c < n_classes; ++c) m[static_cast<std::size_t>(c)] = u[c] + sigma[c] * et[c];
        const Real lse = linalg::logsumexp(m.data(), n_classes);
        ls[static_cast<std::size_t>(t)] = m[static_cast<std::size_t>(true_class)] - lse;
        max_ls = std::max(max_ls, ls[static_cast<std::size_t>(t)]);
    }
    Real s = Real(0);
    for (int t = 0; t < t_draws; ++t) s += std::exp(ls[static_cast<std::size_t>(t)] - max_ls);
    return -(max_ls + std::log(s / Real(t_draws)));
}

/// Gradients of loss_categorical_with_noise w.r.t. u and sigma for fixed eps.
template <class Real>
Real loss_categorical_with_noise_grad(const Real* u, const Real* sigma, int n_classes,
                                      int true_class, const Real* eps, int t_draws, Real* d_u,
                                      Real* d_sigma) {
    std::vector<Real> m(static_cast<std::size_t>(n_classes));
    std::vector<Real> p(static_cast<std::size_t>(n_classes));
    std::vector<Real> ls(static_cast<std::size_t>(t_draws));
    std::vector<Real> soft(static_cast<std::size_t>(t_draws) * n_classes);
    Real max_ls = -std::numeric_limits<Real>::infinity();
    for (int t = 0; t < t_draws; ++t) {
        const Real* et = eps + static_cast<std::size_t>(t) * n_classes;
        for (int c = 0; c < n_classes; ++c) m[static_cast<std::size_t>(c)] = u[c] + sigma[c] * et[c];
        linalg::softmax(m.data(), p.data(), n_classes);
        for (int c = 0; c < n_classes; ++c)
            soft[static_cast<std::size_t>(t) * n_classes + c] = p[static_cast<std::size_t>(c)];
        ls[static_cast<std::size_t>(t)] = std::log(p[static_cast<std::size_t>(true_class)]);
        max_ls = std::max(max_ls, ls[static_cast<std::size_t>(t)]);
    }
    Real z = Real(0);
    std::vector<Real> wt(static_cast<std::size_t>(t_draws));
    for (int t = 0; t < t_draws; ++t) {
        wt[static_cast<std::size_t>(t)] = std::exp(ls[static_cast<std::size_t>(t)] - max_ls);
        z += wt[static_cast<std::size_t>(t)];
    }
    const Real loss = -(max_ls + std::log(z / Real(t_draws)));
    // dL/d ls_t = -w_t / sum(w); d ls_t/d m_{t,c} = 1[c=true] - softmax_c
    for (int c = 0; c < n_classes; ++c) {
        d_u[c] = Real(0);
        d_sigma[c] = Real(0);
    }
    for (int t = 0; t < t_draws; ++t) {
        const Real g = -wt[static_cast<std::size_t>(t)] / z;
        const Real* et = eps + static_cast<std::size_t>(t) * n_classes;
        const Real* pt = soft.data() + static_cast<std::size_t>(t) * n_classes;
        for (int c = 0; c < n_classes; ++c) {
            const Real dm = g * ((c == true_class ? Real(1) : Real(0)) - pt[c]);
            d_u[c] += dm;
            d_sigma[c] += dm * et[c];
        }
    }
    return loss;
}

/// Seeded convenience wrapper matching the operation contract.
template <class Real>
Real loss_categorical(const std::vector<Real>& u, const std::vector<Real>& sigma, int true_class,
                      int t_draws, std::uint64_t seed) {
    if (u.size() != sigma.size()) throw std::invalid_argument("loss_categorical: size mismatch");
    for (Real s : sigma)
        if (s < Real(0)) throw std::invalid_argument("loss_categorical: sigma must be >= 0");
    const auto eps = sample_logit_noise<Real>(t_draws, static_cast<int>(u.size()), seed);
    return loss_categorical_with_noise(u.data(), sigma.data(), static_cast<int>(u.size()),
                                       true_class, eps.data(), t_draws);
}

/// Sum of numeric losses plus lambda times categorical losses, averaged over
/// masked events: callers pass per-event per-feature losses.
inline double total_loss(const std::vector<std::vector<double>>& numeric_losses,
                         const std::vector<std::vector<double>>& categorical_losses, double lambda) {
    if (numeric_losses.size() != categorical_losses.size())
        throw std::invalid_argument("total_loss: event count mismatch");
    if (numeric_losses.empty()) throw std::invalid_argument("total_loss: no masked events");
    double total = 0.0;
    for (std::size_t e = 0; e < numeric_losses.size(); ++e) {
        for (double l : numeric_losses[e]) total += l;
        for (double l : categorical_losses[e]) total += lambda * l;
    }
    return total / static_cast<double>(numeric_losses.size());
}

// ---------------------------------------------------------------------------
// cyclic time-of-day codec
// ---------------------------------------------------------------------------

struct TimeXY {
    double x = 0.0;
    double y = 0.0;
};

inline TimeXY time_encode(double minutes_of_day, double radius = 1.0) {
    const double theta = minutes_of_day / kMinutesPerDay * 2.0 * M_PI;
    return {radius * std::cos(theta), radius * std::sin(theta)};
}

/// Angle in [0, 2pi) from the (time_x, time_y) pair; errors on the zero vector.
inline double time_angle_recover(double time_x, double time_y) {
    if (time_x == 0.0 && time_y == 0.0)
        throw std::invalid_argument("time_angle_recover: zero vector has no angle");
    double theta = std::atan2(time_y, time_x);
    if (theta < 0.0) theta += 2.0 * M_PI;
    if (theta >= 2.0 * M_PI) theta = 0.0;
    return theta;
}

inline double angle_to_minutes(double theta) { return theta * kMinutesPerDay / (2.0 * M_PI); }

/// Shorter-arc absolute deviation between two angles.
inline double angle_deviation(double a, double b) {
    double d = std::abs(a - b);
    return std::min(d, 2.0 * M_PI - d);
}

inline double circular_minutes_error(double a_min, double b_min) {
    double d = std::fmod(std::abs(a_min - b_min), kMinutesPerDay);
    return std::min(d, kMinutesPerDay - d);
}

}  // namespace ustad::uncertainty
