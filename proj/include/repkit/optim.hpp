#pragma once

// Adam with decoupled weight decay, and Rectified Adam.

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "repkit/error.hpp"

namespace repkit {

struct OptimState {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t t = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  explicit OptimState(std::size_t n = 0) : m(n, 0.0), v(n, 0.0) {}
};

namespace detail {

inline void check_step_args(std::span<const double> params, std::span<const double> grads, const OptimState& s,
                            std::span<const char> trainable) {
  if (params.size() != grads.size() || s.m.size() != params.size() || s.v.size() != params.size())
    throw InvalidArgument("optimizer: parameter, gradient and state shapes differ");
  if (!trainable.empty() && trainable.size() != params.size())
    throw InvalidArgument("optimizer: trainable mask has the wrong size");
  for (std::size_t i = 0; i < grads.size(); ++i)
    if ((trainable.empty() || trainable[i]) && !std::isfinite(grads[i]))
      throw NumericError("optimizer: non-finite gradient at index " + std::to_string(i));
}

}  // namespace detail

// Entries with trainable[i] == 0 are left untouched (parameter and moments).
inline void adam_step(std::span<double> params, std::span<const double> grads, OptimState& s, double lr,
                      double weight_decay = 0.0, std::span<const char> trainable = {}) {
  detail::check_step_args(params, grads, s, trainable);
  ++s.t;
  const double bc1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.t));
  const double bc2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!trainable.empty() && !trainable[i]) continue;
    const double g = grads[i];
    s.m[i] = s.beta1 * s.m[i] + (1.0 - s.beta1) * g;
    s.v[i] = s.beta2 * s.v[i] + (1.0 - s.beta2) * g * g;
    const double m_hat = s.m[i] / bc1;
    const double v_hat = s.v[i] / bc2;
    params[i] -= lr * (m_hat / (std::sqrt(v_hat) + s.eps) + weight_decay * params[i]);
  }
}

// Length of the approximated simple moving average at step t.
inline double radam_rho(double beta2, std::uint64_t t) {
  const double rho_inf = 2.0 / (1.0 - beta2) - 1.0;
  const double b2t = std::pow(beta2, static_cast<double>(t));
  return rho_inf - 2.0 * static_cast<double>(t) * b2t / (1.0 - b2t);
}

// Variance rectification factor; only meaningful when rho_t > 4.
inline double radam_rectification(double beta2, std::uint64_t t) {
  const double rho_inf = 2.0 / (1.0 - beta2) - 1.0;
  const double rho = radam_rho(beta2, t);
  return std::sqrt((rho - 4.0) * (rho - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho));
}

// While rho_t <= 4 the adaptive term is skipped and the step is
// bias-corrected momentum: param -= lr * m_hat.
inline void radam_step(std::span<double> params, std::span<const double> grads, OptimState& s, double lr,
                       std::span<const char> trainable = {}) {
  detail::check_step_args(params, grads, s, trainable);
  ++s.t;
  const double bc1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.t));
  const double bc2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.t));
  const double rho = radam_rho(s.beta2, s.t);
  const bool rectified = rho > 4.0;
  const double r = rectified ? radam_rectification(s.beta2, s.t) : 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!trainable.empty() && !trainable[i]) continue;
    const double g = grads[i];
    s.m[i] = s.beta1 * s.m[i] + (1.0 - s.beta1) * g;
    s.v[i] = s.beta2 * s.v[i] + (1.0 - s.beta2) * g * g;
    const double m_hat = s.m[i] / bc1;
    if (rectified) {
      const double v_hat = s.v[i] / bc2;
      params[i] -= lr * r * m_hat / (std::sqrt(v_hat) + s.eps);
    } else {
      params[i] -= lr * m_hat;
    }
  }
}

}  // namespace repkit
