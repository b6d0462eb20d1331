#pragma once

#include <vector>

#include "momug/tensor.hpp"

namespace momug {

// Diffusion variance schedule. Arrays are indexed by timestep: beta/alpha use
// 1..T (index 0 unused), alpha_bar uses 0..T with alpha_bar[0] = 1.
struct NoiseSchedule {
  int steps = 0;
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;
  // 1 - alpha_bar accumulated as (1 - abar[t-1]) + abar[t-1] * beta[t], so that
  // it equals beta[1] exactly at t = 1 and never suffers cancellation.
  std::vector<double> one_minus_alpha_bar;

  // Variance of q(x_{t-1} | x_t, x_0).
  double posterior_variance(int t) const;
  // Coefficients (on x0_hat, on x_t) of the posterior mean.
  std::pair<double, double> posterior_mean_coefs(int t) const;
};

// Schedule from an explicit beta[1..T] list (checkpoint round trip).
NoiseSchedule schedule_from_betas(const std::vector<double>& betas);

// Improved-DDPM cosine schedule: alpha_bar(t) = f(t)/f(0),
// f(t) = cos^2(((t/T + s)/(1 + s)) * pi/2), beta clipped to [1e-6, 0.999].
NoiseSchedule cosine_schedule(int steps, double s = 0.008);

// Closed-form forward process x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.
// Accepts t in [1, T]; t = 0 is allowed internally via q_sample_any.
template <typename Real>
Mat<Real> q_sample(const Mat<Real>& x0, int t, const Mat<Real>& eps, const NoiseSchedule& schedule);

// Same as q_sample but also accepts t = 0 (identity).
template <typename Real>
Mat<Real> q_sample_any(const Mat<Real>& x0, int t, const Mat<Real>& eps, const NoiseSchedule& schedule);

// One reverse step x_{t-1} ~ q(x_{t-1} | x_t, x0_hat), with the noise supplied.
template <typename Real>
Mat<Real> posterior_sample(const Mat<Real>& x_t, const Mat<Real>& x0_hat, int t, const Mat<Real>& z,
                           const NoiseSchedule& schedule);

}  // namespace momug
