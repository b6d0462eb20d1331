#include "momug/schedule.hpp"

#include <algorithm>
#include <cmath>

#include "momug/error.hpp"

namespace momug {
namespace {

void check_step(const NoiseSchedule& s, int t, int lo) {
  require(t >= lo && t <= s.steps, ErrorCode::out_of_range,
          "timestep " + std::to_string(t) + " outside [" + std::to_string(lo) + ", " + std::to_string(s.steps) + "]");
}

template <typename Real>
void check_same_shape(const Mat<Real>& a, const Mat<Real>& b, const char* what) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), ErrorCode::shape_mismatch,
          std::string(what) + ": shape mismatch");
}

}  // namespace

double NoiseSchedule::posterior_variance(int t) const {
  check_step(*this, t, 1);
  return one_minus_alpha_bar[static_cast<std::size_t>(t - 1)] / one_minus_alpha_bar[static_cast<std::size_t>(t)] *
         beta[static_cast<std::size_t>(t)];
}

std::pair<double, double> NoiseSchedule::posterior_mean_coefs(int t) const {
  check_step(*this, t, 1);
  const auto i = static_cast<std::size_t>(t);
  const double denom = one_minus_alpha_bar[i];
  const double c_x0 = std::sqrt(alpha_bar[i - 1]) * beta[i] / denom;
  const double c_xt = std::sqrt(alpha[i]) * one_minus_alpha_bar[i - 1] / denom;
  return {c_x0, c_xt};
}

NoiseSchedule schedule_from_betas(const std::vector<double>& betas) {
  require(!betas.empty(), ErrorCode::invalid_argument, "schedule needs T >= 1");
  NoiseSchedule s;
  s.steps = static_cast<int>(betas.size());
  s.beta.assign(betas.size() + 1, 0.0);
  s.alpha.assign(betas.size() + 1, 1.0);
  s.alpha_bar.assign(betas.size() + 1, 1.0);
  s.one_minus_alpha_bar.assign(betas.size() + 1, 0.0);
  for (std::size_t t = 1; t <= betas.size(); ++t) {
    const double b = betas[t - 1];
    require(b > 0.0 && b < 1.0, ErrorCode::invalid_argument, "beta must lie in (0, 1)");
    s.beta[t] = b;
    s.alpha[t] = 1.0 - b;
    s.alpha_bar[t] = s.alpha_bar[t - 1] * s.alpha[t];
    s.one_minus_alpha_bar[t] = s.one_minus_alpha_bar[t - 1] + s.alpha_bar[t - 1] * b;
  }
  return s;
}

NoiseSchedule cosine_schedule(int steps, double s) {
  require(steps >= 1, ErrorCode::invalid_argument, "cosine_schedule needs T >= 1");
  auto f = [&](int t) {
    const double c = std::cos(((static_cast<double>(t) / steps + s) / (1.0 + s)) * kPi / 2.0);
    return c * c;
  };
  const double f0 = f(0);
  std::vector<double> betas(static_cast<std::size_t>(steps));
  for (int t = 1; t <= steps; ++t) {
    const double abar_t = f(t) / f0;
    const double abar_prev = f(t - 1) / f0;
    betas[static_cast<std::size_t>(t - 1)] = std::clamp(1.0 - abar_t / abar_prev, 1e-6, 0.999);
  }
  return schedule_from_betas(betas);
}

template <typename Real>
Mat<Real> q_sample_any(const Mat<Real>& x0, int t, const Mat<Real>& eps, const NoiseSchedule& schedule) {
  check_step(schedule, t, 0);
  check_same_shape(x0, eps, "q_sample");
  const auto i = static_cast<std::size_t>(t);
  const Real a = static_cast<Real>(std::sqrt(schedule.alpha_bar[i]));
  const Real b = static_cast<Real>(std::sqrt(schedule.one_minus_alpha_bar[i]));
  return (a * x0.array() + b * eps.array()).matrix();
}

template <typename Real>
Mat<Real> q_sample(const Mat<Real>& x0, int t, const Mat<Real>& eps, const NoiseSchedule& schedule) {
  check_step(schedule, t, 1);
  return q_sample_any(x0, t, eps, schedule);
}

template <typename Real>
Mat<Real> posterior_sample(const Mat<Real>& x_t, const Mat<Real>& x0_hat, int t, const Mat<Real>& z,
                           const NoiseSchedule& schedule) {
  check_step(schedule, t, 1);
  check_same_shape(x_t, x0_hat, "posterior_sample");
  check_same_shape(x_t, z, "posterior_sample");
  const auto [c_x0, c_xt] = schedule.posterior_mean_coefs(t);
  const Real sigma = static_cast<Real>(std::sqrt(schedule.posterior_variance(t)));
  return (static_cast<Real>(c_x0) * x0_hat.array() + static_cast<Real>(c_xt) * x_t.array() + sigma * z.array())
      .matrix();
}

#define MOMUG_INSTANTIATE(Real)                                                                       \
  template Mat<Real> q_sample(const Mat<Real>&, int, const Mat<Real>&, const NoiseSchedule&);         \
  template Mat<Real> q_sample_any(const Mat<Real>&, int, const Mat<Real>&, const NoiseSchedule&);     \
  template Mat<Real> posterior_sample(const Mat<Real>&, const Mat<Real>&, int, const Mat<Real>&, \
                                      const NoiseSchedule&);
MOMUG_INSTANTIATE(float)
MOMUG_INSTANTIATE(double)
#undef MOMUG_INSTANTIATE

}  // namespace momug
