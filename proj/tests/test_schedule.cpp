#include <doctest.h>

#include <cmath>

#include "momug/error.hpp"
#include "momug/schedule.hpp"

using namespace momug;

TEST_CASE("cosine schedule shape") {
  const auto s = cosine_schedule(50);
  REQUIRE(s.steps == 50);
  CHECK(s.alpha_bar[0] == 1.0);
  for (int t = 1; t <= 50; ++t) {
    CHECK(s.alpha_bar[t] < s.alpha_bar[t - 1]);
    CHECK(s.beta[t] >= 1e-6);
    CHECK(s.beta[t] <= 0.999);
  }
  CHECK(s.alpha_bar[50] < 0.01);

  // Independent product over (1 - beta).
  double prod = 1.0;
  for (int t = 1; t <= 50; ++t) {
    prod *= 1.0 - s.beta[t];
    CHECK(std::abs(prod - s.alpha_bar[t]) < 1e-12);
    CHECK(std::abs((1.0 - prod) - s.one_minus_alpha_bar[t]) < 1e-12);
  }
}

TEST_CASE("cosine schedule tracks the closed-form alpha_bar before clipping") {
  const auto s = cosine_schedule(50);
  const double off = 0.008;
  auto f = [&](double t) {
    const double c = std::cos((t / 50.0 + off) / (1 + off) * std::acos(-1.0) / 2);
    return c * c;
  };
  for (int t = 1; t < 50; ++t) CHECK(s.alpha_bar[t] == doctest::Approx(f(t) / f(0)).epsilon(1e-10));
}

TEST_CASE("forward process moments") {
  const auto s = cosine_schedule(50);
  const int n = 100000;
  for (int t : {1, 10, 25, 50}) {
    Rng rng(3, "q_sample", static_cast<std::uint64_t>(t));
    const Mat<double> x0 = Mat<double>::Constant(n, 1, 1.7);
    const Mat<double> eps = rng.normal_matrix<double>(n, 1);
    const Mat<double> xt = q_sample<double>(x0, t, eps, s);
    const double mean = xt.mean();
    const double var = (xt.array() - mean).square().sum() / (n - 1);
    const double want_mean = std::sqrt(s.alpha_bar[t]) * 1.7;
    const double want_var = 1.0 - s.alpha_bar[t];
    INFO("t=" << t);
    CHECK(std::abs(mean - want_mean) < 3.0 * std::sqrt(want_var / n));
    CHECK(std::abs(var - want_var) < 3.0 * want_var * std::sqrt(2.0 / (n - 1)));
  }
}

TEST_CASE("q_sample domain") {
  const auto s = cosine_schedule(50);
  const Mat<double> x = Mat<double>::Ones(2, 3);
  CHECK_THROWS_AS(q_sample<double>(x, 0, x, s), Error);
  CHECK_THROWS_AS(q_sample<double>(x, 51, x, s), Error);
  CHECK_THROWS_AS(q_sample<double>(x, 3, Mat<double>::Ones(3, 2), s), Error);
  CHECK((q_sample_any<double>(x, 0, x, s).array() == x.array()).all());
}

TEST_CASE("posterior coefficients match the textbook formulas") {
  const auto s = cosine_schedule(50);
  for (int t = 2; t <= 50; ++t) {
    const double ab = s.alpha_bar[t], abp = s.alpha_bar[t - 1];
    const auto [c0, ct] = s.posterior_mean_coefs(t);
    CHECK(c0 == doctest::Approx(std::sqrt(abp) * s.beta[t] / (1 - ab)).epsilon(1e-9));
    CHECK(ct == doctest::Approx(std::sqrt(s.alpha[t]) * (1 - abp) / (1 - ab)).epsilon(1e-9));
    CHECK(s.posterior_variance(t) == doctest::Approx((1 - abp) / (1 - ab) * s.beta[t]).epsilon(1e-9));
  }
  // At t = 1 the posterior collapses onto x0.
  const auto [c0, ct] = s.posterior_mean_coefs(1);
  CHECK(c0 == 1.0);
  CHECK(ct == 0.0);
  CHECK(s.posterior_variance(1) == 0.0);
}

TEST_CASE("perfect denoiser chain recovers x0") {
  const auto s = cosine_schedule(50);
  Rng rng(8, "chain");
  const Mat<double> x0 = rng.normal_matrix<double>(20, 8);
  const double tol = 2.0 * std::sqrt(s.posterior_variance(1));
  double err_sum = 0.0;
  for (int chain = 0; chain < 100; ++chain) {
    Mat<double> x = rng.normal_matrix<double>(20, 8);
    for (int t = 50; t >= 1; --t) {
      const Mat<double> z = t > 1 ? rng.normal_matrix<double>(20, 8) : Mat<double>::Zero(20, 8);
      x = posterior_sample<double>(x, x0, t, z, s);
    }
    err_sum += (x - x0).cwiseAbs().mean();
  }
  CHECK(err_sum / 100 <= tol);
}

TEST_CASE("posterior sample is mean plus scaled noise") {
  const auto s = cosine_schedule(50);
  Rng rng(4, "post");
  const Mat<double> xt = rng.normal_matrix<double>(3, 4), x0 = rng.normal_matrix<double>(3, 4),
                    z = rng.normal_matrix<double>(3, 4);
  const int t = 17;
  const auto [c0, ct] = s.posterior_mean_coefs(t);
  const Mat<double> want = c0 * x0 + ct * xt + std::sqrt(s.posterior_variance(t)) * z;
  CHECK((posterior_sample<double>(xt, x0, t, z, s) - want).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("schedule from explicit betas") {
  CHECK_THROWS_AS(schedule_from_betas({}), Error);
  CHECK_THROWS_AS(schedule_from_betas({0.1, 1.0}), Error);
  const auto s = schedule_from_betas({0.1, 0.2});
  CHECK(s.alpha_bar[2] == doctest::Approx(0.9 * 0.8));
  const auto c = cosine_schedule(50);
  const auto r = schedule_from_betas(std::vector<double>(c.beta.begin() + 1, c.beta.end()));
  CHECK(r.alpha_bar == c.alpha_bar);
}
