#include <doctest.h>

#include <cmath>
#include <numeric>
#include <vector>

#include "dabul/dist.hpp"
#include "dabul/errors.hpp"

using namespace dabul;
using namespace dabul::dist;

TEST_CASE("log_rising and log_factorial agree with lgamma") {
  for (double a : {1e-3, 0.37, 2.5, 40.0, 1234.5}) {
    for (long z : {0L, 1L, 5L, 47L, 48L, 49L, 300L, 5000L}) {
      const double ref = std::lgamma(z + a) - std::lgamma(a);
      CHECK(log_rising(z, a) == doctest::Approx(ref).epsilon(1e-12).scale(1.0));
    }
  }
  for (long z : {0L, 1L, 10L, 1023L, 1024L, 50000L}) {
    CHECK(log_factorial(z) == doctest::Approx(std::lgamma(z + 1.0)).epsilon(1e-13));
  }
}

TEST_CASE("digamma_rising matches the digamma difference") {
  for (double a : {0.01, 0.8, 17.0}) {
    for (long z : {0L, 3L, 40L, 900L}) {
      CHECK(digamma_rising(z, a) == doctest::Approx(digamma(z + a) - digamma(a)).epsilon(1e-10));
    }
  }
}

TEST_CASE("negative binomial mass, mean and variance") {
  const NegBinParams p{6.5, 0.25};
  double total = 0.0, mean = 0.0, m2 = 0.0;
  for (long z = 0; z < 400; ++z) {
    const double pr = std::exp(negbin_logpmf(z, p));
    total += pr;
    mean += z * pr;
    m2 += double(z) * z * pr;
  }
  CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(mean == doctest::Approx(6.5).epsilon(1e-10));
  CHECK(m2 - mean * mean == doctest::Approx(1.25 * 6.5).epsilon(1e-9));
  CHECK(negbin_logpmf(0, {0.0, 1.0}) == 0.0);
  CHECK(std::isinf(negbin_logpmf(2, {0.0, 1.0})));
  CHECK(std::isinf(negbin_logpmf(-1, p)));
  CHECK_THROWS_AS(negbin_logpmf(1, {1.0, 0.0}), ContractViolation);
}

TEST_CASE("negative binomial partial derivatives match finite differences") {
  for (long z : {0L, 3L, 60L}) {
    for (double mu : {0.4, 7.0, 150.0}) {
      for (double d : {0.1, 0.25, 2.0}) {
        const auto g = negbin_logpmf_derivs(z, mu, d);
        CHECK(g.value == doctest::Approx(negbin_logpmf(z, {mu, d})).epsilon(1e-12));
        const double h = 1e-6;
        const double fm = (negbin_logpmf(z, {mu + h, d}) - negbin_logpmf(z, {mu - h, d})) / (2 * h);
        const double fd = (negbin_logpmf(z, {mu, d + h}) - negbin_logpmf(z, {mu, d - h})) / (2 * h);
        CHECK(g.d_mean == doctest::Approx(fm).epsilon(1e-6));
        CHECK(g.d_overdispersion == doctest::Approx(fd).epsilon(1e-6));
      }
    }
  }
}

TEST_CASE("negative binomial sampler moments") {
  Rng rng(42);
  const NegBinParams p{4.0, 0.25};
  const int n = 100000;
  double s = 0.0, s2 = 0.0;
  for (int k = 0; k < n; ++k) {
    const double x = negbin_sample(p, rng);
    s += x;
    s2 += x * x;
  }
  const double mean = s / n, var = s2 / n - mean * mean;
  CHECK(std::abs(mean - 4.0) < 4 * std::sqrt(5.0 / n));
  CHECK(var == doctest::Approx(5.0).epsilon(0.03));
}

TEST_CASE("product of negative binomials equals DCM times the total") {
  // Independent NB(mu_k, d) given their sum T is DCM(T, mu / d), and T is NB(sum mu, d).
  const std::vector<double> mu = {0.7, 2.2, 4.1};
  const double d = 0.6;
  DcmParams dcm;
  for (double m : mu) dcm.weights.push_back(m / d);
  double worst = 0.0;
  for (long a = 0; a <= 6; ++a) {
    for (long b = 0; b <= 6; ++b) {
      for (long c = 0; c <= 6; ++c) {
        const double lhs = negbin_logpmf(a, {mu[0], d}) + negbin_logpmf(b, {mu[1], d}) + negbin_logpmf(c, {mu[2], d});
        dcm.total = a + b + c;
        const std::vector<long> y = {a, b, c};
        const double rhs = dcm_logpmf(y, dcm) + negbin_logpmf(dcm.total, {mu[0] + mu[1] + mu[2], d});
        worst = std::max(worst, std::abs(lhs - rhs));
      }
    }
  }
  CHECK(worst < 1e-10);
}

TEST_CASE("DCM contract and normalization") {
  DcmParams p{4, {0.5, 1.5}};
  double total = 0.0;
  for (long a = 0; a <= 4; ++a) {
    const std::vector<long> y = {a, 4 - a};
    total += std::exp(dcm_logpmf(y, p));
  }
  CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
  const std::vector<long> bad = {1, 1};
  CHECK_THROWS_AS(dcm_logpmf(bad, p), ContractViolation);
  const std::vector<long> wrong_dim = {4};
  CHECK_THROWS_AS(dcm_logpmf(wrong_dim, p), ContractViolation);
}

TEST_CASE("hypergeometric mass and sampler") {
  double total = 0.0, mean = 0.0;
  for (long z = 0; z <= 6; ++z) {
    const double p = std::exp(hypergeom_logpmf(z, 30, 9, 6));
    total += p;
    mean += z * p;
  }
  CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(mean == doctest::Approx(6.0 * 9.0 / 30.0).epsilon(1e-12));
  CHECK(std::isinf(hypergeom_logpmf(7, 30, 9, 6)));
  // C(5,2) C(5,1) / C(10,3) = 50 / 120
  CHECK(std::exp(hypergeom_logpmf(2, 10, 5, 3)) == doctest::Approx(50.0 / 120.0).epsilon(1e-12));
  Rng rng(7);
  double s = 0.0;
  for (int k = 0; k < 20000; ++k) {
    const long z = hypergeom_sample(30, 9, 6, rng);
    CHECK(z >= 0);
    CHECK(z <= 6);
    s += z;
  }
  CHECK(s / 20000 == doctest::Approx(1.8).epsilon(0.02));
  CHECK(hypergeom_sample(10, 10, 4, rng) == 4);
  CHECK(hypergeom_sample(10, 0, 4, rng) == 0);
}

TEST_CASE("logit helpers and direct-estimate density") {
  CHECK(logit(0.5) == doctest::Approx(0.0));
  CHECK(inv_logit(logit(0.023)) == doctest::Approx(0.023).epsilon(1e-14));
  CHECK(inv_logit(-800.0) >= 0.0);
  CHECK(inv_logit(800.0) <= 1.0);
  const double V = 0.04;
  const double z = logit(0.03) - logit(0.025);
  CHECK(logit_normal_logdensity(0.03, 0.025, V) ==
        doctest::Approx(-0.5 * z * z / V - 0.5 * std::log(2 * M_PI * V)).epsilon(1e-12));
  CHECK(std::isinf(logit_normal_logdensity(0.03, 0.0, V)));
  CHECK(std::isinf(logit_normal_logdensity(0.03, 1.0, V)));
}

TEST_CASE("prior densities") {
  // P(sigma > U) = alpha  <=>  exp(-lambda U) = alpha
  const double lam = pc_prior_rate(1.0, 0.01);
  CHECK(std::exp(-lam * 1.0) == doctest::Approx(0.01).epsilon(1e-12));
  CHECK(pc_prior_logdensity(0.3, 1.0, 0.01) == doctest::Approx(std::log(lam) - lam * 0.3).epsilon(1e-12));
  CHECK(exponential_logdensity(2.0, 1.5) == doctest::Approx(std::log(1.5) - 3.0).epsilon(1e-12));
  // Beta(0.5, 0.5) at 0.5 is 2 / pi
  CHECK(std::exp(beta_logdensity(0.5, 0.5, 0.5)) == doctest::Approx(2.0 / M_PI).epsilon(1e-12));
  CHECK(normal_logdensity(1.0, 0.0, 2.0) == doctest::Approx(-0.125 - std::log(2.0) - 0.5 * std::log(2 * M_PI)));
}
