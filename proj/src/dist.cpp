#include "dabul/dist.hpp"

#include <cmath>
#include <limits>
#include <numbers>

#include <boost/math/special_functions/digamma.hpp>

#include "dabul/errors.hpp"

namespace dabul::dist {

namespace {
constexpr double kNegInf = -std::numeric_limits<double>::infinity();
constexpr long kDirectSumLimit = 48;
constexpr int kFactorialTable = 1024;

struct LogFactorials {
  double v[kFactorialTable];
  LogFactorials() {
    v[0] = 0.0;
    for (int k = 1; k < kFactorialTable; ++k) v[k] = v[k - 1] + std::log(static_cast<double>(k));
  }
};
const LogFactorials log_factorials;

// Above this shape the rising factorials use the Stirling difference, which
// avoids subtracting two large log-gammas.
constexpr double kStirlingShape = 10.0;

// Tail of the Stirling series for log Gamma(x), x >= kStirlingShape.
double stirling_tail(double x) {
  const double r = 1.0 / x, r2 = r * r;
  return r * (1.0 / 12 - r2 * (1.0 / 360 - r2 * (1.0 / 1260 - r2 * (1.0 / 1680 - r2 / 1188))));
}

// x log(x / m) + m - x without cancellation when x is close to m.
double deviance_term(double x, double m) {
  if (std::abs(x - m) < 0.1 * (x + m)) {
    const double v = (x - m) / (x + m);
    double s = (x - m) * v;
    double ej = 2.0 * x * v;
    const double v2 = v * v;
    for (int j = 1; j < 1000; ++j) {
      ej *= v2;
      const double s1 = s + ej / (2 * j + 1);
      if (s1 == s) return s1;
      s = s1;
    }
    return s;
  }
  return x * std::log(x / m) + m - x;
}

// log NB(z; a = mean / d, p = d / (1 + d)) for large z and a, written as the
// binomial-type saddle point form so the result keeps relative accuracy
// instead of being a difference of terms of size z log z.
double negbin_saddle(double z, double a, double d) {
  const double n = a + z;
  const double m_a = n / (1.0 + d), m_z = n * d / (1.0 + d);
  return std::log(a / n) + stirling_tail(n) - stirling_tail(a) - stirling_tail(z) - deviance_term(a, m_a) -
         deviance_term(z, m_z) + 0.5 * std::log(n / (2.0 * std::numbers::pi * a * z));
}

bool use_saddle(long z, double a) { return z > kDirectSumLimit && a >= kStirlingShape; }

// digamma(x) - log(x), x >= kStirlingShape.
double digamma_tail(double x) {
  const double r = 1.0 / x, r2 = r * r;
  return -0.5 * r - r2 * (1.0 / 12 - r2 * (1.0 / 120 - r2 * (1.0 / 252 - r2 * (1.0 / 240 - r2 / 132))));
}
}  // namespace

double log_factorial(long z) {
  if (z >= 0 && z < kFactorialTable) return log_factorials.v[z];
  return log_gamma(static_cast<double>(z) + 1.0);
}

double log_gamma(double x) {
#if defined(__GLIBC__)
  int sign = 0;
  return ::lgamma_r(x, &sign);
#else
  return std::lgamma(x);
#endif
}

double digamma(double x) { return boost::math::digamma(x); }

double log_rising(long z, double a) {
  if (z <= kDirectSumLimit) {
    // Product with an occasional log keeps this to one or two log calls.
    double s = 0.0, prod = 1.0;
    for (long k = 0; k < z; ++k) {
      prod *= a + static_cast<double>(k);
      if (prod > 1e250 || prod < 1e-250) {
        s += std::log(prod);
        prod = 1.0;
      }
    }
    return s + std::log(prod);
  }
  const double zd = static_cast<double>(z);
  if (a >= kStirlingShape) {
    return (a - 0.5) * std::log1p(zd / a) + zd * std::log(a + zd) - zd + stirling_tail(a + zd) - stirling_tail(a);
  }
  return log_gamma(zd + a) - log_gamma(a);
}

double digamma_rising(long z, double a) {
  if (z <= kDirectSumLimit) {
    double s = 0.0;
    for (long k = 0; k < z; ++k) s += 1.0 / (a + static_cast<double>(k));
    return s;
  }
  const double zd = static_cast<double>(z);
  if (a >= kStirlingShape) return std::log1p(zd / a) + digamma_tail(a + zd) - digamma_tail(a);
  return digamma(zd + a) - digamma(a);
}

double negbin_logpmf(long z, const NegBinParams& p) {
  if (z < 0) return kNegInf;
  if (!(p.overdispersion > 0.0) || p.mean < 0.0) {
    throw ContractViolation("negbin_logpmf: need mean >= 0 and d > 0");
  }
  if (p.mean == 0.0) return z == 0 ? 0.0 : kNegInf;
  const double d = p.overdispersion;
  const double a = p.mean / d;
  const double zd = static_cast<double>(z);
  if (use_saddle(z, a)) return negbin_saddle(zd, a, d);
  return log_rising(z, a) - log_gamma(zd + 1.0) + zd * std::log(d) - (zd + a) * std::log1p(d);
}

NegBinDerivs negbin_logpmf_derivs(long z, double mean, double d) {
  return negbin_logpmf_derivs(z, mean, d, std::log(d), std::log1p(d));
}

NegBinDerivs negbin_logpmf_derivs(long z, double mean, double d, double log_d, double l1pd) {
  const double a = mean / d;
  const double zd = static_cast<double>(z);
  const double psi = digamma_rising(z, a);
  NegBinDerivs out{};
  out.value = use_saddle(z, a) ? negbin_saddle(zd, a, d) : log_rising(z, a) - log_factorial(z) + zd * log_d - (zd + a) * l1pd;
  out.d_mean = (psi - l1pd) / d;
  // da/dd = -a/d
  out.d_overdispersion = -a / d * (psi - l1pd) + zd / d - (zd + a) / (1.0 + d);
  return out;
}

long negbin_sample(const NegBinParams& p, Rng& rng) {
  if (p.mean < 0.0 || !(p.overdispersion > 0.0)) {
    throw ContractViolation("negbin_sample: need mean >= 0 and d > 0");
  }
  if (p.mean == 0.0) return 0;
  std::gamma_distribution<double> gamma(p.mean / p.overdispersion, p.overdispersion);
  const double rate = gamma(rng);
  if (rate <= 0.0) return 0;
  std::poisson_distribution<long> poisson(rate);
  return poisson(rng);
}

double dcm_logpmf(std::span<const long> counts, const DcmParams& p) {
  if (counts.size() != p.weights.size()) throw ContractViolation("dcm_logpmf: dimension mismatch");
  if (p.total < 0) throw ContractViolation("dcm_logpmf: negative total");
  long sum = 0;
  double weight_sum = 0.0;
  double out = 0.0;
  for (std::size_t k = 0; k < counts.size(); ++k) {
    if (counts[k] < 0) throw ContractViolation("dcm_logpmf: negative count");
    if (!(p.weights[k] > 0.0)) throw ContractViolation("dcm_logpmf: weights must be positive");
    sum += counts[k];
    weight_sum += p.weights[k];
    out += log_rising(counts[k], p.weights[k]) - log_gamma(static_cast<double>(counts[k]) + 1.0);
  }
  if (sum != p.total) throw ContractViolation("dcm_logpmf: counts do not sum to total");
  const double t = static_cast<double>(p.total);
  return out + log_gamma(t + 1.0) - log_rising(p.total, weight_sum);
}

namespace {
double log_choose(long n, long k) {
  return log_gamma(static_cast<double>(n) + 1.0) - log_gamma(static_cast<double>(k) + 1.0) -
         log_gamma(static_cast<double>(n - k) + 1.0);
}
}  // namespace

double hypergeom_logpmf(long z, long N, long Y, long n) {
  if (N < 0 || Y < 0 || Y > N || n < 0 || n > N) {
    throw ContractViolation("hypergeom_logpmf: need 0 <= Y <= N and 0 <= n <= N");
  }
  const long lo = std::max(0L, n - (N - Y));
  const long hi = std::min(n, Y);
  if (z < lo || z > hi) return kNegInf;
  return log_choose(Y, z) + log_choose(N - Y, n - z) - log_choose(N, n);
}

long hypergeom_sample(long N, long Y, long n, Rng& rng) {
  if (N < 0 || Y < 0 || Y > N || n < 0 || n > N) {
    throw ContractViolation("hypergeom_sample: need 0 <= Y <= N and 0 <= n <= N");
  }
  // Draw n units one at a time without replacement.
  long successes_left = Y;
  long remaining = N;
  long z = 0;
  for (long k = 0; k < n && successes_left > 0; ++k) {
    const double p = static_cast<double>(successes_left) / static_cast<double>(remaining);
    if (uniform01(rng) < p) {
      ++z;
      --successes_left;
    }
    --remaining;
  }
  return z;
}

double logit(double p) { return std::log(p) - std::log1p(-p); }

double inv_logit(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double logit_normal_logdensity(double r_hat, double p, double V) {
  if (!(r_hat > 0.0 && r_hat < 1.0) || !(V > 0.0)) {
    throw ContractViolation("logit_normal_logdensity: need 0 < r_hat < 1 and V > 0");
  }
  if (!(p > 0.0 && p < 1.0)) return kNegInf;
  const double diff = logit(r_hat) - logit(p);
  return -0.5 * std::log(2.0 * std::numbers::pi * V) - 0.5 * diff * diff / V;
}

double normal_logdensity(double x, double mean, double sd) {
  const double z = (x - mean) / sd;
  return -0.5 * z * z - std::log(sd) - 0.5 * std::log(2.0 * std::numbers::pi);
}

double exponential_logdensity(double x, double rate) {
  if (x < 0.0) return kNegInf;
  return std::log(rate) - rate * x;
}

double beta_logdensity(double x, double a, double b) {
  if (!(x > 0.0 && x < 1.0)) return kNegInf;
  return (a - 1.0) * std::log(x) + (b - 1.0) * std::log1p(-x) - (log_gamma(a) + log_gamma(b) - log_gamma(a + b));
}

double pc_prior_rate(double U, double alpha) {
  if (!(U > 0.0) || !(alpha > 0.0 && alpha < 1.0)) {
    throw ContractViolation("pc_prior: need U > 0 and 0 < alpha < 1");
  }
  return -std::log(alpha) / U;
}

double pc_prior_logdensity(double sigma, double U, double alpha) {
  if (sigma < 0.0) throw ContractViolation("pc_prior_logdensity: sigma must be >= 0");
  return exponential_logdensity(sigma, pc_prior_rate(U, alpha));
}

Bym2Evaluation bym2_logdensity_and_grad(const Bym2Params& p, const Eigen::VectorXd& upstream_db) {
  if (!(p.phi >= 0.0 && p.phi <= 1.0)) throw ContractViolation("bym2: phi outside [0, 1]");
  if (p.sigma2 < 0.0) throw ContractViolation("bym2: sigma2 < 0");
  const auto& s = p.structure;
  const Eigen::Index n = s.size();
  if (p.v.size() != n || p.u.size() != n || upstream_db.size() != n) {
    throw ContractViolation("bym2: dimension mismatch");
  }
  const double sigma = std::sqrt(p.sigma2);
  const double a = std::sqrt(1.0 - p.phi);
  const double c = std::sqrt(p.phi);
  const Eigen::VectorXd u_proj = s.project(p.u);
  const Eigen::VectorXd qu = s.q_star * u_proj;

  Bym2Evaluation out;
  out.log_density = -0.5 * p.v.squaredNorm() - 0.5 * u_proj.dot(qu);
  const Eigen::VectorXd mix = a * p.v + c * u_proj;
  out.b = sigma * mix;
  out.grad_v = -p.v + sigma * a * upstream_db;
  out.grad_u = s.project(-qu + sigma * c * upstream_db);
  // db/dsigma2 = mix / (2 sigma); db/dphi = sigma (-v / (2a) + Pu / (2c)).
  const double g_mix = upstream_db.dot(mix);
  out.grad_sigma2 = sigma > 0.0 ? g_mix / (2.0 * sigma) : (g_mix == 0.0 ? 0.0 : std::numeric_limits<double>::infinity());
  const double dv = upstream_db.dot(p.v);
  const double du = upstream_db.dot(u_proj);
  double gphi = 0.0;
  if (dv != 0.0) gphi += a > 0.0 ? -sigma * dv / (2.0 * a) : -std::copysign(INFINITY, dv);
  if (du != 0.0) gphi += c > 0.0 ? sigma * du / (2.0 * c) : std::copysign(INFINITY, du);
  out.grad_phi = gphi;
  return out;
}

Eigen::VectorXd sample_icar(const geo::StructureMatrix& s, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::VectorXd w(s.free_dimension());
  for (Eigen::Index k = 0; k < w.size(); ++k) w[k] = normal(rng);
  return s.from_whitened(w);
}

Eigen::VectorXd bym2_sample(double sigma2, double phi, const geo::StructureMatrix& s, Rng& rng) {
  if (!(phi >= 0.0 && phi <= 1.0) || sigma2 < 0.0) throw ContractViolation("bym2_sample: invalid parameters");
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::VectorXd v(s.size());
  for (Eigen::Index k = 0; k < v.size(); ++k) v[k] = normal(rng);
  const Eigen::VectorXd u = sample_icar(s, rng);
  return std::sqrt(sigma2) * (std::sqrt(1.0 - phi) * v + std::sqrt(phi) * u);
}

}  // namespace dabul::dist
