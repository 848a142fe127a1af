#pragma once

#include <span>
#include <vector>

#include <Eigen/Dense>

#include "dabul/geo.hpp"
#include "dabul/rng.hpp"

namespace dabul::dist {

// Mean / overdispersion parameterization: E = mean, Var = (1 + d) * mean.
struct NegBinParams {
  double mean = 0.0;
  double overdispersion = 1.0;
};

struct DcmParams {
  long total = 0;
  std::vector<double> weights;  // strictly positive
};

// Thread-safe log-gamma (no global sign side effect).
double log_gamma(double x);
double digamma(double x);

// lgamma(z + a) - lgamma(a) for integer z >= 0, summed directly for small z.
double log_rising(long z, double a);
// log z!, tabulated for small z.
double log_factorial(long z);
// digamma(z + a) - digamma(a).
double digamma_rising(long z, double a);

double negbin_logpmf(long z, const NegBinParams& p);

struct NegBinDerivs {
  double value;
  double d_mean;
  double d_overdispersion;
};
// Value and partial derivatives of negbin_logpmf in (mean, d); requires mean > 0.
NegBinDerivs negbin_logpmf_derivs(long z, double mean, double d);
// Same with log(d) and log1p(d) supplied by a caller that loops over clusters.
NegBinDerivs negbin_logpmf_derivs(long z, double mean, double d, double log_d, double log1p_d);

// Gamma(shape = mean/d, scale = d) mixed Poisson.
long negbin_sample(const NegBinParams& p, Rng& rng);

// Multivariate Polya. Throws ContractViolation if counts do not sum to total
// or dimensions disagree.
double dcm_logpmf(std::span<const long> counts, const DcmParams& p);

// N = population size, Y = successes in population, n = draws; z successes drawn.
double hypergeom_logpmf(long z, long N, long Y, long n);
long hypergeom_sample(long N, long Y, long n, Rng& rng);

double logit(double p);
double inv_logit(double x);

// Normal density of logit(r_hat) with mean logit(p) and variance V (density in
// the logit argument). p in {0, 1} gives -inf.
double logit_normal_logdensity(double r_hat, double p, double V);

double normal_logdensity(double x, double mean, double sd);
double exponential_logdensity(double x, double rate);
double beta_logdensity(double x, double a, double b);

// Exponential rate with P(sigma > U) = alpha.
double pc_prior_rate(double U, double alpha);
double pc_prior_logdensity(double sigma, double U, double alpha);

struct Bym2Params {
  double sigma2 = 0.0;
  double phi = 0.0;
  Eigen::VectorXd v;
  Eigen::VectorXd u;
  const geo::StructureMatrix& structure;
};

struct Bym2Evaluation {
  double log_density = 0.0;
  Eigen::VectorXd b;
  Eigen::VectorXd grad_v;
  Eigen::VectorXd grad_u;
  double grad_sigma2 = 0.0;
  double grad_phi = 0.0;
};

/**
 * Non-centred BYM2 field b = sigma * (sqrt(1 - phi) v + sqrt(phi) P u), where
 * P removes per-block means, v is iid standard normal and u a scaled ICAR
 * field. log_density = -v'v/2 - (Pu)' Q_* (Pu) / 2; the rank-deficient
 * normalizing constant is dropped and nothing else depends on (sigma2, phi).
 *
 * `upstream_db` is the gradient of some downstream term L with respect to b;
 * the returned gradients are those of log_density + L. Pass a zero vector for
 * the prior alone.
 */
Bym2Evaluation bym2_logdensity_and_grad(const Bym2Params& p, const Eigen::VectorXd& upstream_db);

Eigen::VectorXd sample_icar(const geo::StructureMatrix& s, Rng& rng);
Eigen::VectorXd bym2_sample(double sigma2, double phi, const geo::StructureMatrix& s, Rng& rng);

}  // namespace dabul::dist
