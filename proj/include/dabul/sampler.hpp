#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dabul/diagnostics.hpp"
#include "dabul/model.hpp"
#include "dabul/nuts.hpp"
#include "dabul/rng.hpp"

namespace dabul::sampler {

struct SamplerConfig {
  int iterations = 1000;  // post-warmup draws per chain (M)
  int warmup = 1000;
  int chains = 4;
  // Initial step size; 0 means search for one. With adapt_step_size off a
  // positive value is used unchanged (pinned).
  double step_size = 0.0;
  bool adapt_step_size = true;
  bool adapt_metric = true;
  Eigen::VectorXd inv_metric;  // diagonal Sigma; empty means identity
  int max_tree_depth = 10;
  std::uint64_t seed = 1;
  double target_accept = 0.8;
  int workers = 1;  // threads used for chains
  bool keep_cluster_latents = true;  // store Y_c^(s) columns
  // dabul: the NUTS step targets theta with each Y_{i+} summed out, and the
  // Gibbs stage redraws Y_{i+} right after. Off gives the plain alternation,
  // which mixes slowly because Y_{i+} and beta_i are tightly coupled.
  bool marginalize_yplus = true;

  void validate() const;
};

struct ChainDraws {
  Eigen::MatrixXd values;  // iterations x columns
  std::vector<char> divergent;
  std::vector<int> tree_depth;
  std::vector<double> accept_stat;
  double step_size = 0.0;
  Eigen::VectorXd inv_metric;
  int warmup_divergences = 0;
};

struct PosteriorDraws {
  model::Variant variant = model::Variant::ul;
  int m1 = 0;
  int m2 = 0;
  std::vector<std::string> columns;
  std::vector<ChainDraws> chains;
  std::vector<std::string> warnings;

  // First column of each block; -1 when absent.
  int col_alpha_u = 0, col_alpha_r = 1, col_beta = 2, col_b = -1, col_sigma2 = -1, col_phi = -1, col_d = -1,
      col_risk = -1, col_y_sampled = -1, col_y_plus = -1;
  int n_sampled = 0;

  std::size_t draw_count() const;
  int column_index(const std::string& name) const;  // -1 when absent
  std::vector<std::vector<double>> by_chain(int col) const;
  std::vector<double> pooled(int col) const;
  int divergences() const;
};

// Smallest support index whose cumulative probability reaches u; log-masses
// need not be normalized. Throws NumericalError when no mass is finite.
long inverse_transform_sample(const std::vector<double>& log_masses, double u, long first = 0);

// One Gibbs pass over the discrete latents given the continuous state:
// each Y_{i+} (dabul only), then every sampled cluster in data order.
void gibbs_sweep(const model::Model& m, const model::RateState& rates, model::LatentCounts& lat, Rng& rng,
                 std::vector<double>& buffer);

// Over-dispersed starting point in sampler coordinates.
Eigen::VectorXd initial_point(const model::Model& m, Rng& rng);

ChainDraws run_chain(const model::Model& m, const SamplerConfig& cfg, int chain_index);

PosteriorDraws run_sampler(const model::Model& m, const SamplerConfig& cfg);
PosteriorDraws run_dabul(const model::Model& m, const SamplerConfig& cfg);
PosteriorDraws run_exact_dabul(const model::Model& m, const SamplerConfig& cfg);
PosteriorDraws run_standard_ul(const model::Model& m, const SamplerConfig& cfg);

std::vector<ParamDiagnostic> diagnostics(const PosteriorDraws& draws);

// One delimited table per chain: parameter columns + divergent + tree_depth.
std::string format_chain_draws(const PosteriorDraws& draws, int chain);

}  // namespace dabul::sampler
