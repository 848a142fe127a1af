#pragma once

#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dabul/direct.hpp"
#include "dabul/dist.hpp"
#include "dabul/geo.hpp"
#include "dabul/survey.hpp"

namespace dabul::model {

enum class Variant { ul, dabul, exact };

std::string to_string(Variant v);
Variant parse_variant(const std::string& s);

struct ModelConfig {
  double intercept_mean = -3.5;
  double intercept_sd = 3.0;
  double beta_mean = 0.0;
  double beta_sd = 1.0;
  double pc_u = 1.0;  // P(sigma > pc_u) = pc_alpha
  double pc_alpha = 0.01;
  double phi_a = 0.5;
  double phi_b = 0.5;
  double d_rate = 1.0;
  Variant variant = Variant::dabul;
  geo::Nesting nesting = geo::Nesting::per_admin1;

  void validate() const;
};

struct ModelParams {
  double alpha_urban = 0.0;
  double alpha_rural = 0.0;
  Eigen::VectorXd beta;  // m1 entries, beta[0] == 0
  Eigen::VectorXd v;     // unstructured, m2
  Eigen::VectorXd u;     // structured, m2 (projected before use)
  double sigma2 = 0.0;
  double phi = 0.5;
  double d = 0.25;
};

// Model coordinates (unconstrained):
//   [alpha_U, alpha_R, beta_2..beta_m1, v_1..v_m2, u_1..u_m2, log sigma, logit phi, log d]
struct ParamLayout {
  int m1 = 0;
  int m2 = 0;

  int size() const { return 2 + (m1 - 1) + 2 * m2 + 3; }
  int alpha_urban() const { return 0; }
  int alpha_rural() const { return 1; }
  int beta(int i) const { return 2 + (i - 1); }  // i >= 1
  int v(int j) const { return 2 + (m1 - 1) + j; }
  int u(int j) const { return 2 + (m1 - 1) + m2 + j; }
  int log_sigma() const { return 2 + (m1 - 1) + 2 * m2; }
  int logit_phi() const { return log_sigma() + 1; }
  int log_d() const { return log_sigma() + 2; }

  Eigen::VectorXd pack(const ModelParams& p) const;
  ModelParams unpack(const Eigen::VectorXd& theta) const;
  std::vector<std::string> names() const;
};

// Spatial effect b = sigma (sqrt(1 - phi) v + sqrt(phi) P u).
Eigen::VectorXd spatial_effect(const ModelParams& p, const geo::StructureMatrix& s);

double risk_from_params(const ModelParams& p, const geo::StructureMatrix& s, survey::Stratum stratum,
                        int admin1, int admin2);

struct SampledCluster {
  std::size_t record = 0;  // index into SurveyData::records
  int admin1 = 0;
  int admin2 = 0;
  int cell = 0;            // 2 * admin2 + stratum
  long frame_births = 0;   // N_c
  long births = 0;         // n_c
  long deaths = 0;         // Z_c
};

// Survey data regrouped for likelihood evaluation.
struct ModelData {
  int m1 = 0;
  int m2 = 0;
  std::vector<SampledCluster> sampled;          // data-file order
  std::vector<std::vector<int>> sampled_by_admin1;
  std::vector<long> admin1_births;              // N_i
  std::vector<long> admin1_observed_deaths;     // sum of Z_c
  std::vector<double> unsampled_births_by_cell; // births in unsampled clusters, per cell
  std::vector<int> cell_admin1;
  std::vector<double> admin2_urban_share;  // q_j from frame births
  std::vector<double> admin2_weight;       // admin2 share of its admin1's births

  static ModelData build(const geo::Geography& g, const survey::SurveyData& data);
  int cells() const { return 2 * m2; }
};

struct LatentCounts {
  std::vector<long> y_sampled;       // Y_c^(s), aligned with ModelData::sampled
  std::vector<long> y_plus;          // Y_{i+}
  std::vector<long> y_plus_sampled;  // sum of y_sampled within admin1

  void recompute_sums(const ModelData& data);
  // Throws ContractViolation if Z_c <= Y_c^(s) <= Z_c + N_c - n_c or
  // Y_{i+} >= Y_{i+}^(s) fails anywhere.
  void check(const ModelData& data) const;
};

// Per-iteration quantities derived from the continuous parameters.
struct RateState {
  std::vector<double> cell_rate;      // r for (admin2, stratum)
  std::vector<double> unsampled_mean; // sum over unsampled clusters of N_c r_c, per admin1
  double d = 0.25;
};

// Log-masses over consecutive support values first, first + 1, ...
struct DiscretePmf {
  long first = 0;
  std::vector<double> log_mass;  // normalized

  double probability(long value) const;
  long last() const { return first + static_cast<long>(log_mass.size()) - 1; }
};

struct DirectTerm {
  bool active = false;
  double logit_r_hat = 0.0;
  double variance = 0.0;
};

/**
 * One assembled model variant.
 *
 *  - ul:    Z_c ~ NB(n_c r_c, d) over sampled clusters; continuous parameters only.
 *  - dabul: collapsed DCM x NB(Y_{i+}) likelihood given latent counts, with
 *           Y_{i+} and Y_c^(s) updated from their full conditionals; the
 *           logit-normal direct-estimate term enters the Y_{i+} conditional.
 *  - exact: as dabul but Y_{i+} is fixed at round(r_hat_i N_i).
 *
 * Immutable after construction.
 */
class Model {
 public:
  Model(ModelConfig config, geo::Geography geography, const survey::SurveyData& data,
        std::optional<direct::DirectEstimates> direct);

  const ModelConfig& config() const { return config_; }
  Variant variant() const { return config_.variant; }
  const geo::Geography& geography() const { return geography_; }
  const geo::StructureMatrix& structure() const { return structure_; }
  const ModelData& data() const { return data_; }
  const ParamLayout& layout() const { return layout_; }
  const std::vector<DirectTerm>& direct_terms() const { return direct_terms_; }
  const std::vector<long>& fixed_y_plus() const { return fixed_y_plus_; }
  const std::vector<std::string>& warnings() const { return warnings_; }
  bool has_latents() const { return config_.variant != Variant::ul; }

  // Log posterior in model coordinates; `grad` (if non-null) receives the gradient.
  // `latents` is required for dabul/exact and ignored for ul.
  //
  // With `marginal_yplus` (dabul only) each Y_{i+} is summed out of the
  // density instead of conditioned on, so the continuous update targets
  // p(theta | Y^(s)); the Gibbs step then redraws Y_{i+} from its full conditional.
  double log_posterior(const Eigen::VectorXd& theta, Eigen::VectorXd* grad,
                       const LatentCounts* latents = nullptr, bool marginal_yplus = false) const;
  double log_prior(const Eigen::VectorXd& theta, Eigen::VectorXd* grad) const;

  // Sampler coordinates replace u by whitened ICAR coordinates w (u = W w),
  // which removes the constrained directions.
  int sampler_dimension() const;
  Eigen::VectorXd to_model_coordinates(const Eigen::VectorXd& theta_sampler) const;
  Eigen::VectorXd to_sampler_coordinates(const Eigen::VectorXd& theta_model) const;
  double log_posterior_sampler(const Eigen::VectorXd& theta_sampler, Eigen::VectorXd* grad,
                               const LatentCounts* latents, bool marginal_yplus = false) const;

  RateState rates(const ModelParams& p) const;

  DiscretePmf yplus_conditional(int admin1, const RateState& rates, const LatentCounts& lat) const;
  DiscretePmf ycluster_conditional(int sampled_index, const RateState& rates, const LatentCounts& lat) const;

  // Unnormalized log-masses written into `out`; returns the first support value.
  long fill_yplus_conditional(int admin1, const RateState& rates, const LatentCounts& lat,
                              std::vector<double>& out) const;
  long fill_ycluster_conditional(int sampled_index, const RateState& rates, const LatentCounts& lat,
                                 std::vector<double>& out) const;

  LatentCounts initial_latents() const;

 private:
  double likelihood(const ModelParams& p, const Eigen::VectorXd& b, const LatentCounts* lat, bool marginal,
                    Eigen::VectorXd* grad_cell_eta, double* grad_d) const;
  // log sum_t NB(t - S; lam, d) exp(direct_i(t)) with its (mean, d) partials.
  dist::NegBinDerivs yplus_marginal(int admin1, double lam, double d, const LatentCounts& lat) const;

  ModelConfig config_;
  geo::Geography geography_;
  geo::StructureMatrix structure_;
  ModelData data_;
  ParamLayout layout_;
  std::vector<DirectTerm> direct_terms_;
  std::vector<std::vector<double>> direct_table_;  // direct term by Y_{i+} value, active areas only
  std::vector<std::vector<double>> direct_up_;     // exp(direct(t + 1) - direct(t))
  std::vector<std::vector<double>> direct_down_;   // exp(direct(t - 1) - direct(t))
  std::vector<long> fixed_y_plus_;
  std::vector<double> r_hat_;
  std::vector<std::string> warnings_;
};

// Throws InfeasibleError for an exact benchmark below the observed deaths,
// ContractViolation when direct estimates are required but missing.
Model assemble_variant(const ModelConfig& config, const survey::SurveyData& data,
                       const std::optional<direct::DirectEstimates>& direct, const geo::Geography& g);

struct LogDensity {
  double value;
  Eigen::VectorXd gradient;
};

LogDensity log_posterior_ul(const Model& m, const ModelParams& p);
LogDensity log_posterior_dabul_continuous(const Model& m, const ModelParams& p, const LatentCounts& lat);
// Same with each Y_{i+} summed out (dabul only).
LogDensity log_posterior_dabul_marginal(const Model& m, const ModelParams& p, const LatentCounts& lat);
DiscretePmf yplus_full_conditional(const Model& m, int admin1, const ModelParams& p, const LatentCounts& lat);
DiscretePmf ycluster_full_conditional(const Model& m, int sampled_index, const ModelParams& p,
                                      const LatentCounts& lat);

// Log-masses more than this far below the running maximum end a support scan.
inline constexpr double kTruncationNats = 40.0;

}  // namespace dabul::model
