#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "dabul/survey.hpp"

namespace dabul::direct {

struct AreaEstimate {
  int admin1 = 0;
  double r_hat = 0.0;    // Hajek prevalence
  double v_logit = 0.0;  // design variance of logit(r_hat); NaN when degenerate
  long n_clusters = 0;
  long n_births = 0;
  long n_deaths = 0;
  bool degenerate = false;
};

struct DirectEstimates {
  std::vector<AreaEstimate> areas;  // indexed by admin1
  std::vector<std::string> warnings;
};

// sum w Z / sum w n over sampled clusters of the area.
double hajek_estimate(const survey::SurveyData& data, int admin1);

struct DesignVariance {
  double r_hat = 0.0;
  double var_ratio = 0.0;  // V(r_hat)
  double var_logit = 0.0;  // V(r_hat) / (r_hat (1 - r_hat))^2, NaN when degenerate
  bool degenerate = false;
  std::vector<std::string> notes;
};

// Stratified with-replacement PSU linearization variance of the ratio
// estimator; strata are urban/rural within the admin1 area and single-cluster
// strata are merged into the other stratum of the same area.
DesignVariance design_variance_logit(const survey::SurveyData& data, int admin1);

DirectEstimates compute_direct_estimates(const survey::SurveyData& data);

std::string format_direct(const DirectEstimates& d);
DirectEstimates read_direct(const std::filesystem::path& path, int m1);

}  // namespace dabul::direct
