#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dabul/geo.hpp"
#include "dabul/rng.hpp"

namespace dabul::survey {

enum class Stratum : int { urban = 0, rural = 1 };

std::string to_string(Stratum s);
Stratum parse_stratum(const std::string& s);

struct Cluster {
  long id = 0;  // 1-based, as written to files
  int admin1 = 0;
  int admin2 = 0;
  Stratum stratum = Stratum::urban;
  long births = 0;   // N_c
  long deaths = -1;  // Y_c; -1 when unknown (frames supplied without outcomes)
};

struct PopulationFrame {
  int m1 = 0;
  int m2 = 0;
  std::vector<Cluster> clusters;

  bool has_outcomes() const;
  std::vector<long> admin1_births() const;
  std::vector<long> admin2_births() const;
  std::vector<long> admin1_deaths() const;
  // Urban share of births per admin2 (q_j).
  std::vector<double> urban_fraction() const;
  // Share of its admin1's births held by each admin2.
  std::vector<double> admin2_population_weight() const;
  void validate() const;
};

struct SimulationSetting {
  std::string name = "custom";
  double sigma2 = 0.15 * 0.15;
  double phi = 0.25;
  double urban_fraction_sampled = 0.08;
  double rural_fraction_sampled = 0.05;
  double d_true = 0.25;
  double alpha_urban = -3.912023005428146;  // log(0.02)
  double alpha_rural = -3.6888794541139363;  // log(0.025)
  // Admin1 fixed effects; resized to m1 by evenly spaced interpolation.
  std::vector<double> beta_true = {-0.2, -0.1, -0.05, -0.025, 0.025, 0.05, 0.1, 0.5};

  double urban_clusters_mean = 700, urban_clusters_sd = 100;
  double rural_clusters_mean = 800, rural_clusters_sd = 100;
  double urban_births_mean = 100, urban_births_sd = 10;
  double rural_births_mean = 125, rural_births_sd = 10;
  // Births sampled per selected cluster: normal with these means and variances.
  double urban_sampled_births_mean = 15, urban_sampled_births_var = 4;
  double rural_sampled_births_mean = 20, rural_sampled_births_var = 4;
  bool sample_all_births = false;

  void validate() const;
};

// Named presets "1", "2", "3", "1a". Throws ContractViolation for unknown ids.
SimulationSetting preset_setting(const std::string& id);
std::vector<std::string> preset_ids();

// beta_true adapted to m1 areas (linear interpolation over the preset's index range).
std::vector<double> beta_for(const SimulationSetting& s, int m1);

PopulationFrame synthesize_population(const SimulationSetting& setting, const geo::Geography& g,
                                      std::uint64_t seed);

struct RiskSurface {
  Eigen::VectorXd b;                       // admin2 spatial effects
  std::vector<double> beta;                // admin1 effects used
  std::vector<double> cluster_rate;        // r_c, aligned with population clusters
  std::vector<double> admin2_prevalence;   // births-weighted mean risk
  std::vector<double> admin1_prevalence;
};

RiskSurface draw_risk_surface(const SimulationSetting& setting, const geo::Geography& g,
                              const PopulationFrame& population, std::uint64_t seed);

struct OutcomeDraw {
  PopulationFrame population;
  long clamped = 0;  // draws above N_c that were clamped
};

OutcomeDraw draw_outcomes(const PopulationFrame& population, const std::vector<double>& rates,
                          double d_true, std::uint64_t seed);

struct SurveyRecord {
  long cluster_id = 0;
  int admin1 = 0;
  int admin2 = 0;
  Stratum stratum = Stratum::urban;
  long frame_births = 0;  // N_c
  bool sampled = false;   // gamma_c
  long births = 0;        // n_c
  long deaths = 0;        // Z_c
  double weight = 0.0;    // (1 / pi_c) * (N_c / n_c); 0 when unsampled
};

struct SurveyData {
  int m1 = 0;
  int m2 = 0;
  std::vector<SurveyRecord> records;  // one per frame cluster, frame order

  std::size_t sampled_count() const;
  void validate() const;
};

struct SampleResult {
  SurveyData data;
  std::vector<std::string> warnings;
};

// Two-stage stratified cluster sample: systematic PPS (size = births) within
// admin1 x stratum, then simple random sampling of births within clusters.
SampleResult sample_survey(const PopulationFrame& population, const SimulationSetting& setting,
                           std::uint64_t seed);

// Systematic PPS of k units; returns (selected indices, inclusion probabilities
// for every unit). Units whose probability would exceed 1 are taken with certainty.
struct PpsSelection {
  std::vector<std::size_t> selected;
  std::vector<double> inclusion;
};
PpsSelection systematic_pps(const std::vector<double>& sizes, std::size_t k, Rng& rng);

// Averages behind the sampled-dataset rows of the simulation summary table.
struct SampleStats {
  long sampled_clusters = 0;
  long births = 0;
  long deaths = 0;
  double births_per_admin1 = 0.0;
  double deaths_per_admin1 = 0.0;
  double births_per_admin2 = 0.0;
  double deaths_per_admin2 = 0.0;
  double pct_zero_death_admin2 = 0.0;  // admin2 areas with no observed deaths, in percent
};
SampleStats sample_statistics(const SurveyData& s);

// File formats.
std::string format_population(const PopulationFrame& p);
PopulationFrame read_population(const std::filesystem::path& path);
std::string format_survey(const SurveyData& s);
// Joins the survey file onto `frame` by cluster_id.
SurveyData read_survey(const std::filesystem::path& path, const PopulationFrame& frame);

}  // namespace dabul::survey
