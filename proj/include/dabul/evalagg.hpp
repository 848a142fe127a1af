#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dabul/direct.hpp"
#include "dabul/geo.hpp"
#include "dabul/sampler.hpp"

namespace dabul::evalagg {

// Per draw r_j = q_j r_j^U + (1 - q_j) r_j^R; rows are draws, columns admin2 areas.
Eigen::MatrixXd aggregate_urban_rural(const Eigen::MatrixXd& urban, const Eigen::MatrixXd& rural,
                                      const std::vector<double>& q);

// Population-weighted mean within each admin1. Weights are renormalized per
// admin1; a pre-normalization sum off by more than 1e-6 adds a warning.
Eigen::MatrixXd aggregate_to_admin1(const Eigen::MatrixXd& admin2, const std::vector<int>& admin1_of,
                                    const std::vector<double>& weights, int m1,
                                    std::vector<std::string>* warnings = nullptr);

struct Summary {
  double mean = 0.0;
  double sd = 0.0;
  double q05 = 0.0;
  double q95 = 0.0;
};

// Mean, sd and equal-tailed 90% interval (linear-interpolated quantiles).
Summary summarize(std::vector<double> draws);

struct FitSummary {
  std::vector<Summary> admin2;
  std::vector<Summary> admin1;
};

FitSummary summarize_draws(const sampler::PosteriorDraws& draws, const geo::Geography& g,
                           const std::vector<double>& admin2_weight);

std::string format_fit_summary(const FitSummary& s);
FitSummary read_fit_summary(const std::filesystem::path& path, int m1, int m2);

struct Truth {
  std::vector<double> admin2;
  std::vector<double> admin1;
};

std::string format_truth(const Truth& t);
Truth read_truth(const std::filesystem::path& path);

struct ReplicateInput {
  int replicate = 0;
  std::map<std::string, FitSummary> fits;  // keyed by model name ("ul", "dabul", "exact")
  direct::DirectEstimates direct;
};

struct MetricRow {
  int replicate = 0;
  std::string model;
  std::string area_level;  // "admin1" or "admin2"
  int area_id = 0;         // 1-based
  std::string metric;      // discrepancy, abs_error, coverage90, cv
  double value = 0.0;
};

struct SummaryRow {
  std::string model;
  std::string metric;
  double mean = 0.0;
  double median = 0.0;
  long n = 0;
};

struct AppendixRow {
  int replicate = 0;
  int admin1 = 0;  // 1-based
  double discrepancy_ul = 0.0;
  double discrepancy_dabul = 0.0;
  double percent_decrease = 0.0;
};

struct PercentDecrease {
  std::vector<double> per_area_median;  // median over replicates, per admin1 (NaN if none)
  double median = 0.0;                  // median over areas of per_area_median
  double mean = 0.0;                    // mean over all (replicate, area) pairs
  long n = 0;
  long excluded = 0;                    // pairs with zero UL discrepancy
};

struct MetricsReport {
  std::vector<MetricRow> rows;
  std::vector<SummaryRow> summary;
  bool has_percent_decrease = false;
  PercentDecrease percent_decrease;
  PercentDecrease appendix_percent_decrease;  // UL discrepancy > threshold only
  std::vector<AppendixRow> appendix;
  std::vector<std::string> notes;

  // Summary value lookup; NaN when absent.
  double summary_value(const std::string& model, const std::string& metric, bool median = true) const;
};

inline constexpr double kAppendixThreshold = 0.001;

/**
 * Per replicate and model: admin1 discrepancy |mean - r_hat|, admin2 absolute
 * error |mean - truth|, 90% coverage indicator and CV = sd / mean. Summaries
 * take mean and median over (replicate, area) pairs, except coverage whose
 * median is over admin2 areas of the per-area replicate average.
 */
MetricsReport compute_metrics(const std::vector<ReplicateInput>& inputs, const Truth& truth);

std::string format_metrics(const MetricsReport& r);
std::string format_summary(const MetricsReport& r);
std::string format_appendix(const MetricsReport& r);

double median(std::vector<double> v);

}  // namespace dabul::evalagg
