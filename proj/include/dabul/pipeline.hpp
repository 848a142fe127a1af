#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dabul/direct.hpp"
#include "dabul/evalagg.hpp"
#include "dabul/geo.hpp"
#include "dabul/model.hpp"
#include "dabul/sampler.hpp"
#include "dabul/survey.hpp"

namespace dabul::pipeline {

using json = nlohmann::json;
namespace fs = std::filesystem;

inline constexpr const char* kCodeVersion = "dabul 1.0.0";

struct GeographySpec {
  std::string file;  // adjacency file; empty means synthetic lattice
  int n_admin1 = 4;
  int admin2_per_admin1 = 20;
};

struct SimulateConfig {
  survey::SimulationSetting setting = survey::preset_setting("1");
  GeographySpec geography;
  int replicates = 1;
  std::uint64_t seed = 1;
};

struct FitConfig {
  fs::path data;  // simulate output directory (geography, population, replicates/)
  std::vector<model::Variant> variants = {model::Variant::ul, model::Variant::dabul, model::Variant::exact};
  sampler::SamplerConfig sampler;
  int workers = 1;
  std::string direct_file;       // used for every replicate when set
  std::vector<int> replicates;   // 1-based; empty means all
  bool write_draws = true;
};

struct EvaluateConfig {
  fs::path data;
  fs::path fits;
};

struct StudyConfig {
  SimulateConfig simulate;
  std::vector<model::Variant> variants = {model::Variant::ul, model::Variant::dabul, model::Variant::exact};
  sampler::SamplerConfig sampler;
  int workers = 1;
};

json to_json(const survey::SimulationSetting& s);
survey::SimulationSetting setting_from_json(const json& j);
json to_json(const SimulateConfig& c);
SimulateConfig simulate_config_from_json(const json& j);
json to_json(const sampler::SamplerConfig& c);
sampler::SamplerConfig sampler_config_from_json(const json& j);
json to_json(const FitConfig& c);
FitConfig fit_config_from_json(const json& j);
json to_json(const EvaluateConfig& c);
EvaluateConfig evaluate_config_from_json(const json& j);
json to_json(const StudyConfig& c);
StudyConfig study_config_from_json(const json& j);

// {"command", "code_version", "config"}; wall time never goes here.
json make_manifest(const std::string& command, const json& config);
json read_manifest(const fs::path& path);

// A preset id ("1", "2", "3", "1a") or a path to a JSON setting file.
survey::SimulationSetting resolve_setting(const std::string& id_or_path);

std::string replicate_dir_name(int replicate);  // rep_001, ...

struct SimulatedStudy {
  geo::Geography geography;
  survey::PopulationFrame population;
  survey::RiskSurface risk;
  evalagg::Truth truth;
  std::vector<survey::SurveyData> surveys;
  std::vector<std::string> warnings;
};

SimulatedStudy simulate(const SimulateConfig& c);
void write_simulation(const SimulatedStudy& s, const SimulateConfig& c, const fs::path& out);

struct FitOutcome {
  int replicate = 0;
  model::Variant variant = model::Variant::ul;
  bool ok = false;
  std::string message;
  evalagg::FitSummary summary;
  double max_rhat = 0.0;
  double min_ess = 0.0;
  int divergences = 0;
  std::vector<std::string> warnings;
  std::optional<sampler::PosteriorDraws> draws;
};

// Seed of the sampler for one (replicate, variant) job.
std::uint64_t job_seed(std::uint64_t master, int replicate, model::Variant v);

// Assemble, sample and summarize one variant; exceptions propagate.
FitOutcome fit_variant(const geo::Geography& g, const survey::SurveyData& data, const direct::DirectEstimates& direct,
                       model::Variant variant, const sampler::SamplerConfig& cfg, bool keep_draws);

// Runs `jobs` calls of `fn(k)` over `workers` threads; fn must not throw.
void parallel_for(int jobs, int workers, const std::function<void(int)>& fn);

struct FitRunResult {
  std::vector<FitOutcome> outcomes;  // (replicate, variant) order
};

FitRunResult run_fit(const FitConfig& c, const fs::path& out);
evalagg::MetricsReport run_evaluate(const EvaluateConfig& c, const fs::path& out);
std::string render_report(const fs::path& eval_dir);

struct StudyResult {
  SimulatedStudy simulated;
  std::vector<direct::DirectEstimates> direct;
  std::vector<FitOutcome> outcomes;
  evalagg::MetricsReport metrics;
  std::vector<survey::SampleStats> sample_stats;
  double seconds = 0.0;
};

// Simulate, fit every replicate x variant in memory and evaluate. When `out`
// is given, writes the manifest, truth, per-fit summaries, metrics and a
// separate timing.json.
StudyResult run_study(const StudyConfig& c, const std::optional<fs::path>& out = std::nullopt);

}  // namespace dabul::pipeline
