#include "dabul/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <thread>

#include "dabul/errors.hpp"
#include "dabul/rng.hpp"
#include "dabul/table_io.hpp"

namespace dabul::pipeline {

namespace {

template <class T>
T get_or(const json& j, const char* key, T fallback) {
  if (!j.contains(key) || j.at(key).is_null()) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ParseError(std::string("config key '") + key + "': " + e.what());
  }
}

std::string one_line(std::string s) {
  for (char& ch : s) {
    if (ch == '\n' || ch == '\r') ch = ' ';
    if (ch == ',') ch = ';';
  }
  return s;
}

std::vector<std::string> variant_names(const std::vector<model::Variant>& v) {
  std::vector<std::string> out;
  for (auto x : v) out.push_back(model::to_string(x));
  return out;
}

std::vector<model::Variant> variants_from(const json& j) {
  std::vector<model::Variant> out;
  for (const auto& s : j.get<std::vector<std::string>>()) out.push_back(model::parse_variant(s));
  if (out.empty()) throw ContractViolation("no model variants requested");
  return out;
}

}  // namespace

json to_json(const survey::SimulationSetting& s) {
  return json{{"name", s.name},
              {"sigma2", s.sigma2},
              {"phi", s.phi},
              {"urban_fraction_sampled", s.urban_fraction_sampled},
              {"rural_fraction_sampled", s.rural_fraction_sampled},
              {"d_true", s.d_true},
              {"alpha_urban", s.alpha_urban},
              {"alpha_rural", s.alpha_rural},
              {"beta_true", s.beta_true},
              {"urban_clusters_mean", s.urban_clusters_mean},
              {"urban_clusters_sd", s.urban_clusters_sd},
              {"rural_clusters_mean", s.rural_clusters_mean},
              {"rural_clusters_sd", s.rural_clusters_sd},
              {"urban_births_mean", s.urban_births_mean},
              {"urban_births_sd", s.urban_births_sd},
              {"rural_births_mean", s.rural_births_mean},
              {"rural_births_sd", s.rural_births_sd},
              {"urban_sampled_births_mean", s.urban_sampled_births_mean},
              {"urban_sampled_births_var", s.urban_sampled_births_var},
              {"rural_sampled_births_mean", s.rural_sampled_births_mean},
              {"rural_sampled_births_var", s.rural_sampled_births_var},
              {"sample_all_births", s.sample_all_births}};
}

survey::SimulationSetting setting_from_json(const json& j) {
  // Start from a preset when one is named, then apply overrides.
  survey::SimulationSetting s;
  const std::string base = get_or<std::string>(j, "preset", "");
  if (!base.empty()) s = survey::preset_setting(base);
  s.name = get_or(j, "name", s.name);
  s.sigma2 = get_or(j, "sigma2", s.sigma2);
  s.phi = get_or(j, "phi", s.phi);
  s.urban_fraction_sampled = get_or(j, "urban_fraction_sampled", s.urban_fraction_sampled);
  s.rural_fraction_sampled = get_or(j, "rural_fraction_sampled", s.rural_fraction_sampled);
  s.d_true = get_or(j, "d_true", s.d_true);
  s.alpha_urban = get_or(j, "alpha_urban", s.alpha_urban);
  s.alpha_rural = get_or(j, "alpha_rural", s.alpha_rural);
  s.beta_true = get_or(j, "beta_true", s.beta_true);
  s.urban_clusters_mean = get_or(j, "urban_clusters_mean", s.urban_clusters_mean);
  s.urban_clusters_sd = get_or(j, "urban_clusters_sd", s.urban_clusters_sd);
  s.rural_clusters_mean = get_or(j, "rural_clusters_mean", s.rural_clusters_mean);
  s.rural_clusters_sd = get_or(j, "rural_clusters_sd", s.rural_clusters_sd);
  s.urban_births_mean = get_or(j, "urban_births_mean", s.urban_births_mean);
  s.urban_births_sd = get_or(j, "urban_births_sd", s.urban_births_sd);
  s.rural_births_mean = get_or(j, "rural_births_mean", s.rural_births_mean);
  s.rural_births_sd = get_or(j, "rural_births_sd", s.rural_births_sd);
  s.urban_sampled_births_mean = get_or(j, "urban_sampled_births_mean", s.urban_sampled_births_mean);
  s.urban_sampled_births_var = get_or(j, "urban_sampled_births_var", s.urban_sampled_births_var);
  s.rural_sampled_births_mean = get_or(j, "rural_sampled_births_mean", s.rural_sampled_births_mean);
  s.rural_sampled_births_var = get_or(j, "rural_sampled_births_var", s.rural_sampled_births_var);
  s.sample_all_births = get_or(j, "sample_all_births", s.sample_all_births);
  s.validate();
  return s;
}

json to_json(const SimulateConfig& c) {
  return json{{"setting", to_json(c.setting)},
              {"geography",
               {{"file", c.geography.file},
                {"n_admin1", c.geography.n_admin1},
                {"admin2_per_admin1", c.geography.admin2_per_admin1}}},
              {"replicates", c.replicates},
              {"seed", c.seed}};
}

SimulateConfig simulate_config_from_json(const json& j) {
  SimulateConfig c;
  if (j.contains("setting")) c.setting = setting_from_json(j.at("setting"));
  if (j.contains("geography")) {
    const json& g = j.at("geography");
    c.geography.file = get_or<std::string>(g, "file", "");
    c.geography.n_admin1 = get_or(g, "n_admin1", c.geography.n_admin1);
    c.geography.admin2_per_admin1 = get_or(g, "admin2_per_admin1", c.geography.admin2_per_admin1);
  }
  c.replicates = get_or(j, "replicates", c.replicates);
  c.seed = get_or<std::uint64_t>(j, "seed", c.seed);
  if (c.replicates < 1) throw ContractViolation("replicates must be >= 1");
  return c;
}

json to_json(const sampler::SamplerConfig& c) {
  return json{{"iterations", c.iterations},       {"warmup", c.warmup},
              {"chains", c.chains},               {"step_size", c.step_size},
              {"adapt_step_size", c.adapt_step_size}, {"adapt_metric", c.adapt_metric},
              {"max_tree_depth", c.max_tree_depth}, {"seed", c.seed},
              {"target_accept", c.target_accept},  {"keep_cluster_latents", c.keep_cluster_latents},
              {"marginalize_yplus", c.marginalize_yplus}};
}

sampler::SamplerConfig sampler_config_from_json(const json& j) {
  sampler::SamplerConfig c;
  c.iterations = get_or(j, "iterations", c.iterations);
  c.warmup = get_or(j, "warmup", c.warmup);
  c.chains = get_or(j, "chains", c.chains);
  c.step_size = get_or(j, "step_size", c.step_size);
  c.adapt_step_size = get_or(j, "adapt_step_size", c.adapt_step_size);
  c.adapt_metric = get_or(j, "adapt_metric", c.adapt_metric);
  c.max_tree_depth = get_or(j, "max_tree_depth", c.max_tree_depth);
  c.seed = get_or<std::uint64_t>(j, "seed", c.seed);
  c.target_accept = get_or(j, "target_accept", c.target_accept);
  c.keep_cluster_latents = get_or(j, "keep_cluster_latents", c.keep_cluster_latents);
  c.marginalize_yplus = get_or(j, "marginalize_yplus", c.marginalize_yplus);
  c.validate();
  return c;
}

json to_json(const FitConfig& c) {
  return json{{"data", c.data.string()},         {"variants", variant_names(c.variants)},
              {"sampler", to_json(c.sampler)},   {"workers", c.workers},
              {"direct_file", c.direct_file},    {"replicates", c.replicates},
              {"write_draws", c.write_draws}};
}

FitConfig fit_config_from_json(const json& j) {
  FitConfig c;
  c.data = get_or<std::string>(j, "data", "");
  if (j.contains("variants")) c.variants = variants_from(j.at("variants"));
  if (j.contains("sampler")) c.sampler = sampler_config_from_json(j.at("sampler"));
  c.workers = get_or(j, "workers", c.workers);
  c.direct_file = get_or<std::string>(j, "direct_file", "");
  c.replicates = get_or(j, "replicates", c.replicates);
  c.write_draws = get_or(j, "write_draws", c.write_draws);
  return c;
}

json to_json(const EvaluateConfig& c) { return json{{"data", c.data.string()}, {"fits", c.fits.string()}}; }

EvaluateConfig evaluate_config_from_json(const json& j) {
  EvaluateConfig c;
  c.data = get_or<std::string>(j, "data", "");
  c.fits = get_or<std::string>(j, "fits", "");
  return c;
}

json to_json(const StudyConfig& c) {
  return json{{"simulate", to_json(c.simulate)},
              {"variants", variant_names(c.variants)},
              {"sampler", to_json(c.sampler)},
              {"workers", c.workers}};
}

StudyConfig study_config_from_json(const json& j) {
  StudyConfig c;
  if (j.contains("simulate")) c.simulate = simulate_config_from_json(j.at("simulate"));
  if (j.contains("variants")) c.variants = variants_from(j.at("variants"));
  if (j.contains("sampler")) c.sampler = sampler_config_from_json(j.at("sampler"));
  c.workers = get_or(j, "workers", c.workers);
  return c;
}

json make_manifest(const std::string& command, const json& config) {
  return json{{"command", command}, {"code_version", kCodeVersion}, {"config", config}};
}

json read_manifest(const fs::path& path) {
  const std::string text = io::read_text_file(path);
  try {
    json j = json::parse(text);
    if (!j.contains("command") || !j.contains("config")) throw ParseError(path.string() + ": not a manifest");
    return j;
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

survey::SimulationSetting resolve_setting(const std::string& id) {
  const auto ids = survey::preset_ids();
  if (std::find(ids.begin(), ids.end(), id) != ids.end()) return survey::preset_setting(id);
  if (fs::exists(id)) {
    try {
      return setting_from_json(json::parse(io::read_text_file(id)));
    } catch (const json::exception& e) {
      throw ParseError(id + ": " + e.what());
    }
  }
  throw ContractViolation("unknown setting '" + id + "' (expected 1, 2, 3, 1a or a JSON file)");
}

std::string replicate_dir_name(int r) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "rep_%03d", r);
  return buf;
}

std::uint64_t job_seed(std::uint64_t master, int replicate, model::Variant v) {
  return derive_seed(master, {stream::chain, static_cast<std::uint64_t>(replicate), static_cast<std::uint64_t>(v)});
}

SimulatedStudy simulate(const SimulateConfig& c) {
  c.setting.validate();
  if (c.replicates < 1) throw ContractViolation("replicates must be >= 1");
  SimulatedStudy s;
  s.geography = c.geography.file.empty()
                    ? geo::generate_synthetic_geography(c.geography.n_admin1, c.geography.admin2_per_admin1,
                                                        derive_seed(c.seed, {stream::geography}))
                    : geo::load_geography(c.geography.file);
  const auto frame = survey::synthesize_population(c.setting, s.geography, derive_seed(c.seed, {stream::population}));
  s.risk = survey::draw_risk_surface(c.setting, s.geography, frame, derive_seed(c.seed, {stream::risk}));
  auto outcomes = survey::draw_outcomes(frame, s.risk.cluster_rate, c.setting.d_true, derive_seed(c.seed, {stream::outcomes}));
  s.population = std::move(outcomes.population);
  if (outcomes.clamped > 0) {
    s.warnings.push_back(std::to_string(outcomes.clamped) + " cluster death counts clamped to births");
  }
  s.truth.admin1 = s.risk.admin1_prevalence;
  s.truth.admin2 = s.risk.admin2_prevalence;
  for (int r = 1; r <= c.replicates; ++r) {
    auto res = survey::sample_survey(s.population, c.setting, derive_seed(c.seed, {stream::survey, static_cast<std::uint64_t>(r)}));
    for (const auto& w : res.warnings) s.warnings.push_back(replicate_dir_name(r) + ": " + w);
    s.surveys.push_back(std::move(res.data));
  }
  return s;
}

void write_simulation(const SimulatedStudy& s, const SimulateConfig& c, const fs::path& out) {
  io::write_text_file(out / "geography.txt", geo::format_geography(s.geography));
  io::write_text_file(out / "population.csv", survey::format_population(s.population));
  io::write_text_file(out / "truth.csv", evalagg::format_truth(s.truth));
  for (std::size_t r = 0; r < s.surveys.size(); ++r) {
    io::write_text_file(out / "replicates" / replicate_dir_name(static_cast<int>(r) + 1) / "survey.csv",
                        survey::format_survey(s.surveys[r]));
  }
  json m = make_manifest("simulate", to_json(c));
  m["warnings"] = s.warnings;
  io::write_text_file(out / "manifest.json", m.dump(2) + "\n");
}

FitOutcome fit_variant(const geo::Geography& g, const survey::SurveyData& data, const direct::DirectEstimates& direct,
                       model::Variant variant, const sampler::SamplerConfig& cfg, bool keep_draws) {
  model::ModelConfig mc;
  mc.variant = variant;
  std::optional<direct::DirectEstimates> d;
  if (variant != model::Variant::ul) d = direct;
  const model::Model m = model::assemble_variant(mc, data, d, g);
  const sampler::PosteriorDraws draws = sampler::run_sampler(m, cfg);

  FitOutcome out;
  out.variant = variant;
  out.ok = true;
  out.summary = evalagg::summarize_draws(draws, g, m.data().admin2_weight);
  out.divergences = draws.divergences();
  out.warnings = draws.warnings;
  out.max_rhat = 1.0;
  out.min_ess = static_cast<double>(draws.draw_count());
  if (cfg.iterations >= 4) {
    for (const auto& dg : sampler::diagnostics(draws)) {
      if (std::isfinite(dg.rhat)) out.max_rhat = std::max(out.max_rhat, dg.rhat);
      else out.max_rhat = dg.rhat;
      if (std::isfinite(dg.ess_bulk)) out.min_ess = std::min(out.min_ess, dg.ess_bulk);
    }
  }
  if (keep_draws) out.draws = draws;
  return out;
}

void parallel_for(int jobs, int workers, const std::function<void(int)>& fn) {
  workers = std::max(1, std::min(workers, jobs));
  if (workers == 1) {
    for (int k = 0; k < jobs; ++k) fn(k);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (int k = next++; k < jobs; k = next++) fn(k);
    });
  }
  for (auto& t : pool) t.join();
}

namespace {

std::string format_status(const std::vector<FitOutcome>& outcomes) {
  std::ostringstream out;
  out << "replicate,model,status,max_rhat,min_ess_bulk,divergences,message\n";
  for (const auto& o : outcomes) {
    std::string msg = o.message;
    for (const auto& w : o.warnings) msg += (msg.empty() ? "" : " | ") + w;
    out << o.replicate << ',' << model::to_string(o.variant) << ',' << (o.ok ? "ok" : "failed") << ','
        << (o.ok ? io::format_double(o.max_rhat) : "NA") << ',' << (o.ok ? io::format_double(o.min_ess) : "NA") << ','
        << o.divergences << ',' << one_line(msg) << '\n';
  }
  return out.str();
}

std::vector<int> replicate_ids(const fs::path& data, const std::vector<int>& requested) {
  if (!requested.empty()) return requested;
  std::vector<int> ids;
  const fs::path dir = data / "replicates";
  if (!fs::is_directory(dir)) throw ParseError(dir.string() + ": no replicates directory");
  for (const auto& e : fs::directory_iterator(dir)) {
    const std::string name = e.path().filename().string();
    if (name.rfind("rep_", 0) == 0) ids.push_back(std::stoi(name.substr(4)));
  }
  std::sort(ids.begin(), ids.end());
  if (ids.empty()) throw ParseError(dir.string() + ": no replicate directories");
  return ids;
}

// Chain draw files back into pooled draws of the admin2 risk columns.
evalagg::FitSummary summary_from_draw_files(const fs::path& dir, const geo::Geography& g,
                                            const std::vector<double>& weights) {
  sampler::PosteriorDraws d;
  d.m1 = g.m1;
  d.m2 = g.m2;
  for (int c = 1;; ++c) {
    const fs::path p = dir / ("draws_chain_" + std::to_string(c) + ".csv");
    if (!fs::exists(p)) break;
    const io::Table t = io::read_table(p);
    if (d.columns.empty()) {
      d.columns = t.header;
      d.col_risk = d.column_index("risk_1");
      if (d.col_risk < 0) throw ParseError(p.string() + ": no risk columns");
    }
    sampler::ChainDraws ch;
    ch.values.resize(static_cast<Eigen::Index>(t.rows.size()), g.m2);
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
      for (int j = 0; j < g.m2; ++j) {
        ch.values(static_cast<Eigen::Index>(r), j) =
            io::parse_double(t.rows[r][d.col_risk + j], p.string() + " row " + std::to_string(r + 1));
      }
    }
    d.chains.push_back(std::move(ch));
  }
  if (d.chains.empty()) throw ParseError(dir.string() + ": neither summary.csv nor draw files");
  d.col_risk = 0;
  return evalagg::summarize_draws(d, g, weights);
}

std::vector<double> frame_admin2_weights(const survey::PopulationFrame& p, const geo::Geography& g) {
  const auto w = p.admin2_population_weight();
  if (static_cast<int>(w.size()) != g.m2) throw ContractViolation("population frame does not match the geography");
  return w;
}

}  // namespace

FitRunResult run_fit(const FitConfig& c, const fs::path& out) {
  c.sampler.validate();
  const geo::Geography g = geo::load_geography(c.data / "geography.txt");
  const survey::PopulationFrame frame = survey::read_population(c.data / "population.csv");
  const std::vector<int> reps = replicate_ids(c.data, c.replicates);

  std::optional<direct::DirectEstimates> injected;
  if (!c.direct_file.empty()) injected = direct::read_direct(c.direct_file, g.m1);

  struct Job {
    int replicate;
    model::Variant variant;
  };
  std::vector<Job> jobs;
  for (int r : reps) {
    for (auto v : c.variants) jobs.push_back({r, v});
  }
  // Direct estimates once per replicate, before the parallel section.
  std::vector<survey::SurveyData> surveys;
  std::vector<direct::DirectEstimates> directs;
  for (int r : reps) {
    const fs::path rdir = c.data / "replicates" / replicate_dir_name(r);
    surveys.push_back(survey::read_survey(rdir / "survey.csv", frame));
    directs.push_back(injected ? *injected : direct::compute_direct_estimates(surveys.back()));
    io::write_text_file(out / replicate_dir_name(r) / "direct.csv", direct::format_direct(directs.back()));
  }

  FitRunResult result;
  result.outcomes.resize(jobs.size());
  parallel_for(static_cast<int>(jobs.size()), c.workers, [&](int k) {
    const Job& job = jobs[k];
    const auto idx = static_cast<std::size_t>(std::find(reps.begin(), reps.end(), job.replicate) - reps.begin());
    FitOutcome& o = result.outcomes[k];
    try {
      sampler::SamplerConfig sc = c.sampler;
      sc.seed = job_seed(c.sampler.seed, job.replicate, job.variant);
      sc.workers = 1;
      o = fit_variant(g, surveys[idx], directs[idx], job.variant, sc, c.write_draws);
      const fs::path vdir = out / replicate_dir_name(job.replicate) / model::to_string(job.variant);
      io::write_text_file(vdir / "summary.csv", evalagg::format_fit_summary(o.summary));
      if (o.draws) {
        for (std::size_t ch = 0; ch < o.draws->chains.size(); ++ch) {
          io::write_text_file(vdir / ("draws_chain_" + std::to_string(ch + 1) + ".csv"),
                              sampler::format_chain_draws(*o.draws, static_cast<int>(ch)));
        }
        std::ostringstream diag;
        diag << "parameter,rhat,ess_bulk,constant\n";
        for (const auto& dg : sampler::diagnostics(*o.draws)) {
          diag << dg.name << ',' << io::format_double(dg.rhat) << ',' << io::format_double(dg.ess_bulk) << ','
               << (dg.constant ? 1 : 0) << '\n';
        }
        io::write_text_file(vdir / "diagnostics.csv", diag.str());
        o.draws.reset();
      }
    } catch (const std::exception& e) {
      o = FitOutcome{};
      o.ok = false;
      o.message = e.what();
    }
    o.replicate = job.replicate;
    o.variant = job.variant;
  });
  io::write_text_file(out / "fit_status.csv", format_status(result.outcomes));
  io::write_text_file(out / "manifest.json", make_manifest("fit", to_json(c)).dump(2) + "\n");
  return result;
}

evalagg::MetricsReport run_evaluate(const EvaluateConfig& c, const fs::path& out) {
  const geo::Geography g = geo::load_geography(c.data / "geography.txt");
  const survey::PopulationFrame frame = survey::read_population(c.data / "population.csv");
  const auto weights = frame_admin2_weights(frame, g);
  const fs::path truth_path = c.data / "truth.csv";
  const evalagg::Truth truth = evalagg::read_truth(truth_path);
  if (static_cast<int>(truth.admin1.size()) != g.m1 || static_cast<int>(truth.admin2.size()) != g.m2) {
    throw ParseError(truth_path.string() + ": area ids do not match the geography");
  }
  std::vector<evalagg::ReplicateInput> inputs;
  for (const auto& e : fs::directory_iterator(c.fits)) {
    const std::string name = e.path().filename().string();
    if (!e.is_directory() || name.rfind("rep_", 0) != 0) continue;
    evalagg::ReplicateInput in;
    in.replicate = std::stoi(name.substr(4));
    in.direct = direct::read_direct(e.path() / "direct.csv", g.m1);
    for (const char* v : {"ul", "dabul", "exact"}) {
      const fs::path vdir = e.path() / v;
      if (!fs::is_directory(vdir)) continue;
      const fs::path sp = vdir / "summary.csv";
      in.fits[v] = fs::exists(sp) ? evalagg::read_fit_summary(sp, g.m1, g.m2) : summary_from_draw_files(vdir, g, weights);
    }
    if (!in.fits.empty()) inputs.push_back(std::move(in));
  }
  if (inputs.empty()) throw ParseError(c.fits.string() + ": no fitted replicates found");
  std::sort(inputs.begin(), inputs.end(), [](const auto& a, const auto& b) { return a.replicate < b.replicate; });
  const evalagg::MetricsReport rep = evalagg::compute_metrics(inputs, truth);
  io::write_text_file(out / "metrics.csv", evalagg::format_metrics(rep));
  io::write_text_file(out / "summary.csv", evalagg::format_summary(rep));
  io::write_text_file(out / "appendix_b.csv", evalagg::format_appendix(rep));
  io::write_text_file(out / "manifest.json", make_manifest("evaluate", to_json(c)).dump(2) + "\n");
  return rep;
}

std::string render_report(const fs::path& eval_dir) {
  const io::Table t = io::read_table(eval_dir / "summary.csv");
  const auto mo = t.column("model"), me = t.column("metric"), mean = t.column("mean"), med = t.column("median"),
             n = t.column("n");
  std::ostringstream out;
  char line[256];
  std::snprintf(line, sizeof line, "%-12s %-26s %14s %14s %8s\n", "model", "metric", "mean", "median", "n");
  out << line;
  for (const auto& row : t.rows) {
    const double a = io::parse_double(row[mean], t.source), b = io::parse_double(row[med], t.source);
    std::snprintf(line, sizeof line, "%-12s %-26s %14.6g %14.6g %8s\n", row[mo].c_str(), row[me].c_str(), a, b,
                  row[n].c_str());
    out << line;
  }
  return out.str();
}

StudyResult run_study(const StudyConfig& c, const std::optional<fs::path>& out) {
  const auto t0 = std::chrono::steady_clock::now();
  c.sampler.validate();
  StudyResult res;
  res.simulated = simulate(c.simulate);
  const auto& S = res.simulated;
  const auto weights = frame_admin2_weights(S.population, S.geography);
  (void)weights;
  for (const auto& sv : S.surveys) {
    res.direct.push_back(direct::compute_direct_estimates(sv));
    res.sample_stats.push_back(survey::sample_statistics(sv));
  }
  const int R = static_cast<int>(S.surveys.size());
  const int V = static_cast<int>(c.variants.size());
  res.outcomes.resize(static_cast<std::size_t>(R * V));
  parallel_for(R * V, c.workers, [&](int k) {
    const int r = k / V;
    const model::Variant v = c.variants[k % V];
    FitOutcome& o = res.outcomes[k];
    try {
      sampler::SamplerConfig sc = c.sampler;
      sc.seed = job_seed(c.sampler.seed, r + 1, v);
      sc.workers = 1;
      sc.keep_cluster_latents = false;
      o = fit_variant(S.geography, S.surveys[r], res.direct[r], v, sc, false);
    } catch (const std::exception& e) {
      o = FitOutcome{};
      o.ok = false;
      o.message = e.what();
    }
    o.replicate = r + 1;
    o.variant = v;
  });

  std::vector<evalagg::ReplicateInput> inputs(R);
  for (int r = 0; r < R; ++r) {
    inputs[r].replicate = r + 1;
    inputs[r].direct = res.direct[r];
  }
  for (const auto& o : res.outcomes) {
    if (o.ok) inputs[o.replicate - 1].fits[model::to_string(o.variant)] = o.summary;
  }
  res.metrics = evalagg::compute_metrics(inputs, S.truth);
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  if (out) {
    const fs::path& o = *out;
    json m = make_manifest("study", to_json(c));
    m["warnings"] = S.warnings;
    io::write_text_file(o / "manifest.json", m.dump(2) + "\n");
    io::write_text_file(o / "truth.csv", evalagg::format_truth(S.truth));
    std::ostringstream stats;
    stats << "replicate,sampled_clusters,births,deaths,births_per_admin1,deaths_per_admin1,births_per_admin2,"
             "deaths_per_admin2,pct_zero_death_admin2\n";
    for (int r = 0; r < R; ++r) {
      const auto& st = res.sample_stats[r];
      stats << r + 1 << ',' << st.sampled_clusters << ',' << st.births << ',' << st.deaths << ','
            << io::format_double(st.births_per_admin1) << ',' << io::format_double(st.deaths_per_admin1) << ','
            << io::format_double(st.births_per_admin2) << ',' << io::format_double(st.deaths_per_admin2) << ','
            << io::format_double(st.pct_zero_death_admin2) << '\n';
    }
    io::write_text_file(o / "sample_stats.csv", stats.str());
    for (int r = 0; r < R; ++r) {
      io::write_text_file(o / replicate_dir_name(r + 1) / "direct.csv", direct::format_direct(res.direct[r]));
    }
    for (const auto& f : res.outcomes) {
      if (!f.ok) continue;
      io::write_text_file(o / replicate_dir_name(f.replicate) / model::to_string(f.variant) / "summary.csv",
                          evalagg::format_fit_summary(f.summary));
    }
    io::write_text_file(o / "fit_status.csv", format_status(res.outcomes));
    io::write_text_file(o / "metrics.csv", evalagg::format_metrics(res.metrics));
    io::write_text_file(o / "summary.csv", evalagg::format_summary(res.metrics));
    io::write_text_file(o / "appendix_b.csv", evalagg::format_appendix(res.metrics));
    json timing{{"wall_seconds", res.seconds}, {"workers", c.workers}};
    io::write_text_file(o / "timing.json", timing.dump(2) + "\n");
  }
  return res;
}

}  // namespace dabul::pipeline
