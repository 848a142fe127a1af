#include <cstdio>
#include <iostream>
#include <regex>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "dabul/errors.hpp"
#include "dabul/pipeline.hpp"
#include "dabul/table_io.hpp"

namespace pl = dabul::pipeline;
using dabul::model::Variant;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// "4x20" builds the synthetic lattice, anything else is an adjacency file.
pl::GeographySpec parse_geography(const std::string& s) {
  pl::GeographySpec g;
  std::smatch m;
  static const std::regex lattice(R"((\d+)x(\d+))");
  if (std::regex_match(s, m, lattice)) {
    g.n_admin1 = std::stoi(m[1]);
    g.admin2_per_admin1 = std::stoi(m[2]);
  } else {
    g.file = s;
  }
  return g;
}

std::vector<Variant> parse_variants(const std::string& s) {
  std::vector<Variant> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (item.empty()) continue;
    try {
      out.push_back(dabul::model::parse_variant(item));
    } catch (const std::exception& e) {
      throw UsageError(e.what());
    }
  }
  if (out.empty()) throw UsageError("--variants is empty");
  return out;
}

dabul::survey::SimulationSetting setting_or_usage(const std::string& id) {
  try {
    return pl::resolve_setting(id);
  } catch (const dabul::ContractViolation& e) {
    throw UsageError(e.what());
  }
}

pl::json manifest_config(const std::string& path, const std::string& command) {
  const pl::json m = pl::read_manifest(path);
  if (m.at("command").get<std::string>() != command) {
    throw UsageError(path + " is a '" + m.at("command").get<std::string>() + "' manifest, not '" + command + "'");
  }
  return m.at("config");
}

struct Flags {
  std::string config, out, setting = "1", geography = "4x20", variants = "ul,dabul,exact", direct_file, data, fits,
                      dir;
  int replicates = 1, chains = 4, iters = 1000, warmup = 1000, workers = 1;
  std::uint64_t seed = 1;
  bool no_draws = false;
};

void add_sim_flags(CLI::App* c, Flags& f) {
  c->add_option("--setting", f.setting, "preset id (1, 2, 3, 1a) or JSON setting file");
  c->add_option("--geography", f.geography, "NxM synthetic lattice or adjacency file");
  c->add_option("--replicates", f.replicates, "number of survey replicates");
}

void add_sampler_flags(CLI::App* c, Flags& f) {
  c->add_option("--variants", f.variants, "comma list of ul, dabul, exact");
  c->add_option("--chains", f.chains);
  c->add_option("--iters", f.iters, "post-warmup iterations per chain");
  c->add_option("--warmup", f.warmup);
  c->add_option("--workers", f.workers, "parallel (replicate, variant) jobs");
}

dabul::sampler::SamplerConfig sampler_from(const Flags& f) {
  dabul::sampler::SamplerConfig s;
  s.chains = f.chains;
  s.iterations = f.iters;
  s.warmup = f.warmup;
  s.seed = f.seed;
  return s;
}

pl::SimulateConfig simulate_from(const Flags& f) {
  pl::SimulateConfig c;
  c.setting = setting_or_usage(f.setting);
  c.geography = parse_geography(f.geography);
  c.replicates = f.replicates;
  c.seed = f.seed;
  return c;
}

void print_fit_status(const std::vector<pl::FitOutcome>& outcomes) {
  for (const auto& o : outcomes) {
    std::cout << pl::replicate_dir_name(o.replicate) << ' ' << dabul::model::to_string(o.variant) << ": "
              << (o.ok ? "ok" : "failed: " + o.message);
    if (o.ok) std::cout << " (max rhat " << o.max_rhat << ", divergences " << o.divergences << ")";
    std::cout << '\n';
  }
}

int run(int argc, char** argv) {
  CLI::App app{"DABUL small-area estimation: simulate, fit, evaluate, report"};
  app.require_subcommand(1);
  Flags f;

  auto* sim = app.add_subcommand("simulate", "population, risk surface and replicate surveys");
  add_sim_flags(sim, f);
  auto* fit = app.add_subcommand("fit", "fit model variants to simulated surveys");
  fit->add_option("--data", f.data, "simulate output directory");
  add_sampler_flags(fit, f);
  fit->add_option("--direct-file", f.direct_file, "direct estimates to use instead of the Hajek computation");
  fit->add_flag("--no-draws", f.no_draws, "skip writing per-chain draw files");
  auto* eval = app.add_subcommand("evaluate", "metrics against the simulation truth");
  eval->add_option("--data", f.data, "simulate output directory");
  eval->add_option("--fits", f.fits, "fit output directory");
  auto* rep = app.add_subcommand("report", "print an evaluation summary");
  rep->add_option("dir", f.dir, "evaluate or study output directory")->required();
  auto* study = app.add_subcommand("study", "simulate, fit and evaluate in one run");
  add_sim_flags(study, f);
  add_sampler_flags(study, f);

  for (auto* c : {sim, fit, eval, study}) {
    c->add_option("--config", f.config, "rerun from a manifest.json");
    c->add_option("--out", f.out, "output directory")->required();
  }
  for (auto* c : {sim, fit, study}) c->add_option("--seed", f.seed, "master seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    throw UsageError(e.what());
  }

  if (*sim) {
    const pl::SimulateConfig c =
        f.config.empty() ? simulate_from(f) : pl::simulate_config_from_json(manifest_config(f.config, "simulate"));
    const auto s = pl::simulate(c);
    pl::write_simulation(s, c, f.out);
    for (const auto& w : s.warnings) std::cerr << "warning: " << w << '\n';
    std::cout << "wrote " << s.surveys.size() << " replicate surveys to " << f.out << '\n';
  } else if (*fit) {
    pl::FitConfig c;
    if (!f.config.empty()) {
      c = pl::fit_config_from_json(manifest_config(f.config, "fit"));
    } else {
      if (f.data.empty()) throw UsageError("fit needs --data");
      c.data = f.data;
      c.variants = parse_variants(f.variants);
      c.sampler = sampler_from(f);
      c.workers = f.workers;
      c.direct_file = f.direct_file;
      c.write_draws = !f.no_draws;
    }
    const auto r = pl::run_fit(c, f.out);
    print_fit_status(r.outcomes);
  } else if (*eval) {
    pl::EvaluateConfig c;
    if (!f.config.empty()) {
      c = pl::evaluate_config_from_json(manifest_config(f.config, "evaluate"));
    } else {
      if (f.data.empty() || f.fits.empty()) throw UsageError("evaluate needs --data and --fits");
      c.data = f.data;
      c.fits = f.fits;
    }
    pl::run_evaluate(c, f.out);
    std::cout << pl::render_report(f.out);
  } else if (*rep) {
    const std::string text = pl::render_report(f.dir);
    dabul::io::write_text_file(pl::fs::path(f.dir) / "report.txt", text);
    std::cout << text;
  } else if (*study) {
    pl::StudyConfig c;
    if (!f.config.empty()) {
      c = pl::study_config_from_json(manifest_config(f.config, "study"));
    } else {
      c.simulate = simulate_from(f);
      c.variants = parse_variants(f.variants);
      c.sampler = sampler_from(f);
      c.workers = f.workers;
    }
    const auto r = pl::run_study(c, pl::fs::path(f.out));
    print_fit_status(r.outcomes);
    std::cout << pl::render_report(f.out);
  }
  return 0;
}

int fail(int code, const char* kind, const std::string& msg) {
  std::string line = msg;
  for (char& ch : line) {
    if (ch == '\n') ch = ' ';
  }
  std::cerr << "error: " << kind << ": " << line << '\n';
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const UsageError& e) {
    return fail(2, "usage", e.what());
  } catch (const dabul::ParseError& e) {
    return fail(3, "parse", e.what());
  } catch (const dabul::ContractViolation& e) {
    return fail(4, "contract", e.what());
  } catch (const dabul::InfeasibleError& e) {
    return fail(5, "infeasible", e.what());
  } catch (const dabul::NumericalError& e) {
    return fail(6, "numerical", e.what());
  } catch (const std::exception& e) {
    return fail(1, "runtime", e.what());
  }
}
