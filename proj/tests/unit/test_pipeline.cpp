#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "dabul/errors.hpp"
#include "dabul/pipeline.hpp"
#include "dabul/table_io.hpp"

using namespace dabul;
using namespace dabul::pipeline;

namespace {

fs::path fresh_dir(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("dabul_unit_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

SimulateConfig small_simulation() {
  SimulateConfig c;
  c.geography = {"", 2, 3};
  c.replicates = 2;
  c.seed = 5;
  return c;
}

FitConfig small_fit(const fs::path& data) {
  FitConfig f;
  f.data = data;
  f.sampler.chains = 2;
  f.sampler.iterations = 40;
  f.sampler.warmup = 40;
  f.sampler.seed = 9;
  f.replicates = {1};
  return f;
}

}  // namespace

TEST_CASE("simulate writes every file and reruns byte for byte") {
  const auto a = fresh_dir("sim_a"), b = fresh_dir("sim_b");
  const auto c = small_simulation();
  write_simulation(simulate(c), c, a);
  for (const char* f : {"geography.txt", "population.csv", "truth.csv", "manifest.json"}) CHECK(fs::exists(a / f));
  CHECK(fs::exists(a / "replicates" / "rep_001" / "survey.csv"));
  CHECK(fs::exists(a / "replicates" / "rep_002" / "survey.csv"));
  CHECK_FALSE(fs::exists(a / "replicates" / "rep_003"));

  // Rerun from the manifest.
  const auto manifest = read_manifest(a / "manifest.json");
  CHECK(manifest.at("command") == "simulate");
  const auto again = simulate_config_from_json(manifest.at("config"));
  CHECK(to_json(again) == to_json(c));
  write_simulation(simulate(again), again, b);
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), a);
    CAPTURE(rel.string());
    CHECK(slurp(e.path()) == slurp(b / rel));
  }
  // A different seed gives different surveys.
  auto other = c;
  other.seed = 6;
  const auto s2 = simulate(other);
  CHECK(survey::format_survey(s2.surveys[0]) != slurp(a / "replicates" / "rep_001" / "survey.csv"));
}

TEST_CASE("settings resolve from presets and JSON files") {
  CHECK(resolve_setting("2").sigma2 == doctest::Approx(0.0025));
  CHECK_THROWS_AS(resolve_setting("9"), ContractViolation);
  const auto dir = fresh_dir("setting");
  io::write_text_file(dir / "s.json", R"({"preset": "1", "phi": 0.5})");
  const auto s = resolve_setting((dir / "s.json").string());
  CHECK(s.phi == 0.5);
  CHECK(s.sigma2 == doctest::Approx(0.0225));
  io::write_text_file(dir / "bad.json", "{not json");
  CHECK_THROWS_AS(resolve_setting((dir / "bad.json").string()), ParseError);
  const auto round = setting_from_json(to_json(s));
  CHECK(to_json(round) == to_json(s));
}

TEST_CASE("fit, evaluate and report on a small study") {
  const auto data = fresh_dir("fit_data"), fits = fresh_dir("fit_out"), fits2 = fresh_dir("fit_out2"),
             eval = fresh_dir("fit_eval");
  const auto c = small_simulation();
  write_simulation(simulate(c), c, data);
  auto f = small_fit(data);
  f.variants = {model::Variant::ul, model::Variant::dabul};
  const auto res = run_fit(f, fits);
  REQUIRE(res.outcomes.size() == 2);
  for (const auto& o : res.outcomes) CHECK_MESSAGE(o.ok, o.message);
  for (const char* v : {"ul", "dabul"}) {
    CHECK(fs::exists(fits / "rep_001" / v / "summary.csv"));
    CHECK(fs::exists(fits / "rep_001" / v / "draws_chain_2.csv"));
    CHECK(fs::exists(fits / "rep_001" / v / "diagnostics.csv"));
  }
  CHECK(fs::exists(fits / "rep_001" / "direct.csv"));
  CHECK_FALSE(fs::exists(fits / "rep_002"));
  CHECK(fs::exists(fits / "fit_status.csv"));

  // Worker count does not change results.
  f.workers = 2;
  run_fit(f, fits2);
  CHECK(slurp(fits / "rep_001" / "dabul" / "summary.csv") == slurp(fits2 / "rep_001" / "dabul" / "summary.csv"));
  CHECK(slurp(fits / "rep_001" / "ul" / "draws_chain_1.csv") == slurp(fits2 / "rep_001" / "ul" / "draws_chain_1.csv"));

  const auto rep = run_evaluate({data, fits}, eval);
  // Two models: admin1 discrepancies plus three admin2 metrics each.
  CHECK(rep.rows.size() == 2 * (2 + 3 * 6));
  CHECK(rep.has_percent_decrease);
  for (const char* file : {"metrics.csv", "summary.csv", "appendix_b.csv", "manifest.json"}) CHECK(fs::exists(eval / file));
  const auto text = render_report(eval);
  CHECK(text.find("dabul") != std::string::npos);

  // Evaluation falls back to draw files when summaries are missing.
  const auto fallback = fresh_dir("fit_eval_fallback");
  fs::remove(fits / "rep_001" / "ul" / "summary.csv");
  const auto rep2 = run_evaluate({data, fits}, fallback);
  CHECK(slurp(eval / "metrics.csv") == slurp(fallback / "metrics.csv"));
}

TEST_CASE("injected direct estimates and misaligned files") {
  const auto data = fresh_dir("inject_data"), fits = fresh_dir("inject_fit");
  const auto c = small_simulation();
  const auto sim = simulate(c);
  write_simulation(sim, c, data);
  io::write_text_file(data / "direct.csv", "admin1,r_hat,V_logit\n1,0.03,0.04\n2,0.025,0.05\n");
  auto f = small_fit(data);
  f.variants = {model::Variant::exact};
  f.direct_file = (data / "direct.csv").string();
  const auto res = run_fit(f, fits);
  REQUIRE(res.outcomes.size() == 1);
  CHECK_MESSAGE(res.outcomes[0].ok, res.outcomes[0].message);
  const auto used = direct::read_direct(fits / "rep_001" / "direct.csv", 2);
  CHECK(used.areas[0].r_hat == 0.03);
  CHECK(used.areas[1].v_logit == 0.05);

  io::write_text_file(data / "bad_direct.csv", "admin1,r_hat,V_logit\n1,0.03,0.04\n5,0.025,0.05\n");
  f.direct_file = (data / "bad_direct.csv").string();
  CHECK_THROWS_AS(run_fit(f, fresh_dir("inject_bad")), ParseError);

  // A truth file for another geography is rejected by name.
  io::write_text_file(data / "truth.csv", "area_level,area_id,prevalence\nadmin1,1,0.03\nadmin2,1,0.03\n");
  try {
    run_evaluate({data, fits}, fresh_dir("inject_eval"));
    CHECK(false);
  } catch (const ParseError& e) {
    CHECK(std::string(e.what()).find("truth.csv") != std::string::npos);
  }
}
