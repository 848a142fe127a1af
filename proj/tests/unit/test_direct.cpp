#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "dabul/direct.hpp"
#include "dabul/errors.hpp"
#include "dabul/table_io.hpp"

using namespace dabul;
using namespace dabul::direct;
using survey::Stratum;
using survey::SurveyRecord;

namespace {

SurveyRecord rec(long id, Stratum s, long n, long z, double w) {
  return SurveyRecord{id, 0, 0, s, 200, true, n, z, w};
}

survey::SurveyData one_area(std::vector<SurveyRecord> r) {
  survey::SurveyData d;
  d.m1 = 1;
  d.m2 = 1;
  d.records = std::move(r);
  return d;
}

}  // namespace

TEST_CASE("Hajek estimate by hand") {
  const auto d = one_area({rec(1, Stratum::urban, 10, 1, 10.0), rec(2, Stratum::urban, 20, 3, 20.0)});
  CHECK(hajek_estimate(d, 0) == doctest::Approx(70.0 / 500.0));
}

TEST_CASE("linearization variance by hand") {
  // Two strata with two and three clusters.
  const auto d = one_area({rec(1, Stratum::urban, 10, 1, 10.0), rec(2, Stratum::urban, 20, 3, 20.0),
                           rec(3, Stratum::rural, 15, 0, 12.0), rec(4, Stratum::rural, 18, 2, 9.0),
                           rec(5, Stratum::rural, 12, 1, 14.0)});
  const double num = 10 * 1 + 20 * 3 + 0 + 9 * 2 + 14 * 1;
  const double den = 10 * 10 + 20 * 20 + 12 * 15 + 9 * 18 + 14 * 12;
  const double r = num / den;
  auto e = [&](double w, double z, double n) { return w * (z - r * n) / den; };
  const double u1 = e(10, 1, 10), u2 = e(20, 3, 20);
  const double r1 = e(12, 0, 15), r2 = e(9, 2, 18), r3 = e(14, 1, 12);
  const double ub = (u1 + u2) / 2, rb = (r1 + r2 + r3) / 3;
  const double v = 2.0 / 1.0 * ((u1 - ub) * (u1 - ub) + (u2 - ub) * (u2 - ub)) +
                   3.0 / 2.0 * ((r1 - rb) * (r1 - rb) + (r2 - rb) * (r2 - rb) + (r3 - rb) * (r3 - rb));
  const auto dv = design_variance_logit(d, 0);
  CHECK(dv.r_hat == doctest::Approx(r));
  CHECK(dv.var_ratio == doctest::Approx(v).epsilon(1e-12));
  CHECK(dv.var_logit == doctest::Approx(v / std::pow(r * (1 - r), 2)).epsilon(1e-12));
  CHECK_FALSE(dv.degenerate);
}

TEST_CASE("degenerate direct estimates") {
  // No deaths anywhere: r_hat = 0, logit undefined.
  const auto zero = one_area({rec(1, Stratum::urban, 10, 0, 1.0), rec(2, Stratum::urban, 20, 0, 1.0)});
  const auto e = compute_direct_estimates(zero);
  CHECK(e.areas[0].r_hat == 0.0);
  CHECK(e.areas[0].degenerate);
  CHECK(std::isnan(e.areas[0].v_logit));
  // A single sampled cluster has no design variance.
  const auto single = one_area({rec(1, Stratum::urban, 10, 2, 1.0)});
  CHECK(compute_direct_estimates(single).areas[0].degenerate);
  // A lone cluster in one stratum is merged with the other stratum.
  const auto merged = one_area({rec(1, Stratum::urban, 10, 2, 1.0), rec(2, Stratum::rural, 20, 1, 1.0),
                                rec(3, Stratum::rural, 20, 3, 1.0)});
  const auto dv = design_variance_logit(merged, 0);
  CHECK_FALSE(dv.degenerate);
  CHECK(dv.notes.size() == 1);
  // An area with no sampled clusters.
  survey::SurveyData none = one_area({});
  const auto n = compute_direct_estimates(none);
  CHECK(n.areas[0].degenerate);
  CHECK(n.warnings.size() == 1);
}

TEST_CASE("direct estimates file round trip and injection errors") {
  const auto dir = std::filesystem::temp_directory_path() / "dabul_unit_direct";
  std::filesystem::create_directories(dir);
  const auto d = one_area({rec(1, Stratum::urban, 10, 1, 10.0), rec(2, Stratum::urban, 20, 3, 20.0),
                           rec(3, Stratum::rural, 15, 0, 12.0)});
  const auto est = compute_direct_estimates(d);
  io::write_text_file(dir / "direct.csv", format_direct(est));
  const auto back = read_direct(dir / "direct.csv", 1);
  CHECK(back.areas[0].r_hat == est.areas[0].r_hat);
  CHECK(back.areas[0].v_logit == est.areas[0].v_logit);
  CHECK(back.areas[0].n_births == 45);
  io::write_text_file(dir / "short.csv", "admin1,r_hat,V_logit\n1,0.02,0.05\n");
  CHECK_THROWS_AS(read_direct(dir / "short.csv", 2), ParseError);
  io::write_text_file(dir / "range.csv", "admin1,r_hat,V_logit\n3,0.02,0.05\n");
  CHECK_THROWS_AS(read_direct(dir / "range.csv", 2), ParseError);
}
