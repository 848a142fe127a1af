#include <doctest.h>

#include <cmath>
#include <vector>

#include "dabul/direct.hpp"
#include "dabul/errors.hpp"
#include "dabul/model.hpp"
#include "dabul/rng.hpp"
#include "fixture.hpp"

using namespace dabul;
using namespace dabul::model;
using dabul::testing::Fixture;
using survey::Stratum;
using survey::SurveyRecord;

namespace {

// Plain lgamma oracles, kept apart from the library's recurrences.
double nb_oracle(long y, double mean, double d) {
  const double a = mean / d;
  return std::lgamma(y + a) - std::lgamma(a) - std::lgamma(y + 1.0) - a * std::log1p(d) +
         y * (std::log(d) - std::log1p(d));
}

double lchoose(long n, long k) { return std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0); }

double hyper_oracle(long z, long N, long Y, long n) {
  if (z > Y || n - z > N - Y) return -INFINITY;
  return lchoose(Y, z) + lchoose(N - Y, n - z) - lchoose(N, n);
}

Eigen::VectorXd test_point(const ParamLayout& L, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> z(0.0, 0.3);
  Eigen::VectorXd th(L.size());
  for (int k = 0; k < L.size(); ++k) th[k] = z(rng);
  th[L.alpha_urban()] = std::log(0.02) + z(rng);
  th[L.alpha_rural()] = std::log(0.025) + z(rng);
  th[L.log_sigma()] = std::log(0.3);
  th[L.logit_phi()] = 0.4;
  th[L.log_d()] = std::log(0.3);
  return th;
}

void check_gradient(const std::function<double(const Eigen::VectorXd&, Eigen::VectorXd*)>& f,
                    const Eigen::VectorXd& th) {
  Eigen::VectorXd g;
  const double v = f(th, &g);
  REQUIRE(std::isfinite(v));
  REQUIRE(g.size() == th.size());
  for (int k = 0; k < th.size(); ++k) {
    const double h = 1e-5;
    Eigen::VectorXd a = th, b = th;
    a[k] += h;
    b[k] -= h;
    const double fd = (f(a, nullptr) - f(b, nullptr)) / (2 * h);
    CAPTURE(k);
    CHECK(g[k] == doctest::Approx(fd).epsilon(1e-5).scale(1.0));
  }
}

}  // namespace

TEST_CASE("parameter layout") {
  const ParamLayout L{3, 7};
  CHECK(L.size() == 2 + 2 + 14 + 3);
  CHECK(L.names().size() == static_cast<std::size_t>(L.size()));
  ModelParams p;
  p.alpha_urban = -4.0;
  p.alpha_rural = -3.5;
  p.beta = Eigen::VectorXd::LinSpaced(3, 0.0, 0.4);
  p.v = Eigen::VectorXd::LinSpaced(7, -1, 1);
  p.u = Eigen::VectorXd::LinSpaced(7, 2, -2);
  p.sigma2 = 0.09;
  p.phi = 0.3;
  p.d = 0.4;
  const auto q = L.unpack(L.pack(p));
  CHECK(q.alpha_urban == -4.0);
  CHECK(q.beta[0] == 0.0);
  CHECK(q.beta[2] == doctest::Approx(0.4));
  CHECK(q.v == p.v);
  CHECK(q.u == p.u);
  CHECK(q.sigma2 == doctest::Approx(0.09));
  CHECK(q.phi == doctest::Approx(0.3));
  CHECK(q.d == doctest::Approx(0.4));
}

TEST_CASE("risk from parameters") {
  const auto g = geo::generate_synthetic_geography(2, 3, 1);
  const auto s = geo::build_icar_structure(g, geo::Nesting::per_admin1);
  ModelParams p;
  p.alpha_urban = std::log(0.02);
  p.alpha_rural = std::log(0.025);
  p.beta = Eigen::VectorXd::Zero(2);
  p.v = Eigen::VectorXd::Ones(6);
  p.u = Eigen::VectorXd::Ones(6);
  p.sigma2 = 0.0;
  CHECK(risk_from_params(p, s, Stratum::urban, 0, 0) == doctest::Approx(0.02));
  p.beta[1] = std::log(2.0);
  CHECK(risk_from_params(p, s, Stratum::rural, 1, 4) == doctest::Approx(0.05));
  p.sigma2 = 0.25;
  p.phi = 0.0;
  CHECK(risk_from_params(p, s, Stratum::urban, 0, 0) == doctest::Approx(0.02 * std::exp(0.5)));
  // A constant u lies in the constrained directions and is projected away.
  p.phi = 1.0;
  CHECK(risk_from_params(p, s, Stratum::urban, 0, 0) == doctest::Approx(0.02));
  CHECK_THROWS_AS(risk_from_params(p, s, Stratum::urban, 2, 0), ContractViolation);
}

TEST_CASE("log posterior gradients match finite differences") {
  const Fixture fx;
  for (Variant v : {Variant::ul, Variant::dabul, Variant::exact}) {
    const Model m = fx.make(v);
    const auto lat = m.initial_latents();
    for (bool marginal : {false, true}) {
      if (marginal && v != Variant::dabul) continue;
      CAPTURE(to_string(v));
      CAPTURE(marginal);
      const auto th = test_point(m.layout(), 5);
      check_gradient([&](const Eigen::VectorXd& x, Eigen::VectorXd* g) { return m.log_posterior(x, g, &lat, marginal); },
                     th);
      const Eigen::VectorXd ts = m.to_sampler_coordinates(th);
      CHECK(ts.size() == m.sampler_dimension());
      check_gradient(
          [&](const Eigen::VectorXd& x, Eigen::VectorXd* g) { return m.log_posterior_sampler(x, g, &lat, marginal); }, ts);
      CHECK((m.to_sampler_coordinates(m.to_model_coordinates(ts)) - ts).norm() < 1e-10);
    }
  }
}

TEST_CASE("summing out Y+ matches brute-force enumeration") {
  const Fixture fx;
  const Model m = fx.make(Variant::dabul);
  const auto lat = m.initial_latents();
  const auto th = test_point(m.layout(), 8);
  const ModelParams p = m.layout().unpack(th);
  const auto rs = m.rates(p);
  const double cond = m.log_posterior(th, nullptr, &lat, false);
  const double marg = m.log_posterior(th, nullptr, &lat, true);
  double expect = 0.0;
  for (int i = 0; i < fx.g.m1; ++i) {
    const long S = lat.y_plus_sampled[i], N = m.data().admin1_births[i];
    const double lam = rs.unsampled_mean[i];
    const auto& a = fx.direct.areas[i];
    REQUIRE_FALSE(a.degenerate);
    double mx = -INFINITY;
    std::vector<double> terms;
    for (long t = S; t < N; ++t) {
      if (t == 0) continue;
      const double z = dist::logit(a.r_hat) - std::log(double(t) / double(N - t));
      terms.push_back(nb_oracle(t - S, lam, p.d) - 0.5 * z * z / a.v_logit);
      mx = std::max(mx, terms.back());
    }
    double s = 0.0;
    for (double x : terms) s += std::exp(x - mx);
    expect += mx + std::log(s) - nb_oracle(lat.y_plus[i] - S, lam, p.d);
  }
  CHECK(marg - cond == doctest::Approx(expect).epsilon(1e-9));
}

TEST_CASE("Y+ full conditional against enumeration") {
  const Fixture fx;
  const Model m = fx.make(Variant::dabul);
  const auto lat = m.initial_latents();
  const ModelParams p = m.layout().unpack(test_point(m.layout(), 2));
  for (int i = 0; i < fx.g.m1; ++i) {
    const auto pmf = yplus_full_conditional(m, i, p, lat);
    const long S = lat.y_plus_sampled[i], N = m.data().admin1_births[i];
    const double lam = m.rates(p).unsampled_mean[i];
    const auto& a = fx.direct.areas[i];
    std::vector<double> lw;
    double mx = -INFINITY;
    for (long t = S; t <= N; ++t) {
      double v = nb_oracle(t - S, lam, p.d);
      if (t == 0 || t == N) {
        v = -INFINITY;
      } else {
        const double z = dist::logit(a.r_hat) - std::log(double(t) / double(N - t));
        v -= 0.5 * z * z / a.v_logit;
      }
      lw.push_back(v);
      mx = std::max(mx, v);
    }
    double s = 0.0;
    for (double x : lw) s += std::exp(x - mx);
    double covered = 0.0;
    for (long t = S; t <= N; ++t) {
      const double want = std::exp(lw[t - S] - mx) / s;
      covered += pmf.probability(t);
      if (want > 1e-12) CHECK(pmf.probability(t) == doctest::Approx(want).epsilon(1e-8));
    }
    CHECK(covered == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("tiny area conditionals against enumeration") {
  // One sampled cluster (N 6, n 3, Z 1) and one unsampled cluster (N 6).
  const auto g = geo::generate_synthetic_geography(1, 2, 1);
  survey::SurveyData data;
  data.m1 = 1;
  data.m2 = 2;
  data.records.push_back(SurveyRecord{1, 0, 0, Stratum::urban, 6, true, 3, 1, 2.0});
  data.records.push_back(SurveyRecord{2, 0, 1, Stratum::urban, 6, false, 0, 0, 0.0});
  const auto direct = direct::compute_direct_estimates(data);
  ModelConfig cfg;
  const Model m = assemble_variant(cfg, data, direct, g);
  CHECK(m.warnings().size() == 1);  // single cluster, direct term dropped
  ModelParams p;
  p.alpha_urban = std::log(0.3);
  p.alpha_rural = std::log(0.3);
  p.beta = Eigen::VectorXd::Zero(1);
  p.v = Eigen::VectorXd::Zero(2);
  p.u = Eigen::VectorXd::Zero(2);
  p.sigma2 = 0.0;
  p.d = 0.5;
  LatentCounts lat;
  lat.y_sampled = {2};
  lat.y_plus = {5};
  lat.recompute_sums(m.data());
  const double mu = 6 * 0.3;

  // Y+ given Y^(s) = 2: NB(T - 2; mu, d) on 2..12.
  const auto yp = yplus_full_conditional(m, 0, p, lat);
  double s = 0.0;
  for (long t = 2; t <= 12; ++t) s += std::exp(nb_oracle(t - 2, mu, 0.5));
  for (long t = 2; t <= 12; ++t) {
    CHECK(yp.probability(t) == doctest::Approx(std::exp(nb_oracle(t - 2, mu, 0.5)) / s).epsilon(1e-10));
  }
  CHECK(yp.probability(1) == 0.0);

  // Y^(s) given Y+ = 5: hypergeometric x NB x NB on 1..4.
  const auto yc = ycluster_full_conditional(m, 0, p, lat);
  std::vector<double> w;
  for (long y = 1; y <= 4; ++y) {
    w.push_back(std::exp(hyper_oracle(1, 6, y, 3) + nb_oracle(y, mu, 0.5) + nb_oracle(5 - y, mu, 0.5)));
  }
  double tw = 0.0;
  for (double x : w) tw += x;
  for (long y = 1; y <= 4; ++y) CHECK(yc.probability(y) == doctest::Approx(w[y - 1] / tw).epsilon(1e-10));
  CHECK(yc.probability(0) == 0.0);
  CHECK(yc.probability(5) == 0.0);
}

TEST_CASE("cluster conditional without an unsampled group carries the direct term") {
  const Fixture base;
  survey::SurveyData data = base.data;
  std::erase_if(data.records, [](const SurveyRecord& r) { return !r.sampled; });
  const auto direct = direct::compute_direct_estimates(data);
  ModelConfig cfg;
  const Model m = assemble_variant(cfg, data, direct, base.g);
  const auto lat0 = m.initial_latents();
  const ModelParams p = m.layout().unpack(test_point(m.layout(), 3));
  const auto rs = m.rates(p);
  const int k = 1;
  const auto& c = m.data().sampled[k];
  const int i = c.admin1;
  const auto pmf = ycluster_full_conditional(m, k, p, lat0);
  const auto& a = direct.areas[i];
  const long s_minus = lat0.y_plus_sampled[i] - lat0.y_sampled[k];
  const long N = m.data().admin1_births[i];
  std::vector<double> lw;
  for (long y = c.deaths; y <= c.deaths + c.frame_births - c.births; ++y) {
    const long t = s_minus + y;
    const double z = dist::logit(a.r_hat) - std::log(double(t) / double(N - t));
    lw.push_back(hyper_oracle(c.deaths, c.frame_births, y, c.births) +
                 nb_oracle(y, c.frame_births * rs.cell_rate[c.cell], p.d) - 0.5 * z * z / a.v_logit);
  }
  double mx = -INFINITY;
  for (double x : lw) mx = std::max(mx, x);
  double s = 0.0;
  for (double x : lw) s += std::exp(x - mx);
  for (std::size_t q = 0; q < lw.size(); ++q) {
    const double want = std::exp(lw[q] - mx) / s;
    if (want > 1e-12) CHECK(pmf.probability(c.deaths + long(q)) == doctest::Approx(want).epsilon(1e-8));
  }
}

TEST_CASE("exact benchmark feasibility and initial latents") {
  Fixture fx;
  const Model m = fx.make(Variant::exact);
  const auto lat = m.initial_latents();
  for (int i = 0; i < fx.g.m1; ++i) {
    const long N = m.data().admin1_births[i];
    CHECK(lat.y_plus[i] == std::llround(fx.direct.areas[i].r_hat * N));
    CHECK(lat.y_plus[i] == m.fixed_y_plus()[i]);
  }
  CHECK_NOTHROW(lat.check(m.data()));
  // A benchmark below the observed deaths is infeasible.
  fx.direct.areas[1].r_hat = 1e-5;
  CHECK_THROWS_AS(fx.make(Variant::exact), InfeasibleError);
  // Latent variants refuse to run without direct estimates.
  ModelConfig cfg;
  CHECK_THROWS_AS(assemble_variant(cfg, fx.data, std::nullopt, fx.g), ContractViolation);
  cfg.variant = Variant::ul;
  CHECK_NOTHROW(assemble_variant(cfg, fx.data, std::nullopt, fx.g));
}

TEST_CASE("latent count checks") {
  const Fixture fx;
  const Model m = fx.make(Variant::dabul);
  auto lat = m.initial_latents();
  CHECK_NOTHROW(lat.check(m.data()));
  auto bad = lat;
  bad.y_sampled[0] = m.data().sampled[0].deaths - 1;
  bad.recompute_sums(m.data());
  CHECK_THROWS_AS(bad.check(m.data()), ContractViolation);
  bad = lat;
  bad.y_plus[0] = bad.y_plus_sampled[0] - 1;
  CHECK_THROWS_AS(bad.check(m.data()), ContractViolation);
  // The marginal density is only defined for dabul.
  const Model ex = fx.make(Variant::exact);
  const auto th = test_point(ex.layout(), 1);
  const auto el = ex.initial_latents();
  CHECK_THROWS_AS(ex.log_posterior(th, nullptr, &el, true), ContractViolation);
}
