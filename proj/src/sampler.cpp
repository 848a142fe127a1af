#include "dabul/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "dabul/errors.hpp"
#include "dabul/table_io.hpp"

namespace dabul::sampler {

void SamplerConfig::validate() const {
  if (iterations < 1) throw ContractViolation("sampler: iterations must be >= 1");
  if (warmup < 1) throw ContractViolation("sampler: warmup must be >= 1");
  if (chains < 1) throw ContractViolation("sampler: chains must be >= 1");
  if (step_size < 0.0 || !std::isfinite(step_size)) throw ContractViolation("sampler: step size must be positive");
  if (!adapt_step_size && !(step_size > 0.0)) throw ContractViolation("sampler: a pinned step size must be positive");
  if (inv_metric.size() > 0 && !(inv_metric.array() > 0.0).all()) {
    throw ContractViolation("sampler: metric entries must be positive");
  }
  if (max_tree_depth < 1 || max_tree_depth > 12) throw ContractViolation("sampler: max_tree_depth must be in [1, 12]");
  if (!(target_accept > 0.0 && target_accept < 1.0)) throw ContractViolation("sampler: target_accept must be in (0, 1)");
  if (workers < 1) throw ContractViolation("sampler: workers must be >= 1");
}

std::size_t PosteriorDraws::draw_count() const {
  std::size_t n = 0;
  for (const auto& c : chains) n += static_cast<std::size_t>(c.values.rows());
  return n;
}

int PosteriorDraws::column_index(const std::string& name) const {
  for (std::size_t i = 0; i < columns.size(); ++i) {
    if (columns[i] == name) return static_cast<int>(i);
  }
  return -1;
}

std::vector<std::vector<double>> PosteriorDraws::by_chain(int col) const {
  std::vector<std::vector<double>> out;
  for (const auto& c : chains) {
    const auto v = c.values.col(col);
    out.emplace_back(v.data(), v.data() + v.size());
  }
  return out;
}

std::vector<double> PosteriorDraws::pooled(int col) const {
  std::vector<double> out;
  out.reserve(draw_count());
  for (const auto& c : chains) {
    for (Eigen::Index r = 0; r < c.values.rows(); ++r) out.push_back(c.values(r, col));
  }
  return out;
}

int PosteriorDraws::divergences() const {
  int n = 0;
  for (const auto& c : chains) n += static_cast<int>(std::count(c.divergent.begin(), c.divergent.end(), 1));
  return n;
}

long inverse_transform_sample(const std::vector<double>& lm, double u, long first) {
  if (lm.empty()) throw NumericalError("inverse transform: empty support");
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : lm) mx = std::max(mx, v);
  if (!std::isfinite(mx)) throw NumericalError("inverse transform: no finite log-mass");
  double total = 0.0;
  for (double v : lm) total += std::exp(v - mx);
  const double target = u * total;
  double cum = 0.0;
  for (std::size_t k = 0; k < lm.size(); ++k) {
    cum += std::exp(lm[k] - mx);
    if (cum >= target && std::isfinite(lm[k])) return first + static_cast<long>(k);
  }
  // Rounding left the target above the final sum: take the last supported value.
  for (std::size_t k = lm.size(); k-- > 0;) {
    if (std::isfinite(lm[k])) return first + static_cast<long>(k);
  }
  return first;
}

void gibbs_sweep(const model::Model& m, const model::RateState& rs, model::LatentCounts& lat, Rng& rng,
                 std::vector<double>& buf) {
  const auto& D = m.data();
  const bool dabul = m.variant() == model::Variant::dabul;
  if (dabul) {
    for (int i = 0; i < D.m1; ++i) {
      const long first = m.fill_yplus_conditional(i, rs, lat, buf);
      lat.y_plus[i] = inverse_transform_sample(buf, uniform01(rng), first);
    }
  }
  for (std::size_t k = 0; k < D.sampled.size(); ++k) {
    const int i = D.sampled[k].admin1;
    const long first = m.fill_ycluster_conditional(static_cast<int>(k), rs, lat, buf);
    const long y = inverse_transform_sample(buf, uniform01(rng), first);
    lat.y_plus_sampled[i] += y - lat.y_sampled[k];
    lat.y_sampled[k] = y;
    // Without an unsampled group the total moves with its clusters.
    if (dabul && !(rs.unsampled_mean[i] > 0.0)) lat.y_plus[i] = lat.y_plus_sampled[i];
  }
#ifndef NDEBUG
  lat.check(D);
#endif
}

Eigen::VectorXd initial_point(const model::Model& m, Rng& rng) {
  const auto& L = m.layout();
  const auto& D = m.data();
  auto jitter = [&](double half) { return (2.0 * uniform01(rng) - 1.0) * half; };
  double deaths[2] = {0.5, 0.5}, births[2] = {1.0, 1.0};
  for (const auto& c : D.sampled) {
    deaths[c.cell % 2] += static_cast<double>(c.deaths);
    births[c.cell % 2] += static_cast<double>(c.births);
  }
  Eigen::VectorXd th = Eigen::VectorXd::Zero(L.size());
  th[L.alpha_urban()] = std::log(deaths[0] / births[0]) + jitter(0.5);
  th[L.alpha_rural()] = std::log(deaths[1] / births[1]) + jitter(0.5);
  for (int i = 1; i < L.m1; ++i) th[L.beta(i)] = jitter(0.25);
  for (int j = 0; j < L.m2; ++j) th[L.v(j)] = jitter(0.5);
  th[L.log_sigma()] = std::log(0.3) + jitter(0.5);
  th[L.logit_phi()] = jitter(1.0);
  th[L.log_d()] = std::log(0.3) + jitter(0.5);
  Eigen::VectorXd ts = m.to_sampler_coordinates(th);
  const int f = m.structure().free_dimension();
  for (int k = 0; k < f; ++k) ts[L.u(0) + k] = jitter(0.5);
  return ts;
}

namespace {

struct ColumnPlan {
  std::vector<std::string> names;
  int col_b, col_sigma2, col_phi, col_d, col_risk, col_y_sampled = -1, col_y_plus = -1;
};

ColumnPlan plan_columns(const model::Model& m, bool keep_cluster_latents) {
  const auto& D = m.data();
  ColumnPlan p;
  p.names = {"alpha_U", "alpha_R"};
  for (int i = 0; i < D.m1; ++i) p.names.push_back("beta_" + std::to_string(i + 1));
  p.col_b = static_cast<int>(p.names.size());
  for (int j = 0; j < D.m2; ++j) p.names.push_back("b_" + std::to_string(j + 1));
  p.col_sigma2 = static_cast<int>(p.names.size());
  p.names.push_back("sigma2");
  p.col_phi = p.col_sigma2 + 1;
  p.names.push_back("phi");
  p.col_d = p.col_sigma2 + 2;
  p.names.push_back("d");
  p.col_risk = static_cast<int>(p.names.size());
  for (int j = 0; j < D.m2; ++j) p.names.push_back("risk_" + std::to_string(j + 1));
  if (m.has_latents()) {
    if (keep_cluster_latents) {
      p.col_y_sampled = static_cast<int>(p.names.size());
      for (std::size_t k = 0; k < D.sampled.size(); ++k) p.names.push_back("y_s_" + std::to_string(k + 1));
    }
    p.col_y_plus = static_cast<int>(p.names.size());
    for (int i = 0; i < D.m1; ++i) p.names.push_back("y_plus_" + std::to_string(i + 1));
  }
  return p;
}

void store(const model::Model& m, const ColumnPlan& plan, const Eigen::VectorXd& ts, const model::LatentCounts* lat,
           Eigen::RowVectorXd& row) {
  const auto& D = m.data();
  const model::ModelParams p = m.layout().unpack(m.to_model_coordinates(ts));
  const Eigen::VectorXd b = model::spatial_effect(p, m.structure());
  row[0] = p.alpha_urban;
  row[1] = p.alpha_rural;
  for (int i = 0; i < D.m1; ++i) row[2 + i] = p.beta[i];
  for (int j = 0; j < D.m2; ++j) {
    row[plan.col_b + j] = b[j];
    const double base = p.beta[m.geography().admin1_of[j]] + b[j];
    const double q = D.admin2_urban_share[j];
    row[plan.col_risk + j] = q * std::exp(p.alpha_urban + base) + (1.0 - q) * std::exp(p.alpha_rural + base);
  }
  row[plan.col_sigma2] = p.sigma2;
  row[plan.col_phi] = p.phi;
  row[plan.col_d] = p.d;
  if (lat) {
    if (plan.col_y_sampled >= 0) {
      for (std::size_t k = 0; k < lat->y_sampled.size(); ++k) {
        row[plan.col_y_sampled + static_cast<int>(k)] = static_cast<double>(lat->y_sampled[k]);
      }
    }
    for (int i = 0; i < D.m1; ++i) row[plan.col_y_plus + i] = static_cast<double>(lat->y_plus[i]);
  }
}

}  // namespace

ChainDraws run_chain(const model::Model& m, const SamplerConfig& cfg, int chain_index) {
  cfg.validate();
  Rng rng = make_rng(cfg.seed, {stream::chain, static_cast<std::uint64_t>(chain_index)});
  const ColumnPlan plan = plan_columns(m, cfg.keep_cluster_latents);
  const bool latent = m.has_latents();
  model::LatentCounts lat = m.initial_latents();
  const model::LatentCounts* lat_ptr = latent ? &lat : nullptr;
  const bool marginal = cfg.marginalize_yplus && m.variant() == model::Variant::dabul;
  // Special-function overflow far out in the tails counts as zero density,
  // which the integrator reports as a divergence.
  const LogDensityFn f = [&](const Eigen::VectorXd& q, Eigen::VectorXd* g) {
    try {
      return m.log_posterior_sampler(q, g, lat_ptr, marginal);
    } catch (const std::domain_error&) {
    } catch (const std::overflow_error&) {
    }
    if (g) g->setZero(q.size());
    return -std::numeric_limits<double>::infinity();
  };

  const int dim = m.sampler_dimension();
  PhasePoint z;
  for (int attempt = 0;; ++attempt) {
    try {
      z = make_point(initial_point(m, rng), f);
      break;
    } catch (const NumericalError&) {
      if (attempt >= 100) throw NumericalError("no finite initial point after 100 attempts");
    }
  }

  NutsSettings s;
  s.max_tree_depth = cfg.max_tree_depth;
  if (cfg.inv_metric.size() > 0) {
    if (cfg.inv_metric.size() != dim) throw ContractViolation("sampler: metric has wrong dimension");
    s.inv_metric = cfg.inv_metric;
  } else {
    s.inv_metric = Eigen::VectorXd::Ones(dim);
  }
  s.step_size = cfg.step_size > 0.0 ? cfg.step_size : find_reasonable_epsilon(z, f, s.inv_metric, 1.0, rng);

  WarmupAdapter adapter(cfg.warmup, dim, cfg.target_accept, cfg.adapt_step_size, cfg.adapt_metric);
  adapter.restart_step(s.step_size);

  ChainDraws out;
  out.values.resize(cfg.iterations, static_cast<Eigen::Index>(plan.names.size()));
  out.values.setZero();
  out.divergent.assign(cfg.iterations, 0);
  out.tree_depth.assign(cfg.iterations, 0);
  out.accept_stat.assign(cfg.iterations, 0.0);
  std::vector<double> buffer;
  Eigen::RowVectorXd row_buf(out.values.cols());

  const int total = cfg.warmup + cfg.iterations;
  for (int it = 0; it < total; ++it) {
    const NutsTransition t = nuts_one_step(z, f, s, rng);
    z = t.point;
    if (latent) {
      const model::ModelParams p = m.layout().unpack(m.to_model_coordinates(z.q));
      gibbs_sweep(m, m.rates(p), lat, rng, buffer);
      // The target of the next NUTS step changed with the latents.
      z.log_density = f(z.q, &z.grad);
      if (!std::isfinite(z.log_density)) throw NumericalError("log density not finite after the discrete update");
    }
    if (it < cfg.warmup) {
      if (t.divergent) ++out.warmup_divergences;
      if (adapter.learn(it, t, s)) {
        const double eps = find_reasonable_epsilon(z, f, s.inv_metric, s.step_size, rng);
        s.step_size = eps;
        adapter.restart_step(eps);
      }
      if (it == cfg.warmup - 1) adapter.finish(s);
      continue;
    }
    const int row = it - cfg.warmup;
    store(m, plan, z.q, latent ? &lat : nullptr, row_buf);
    out.values.row(row) = row_buf;
    out.divergent[row] = t.divergent ? 1 : 0;
    out.tree_depth[row] = t.tree_depth;
    out.accept_stat[row] = t.accept_stat;
  }
  out.step_size = s.step_size;
  out.inv_metric = s.inv_metric;
  return out;
}

PosteriorDraws run_sampler(const model::Model& m, const SamplerConfig& cfg) {
  cfg.validate();
  const ColumnPlan plan = plan_columns(m, cfg.keep_cluster_latents);
  PosteriorDraws d;
  d.variant = m.variant();
  d.m1 = m.data().m1;
  d.m2 = m.data().m2;
  d.columns = plan.names;
  d.col_b = plan.col_b;
  d.col_sigma2 = plan.col_sigma2;
  d.col_phi = plan.col_phi;
  d.col_d = plan.col_d;
  d.col_risk = plan.col_risk;
  d.col_y_sampled = plan.col_y_sampled;
  d.col_y_plus = plan.col_y_plus;
  d.n_sampled = static_cast<int>(m.data().sampled.size());
  d.warnings = m.warnings();
  d.chains.resize(cfg.chains);

  std::vector<std::exception_ptr> errors(cfg.chains);
  auto work = [&](int c) {
    try {
      d.chains[c] = run_chain(m, cfg, c);
    } catch (...) {
      errors[c] = std::current_exception();
    }
  };
  const int workers = std::min(cfg.workers, cfg.chains);
  if (workers <= 1) {
    for (int c = 0; c < cfg.chains; ++c) work(c);
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        for (int c = w; c < cfg.chains; c += workers) work(c);
      });
    }
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return d;
}

PosteriorDraws run_dabul(const model::Model& m, const SamplerConfig& cfg) {
  if (m.variant() != model::Variant::dabul) throw ContractViolation("run_dabul needs a dabul model");
  return run_sampler(m, cfg);
}

PosteriorDraws run_exact_dabul(const model::Model& m, const SamplerConfig& cfg) {
  if (m.variant() != model::Variant::exact) throw ContractViolation("run_exact_dabul needs an exact model");
  return run_sampler(m, cfg);
}

PosteriorDraws run_standard_ul(const model::Model& m, const SamplerConfig& cfg) {
  if (m.variant() != model::Variant::ul) throw ContractViolation("run_standard_ul needs a ul model");
  return run_sampler(m, cfg);
}

std::vector<ParamDiagnostic> diagnostics(const PosteriorDraws& draws) {
  std::vector<ParamDiagnostic> out;
  for (std::size_t c = 0; c < draws.columns.size(); ++c) {
    out.push_back(diagnose(draws.by_chain(static_cast<int>(c)), draws.columns[c]));
  }
  return out;
}

std::string format_chain_draws(const PosteriorDraws& draws, int chain) {
  const auto& c = draws.chains.at(chain);
  std::ostringstream out;
  for (const auto& name : draws.columns) out << name << ',';
  out << "divergent,tree_depth\n";
  for (Eigen::Index r = 0; r < c.values.rows(); ++r) {
    for (Eigen::Index k = 0; k < c.values.cols(); ++k) out << io::format_double(c.values(r, k)) << ',';
    out << static_cast<int>(c.divergent[r]) << ',' << c.tree_depth[r] << '\n';
  }
  return out.str();
}

}  // namespace dabul::sampler
