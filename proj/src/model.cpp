#include "dabul/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "dabul/dist.hpp"
#include "dabul/errors.hpp"

namespace dabul::model {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

std::string area_label(int i) { return "admin1 " + std::to_string(i + 1); }

// Normalize in place by log-sum-exp; throws when nothing is finite.
void normalize(std::vector<double>& lm, const std::string& what) {
  double mx = kNegInf;
  for (double v : lm) mx = std::max(mx, v);
  if (!std::isfinite(mx)) {
    throw NumericalError(what + ": zero total mass over " + std::to_string(lm.size()) + " support points");
  }
  double s = 0.0;
  for (double v : lm) s += std::exp(v - mx);
  const double lse = mx + std::log(s);
  for (double& v : lm) v -= lse;
}

}  // namespace

std::string to_string(Variant v) {
  switch (v) {
    case Variant::ul: return "ul";
    case Variant::dabul: return "dabul";
    case Variant::exact: return "exact";
  }
  return "?";
}

Variant parse_variant(const std::string& s) {
  std::string t;
  for (char c : s) t.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  if (t == "ul" || t == "standard" || t == "standard_ul") return Variant::ul;
  if (t == "dabul") return Variant::dabul;
  if (t == "exact" || t == "exact_dabul") return Variant::exact;
  throw ContractViolation("unknown model variant '" + s + "' (expected ul, dabul or exact)");
}

void ModelConfig::validate() const {
  auto pos = [](double x, const char* name) {
    if (!(x > 0.0) || !std::isfinite(x)) throw ContractViolation(std::string("model config: ") + name + " must be positive");
  };
  pos(intercept_sd, "intercept_sd");
  pos(beta_sd, "beta_sd");
  pos(pc_u, "pc_u");
  pos(phi_a, "phi_a");
  pos(phi_b, "phi_b");
  pos(d_rate, "d_rate");
  if (!(pc_alpha > 0.0 && pc_alpha < 1.0)) throw ContractViolation("model config: pc_alpha must lie in (0, 1)");
  if (!std::isfinite(intercept_mean) || !std::isfinite(beta_mean)) {
    throw ContractViolation("model config: prior means must be finite");
  }
}

Eigen::VectorXd ParamLayout::pack(const ModelParams& p) const {
  if (p.beta.size() != m1 || p.v.size() != m2 || p.u.size() != m2) {
    throw ContractViolation("ModelParams dimensions do not match the layout");
  }
  if (!(p.sigma2 > 0.0) || !(p.phi > 0.0 && p.phi < 1.0) || !(p.d > 0.0)) {
    throw ContractViolation("ModelParams: need sigma2 > 0, phi in (0,1), d > 0");
  }
  Eigen::VectorXd th(size());
  th[alpha_urban()] = p.alpha_urban;
  th[alpha_rural()] = p.alpha_rural;
  for (int i = 1; i < m1; ++i) th[beta(i)] = p.beta[i];
  for (int j = 0; j < m2; ++j) {
    th[v(j)] = p.v[j];
    th[u(j)] = p.u[j];
  }
  th[log_sigma()] = 0.5 * std::log(p.sigma2);
  th[logit_phi()] = dist::logit(p.phi);
  th[log_d()] = std::log(p.d);
  return th;
}

ModelParams ParamLayout::unpack(const Eigen::VectorXd& th) const {
  if (th.size() != size()) throw ContractViolation("parameter vector has wrong length");
  ModelParams p;
  p.alpha_urban = th[alpha_urban()];
  p.alpha_rural = th[alpha_rural()];
  p.beta = Eigen::VectorXd::Zero(m1);
  for (int i = 1; i < m1; ++i) p.beta[i] = th[beta(i)];
  p.v = th.segment(v(0), m2);
  p.u = th.segment(u(0), m2);
  p.sigma2 = std::exp(2.0 * th[log_sigma()]);
  p.phi = dist::inv_logit(th[logit_phi()]);
  p.d = std::exp(th[log_d()]);
  return p;
}

std::vector<std::string> ParamLayout::names() const {
  std::vector<std::string> n;
  n.reserve(size());
  n.push_back("alpha_U");
  n.push_back("alpha_R");
  for (int i = 1; i < m1; ++i) n.push_back("beta_" + std::to_string(i + 1));
  for (int j = 0; j < m2; ++j) n.push_back("v_" + std::to_string(j + 1));
  for (int j = 0; j < m2; ++j) n.push_back("u_" + std::to_string(j + 1));
  n.push_back("log_sigma");
  n.push_back("logit_phi");
  n.push_back("log_d");
  return n;
}

Eigen::VectorXd spatial_effect(const ModelParams& p, const geo::StructureMatrix& s) {
  const double sigma = std::sqrt(p.sigma2);
  return sigma * (std::sqrt(1.0 - p.phi) * p.v + std::sqrt(p.phi) * s.project(p.u));
}

double risk_from_params(const ModelParams& p, const geo::StructureMatrix& s, survey::Stratum stratum,
                        int admin1, int admin2) {
  if (admin1 < 0 || admin1 >= p.beta.size() || admin2 < 0 || admin2 >= s.size()) {
    throw ContractViolation("risk_from_params: area id out of range");
  }
  const Eigen::VectorXd b = spatial_effect(p, s);
  const double alpha = stratum == survey::Stratum::urban ? p.alpha_urban : p.alpha_rural;
  return std::exp(alpha + p.beta[admin1] + b[admin2]);
}

ModelData ModelData::build(const geo::Geography& g, const survey::SurveyData& data) {
  if (data.m1 != g.m1 || data.m2 != g.m2) {
    throw ContractViolation("survey areas (" + std::to_string(data.m1) + ", " + std::to_string(data.m2) +
                            ") do not match the geography (" + std::to_string(g.m1) + ", " +
                            std::to_string(g.m2) + ")");
  }
  ModelData d;
  d.m1 = g.m1;
  d.m2 = g.m2;
  d.sampled_by_admin1.assign(d.m1, {});
  d.admin1_births.assign(d.m1, 0);
  d.admin1_observed_deaths.assign(d.m1, 0);
  d.unsampled_births_by_cell.assign(2 * d.m2, 0.0);
  d.cell_admin1.assign(2 * d.m2, 0);
  for (int j = 0; j < d.m2; ++j) d.cell_admin1[2 * j] = d.cell_admin1[2 * j + 1] = g.admin1_of[j];
  for (std::size_t r = 0; r < data.records.size(); ++r) {
    const auto& rec = data.records[r];
    if (g.admin1_of[rec.admin2] != rec.admin1) {
      throw ContractViolation("cluster " + std::to_string(rec.cluster_id) + ": admin2 " +
                              std::to_string(rec.admin2 + 1) + " is not nested in admin1 " +
                              std::to_string(rec.admin1 + 1));
    }
    const int cell = 2 * rec.admin2 + static_cast<int>(rec.stratum);
    d.admin1_births[rec.admin1] += rec.frame_births;
    if (rec.sampled && rec.births > 0) {
      SampledCluster sc;
      sc.record = r;
      sc.admin1 = rec.admin1;
      sc.admin2 = rec.admin2;
      sc.cell = cell;
      sc.frame_births = rec.frame_births;
      sc.births = rec.births;
      sc.deaths = rec.deaths;
      d.sampled_by_admin1[rec.admin1].push_back(static_cast<int>(d.sampled.size()));
      d.sampled.push_back(sc);
      d.admin1_observed_deaths[rec.admin1] += rec.deaths;
    } else {
      d.unsampled_births_by_cell[cell] += static_cast<double>(rec.frame_births);
    }
  }
  if (d.sampled.empty()) throw ContractViolation("survey has no sampled clusters");
  std::vector<double> urban(d.m2, 0.0), all(d.m2, 0.0);
  for (const auto& rec : data.records) {
    all[rec.admin2] += static_cast<double>(rec.frame_births);
    if (rec.stratum == survey::Stratum::urban) urban[rec.admin2] += static_cast<double>(rec.frame_births);
  }
  d.admin2_urban_share.assign(d.m2, 0.5);
  d.admin2_weight.assign(d.m2, 0.0);
  for (int j = 0; j < d.m2; ++j) {
    if (all[j] > 0.0) d.admin2_urban_share[j] = urban[j] / all[j];
    const double n1 = static_cast<double>(d.admin1_births[g.admin1_of[j]]);
    if (n1 > 0.0) d.admin2_weight[j] = all[j] / n1;
  }
  return d;
}

void LatentCounts::recompute_sums(const ModelData& data) {
  y_plus_sampled.assign(data.m1, 0);
  for (std::size_t k = 0; k < data.sampled.size(); ++k) y_plus_sampled[data.sampled[k].admin1] += y_sampled[k];
}

void LatentCounts::check(const ModelData& data) const {
  if (y_sampled.size() != data.sampled.size() || static_cast<int>(y_plus.size()) != data.m1 ||
      static_cast<int>(y_plus_sampled.size()) != data.m1) {
    throw ContractViolation("latent counts have wrong dimensions");
  }
  std::vector<long> sums(data.m1, 0);
  for (std::size_t k = 0; k < y_sampled.size(); ++k) {
    const auto& c = data.sampled[k];
    const long y = y_sampled[k];
    if (y < c.deaths || y > c.deaths + c.frame_births - c.births) {
      throw ContractViolation("latent Y_c^(s) = " + std::to_string(y) + " outside [" + std::to_string(c.deaths) +
                              ", " + std::to_string(c.deaths + c.frame_births - c.births) +
                              "] for sampled cluster index " + std::to_string(k));
    }
    sums[c.admin1] += y;
  }
  for (int i = 0; i < data.m1; ++i) {
    if (sums[i] != y_plus_sampled[i]) throw ContractViolation(area_label(i) + ": stale Y_{i+}^(s)");
    if (y_plus[i] < y_plus_sampled[i]) {
      throw ContractViolation(area_label(i) + ": Y_{i+} = " + std::to_string(y_plus[i]) + " below Y_{i+}^(s) = " +
                              std::to_string(y_plus_sampled[i]));
    }
  }
}

double DiscretePmf::probability(long value) const {
  if (value < first || value > last()) return 0.0;
  return std::exp(log_mass[static_cast<std::size_t>(value - first)]);
}

Model::Model(ModelConfig config, geo::Geography geography, const survey::SurveyData& data,
             std::optional<direct::DirectEstimates> direct)
    : config_(std::move(config)), geography_(std::move(geography)) {
  config_.validate();
  geography_.validate();
  structure_ = geo::build_icar_structure(geography_, config_.nesting);
  data_ = ModelData::build(geography_, data);
  layout_ = ParamLayout{geography_.m1, geography_.m2};
  direct_terms_.assign(data_.m1, DirectTerm{});
  r_hat_.assign(data_.m1, std::numeric_limits<double>::quiet_NaN());
  direct_table_.assign(data_.m1, {});
  direct_up_.assign(data_.m1, {});
  direct_down_.assign(data_.m1, {});
  if (config_.variant == Variant::ul) return;

  if (!direct) throw ContractViolation(to_string(config_.variant) + " model requires direct estimates");
  if (static_cast<int>(direct->areas.size()) != data_.m1) {
    throw ContractViolation("direct estimates cover " + std::to_string(direct->areas.size()) + " areas, expected " +
                            std::to_string(data_.m1));
  }
  for (int i = 0; i < data_.m1; ++i) {
    const auto& a = direct->areas[i];
    r_hat_[i] = a.r_hat;
    if (config_.variant == Variant::dabul) {
      const bool ok = !a.degenerate && std::isfinite(a.r_hat) && a.r_hat > 0.0 && a.r_hat < 1.0 &&
                      std::isfinite(a.v_logit) && a.v_logit > 0.0;
      if (ok) {
        direct_terms_[i] = DirectTerm{true, dist::logit(a.r_hat), a.v_logit};
        // log N(logit r_hat; logit(t / N), V) up to a constant, for t = 0..N.
        const long n = data_.admin1_births[i];
        auto& tab = direct_table_[i];
        tab.assign(n + 1, kNegInf);
        for (long t = 1; t < n; ++t) {
          const double z = direct_terms_[i].logit_r_hat - std::log(static_cast<double>(t) / static_cast<double>(n - t));
          tab[t] = -0.5 * z * z / a.v_logit;
        }
        auto& up = direct_up_[i];
        auto& down = direct_down_[i];
        up.assign(n + 1, 0.0);
        down.assign(n + 1, 0.0);
        for (long t = 1; t + 1 < n; ++t) up[t] = std::exp(tab[t + 1] - tab[t]);
        for (long t = 2; t < n; ++t) down[t] = std::exp(tab[t - 1] - tab[t]);
      } else {
        warnings_.push_back(area_label(i) + ": degenerate direct estimate, direct term dropped");
      }
    }
  }
  if (config_.variant == Variant::exact) {
    fixed_y_plus_.assign(data_.m1, 0);
    for (int i = 0; i < data_.m1; ++i) {
      const double r = r_hat_[i];
      if (!std::isfinite(r) || r < 0.0 || r > 1.0) {
        throw InfeasibleError(area_label(i) + ": no usable direct estimate for the exact benchmark");
      }
      const long n = data_.admin1_births[i];
      const long t = std::min(n, static_cast<long>(std::llround(r * static_cast<double>(n))));
      if (t < data_.admin1_observed_deaths[i]) {
        throw InfeasibleError(area_label(i) + ": benchmark round(r_hat N) = " + std::to_string(t) +
                              " is below the observed deaths " + std::to_string(data_.admin1_observed_deaths[i]));
      }
      fixed_y_plus_[i] = t;
    }
    // Areas without unsampled births need the sampled latents to hit the total exactly.
    for (int i = 0; i < data_.m1; ++i) {
      double unsampled = 0.0;
      for (int c = 0; c < data_.cells(); ++c) {
        if (data_.cell_admin1[c] == i) unsampled += data_.unsampled_births_by_cell[c];
      }
      if (unsampled > 0.0) continue;
      long capacity = 0;
      for (int k : data_.sampled_by_admin1[i]) {
        capacity += data_.sampled[k].frame_births - data_.sampled[k].births;
      }
      if (fixed_y_plus_[i] > data_.admin1_observed_deaths[i] + capacity) {
        throw InfeasibleError(area_label(i) + ": benchmark exceeds the deaths the sampled clusters can hold");
      }
    }
  }
}

RateState Model::rates(const ModelParams& p) const {
  RateState rs;
  rs.d = p.d;
  const Eigen::VectorXd b = spatial_effect(p, structure_);
  rs.cell_rate.resize(data_.cells());
  rs.unsampled_mean.assign(data_.m1, 0.0);
  for (int j = 0; j < data_.m2; ++j) {
    const int i = geography_.admin1_of[j];
    const double base = p.beta[i] + b[j];
    rs.cell_rate[2 * j] = std::exp(p.alpha_urban + base);
    rs.cell_rate[2 * j + 1] = std::exp(p.alpha_rural + base);
    rs.unsampled_mean[i] += data_.unsampled_births_by_cell[2 * j] * rs.cell_rate[2 * j] +
                            data_.unsampled_births_by_cell[2 * j + 1] * rs.cell_rate[2 * j + 1];
  }
  return rs;
}

// Data likelihood as a function of the continuous parameters. Accumulates
// d/d(eta_cell) and d/d(d) where eta_cell is the log rate of each cell.
//
// For dabul/exact this is the collapsed DCM over (Y_i^(s), Y_{i+} - Y_{i+}^(s))
// times NB(Y_{i+}; sum N_c r_c, d). With a shared d that product equals the
// product of independent NB terms, one per sampled cluster plus one for the
// unsampled group, which is what gets evaluated here.
double Model::likelihood(const ModelParams& p, const Eigen::VectorXd& b, const LatentCounts* lat, bool marginal,
                         Eigen::VectorXd* g_eta, double* g_d) const {
  const int cells = data_.cells();
  std::vector<double> eta(cells), rate(cells);
  for (int j = 0; j < data_.m2; ++j) {
    const int i = geography_.admin1_of[j];
    eta[2 * j] = p.alpha_urban + p.beta[i] + b[j];
    eta[2 * j + 1] = p.alpha_rural + p.beta[i] + b[j];
    rate[2 * j] = std::exp(eta[2 * j]);
    rate[2 * j + 1] = std::exp(eta[2 * j + 1]);
  }
  const double d = p.d;
  const double log_d = std::log(d), l1pd = std::log1p(d);
  double total = 0.0;
  if (config_.variant == Variant::ul) {
    for (const auto& c : data_.sampled) {
      const double mu = static_cast<double>(c.births) * rate[c.cell];
      const auto nb = dist::negbin_logpmf_derivs(c.deaths, mu, d, log_d, l1pd);
      total += nb.value;
      if (g_eta) (*g_eta)[c.cell] += nb.d_mean * mu;
      if (g_d) *g_d += nb.d_overdispersion;
    }
    return total;
  }
  if (!lat) throw ContractViolation(to_string(config_.variant) + " log posterior requires latent counts");
  lat->check(data_);
  for (std::size_t k = 0; k < data_.sampled.size(); ++k) {
    const auto& c = data_.sampled[k];
    const double mu = static_cast<double>(c.frame_births) * rate[c.cell];
    const auto nb = dist::negbin_logpmf_derivs(lat->y_sampled[k], mu, d, log_d, l1pd);
    total += nb.value;
    if (g_eta) (*g_eta)[c.cell] += nb.d_mean * mu;
    if (g_d) *g_d += nb.d_overdispersion;
  }
  std::vector<double> lam(data_.m1, 0.0);
  for (int c = 0; c < cells; ++c) lam[data_.cell_admin1[c]] += data_.unsampled_births_by_cell[c] * rate[c];
  for (int i = 0; i < data_.m1; ++i) {
    const long x = lat->y_plus[i] - lat->y_plus_sampled[i];
    if (!(lam[i] > 0.0)) {
      // Y_{i+} = Y_{i+}^(s); the direct term is then free of theta.
      if (x != 0 && !marginal) return kNegInf;
      continue;
    }
    const auto nb = marginal ? yplus_marginal(i, lam[i], d, *lat) : dist::negbin_logpmf_derivs(x, lam[i], d, log_d, l1pd);
    if (!std::isfinite(nb.value)) return kNegInf;
    total += nb.value;
    if (g_d) *g_d += nb.d_overdispersion;
    if (g_eta) {
      for (int j : geography_.admin2_in(i)) {
        for (int s = 0; s < 2; ++s) {
          const int c = 2 * j + s;
          (*g_eta)[c] += nb.d_mean * data_.unsampled_births_by_cell[c] * rate[c];
        }
      }
    }
  }
  return total;
}

double Model::log_prior(const Eigen::VectorXd& theta, Eigen::VectorXd* grad) const {
  const auto& L = layout_;
  if (theta.size() != L.size()) throw ContractViolation("parameter vector has wrong length");
  double lp = 0.0;
  auto normal = [&](int idx, double mean, double sd) {
    const double z = (theta[idx] - mean) / sd;
    lp += -0.5 * z * z - std::log(sd) - 0.5 * std::log(2.0 * M_PI);
    if (grad) (*grad)[idx] += -z / sd;
  };
  normal(L.alpha_urban(), config_.intercept_mean, config_.intercept_sd);
  normal(L.alpha_rural(), config_.intercept_mean, config_.intercept_sd);
  for (int i = 1; i < L.m1; ++i) normal(L.beta(i), config_.beta_mean, config_.beta_sd);

  // PC prior: sigma ~ Exp(lambda), plus log-Jacobian theta_sigma.
  const double ts = theta[L.log_sigma()];
  const double sigma = std::exp(ts);
  const double lambda = dist::pc_prior_rate(config_.pc_u, config_.pc_alpha);
  lp += std::log(lambda) - lambda * sigma + ts;
  if (grad) (*grad)[L.log_sigma()] += -lambda * sigma + 1.0;

  // phi ~ Beta(a, b), plus log phi + log(1 - phi).
  const double tp = theta[L.logit_phi()];
  const double a = config_.phi_a, bb = config_.phi_b;
  const double log_phi = -std::log1p(std::exp(-tp));
  const double log_1m_phi = -std::log1p(std::exp(tp));
  const double phi = std::exp(log_phi);
  lp += a * log_phi + bb * log_1m_phi - (dist::log_gamma(a) + dist::log_gamma(bb) - dist::log_gamma(a + bb));
  if (grad) (*grad)[L.logit_phi()] += a * (1.0 - phi) - bb * phi;

  // d ~ Exp(rate), plus log-Jacobian theta_d.
  const double td = theta[L.log_d()];
  const double d = std::exp(td);
  lp += std::log(config_.d_rate) - config_.d_rate * d + td;
  if (grad) (*grad)[L.log_d()] += -config_.d_rate * d + 1.0;
  return lp;
}

dist::NegBinDerivs Model::yplus_marginal(int i, double lam, double d, const LatentCounts& lat) const {
  // Sums w_t = NB(t - S; lam, d) exp(direct(t)) over the same bulk that the
  // Y_{i+} conditional scans, stepping w in linear space with the ratio
  // w_{t+1} / w_t = p (x + a) / (x + 1) * exp(direct(t+1) - direct(t)) and a
  // running log offset, so the loop needs no log or exp per point.
  const double a = lam / d;
  if (!std::isfinite(a) || !(a > 0.0)) return {kNegInf, 0.0, 0.0};
  const long S = lat.y_plus_sampled[i];
  const long N = data_.admin1_births[i];
  if (S > N) throw ContractViolation(area_label(i) + ": sampled latent deaths exceed births");
  const DirectTerm& dt = direct_terms_[i];
  const bool active = dt.active;
  const long tmin = active ? std::max(S, 1L) : S;
  const long tmax = active ? N - 1 : N;
  if (tmin > tmax) return {kNegInf, 0.0, 0.0};
  const double p = d / (1.0 + d);
  const double log_p = std::log(p), l1pd = std::log1p(d);
  const std::vector<double>& dtab = direct_table_[i];
  const std::vector<double>& up = direct_up_[i];
  const std::vector<double>& down = direct_down_[i];

  const double mode = static_cast<double>(S) + std::ceil(std::max(0.0, (a * p - 1.0) / (1.0 - p)));
  long t_nb = mode >= static_cast<double>(N) ? N : static_cast<long>(mode);
  long t_dir = active ? std::llround(r_hat_[i] * static_cast<double>(N)) : t_nb;
  t_nb = std::clamp(t_nb, tmin, tmax);
  t_dir = std::clamp(t_dir, tmin, tmax);
  const long lo = std::min(t_nb, t_dir), hi = std::max(t_nb, t_dir);

  auto log_w = [&](long t) {
    const long x = t - S;
    return dist::log_rising(x, a) - dist::log_factorial(x) + static_cast<double>(x) * log_p + (active ? dtab[t] : 0.0);
  };
  constexpr double kBig = 1e100;
  const double cut = std::exp(-kTruncationNats);

  // Accumulators in a scale where the true weight is w * exp(off).
  struct Pass {
    double off, w = 1.0, s0 = 0.0, sx = 0.0, sd = 0.0, mx = 1.0;
    void rescale(double new_off) {
      const double f = std::exp(off - new_off);
      w *= f, s0 *= f, sx *= f, sd *= f, mx *= f;
      off = new_off;
    }
    void add(double x, double dig) {
      s0 += w, sx += w * x, sd += w * dig;
      mx = std::max(mx, w);
    }
  };
  auto renormalize = [&](Pass& ps, long t) {
    if (std::isfinite(ps.w)) {
      ps.rescale(ps.off + std::log(ps.w));
    } else {
      // A ratio overflowed: restart the scale from the exact value.
      const double lw = log_w(t);
      const double f = std::exp(ps.off - lw);
      ps.s0 *= f, ps.sx *= f, ps.sd *= f, ps.mx *= f;
      ps.off = lw;
      ps.w = 1.0;
    }
  };

  const double dig_lo = dist::digamma_rising(lo - S, a);
  Pass R;
  R.off = log_w(lo);
  if (!std::isfinite(R.off)) return {kNegInf, 0.0, 0.0};
  double dig = dig_lo;
  for (long t = lo;; ++t) {
    const double x = static_cast<double>(t - S);
    R.add(x, dig);
    if (t >= hi && R.w < R.mx * cut) break;
    if (t == tmax) break;
    R.w *= p * (x + a) / (x + 1.0) * (active ? up[t] : 1.0);
    dig += 1.0 / (x + a);
    if (!(R.w <= kBig)) renormalize(R, t + 1);
  }
  Pass L;
  L.off = R.off + std::log(R.mx);  // left weights start relative to the right-pass maximum
  L.w = std::exp(log_w(lo) - L.off);
  L.mx = 1.0;
  dig = dig_lo;
  for (long t = lo; t > tmin;) {
    const double x = static_cast<double>(t - S);  // x >= 1 here
    L.w *= x / (p * (x - 1.0 + a)) * (active ? down[t] : 1.0);
    dig -= 1.0 / (x - 1.0 + a);
    --t;
    if (!(L.w <= kBig)) renormalize(L, t);
    L.add(x - 1.0, dig);
    if (L.w < L.mx * cut) break;
  }
  // Combine both passes on the right pass scale.
  if (L.s0 > 0.0) L.rescale(R.off);
  const double s0 = R.s0 + L.s0, ex = (R.sx + L.sx) / s0, edig = (R.sd + L.sd) / s0;
  dist::NegBinDerivs out;
  out.value = R.off + std::log(s0) - a * l1pd;
  out.d_mean = (edig - l1pd) / d;
  out.d_overdispersion = (-lam * edig + lam * l1pd) / (d * d) - lam / (d * (1.0 + d)) + ex / (d * (1.0 + d));
  return out;
}

double Model::log_posterior(const Eigen::VectorXd& theta, Eigen::VectorXd* grad, const LatentCounts* latents,
                            bool marginal_yplus) const {
  if (marginal_yplus && config_.variant != Variant::dabul) {
    throw ContractViolation("Y_{i+} can only be summed out of the dabul variant");
  }
  const auto& L = layout_;
  const ModelParams p = L.unpack(theta);
  if (grad) grad->setZero(L.size());

  const double sigma = std::sqrt(p.sigma2);
  const double sa = std::sqrt(1.0 - p.phi), sp = std::sqrt(p.phi);
  const Eigen::VectorXd u_proj = structure_.project(p.u);
  const Eigen::VectorXd b = sigma * (sa * p.v + sp * u_proj);

  Eigen::VectorXd g_eta = Eigen::VectorXd::Zero(data_.cells());
  double g_d = 0.0;
  const double lik = likelihood(p, b, latents, marginal_yplus, grad ? &g_eta : nullptr, grad ? &g_d : nullptr);
  if (!std::isfinite(lik)) return kNegInf;

  // Latent field: -v'v/2 - u~' Q_* u~ / 2.
  const Eigen::VectorXd qu = structure_.q_star * u_proj;
  double lp = lik - 0.5 * p.v.squaredNorm() - 0.5 * u_proj.dot(qu);
  lp += log_prior(theta, grad);
  if (!grad) return lp;

  Eigen::VectorXd g_b = Eigen::VectorXd::Zero(data_.m2);
  for (int j = 0; j < data_.m2; ++j) {
    const int i = geography_.admin1_of[j];
    const double gu = g_eta[2 * j], gr = g_eta[2 * j + 1];
    g_b[j] = gu + gr;
    (*grad)[L.alpha_urban()] += gu;
    (*grad)[L.alpha_rural()] += gr;
    if (i > 0) (*grad)[L.beta(i)] += gu + gr;
  }
  const Eigen::VectorXd gv = -p.v + sigma * sa * g_b;
  const Eigen::VectorXd gu = structure_.project(-qu + sigma * sp * g_b);
  grad->segment(L.v(0), data_.m2) += gv;
  grad->segment(L.u(0), data_.m2) += gu;
  // b depends on sigma linearly: db/dlog(sigma) = b.
  (*grad)[L.log_sigma()] += g_b.dot(b);
  // db/dphi = sigma (-v / (2 sa) + u~ / (2 sp)); dphi/dlogit = phi (1 - phi), folded
  // in so that phi rounding to 0 or 1 gives a zero rather than NaN.
  (*grad)[L.logit_phi()] += 0.5 * sigma * (-g_b.dot(p.v) * p.phi * sa + g_b.dot(u_proj) * (1.0 - p.phi) * sp);
  (*grad)[L.log_d()] += g_d * p.d;
  return lp;
}

int Model::sampler_dimension() const { return layout_.size() - data_.m2 + structure_.free_dimension(); }

Eigen::VectorXd Model::to_model_coordinates(const Eigen::VectorXd& ts) const {
  if (ts.size() != sampler_dimension()) throw ContractViolation("sampler vector has wrong length");
  const int m2 = data_.m2, f = structure_.free_dimension();
  const int head = layout_.u(0);
  Eigen::VectorXd th(layout_.size());
  th.head(head) = ts.head(head);
  th.segment(head, m2) = structure_.from_whitened(ts.segment(head, f));
  th.tail(3) = ts.tail(3);
  return th;
}

Eigen::VectorXd Model::to_sampler_coordinates(const Eigen::VectorXd& th) const {
  if (th.size() != layout_.size()) throw ContractViolation("parameter vector has wrong length");
  const int m2 = data_.m2, f = structure_.free_dimension();
  const int head = layout_.u(0);
  Eigen::VectorXd ts(sampler_dimension());
  ts.head(head) = th.head(head);
  // W' Q_* W = I, so w = W' Q_* u for u in the constraint complement.
  const Eigen::VectorXd u = structure_.project(th.segment(head, m2));
  ts.segment(head, f) = structure_.to_whitened_gradient(structure_.q_star * u);
  ts.tail(3) = th.tail(3);
  return ts;
}

double Model::log_posterior_sampler(const Eigen::VectorXd& ts, Eigen::VectorXd* grad,
                                    const LatentCounts* latents, bool marginal_yplus) const {
  const Eigen::VectorXd th = to_model_coordinates(ts);
  if (!grad) return log_posterior(th, nullptr, latents, marginal_yplus);
  Eigen::VectorXd g;
  const double lp = log_posterior(th, &g, latents, marginal_yplus);
  const int m2 = data_.m2, f = structure_.free_dimension();
  const int head = layout_.u(0);
  grad->resize(sampler_dimension());
  if (!std::isfinite(lp)) {
    grad->setZero();
    return lp;
  }
  grad->head(head) = g.head(head);
  grad->segment(head, f) = structure_.to_whitened_gradient(g.segment(head, m2));
  grad->tail(3) = g.tail(3);
  return lp;
}

long Model::fill_yplus_conditional(int i, const RateState& rs, const LatentCounts& lat,
                                   std::vector<double>& out) const {
  if (config_.variant != Variant::dabul) {
    throw ContractViolation("Y_{i+} full conditional is only defined for the dabul variant");
  }
  out.clear();
  const long S = lat.y_plus_sampled[i];
  const long N = data_.admin1_births[i];
  const double lam = rs.unsampled_mean[i];
  if (S > N) throw ContractViolation(area_label(i) + ": sampled latent deaths exceed births");
  if (!(lam > 0.0)) {
    // No unsampled group: Y_{i+} is pinned to Y_{i+}^(s).
    out.push_back(0.0);
    return S;
  }
  if (!std::isfinite(lam / rs.d)) throw NumericalError(area_label(i) + ": unsampled mean is not finite");
  const DirectTerm& dt = direct_terms_[i];
  const double Nd = static_cast<double>(N);
  const std::vector<double>& dtab = direct_table_[i];
  auto direct_term = [&](long t) { return dt.active ? dtab[t] : 0.0; };
  const double d = rs.d;
  const double a = lam / d;
  const double p = d / (1.0 + d);
  const double log_p = std::log(p);

  // Bracket the bulk between the NB mode and the direct-estimate centre.
  const double mode = static_cast<double>(S) + std::ceil(std::max(0.0, (a * p - 1.0) / (1.0 - p)));
  const long t_nb = mode >= static_cast<double>(N) ? N : static_cast<long>(mode);
  long t_dir = t_nb;
  if (dt.active) t_dir = std::clamp(static_cast<long>(std::llround(r_hat_[i] * Nd)), S, N);
  const long lo = std::min(t_nb, t_dir), hi = std::max(t_nb, t_dir);

  // h(x) = log Gamma(x + a) - log Gamma(a) - log x! + x log p, x = t - S.
  const long x_lo = lo - S;
  const double h_lo = dist::log_rising(x_lo, a) - dist::log_factorial(x_lo) +
                      static_cast<double>(x_lo) * log_p;
  double h = h_lo;
  double run_max = kNegInf;
  for (long t = lo;; ++t) {
    const double val = h + direct_term(t);
    out.push_back(val);
    run_max = std::max(run_max, val);
    if (t == hi) break;
    const double x = static_cast<double>(t - S);
    h += std::log((x + a) / (x + 1.0)) + log_p;
  }
  for (long t = hi; t < N;) {
    const double x = static_cast<double>(t - S);
    h += std::log((x + a) / (x + 1.0)) + log_p;
    ++t;
    const double val = h + direct_term(t);
    out.push_back(val);
    run_max = std::max(run_max, val);
    if (val < run_max - kTruncationNats) break;
  }
  std::vector<double> left;
  long first = lo;
  h = h_lo;
  while (first > S) {
    const double x = static_cast<double>(first - S);
    h -= std::log((x - 1.0 + a) / x) + log_p;
    --first;
    const double val = h + direct_term(first);
    left.push_back(val);
    run_max = std::max(run_max, val);
    if (val < run_max - kTruncationNats) break;
  }
  if (!left.empty()) out.insert(out.begin(), left.rbegin(), left.rend());
  return first;
}

long Model::fill_ycluster_conditional(int k, const RateState& rs, const LatentCounts& lat,
                                      std::vector<double>& out) const {
  if (config_.variant == Variant::ul) throw ContractViolation("ul model has no latent cluster counts");
  out.clear();
  const auto& c = data_.sampled[k];
  const int i = c.admin1;
  const long Z = c.deaths, Nc = c.frame_births, n = c.births;
  const long s_minus = lat.y_plus_sampled[i] - lat.y_sampled[k];
  const long total = lat.y_plus[i];
  const double d = rs.d;
  const double a_c = static_cast<double>(Nc) * rs.cell_rate[c.cell] / d;
  const double lam = rs.unsampled_mean[i];
  const long lo = Z;
  long hi = Z + Nc - n;
  const double Nd = static_cast<double>(Nc), nd = static_cast<double>(n), Zd = static_cast<double>(Z);

  auto base = [&](long y) {
    return dist::hypergeom_logpmf(Z, Nc, y, n) + dist::log_rising(y, a_c) -
           dist::log_factorial(y);
  };
  // Ratio of the hypergeometric x NB-kernel terms at y + 1 versus y.
  auto base_ratio = [&](double y) { return (Nd - y - nd + Zd) * (y + a_c) / ((y + 1.0 - Zd) * (Nd - y)); };

  if (lam > 0.0) {
    const long K = total - s_minus;  // deaths shared by this cluster and the unsampled group
    hi = std::min(hi, K);
    if (hi < lo) {
      throw ContractViolation("sampled cluster index " + std::to_string(k) + ": empty latent support (K = " +
                              std::to_string(K) + ", Z = " + std::to_string(Z) + ")");
    }
    const double a_u = lam / d;
    double val = base(lo) + dist::log_rising(K - lo, a_u) - dist::log_factorial(K - lo);
    double run_max = val;
    out.push_back(val);
    for (long y = lo; y < hi; ++y) {
      const double yd = static_cast<double>(y);
      const double x = static_cast<double>(K - y);
      val += std::log(base_ratio(yd) * x / (x - 1.0 + a_u));
      out.push_back(val);
      run_max = std::max(run_max, val);
      if (val < run_max - kTruncationNats) break;
    }
    return lo;
  }

  if (config_.variant == Variant::exact) {
    const long y = total - s_minus;
    if (y < lo || y > hi) {
      throw ContractViolation("sampled cluster index " + std::to_string(k) + ": fixed total forces Y_c^(s) = " +
                              std::to_string(y) + " outside its support");
    }
    out.push_back(0.0);
    return y;
  }

  // dabul with no unsampled group: Y_{i+} = Y_{i+}^(s) moves with y, so the
  // NB tail factor p^y and the direct term enter this block update.
  const DirectTerm& dt = direct_terms_[i];
  const std::vector<double>& dtab = direct_table_[i];
  auto direct_term = [&](long t) { return dt.active ? dtab[t] : 0.0; };
  const double log_p = std::log(d / (1.0 + d));
  double kern = base(lo) + static_cast<double>(lo) * log_p;
  double run_max = kNegInf;
  for (long y = lo;; ++y) {
    const double val = kern + direct_term(s_minus + y);
    out.push_back(val);
    run_max = std::max(run_max, val);
    if (y == hi || val < run_max - kTruncationNats) break;
    kern += std::log(base_ratio(static_cast<double>(y))) + log_p;
  }
  return lo;
}

DiscretePmf Model::yplus_conditional(int i, const RateState& rates, const LatentCounts& lat) const {
  DiscretePmf pmf;
  pmf.first = fill_yplus_conditional(i, rates, lat, pmf.log_mass);
  normalize(pmf.log_mass, area_label(i) + " Y_{i+} conditional");
  return pmf;
}

DiscretePmf Model::ycluster_conditional(int k, const RateState& rates, const LatentCounts& lat) const {
  DiscretePmf pmf;
  pmf.first = fill_ycluster_conditional(k, rates, lat, pmf.log_mass);
  normalize(pmf.log_mass, "sampled cluster index " + std::to_string(k) + " conditional");
  return pmf;
}

LatentCounts Model::initial_latents() const {
  LatentCounts lat;
  if (!has_latents()) return lat;
  const auto& D = data_;
  lat.y_sampled.resize(D.sampled.size());
  for (std::size_t k = 0; k < D.sampled.size(); ++k) {
    const auto& c = D.sampled[k];
    const long scaled = std::llround(static_cast<double>(c.deaths) * static_cast<double>(c.frame_births) /
                                     static_cast<double>(c.births));
    lat.y_sampled[k] = std::clamp(scaled, c.deaths, c.deaths + c.frame_births - c.births);
  }
  lat.recompute_sums(D);
  lat.y_plus.assign(D.m1, 0);

  long all_deaths = 0, all_births = 0;
  for (const auto& c : D.sampled) {
    all_deaths += c.deaths;
    all_births += c.births;
  }
  const double pooled = static_cast<double>(all_deaths) / static_cast<double>(all_births);

  for (int i = 0; i < D.m1; ++i) {
    double unsampled = 0.0;
    for (int c = 0; c < D.cells(); ++c) {
      if (D.cell_admin1[c] == i) unsampled += D.unsampled_births_by_cell[c];
    }
    if (config_.variant == Variant::dabul) {
      const double r = (std::isfinite(r_hat_[i]) && r_hat_[i] > 0.0 && r_hat_[i] < 1.0) ? r_hat_[i] : pooled;
      const long extra = unsampled > 0.0 ? std::llround(r * unsampled) : 0;
      lat.y_plus[i] = std::min(lat.y_plus_sampled[i] + extra, std::max(lat.y_plus_sampled[i], D.admin1_births[i]));
      continue;
    }
    const long T = fixed_y_plus_[i];
    const auto& members = D.sampled_by_admin1[i];
    if (lat.y_plus_sampled[i] > T || unsampled == 0.0) {
      // Start from the observed deaths and, without an unsampled group, fill
      // the remaining capacity greedily so the sum equals the benchmark.
      for (int k : members) lat.y_sampled[k] = D.sampled[k].deaths;
      long remaining = T - D.admin1_observed_deaths[i];
      if (unsampled == 0.0) {
        for (int k : members) {
          const long cap = D.sampled[k].frame_births - D.sampled[k].births;
          const long add = std::min(cap, remaining);
          lat.y_sampled[k] += add;
          remaining -= add;
        }
        if (remaining != 0) throw InfeasibleError(area_label(i) + ": benchmark cannot be matched by sampled clusters");
      }
    }
    lat.y_plus[i] = T;
  }
  lat.recompute_sums(D);
  lat.check(D);
  return lat;
}

Model assemble_variant(const ModelConfig& config, const survey::SurveyData& data,
                       const std::optional<direct::DirectEstimates>& direct, const geo::Geography& g) {
  return Model(config, g, data, direct);
}

LogDensity log_posterior_ul(const Model& m, const ModelParams& p) {
  if (m.variant() != Variant::ul) throw ContractViolation("log_posterior_ul called on a " + to_string(m.variant()) + " model");
  LogDensity out;
  out.value = m.log_posterior(m.layout().pack(p), &out.gradient, nullptr);
  return out;
}

LogDensity log_posterior_dabul_continuous(const Model& m, const ModelParams& p, const LatentCounts& lat) {
  if (!m.has_latents()) throw ContractViolation("log_posterior_dabul_continuous called on a ul model");
  LogDensity out;
  out.value = m.log_posterior(m.layout().pack(p), &out.gradient, &lat);
  return out;
}

LogDensity log_posterior_dabul_marginal(const Model& m, const ModelParams& p, const LatentCounts& lat) {
  if (m.variant() != Variant::dabul) throw ContractViolation("log_posterior_dabul_marginal needs the dabul variant");
  LogDensity out;
  out.value = m.log_posterior(m.layout().pack(p), &out.gradient, &lat, true);
  return out;
}

DiscretePmf yplus_full_conditional(const Model& m, int admin1, const ModelParams& p, const LatentCounts& lat) {
  return m.yplus_conditional(admin1, m.rates(p), lat);
}

DiscretePmf ycluster_full_conditional(const Model& m, int k, const ModelParams& p, const LatentCounts& lat) {
  return m.ycluster_conditional(k, m.rates(p), lat);
}

}  // namespace dabul::model
