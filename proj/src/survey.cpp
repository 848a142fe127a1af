#include "dabul/survey.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_map>

#include "dabul/dist.hpp"
#include "dabul/errors.hpp"
#include "dabul/table_io.hpp"

namespace dabul::survey {

std::string to_string(Stratum s) { return s == Stratum::urban ? "urban" : "rural"; }

Stratum parse_stratum(const std::string& s) {
  if (s == "urban" || s == "U" || s == "1") return Stratum::urban;
  if (s == "rural" || s == "R" || s == "2") return Stratum::rural;
  throw ParseError("unknown stratum '" + s + "'");
}

bool PopulationFrame::has_outcomes() const {
  return std::all_of(clusters.begin(), clusters.end(), [](const Cluster& c) { return c.deaths >= 0; });
}

std::vector<long> PopulationFrame::admin1_births() const {
  std::vector<long> out(m1, 0);
  for (const auto& c : clusters) out[c.admin1] += c.births;
  return out;
}

std::vector<long> PopulationFrame::admin2_births() const {
  std::vector<long> out(m2, 0);
  for (const auto& c : clusters) out[c.admin2] += c.births;
  return out;
}

std::vector<long> PopulationFrame::admin1_deaths() const {
  std::vector<long> out(m1, 0);
  for (const auto& c : clusters) out[c.admin1] += c.deaths;
  return out;
}

std::vector<double> PopulationFrame::urban_fraction() const {
  std::vector<double> urban(m2, 0.0), total(m2, 0.0);
  for (const auto& c : clusters) {
    total[c.admin2] += static_cast<double>(c.births);
    if (c.stratum == Stratum::urban) urban[c.admin2] += static_cast<double>(c.births);
  }
  for (int j = 0; j < m2; ++j) urban[j] = total[j] > 0 ? urban[j] / total[j] : 0.0;
  return urban;
}

std::vector<double> PopulationFrame::admin2_population_weight() const {
  const auto b1 = admin1_births();
  const auto b2 = admin2_births();
  std::vector<int> parent(m2, -1);
  for (const auto& c : clusters) parent[c.admin2] = c.admin1;
  std::vector<double> out(m2, 0.0);
  for (int j = 0; j < m2; ++j) {
    if (parent[j] >= 0 && b1[parent[j]] > 0) out[j] = static_cast<double>(b2[j]) / static_cast<double>(b1[parent[j]]);
  }
  return out;
}

void PopulationFrame::validate() const {
  for (const auto& c : clusters) {
    if (c.admin1 < 0 || c.admin1 >= m1 || c.admin2 < 0 || c.admin2 >= m2) {
      throw ContractViolation("population: cluster " + std::to_string(c.id) + " has invalid area");
    }
    if (c.births < 1) throw ContractViolation("population: cluster " + std::to_string(c.id) + " has no births");
    if (c.deaths > c.births) throw ContractViolation("population: cluster " + std::to_string(c.id) + " has Y > N");
  }
}

void SimulationSetting::validate() const {
  if (sigma2 < 0 || phi < 0 || phi > 1 || d_true <= 0) throw ContractViolation("setting: invalid spatial/overdispersion parameters");
  if (urban_fraction_sampled <= 0 || urban_fraction_sampled > 1 || rural_fraction_sampled <= 0 || rural_fraction_sampled > 1) {
    throw ContractViolation("setting: sampling fractions must lie in (0, 1]");
  }
  if (beta_true.empty()) throw ContractViolation("setting: beta_true is empty");
}

SimulationSetting preset_setting(const std::string& id) {
  SimulationSetting s;
  s.name = id;
  if (id == "1") {
  } else if (id == "2") {
    s.sigma2 = 0.05 * 0.05;
  } else if (id == "3") {
    s.sigma2 = 0.05 * 0.05;
    s.phi = 0.7;
  } else if (id == "1a") {
    s.urban_fraction_sampled = 0.05;
    s.rural_fraction_sampled = 0.03;
  } else {
    throw ContractViolation("unknown setting id '" + id + "' (expected 1, 2, 3 or 1a)");
  }
  return s;
}

std::vector<std::string> preset_ids() { return {"1", "2", "3", "1a"}; }

std::vector<double> beta_for(const SimulationSetting& s, int m1) {
  const auto& src = s.beta_true;
  if (static_cast<int>(src.size()) == m1) return src;
  std::vector<double> out(m1);
  if (m1 == 1) {
    out[0] = src.front();
    return out;
  }
  const double last = static_cast<double>(src.size() - 1);
  for (int i = 0; i < m1; ++i) {
    const double pos = last * i / (m1 - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, src.size() - 1);
    const double t = pos - static_cast<double>(lo);
    out[i] = (1 - t) * src[lo] + t * src[hi];
  }
  return out;
}

namespace {

long rounded_normal(Rng& rng, double mean, double sd, long floor_at) {
  const double x = sd > 0 ? std::normal_distribution<double>(mean, sd)(rng) : mean;
  return std::max(floor_at, std::lround(x));
}

}  // namespace

PopulationFrame synthesize_population(const SimulationSetting& setting, const geo::Geography& g,
                                      std::uint64_t seed) {
  setting.validate();
  auto rng = make_rng(seed, {stream::population});
  PopulationFrame p;
  p.m1 = g.m1;
  p.m2 = g.m2;
  long next_id = 1;
  for (int i = 0; i < g.m1; ++i) {
    const auto areas = g.admin2_in(i);
    const long n_urban = rounded_normal(rng, setting.urban_clusters_mean, setting.urban_clusters_sd, 1);
    const long n_rural = rounded_normal(rng, setting.rural_clusters_mean, setting.rural_clusters_sd, 1);
    // Round-robin over admin2 areas, continuing across strata, so sibling
    // cluster counts differ by at most one.
    std::size_t slot = 0;
    auto add = [&](Stratum s, long count, double mean, double sd) {
      for (long k = 0; k < count; ++k) {
        Cluster c;
        c.id = next_id++;
        c.admin1 = i;
        c.admin2 = areas[slot % areas.size()];
        c.stratum = s;
        c.births = rounded_normal(rng, mean, sd, 1);
        p.clusters.push_back(c);
        ++slot;
      }
    };
    add(Stratum::urban, n_urban, setting.urban_births_mean, setting.urban_births_sd);
    add(Stratum::rural, n_rural, setting.rural_births_mean, setting.rural_births_sd);
  }
  return p;
}

RiskSurface draw_risk_surface(const SimulationSetting& setting, const geo::Geography& g,
                              const PopulationFrame& population, std::uint64_t seed) {
  setting.validate();
  auto rng = make_rng(seed, {stream::risk});
  RiskSurface out;
  out.beta = beta_for(setting, g.m1);
  if (setting.sigma2 == 0.0) {
    out.b = Eigen::VectorXd::Zero(g.m2);
  } else {
    const auto structure = geo::build_icar_structure(g, geo::Nesting::per_admin1);
    out.b = dist::bym2_sample(setting.sigma2, setting.phi, structure, rng);
  }
  std::vector<double> num2(g.m2, 0.0), den2(g.m2, 0.0), num1(g.m1, 0.0), den1(g.m1, 0.0);
  out.cluster_rate.reserve(population.clusters.size());
  for (const auto& c : population.clusters) {
    const double alpha = c.stratum == Stratum::urban ? setting.alpha_urban : setting.alpha_rural;
    const double r = std::exp(alpha + out.beta[c.admin1] + out.b[c.admin2]);
    out.cluster_rate.push_back(r);
    const double nb = static_cast<double>(c.births);
    num2[c.admin2] += nb * r;
    den2[c.admin2] += nb;
    num1[c.admin1] += nb * r;
    den1[c.admin1] += nb;
  }
  out.admin2_prevalence.resize(g.m2);
  out.admin1_prevalence.resize(g.m1);
  for (int j = 0; j < g.m2; ++j) out.admin2_prevalence[j] = den2[j] > 0 ? num2[j] / den2[j] : 0.0;
  for (int i = 0; i < g.m1; ++i) out.admin1_prevalence[i] = den1[i] > 0 ? num1[i] / den1[i] : 0.0;
  return out;
}

OutcomeDraw draw_outcomes(const PopulationFrame& population, const std::vector<double>& rates,
                          double d_true, std::uint64_t seed) {
  if (rates.size() != population.clusters.size()) throw ContractViolation("draw_outcomes: rates misaligned");
  auto rng = make_rng(seed, {stream::outcomes});
  OutcomeDraw out{population, 0};
  for (std::size_t c = 0; c < rates.size(); ++c) {
    auto& cl = out.population.clusters[c];
    if (rates[c] < 0) throw ContractViolation("draw_outcomes: negative rate");
    long y = dist::negbin_sample({static_cast<double>(cl.births) * rates[c], d_true}, rng);
    if (y > cl.births) {
      y = cl.births;
      ++out.clamped;
    }
    cl.deaths = y;
  }
  return out;
}

std::size_t SurveyData::sampled_count() const {
  return static_cast<std::size_t>(std::count_if(records.begin(), records.end(), [](const SurveyRecord& r) { return r.sampled; }));
}

void SurveyData::validate() const {
  for (const auto& r : records) {
    if (!r.sampled && (r.births != 0 || r.deaths != 0)) {
      throw ContractViolation("survey: unsampled cluster " + std::to_string(r.cluster_id) + " has observations");
    }
    if (r.deaths < 0 || r.deaths > r.births || r.births > r.frame_births) {
      throw ContractViolation("survey: cluster " + std::to_string(r.cluster_id) + " violates Z <= n <= N");
    }
    if (r.sampled && (r.births < 1 || !(r.weight > 0))) {
      throw ContractViolation("survey: sampled cluster " + std::to_string(r.cluster_id) + " needs n >= 1 and weight > 0");
    }
  }
}

PpsSelection systematic_pps(const std::vector<double>& sizes, std::size_t k, Rng& rng) {
  const std::size_t n = sizes.size();
  PpsSelection out;
  out.inclusion.assign(n, 0.0);
  if (k == 0 || n == 0) return out;
  if (k >= n) {
    out.selected.resize(n);
    std::iota(out.selected.begin(), out.selected.end(), 0);
    std::fill(out.inclusion.begin(), out.inclusion.end(), 1.0);
    return out;
  }
  std::vector<char> certain(n, 0);
  std::size_t n_certain = 0;
  double total = 0.0;
  while (true) {
    total = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      if (!certain[c]) total += sizes[c];
    }
    const double remaining = static_cast<double>(k - n_certain);
    bool changed = false;
    for (std::size_t c = 0; c < n; ++c) {
      if (!certain[c] && remaining * sizes[c] / total >= 1.0) {
        certain[c] = 1;
        ++n_certain;
        changed = true;
      }
    }
    if (!changed || n_certain >= k) break;
  }
  std::vector<std::size_t> order;
  for (std::size_t c = 0; c < n; ++c) {
    if (certain[c]) {
      out.inclusion[c] = 1.0;
      out.selected.push_back(c);
    } else {
      order.push_back(c);
    }
  }
  const std::size_t k_rest = k > n_certain ? k - n_certain : 0;
  if (k_rest == 0) return out;
  for (std::size_t c : order) out.inclusion[c] = static_cast<double>(k_rest) * sizes[c] / total;
  std::shuffle(order.begin(), order.end(), rng);
  const double step = total / static_cast<double>(k_rest);
  double point = uniform01(rng) * step;
  double cumulative = 0.0;
  std::size_t taken = 0;
  for (std::size_t c : order) {
    cumulative += sizes[c];
    while (taken < k_rest && point < cumulative) {
      out.selected.push_back(c);
      ++taken;
      point += step;
    }
  }
  std::sort(out.selected.begin(), out.selected.end());
  return out;
}

SampleResult sample_survey(const PopulationFrame& population, const SimulationSetting& setting,
                           std::uint64_t seed) {
  setting.validate();
  if (!population.has_outcomes()) throw ContractViolation("sample_survey: population has no outcomes");
  auto rng = make_rng(seed, {stream::survey});
  SampleResult result;
  auto& data = result.data;
  data.m1 = population.m1;
  data.m2 = population.m2;
  data.records.reserve(population.clusters.size());
  for (const auto& c : population.clusters) {
    SurveyRecord r;
    r.cluster_id = c.id;
    r.admin1 = c.admin1;
    r.admin2 = c.admin2;
    r.stratum = c.stratum;
    r.frame_births = c.births;
    data.records.push_back(r);
  }
  for (int i = 0; i < population.m1; ++i) {
    for (Stratum s : {Stratum::urban, Stratum::rural}) {
      std::vector<std::size_t> members;
      std::vector<double> sizes;
      for (std::size_t c = 0; c < population.clusters.size(); ++c) {
        const auto& cl = population.clusters[c];
        if (cl.admin1 == i && cl.stratum == s) {
          members.push_back(c);
          sizes.push_back(static_cast<double>(cl.births));
        }
      }
      if (members.empty()) {
        result.warnings.push_back("admin1 " + std::to_string(i + 1) + " " + to_string(s) + ": no clusters, stratum skipped");
        continue;
      }
      const double frac = s == Stratum::urban ? setting.urban_fraction_sampled : setting.rural_fraction_sampled;
      const auto k = static_cast<std::size_t>(std::max(1L, std::lround(frac * static_cast<double>(members.size()))));
      const auto pick = systematic_pps(sizes, k, rng);
      for (std::size_t local : pick.selected) {
        const std::size_t c = members[local];
        const auto& cl = population.clusters[c];
        auto& r = data.records[c];
        long n_births = cl.births;
        if (!setting.sample_all_births) {
          const double mean = s == Stratum::urban ? setting.urban_sampled_births_mean : setting.rural_sampled_births_mean;
          const double var = s == Stratum::urban ? setting.urban_sampled_births_var : setting.rural_sampled_births_var;
          n_births = std::clamp(rounded_normal(rng, mean, std::sqrt(var), 1), 1L, cl.births);
        }
        r.sampled = true;
        r.births = n_births;
        r.deaths = dist::hypergeom_sample(cl.births, cl.deaths, n_births, rng);
        r.weight = (1.0 / pick.inclusion[local]) * static_cast<double>(cl.births) / static_cast<double>(n_births);
      }
    }
  }
  return result;
}

std::string format_population(const PopulationFrame& p) {
  std::ostringstream out;
  out << "cluster_id,admin1,admin2,stratum,N,Y\n";
  for (const auto& c : p.clusters) {
    out << c.id << ',' << c.admin1 + 1 << ',' << c.admin2 + 1 << ',' << to_string(c.stratum) << ',' << c.births << ',';
    if (c.deaths >= 0) out << c.deaths; else out << "NA";
    out << '\n';
  }
  return out.str();
}

PopulationFrame read_population(const std::filesystem::path& path) {
  const auto t = io::read_table(path);
  const auto ci = t.column("cluster_id"), a1 = t.column("admin1"), a2 = t.column("admin2"),
             st = t.column("stratum"), nn = t.column("N");
  const bool has_y = t.has_column("Y");
  const auto yy = has_y ? t.column("Y") : 0;
  PopulationFrame p;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const auto& row = t.rows[r];
    const std::string where = t.source + " row " + std::to_string(r + 1);
    Cluster c;
    c.id = io::parse_long(row[ci], where);
    c.admin1 = static_cast<int>(io::parse_long(row[a1], where)) - 1;
    c.admin2 = static_cast<int>(io::parse_long(row[a2], where)) - 1;
    c.stratum = parse_stratum(row[st]);
    c.births = io::parse_long(row[nn], where);
    c.deaths = (has_y && row[yy] != "NA") ? io::parse_long(row[yy], where) : -1;
    if (c.admin1 < 0 || c.admin2 < 0) throw ParseError(where + ": area ids must be positive");
    p.m1 = std::max(p.m1, c.admin1 + 1);
    p.m2 = std::max(p.m2, c.admin2 + 1);
    p.clusters.push_back(c);
  }
  try {
    p.validate();
  } catch (const ContractViolation& e) {
    throw ParseError(t.source + ": " + e.what());
  }
  return p;
}

SampleStats sample_statistics(const SurveyData& s) {
  SampleStats st;
  std::vector<long> deaths2(s.m2, 0);
  for (const auto& r : s.records) {
    if (!r.sampled) continue;
    ++st.sampled_clusters;
    st.births += r.births;
    st.deaths += r.deaths;
    deaths2[r.admin2] += r.deaths;
  }
  st.births_per_admin1 = static_cast<double>(st.births) / s.m1;
  st.deaths_per_admin1 = static_cast<double>(st.deaths) / s.m1;
  st.births_per_admin2 = static_cast<double>(st.births) / s.m2;
  st.deaths_per_admin2 = static_cast<double>(st.deaths) / s.m2;
  const auto zero = std::count(deaths2.begin(), deaths2.end(), 0L);
  st.pct_zero_death_admin2 = 100.0 * static_cast<double>(zero) / s.m2;
  return st;
}

std::string format_survey(const SurveyData& s) {
  std::ostringstream out;
  out << "cluster_id,gamma,n,Z,weight\n";
  for (const auto& r : s.records) {
    out << r.cluster_id << ',' << (r.sampled ? 1 : 0) << ',' << r.births << ',' << r.deaths << ','
        << io::format_double(r.weight) << '\n';
  }
  return out.str();
}

SurveyData read_survey(const std::filesystem::path& path, const PopulationFrame& frame) {
  const auto t = io::read_table(path);
  const auto ci = t.column("cluster_id"), ga = t.column("gamma"), nn = t.column("n"), zz = t.column("Z"),
             ww = t.column("weight");
  std::unordered_map<long, std::size_t> index;
  for (std::size_t c = 0; c < frame.clusters.size(); ++c) index[frame.clusters[c].id] = c;
  SurveyData s;
  s.m1 = frame.m1;
  s.m2 = frame.m2;
  s.records.resize(frame.clusters.size());
  std::vector<char> seen(frame.clusters.size(), 0);
  for (std::size_t c = 0; c < frame.clusters.size(); ++c) {
    const auto& cl = frame.clusters[c];
    auto& r = s.records[c];
    r.cluster_id = cl.id;
    r.admin1 = cl.admin1;
    r.admin2 = cl.admin2;
    r.stratum = cl.stratum;
    r.frame_births = cl.births;
  }
  for (std::size_t row_i = 0; row_i < t.rows.size(); ++row_i) {
    const auto& row = t.rows[row_i];
    const std::string where = t.source + " row " + std::to_string(row_i + 1);
    const long id = io::parse_long(row[ci], where);
    const auto it = index.find(id);
    if (it == index.end()) throw ParseError(where + ": cluster " + std::to_string(id) + " not in population frame");
    auto& r = s.records[it->second];
    seen[it->second] = 1;
    r.sampled = io::parse_long(row[ga], where) != 0;
    r.births = io::parse_long(row[nn], where);
    r.deaths = io::parse_long(row[zz], where);
    r.weight = io::parse_double(row[ww], where);
  }
  try {
    s.validate();
  } catch (const ContractViolation& e) {
    throw ParseError(t.source + ": " + e.what());
  }
  return s;
}

}  // namespace dabul::survey
