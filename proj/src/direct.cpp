#include "dabul/direct.hpp"

#include <cmath>
#include <limits>
#include <sstream>

#include "dabul/errors.hpp"
#include "dabul/table_io.hpp"

namespace dabul::direct {

using survey::Stratum;
using survey::SurveyData;

double hajek_estimate(const SurveyData& data, int admin1) {
  double num = 0.0, den = 0.0;
  for (const auto& r : data.records) {
    if (!r.sampled || r.admin1 != admin1) continue;
    num += r.weight * static_cast<double>(r.deaths);
    den += r.weight * static_cast<double>(r.births);
  }
  if (!(den > 0.0)) {
    throw ContractViolation("hajek_estimate: admin1 " + std::to_string(admin1 + 1) + " has zero weighted births");
  }
  return num / den;
}

DesignVariance design_variance_logit(const SurveyData& data, int admin1) {
  DesignVariance out;
  out.r_hat = hajek_estimate(data, admin1);
  const double nan = std::numeric_limits<double>::quiet_NaN();

  double den = 0.0;
  int count[2] = {0, 0};
  for (const auto& r : data.records) {
    if (!r.sampled || r.admin1 != admin1) continue;
    den += r.weight * static_cast<double>(r.births);
    ++count[static_cast<int>(r.stratum)];
  }
  // Stratum label per record after collapsing single-cluster strata.
  bool merged = false;
  if ((count[0] == 1 && count[1] > 0) || (count[1] == 1 && count[0] > 0)) {
    merged = true;
    out.notes.push_back("admin1 " + std::to_string(admin1 + 1) + ": single-cluster stratum collapsed");
  }
  if (count[0] + count[1] < 2) {
    out.degenerate = true;
    out.var_ratio = nan;
    out.var_logit = nan;
    out.notes.push_back("admin1 " + std::to_string(admin1 + 1) + ": fewer than two sampled clusters");
    return out;
  }

  double sum[2] = {0, 0}, sum_sq[2] = {0, 0};
  int n_h[2] = {0, 0};
  for (const auto& r : data.records) {
    if (!r.sampled || r.admin1 != admin1) continue;
    const int h = merged ? 0 : static_cast<int>(r.stratum);
    const double e = r.weight * (static_cast<double>(r.deaths) - out.r_hat * static_cast<double>(r.births)) / den;
    sum[h] += e;
    sum_sq[h] += e * e;
    ++n_h[h];
  }
  double v = 0.0;
  for (int h = 0; h < 2; ++h) {
    if (n_h[h] < 2) continue;
    const double n = n_h[h];
    const double centered = sum_sq[h] - sum[h] * sum[h] / n;
    v += n / (n - 1.0) * std::max(0.0, centered);
  }
  out.var_ratio = v;
  if (!(out.r_hat > 0.0 && out.r_hat < 1.0)) {
    out.degenerate = true;
    out.var_logit = nan;
    out.notes.push_back("admin1 " + std::to_string(admin1 + 1) + ": r_hat on the boundary, logit undefined");
    return out;
  }
  // Relative threshold: exact zero up to rounding of the residual sums.
  if (!(v > 1e-14 * out.r_hat * out.r_hat)) {
    out.degenerate = true;
    out.var_logit = nan;
    out.notes.push_back("admin1 " + std::to_string(admin1 + 1) + ": zero between-cluster variance");
    return out;
  }
  const double scale = out.r_hat * (1.0 - out.r_hat);
  out.var_logit = v / (scale * scale);
  return out;
}

DirectEstimates compute_direct_estimates(const SurveyData& data) {
  DirectEstimates est;
  est.areas.resize(data.m1);
  for (int i = 0; i < data.m1; ++i) {
    auto& a = est.areas[i];
    a.admin1 = i;
    for (const auto& r : data.records) {
      if (!r.sampled || r.admin1 != i) continue;
      ++a.n_clusters;
      a.n_births += r.births;
      a.n_deaths += r.deaths;
    }
    if (a.n_clusters == 0) {
      a.r_hat = std::numeric_limits<double>::quiet_NaN();
      a.v_logit = std::numeric_limits<double>::quiet_NaN();
      a.degenerate = true;
      est.warnings.push_back("admin1 " + std::to_string(i + 1) + ": no sampled clusters");
      continue;
    }
    const auto dv = design_variance_logit(data, i);
    a.r_hat = dv.r_hat;
    a.v_logit = dv.var_logit;
    a.degenerate = dv.degenerate;
    est.warnings.insert(est.warnings.end(), dv.notes.begin(), dv.notes.end());
  }
  return est;
}

std::string format_direct(const DirectEstimates& d) {
  std::ostringstream out;
  out << "admin1,r_hat,V_logit,n_clusters,n_births,n_deaths,degenerate_flag\n";
  for (const auto& a : d.areas) {
    out << a.admin1 + 1 << ',' << io::format_double(a.r_hat) << ',' << io::format_double(a.v_logit) << ','
        << a.n_clusters << ',' << a.n_births << ',' << a.n_deaths << ',' << (a.degenerate ? 1 : 0) << '\n';
  }
  return out.str();
}

DirectEstimates read_direct(const std::filesystem::path& path, int m1) {
  const auto t = io::read_table(path);
  const auto ai = t.column("admin1"), rh = t.column("r_hat"), vl = t.column("V_logit");
  DirectEstimates d;
  d.areas.resize(m1);
  std::vector<char> seen(m1, 0);
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const auto& row = t.rows[r];
    const std::string where = t.source + " row " + std::to_string(r + 1);
    const long id = io::parse_long(row[ai], where);
    if (id < 1 || id > m1) throw ParseError(where + ": admin1 id " + std::to_string(id) + " out of range");
    auto& a = d.areas[id - 1];
    a.admin1 = static_cast<int>(id - 1);
    a.r_hat = io::parse_double(row[rh], where);
    a.v_logit = io::parse_double(row[vl], where);
    if (t.has_column("n_clusters")) a.n_clusters = io::parse_long(row[t.column("n_clusters")], where);
    if (t.has_column("n_births")) a.n_births = io::parse_long(row[t.column("n_births")], where);
    if (t.has_column("n_deaths")) a.n_deaths = io::parse_long(row[t.column("n_deaths")], where);
    const bool flagged = t.has_column("degenerate_flag") && io::parse_long(row[t.column("degenerate_flag")], where) != 0;
    a.degenerate = flagged || !(a.r_hat > 0.0 && a.r_hat < 1.0) || !(a.v_logit > 0.0);
    seen[id - 1] = 1;
  }
  for (int i = 0; i < m1; ++i) {
    if (!seen[i]) throw ParseError(t.source + ": missing admin1 " + std::to_string(i + 1));
  }
  return d;
}

}  // namespace dabul::direct
