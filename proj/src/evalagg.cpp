#include "dabul/evalagg.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "dabul/errors.hpp"
#include "dabul/table_io.hpp"

namespace dabul::evalagg {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

double quantile_sorted(const std::vector<double>& s, double p) {
  const double h = (static_cast<double>(s.size()) - 1.0) * p;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const auto hi = std::min(lo + 1, s.size() - 1);
  return s[lo] + (h - static_cast<double>(lo)) * (s[hi] - s[lo]);
}

double mean_of(const std::vector<double>& v) {
  if (v.empty()) return kNaN;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

double median(std::vector<double> v) {
  v.erase(std::remove_if(v.begin(), v.end(), [](double x) { return std::isnan(x); }), v.end());
  if (v.empty()) return kNaN;
  std::sort(v.begin(), v.end());
  return quantile_sorted(v, 0.5);
}

Eigen::MatrixXd aggregate_urban_rural(const Eigen::MatrixXd& urban, const Eigen::MatrixXd& rural,
                                      const std::vector<double>& q) {
  if (urban.rows() != rural.rows() || urban.cols() != rural.cols()) {
    throw ContractViolation("aggregate_urban_rural: urban and rural draws differ in shape");
  }
  if (static_cast<Eigen::Index>(q.size()) != urban.cols()) {
    throw ContractViolation("aggregate_urban_rural: missing urban fraction for some admin2 areas");
  }
  Eigen::MatrixXd out(urban.rows(), urban.cols());
  for (Eigen::Index j = 0; j < urban.cols(); ++j) {
    const double qj = q[j];
    if (!(qj >= 0.0 && qj <= 1.0)) throw ContractViolation("urban fraction outside [0, 1]");
    out.col(j) = qj * urban.col(j) + (1.0 - qj) * rural.col(j);
  }
  return out;
}

Eigen::MatrixXd aggregate_to_admin1(const Eigen::MatrixXd& admin2, const std::vector<int>& admin1_of,
                                    const std::vector<double>& weights, int m1, std::vector<std::string>* warnings) {
  if (static_cast<Eigen::Index>(admin1_of.size()) != admin2.cols() || weights.size() != admin1_of.size()) {
    throw ContractViolation("aggregate_to_admin1: weights or nesting do not match the admin2 columns");
  }
  std::vector<double> sums(m1, 0.0);
  for (std::size_t j = 0; j < weights.size(); ++j) {
    if (weights[j] < 0.0) throw ContractViolation("aggregate_to_admin1: negative weight");
    sums[admin1_of[j]] += weights[j];
  }
  for (int i = 0; i < m1; ++i) {
    if (!(sums[i] > 0.0)) throw ContractViolation("aggregate_to_admin1: admin1 " + std::to_string(i + 1) + " has no weight");
    if (warnings && std::abs(sums[i] - 1.0) > 1e-6) {
      warnings->push_back("admin1 " + std::to_string(i + 1) + ": population weights sum to " + io::format_double(sums[i]) +
                          ", renormalized");
    }
  }
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(admin2.rows(), m1);
  for (std::size_t j = 0; j < weights.size(); ++j) {
    const int i = admin1_of[j];
    out.col(i) += (weights[j] / sums[i]) * admin2.col(static_cast<Eigen::Index>(j));
  }
  return out;
}

Summary summarize(std::vector<double> v) {
  if (v.empty()) throw ContractViolation("summarize: no draws");
  Summary s;
  s.mean = mean_of(v);
  double ss = 0.0;
  for (double x : v) ss += (x - s.mean) * (x - s.mean);
  s.sd = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
  std::sort(v.begin(), v.end());
  s.q05 = quantile_sorted(v, 0.05);
  s.q95 = quantile_sorted(v, 0.95);
  return s;
}

FitSummary summarize_draws(const sampler::PosteriorDraws& draws, const geo::Geography& g,
                           const std::vector<double>& admin2_weight) {
  if (draws.col_risk < 0 || draws.m2 != g.m2) throw ContractViolation("draws do not carry admin2 risks for this geography");
  const auto n = static_cast<Eigen::Index>(draws.draw_count());
  Eigen::MatrixXd r2(n, g.m2);
  for (int j = 0; j < g.m2; ++j) {
    const std::vector<double> v = draws.pooled(draws.col_risk + j);
    r2.col(j) = Eigen::Map<const Eigen::VectorXd>(v.data(), n);
  }
  const Eigen::MatrixXd r1 = aggregate_to_admin1(r2, g.admin1_of, admin2_weight, g.m1);
  FitSummary s;
  for (int j = 0; j < g.m2; ++j) s.admin2.push_back(summarize(std::vector<double>(r2.col(j).data(), r2.col(j).data() + n)));
  for (int i = 0; i < g.m1; ++i) s.admin1.push_back(summarize(std::vector<double>(r1.col(i).data(), r1.col(i).data() + n)));
  return s;
}

std::string format_fit_summary(const FitSummary& s) {
  std::ostringstream out;
  out << "area_level,area_id,mean,sd,q05,q95\n";
  auto emit = [&](const char* level, const std::vector<Summary>& v) {
    for (std::size_t k = 0; k < v.size(); ++k) {
      out << level << ',' << k + 1 << ',' << io::format_double(v[k].mean) << ',' << io::format_double(v[k].sd) << ','
          << io::format_double(v[k].q05) << ',' << io::format_double(v[k].q95) << '\n';
    }
  };
  emit("admin1", s.admin1);
  emit("admin2", s.admin2);
  return out.str();
}

FitSummary read_fit_summary(const std::filesystem::path& path, int m1, int m2) {
  const io::Table t = io::read_table(path);
  const auto lv = t.column("area_level"), id = t.column("area_id"), mu = t.column("mean"), sd = t.column("sd"),
             lo = t.column("q05"), hi = t.column("q95");
  FitSummary s;
  s.admin1.resize(m1);
  s.admin2.resize(m2);
  std::vector<char> seen1(m1, 0), seen2(m2, 0);
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const auto& row = t.rows[r];
    const std::string where = t.source + " row " + std::to_string(r + 1);
    const long k = io::parse_long(row[id], where);
    const bool is1 = row[lv] == "admin1";
    if (!is1 && row[lv] != "admin2") throw ParseError(where + ": unknown area_level '" + row[lv] + "'");
    const int limit = is1 ? m1 : m2;
    if (k < 1 || k > limit) throw ParseError(where + ": area id " + std::to_string(k) + " out of range");
    Summary v{io::parse_double(row[mu], where), io::parse_double(row[sd], where), io::parse_double(row[lo], where),
              io::parse_double(row[hi], where)};
    (is1 ? s.admin1 : s.admin2)[k - 1] = v;
    (is1 ? seen1 : seen2)[k - 1] = 1;
  }
  for (int i = 0; i < m1; ++i) {
    if (!seen1[i]) throw ParseError(t.source + ": missing admin1 " + std::to_string(i + 1));
  }
  for (int j = 0; j < m2; ++j) {
    if (!seen2[j]) throw ParseError(t.source + ": missing admin2 " + std::to_string(j + 1));
  }
  return s;
}

std::string format_truth(const Truth& t) {
  std::ostringstream out;
  out << "area_level,area_id,prevalence\n";
  for (std::size_t i = 0; i < t.admin1.size(); ++i) out << "admin1," << i + 1 << ',' << io::format_double(t.admin1[i]) << '\n';
  for (std::size_t j = 0; j < t.admin2.size(); ++j) out << "admin2," << j + 1 << ',' << io::format_double(t.admin2[j]) << '\n';
  return out.str();
}

Truth read_truth(const std::filesystem::path& path) {
  const io::Table t = io::read_table(path);
  const auto lv = t.column("area_level"), id = t.column("area_id"), pr = t.column("prevalence");
  Truth truth;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const auto& row = t.rows[r];
    const std::string where = t.source + " row " + std::to_string(r + 1);
    const long k = io::parse_long(row[id], where);
    auto& vec = row[lv] == "admin1" ? truth.admin1 : truth.admin2;
    if (row[lv] != "admin1" && row[lv] != "admin2") throw ParseError(where + ": unknown area_level '" + row[lv] + "'");
    if (k != static_cast<long>(vec.size()) + 1) throw ParseError(where + ": area ids must be listed in order from 1");
    vec.push_back(io::parse_double(row[pr], where));
  }
  return truth;
}

double MetricsReport::summary_value(const std::string& model, const std::string& metric, bool med) const {
  for (const auto& s : summary) {
    if (s.model == model && s.metric == metric) return med ? s.median : s.mean;
  }
  return kNaN;
}

namespace {

PercentDecrease percent_decrease(const std::vector<std::vector<double>>& by_area, long excluded) {
  PercentDecrease pd;
  pd.excluded = excluded;
  std::vector<double> all;
  for (const auto& v : by_area) {
    pd.per_area_median.push_back(median(v));
    all.insert(all.end(), v.begin(), v.end());
  }
  pd.n = static_cast<long>(all.size());
  pd.median = median(pd.per_area_median);
  pd.mean = mean_of(all);
  return pd;
}

}  // namespace

MetricsReport compute_metrics(const std::vector<ReplicateInput>& inputs, const Truth& truth) {
  MetricsReport rep;
  const int m1 = static_cast<int>(truth.admin1.size());
  const int m2 = static_cast<int>(truth.admin2.size());
  std::vector<std::string> models;
  for (const auto& in : inputs) {
    for (const auto& [name, fit] : in.fits) {
      if (static_cast<int>(fit.admin1.size()) != m1 || static_cast<int>(fit.admin2.size()) != m2) {
        throw ContractViolation("replicate " + std::to_string(in.replicate) + " model " + name +
                                ": area counts do not match the truth file");
      }
      if (std::find(models.begin(), models.end(), name) == models.end()) models.push_back(name);
    }
    if (static_cast<int>(in.direct.areas.size()) != m1) {
      throw ContractViolation("replicate " + std::to_string(in.replicate) + ": direct estimates do not match admin1 areas");
    }
  }
  // Stable model order: ul, dabul, exact, then anything else alphabetically.
  auto rank = [](const std::string& m) { return m == "ul" ? 0 : m == "dabul" ? 1 : m == "exact" ? 2 : 3; };
  std::sort(models.begin(), models.end(), [&](const std::string& a, const std::string& b) {
    return rank(a) != rank(b) ? rank(a) < rank(b) : a < b;
  });

  struct Acc {
    std::vector<double> disc, err, cov, cv;
    std::vector<std::vector<double>> cov_by_area;
  };
  std::map<std::string, Acc> acc;
  for (const auto& m : models) acc[m].cov_by_area.assign(m2, {});
  long skipped_direct = 0;

  for (const auto& in : inputs) {
    for (const auto& m : models) {
      const auto it = in.fits.find(m);
      if (it == in.fits.end()) continue;
      const FitSummary& fit = it->second;
      Acc& a = acc[m];
      for (int i = 0; i < m1; ++i) {
        const double r_hat = in.direct.areas[i].r_hat;
        if (!std::isfinite(r_hat)) {
          ++skipped_direct;
          continue;
        }
        const double disc = std::abs(fit.admin1[i].mean - r_hat);
        rep.rows.push_back({in.replicate, m, "admin1", i + 1, "discrepancy", disc});
        a.disc.push_back(disc);
      }
      for (int j = 0; j < m2; ++j) {
        const Summary& s = fit.admin2[j];
        const double err = std::abs(s.mean - truth.admin2[j]);
        const double cov = (s.q05 <= truth.admin2[j] && truth.admin2[j] <= s.q95) ? 1.0 : 0.0;
        const double cv = s.mean > 0.0 ? s.sd / s.mean : kNaN;
        rep.rows.push_back({in.replicate, m, "admin2", j + 1, "abs_error", err});
        rep.rows.push_back({in.replicate, m, "admin2", j + 1, "coverage90", cov});
        rep.rows.push_back({in.replicate, m, "admin2", j + 1, "cv", cv});
        a.err.push_back(err);
        a.cov.push_back(cov);
        a.cov_by_area[j].push_back(cov);
        if (std::isfinite(cv)) a.cv.push_back(cv);
      }
    }
  }
  if (skipped_direct > 0) {
    rep.notes.push_back(std::to_string(skipped_direct) + " admin1 discrepancies skipped: direct estimate undefined");
  }
  for (const auto& m : models) {
    const Acc& a = acc.at(m);
    rep.summary.push_back({m, "discrepancy", mean_of(a.disc), median(a.disc), static_cast<long>(a.disc.size())});
    rep.summary.push_back({m, "abs_error", mean_of(a.err), median(a.err), static_cast<long>(a.err.size())});
    std::vector<double> per_area;
    for (const auto& v : a.cov_by_area) {
      if (!v.empty()) per_area.push_back(mean_of(v));
    }
    rep.summary.push_back({m, "coverage90", mean_of(a.cov), median(per_area), static_cast<long>(a.cov.size())});
    rep.summary.push_back({m, "cv", mean_of(a.cv), median(a.cv), static_cast<long>(a.cv.size())});
  }

  // Percent decrease in admin1 discrepancy, DABUL relative to standard UL.
  const bool both = acc.count("ul") && acc.count("dabul");
  rep.has_percent_decrease = both;
  if (both) {
    std::vector<std::vector<double>> all(m1), subset(m1);
    long excluded = 0, excluded_subset = 0;
    for (const auto& in : inputs) {
      const auto ul = in.fits.find("ul"), da = in.fits.find("dabul");
      if (ul == in.fits.end() || da == in.fits.end()) continue;
      for (int i = 0; i < m1; ++i) {
        const double r_hat = in.direct.areas[i].r_hat;
        if (!std::isfinite(r_hat)) continue;
        const double du = std::abs(ul->second.admin1[i].mean - r_hat);
        const double dd = std::abs(da->second.admin1[i].mean - r_hat);
        if (du == 0.0) {
          ++excluded;
          continue;
        }
        const double pd = 100.0 * (du - dd) / du;
        all[i].push_back(pd);
        if (du > kAppendixThreshold) {
          subset[i].push_back(pd);
          rep.appendix.push_back({in.replicate, i + 1, du, dd, pd});
        }
      }
    }
    rep.percent_decrease = percent_decrease(all, excluded);
    rep.appendix_percent_decrease = percent_decrease(subset, excluded_subset);
    if (excluded > 0) rep.notes.push_back(std::to_string(excluded) + " pairs excluded from percent decrease: zero UL discrepancy");
    if (rep.appendix.empty()) rep.notes.push_back("appendix subset is empty: no UL discrepancy above 0.001");
  }
  return rep;
}

std::string format_metrics(const MetricsReport& r) {
  std::ostringstream out;
  out << "replicate,model,area_level,area_id,metric,value\n";
  for (const auto& row : r.rows) {
    out << row.replicate << ',' << row.model << ',' << row.area_level << ',' << row.area_id << ',' << row.metric << ','
        << io::format_double(row.value) << '\n';
  }
  return out.str();
}

std::string format_summary(const MetricsReport& r) {
  std::ostringstream out;
  out << "model,metric,mean,median,n\n";
  for (const auto& s : r.summary) {
    out << s.model << ',' << s.metric << ',' << io::format_double(s.mean) << ',' << io::format_double(s.median) << ','
        << s.n << '\n';
  }
  if (r.has_percent_decrease) {
    const auto& a = r.percent_decrease;
    const auto& b = r.appendix_percent_decrease;
    out << "dabul_vs_ul,percent_decrease," << io::format_double(a.mean) << ',' << io::format_double(a.median) << ','
        << a.n << '\n';
    out << "dabul_vs_ul,percent_decrease_appendix," << io::format_double(b.mean) << ','
        << io::format_double(b.median) << ',' << b.n << '\n';
  }
  for (const auto& n : r.notes) out << "# " << n << '\n';
  return out.str();
}

std::string format_appendix(const MetricsReport& r) {
  std::ostringstream out;
  out << "replicate,admin1,discrepancy_ul,discrepancy_dabul,percent_decrease\n";
  for (const auto& a : r.appendix) {
    out << a.replicate << ',' << a.admin1 << ',' << io::format_double(a.discrepancy_ul) << ','
        << io::format_double(a.discrepancy_dabul) << ',' << io::format_double(a.percent_decrease) << '\n';
  }
  if (r.appendix.empty()) out << "# empty subset: no standard UL discrepancy above 0.001\n";
  return out.str();
}

}  // namespace dabul::evalagg
