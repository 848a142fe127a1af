#include "dabul/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <boost/math/special_functions/erf.hpp>

#include "dabul/errors.hpp"

namespace dabul::sampler {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

using Chains = std::vector<std::vector<double>>;

Chains split(const Chains& chains) {
  Chains out;
  for (const auto& c : chains) {
    const std::size_t half = c.size() / 2;
    out.emplace_back(c.begin(), c.begin() + half);
    out.emplace_back(c.end() - half, c.end());
  }
  return out;
}

Chains reshape(const std::vector<double>& pooled, std::size_t n_chains, std::size_t n) {
  Chains out(n_chains);
  for (std::size_t c = 0; c < n_chains; ++c) out[c].assign(pooled.begin() + c * n, pooled.begin() + (c + 1) * n);
  return out;
}

std::vector<double> pool(const Chains& chains) {
  std::vector<double> v;
  for (const auto& c : chains) v.insert(v.end(), c.begin(), c.end());
  return v;
}

double mean(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()); }

}  // namespace

std::vector<double> rank_normalize(const std::vector<double>& x) {
  const std::size_t S = x.size();
  std::vector<std::size_t> idx(S);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> z(S);
  for (std::size_t i = 0; i < S;) {
    std::size_t j = i;
    while (j + 1 < S && x[idx[j + 1]] == x[idx[i]]) ++j;
    const double rank = 0.5 * static_cast<double>(i + j) + 1.0;  // average 1-based rank over ties
    const double p = (rank - 0.375) / (static_cast<double>(S) + 0.25);
    const double q = std::sqrt(2.0) * boost::math::erf_inv(2.0 * p - 1.0);
    for (std::size_t k = i; k <= j; ++k) z[idx[k]] = q;
    i = j + 1;
  }
  return z;
}

double split_rhat_raw(const Chains& chains) {
  const Chains sp = split(chains);
  const double m = static_cast<double>(sp.size());
  const double n = static_cast<double>(sp[0].size());
  std::vector<double> means, vars;
  for (const auto& c : sp) {
    const double mu = mean(c);
    double s2 = 0.0;
    for (double v : c) s2 += (v - mu) * (v - mu);
    means.push_back(mu);
    vars.push_back(s2 / (n - 1.0));
  }
  const double W = mean(vars);
  const double grand = mean(means);
  double B = 0.0;
  for (double mu : means) B += (mu - grand) * (mu - grand);
  B *= n / (m - 1.0);
  if (W <= 0.0) return B > 0.0 ? std::numeric_limits<double>::infinity() : 1.0;
  const double var_plus = (n - 1.0) / n * W + B / n;
  return std::sqrt(var_plus / W);
}

double ess_raw(const Chains& chains_in) {
  const Chains chains = split(chains_in);
  const std::size_t M = chains.size();
  const std::size_t n = chains[0].size();
  const double nd = static_cast<double>(n);

  std::vector<double> chain_mean(M), chain_var(M);
  std::vector<std::vector<double>> centered(M);
  for (std::size_t c = 0; c < M; ++c) {
    chain_mean[c] = mean(chains[c]);
    centered[c].resize(n);
    for (std::size_t t = 0; t < n; ++t) centered[c][t] = chains[c][t] - chain_mean[c];
  }
  // Biased autocovariance at lag t averaged over chains, computed on demand:
  // the Geyer sequence usually stops after a few lags.
  auto acov_mean = [&](std::size_t lag) {
    double s = 0.0;
    for (std::size_t c = 0; c < M; ++c) {
      const auto& x = centered[c];
      double a = 0.0;
      for (std::size_t t = 0; t + lag < n; ++t) a += x[t] * x[t + lag];
      s += a / nd;
    }
    return s / static_cast<double>(M);
  };
  for (std::size_t c = 0; c < M; ++c) {
    double a = 0.0;
    for (double v : centered[c]) a += v * v;
    chain_var[c] = a / nd * nd / (nd - 1.0);
  }
  const double mean_var = mean(chain_var);
  double var_plus = mean_var * (nd - 1.0) / nd;
  if (M > 1) {
    const double gm = mean(chain_mean);
    double b = 0.0;
    for (double mu : chain_mean) b += (mu - gm) * (mu - gm);
    var_plus += b / static_cast<double>(M - 1);
  }
  if (!(var_plus > 0.0)) return kNaN;

  std::vector<double> rho(n + 1, 0.0);
  rho[0] = 1.0;
  double rho_even = 1.0;
  double rho_odd = 1.0 - (mean_var - acov_mean(1)) / var_plus;
  rho[1] = rho_odd;
  std::size_t s = 1;
  while (s + 4 < n && rho_even + rho_odd > 0.0) {
    rho_even = 1.0 - (mean_var - acov_mean(s + 1)) / var_plus;
    rho_odd = 1.0 - (mean_var - acov_mean(s + 2)) / var_plus;
    if (rho_even + rho_odd >= 0.0) {
      rho[s + 1] = rho_even;
      rho[s + 2] = rho_odd;
    }
    s += 2;
  }
  const std::size_t max_s = s;
  if (rho_even > 0.0) rho[max_s + 1] = rho_even;
  // Initial monotone sequence.
  for (std::size_t k = 1; k + 3 <= max_s; k += 2) {
    if (rho[k + 1] + rho[k + 2] > rho[k - 1] + rho[k]) {
      rho[k + 1] = 0.5 * (rho[k - 1] + rho[k]);
      rho[k + 2] = rho[k + 1];
    }
  }
  const double total = static_cast<double>(M) * nd;
  double sum = 0.0;
  for (std::size_t k = 0; k < max_s; ++k) sum += rho[k];
  double tau = -1.0 + 2.0 * sum + rho[max_s + 1];
  tau = std::max(tau, 1.0 / std::log10(total));
  return total / tau;
}

ParamDiagnostic diagnose(const Chains& chains, const std::string& name) {
  if (chains.empty()) throw ContractViolation("diagnostics need at least one chain");
  const std::size_t n = chains[0].size();
  for (const auto& c : chains) {
    if (c.size() != n) throw ContractViolation("diagnostics: chains have unequal lengths");
  }
  if (n < 4) throw ContractViolation("diagnostics need at least 4 draws per chain");

  ParamDiagnostic d;
  d.name = name;
  const double first = chains[0][0];
  bool constant = true;
  for (const auto& c : chains) {
    for (double v : c) {
      if (v != first) {
        constant = false;
        break;
      }
    }
    if (!constant) break;
  }
  const std::size_t half = n / 2;
  const double total = static_cast<double>(chains.size() * 2 * half);
  if (constant) {
    d.constant = true;
    d.rhat = 1.0;
    d.ess_bulk = static_cast<double>(chains.size() * n);
    return d;
  }
  // Rank-normalize the split chains jointly.
  const Chains sp = split(chains);
  const std::vector<double> pooled = pool(sp);
  const Chains z = reshape(rank_normalize(pooled), sp.size(), half);

  std::vector<double> sorted = pooled;
  std::nth_element(sorted.begin(), sorted.begin() + sorted.size() / 2, sorted.end());
  const double med = sorted[sorted.size() / 2];
  std::vector<double> folded(pooled.size());
  for (std::size_t i = 0; i < pooled.size(); ++i) folded[i] = std::abs(pooled[i] - med);
  const Chains zf = reshape(rank_normalize(folded), sp.size(), half);

  // The split chains are already split; rebuild unsplit views so the helpers
  // (which split again) see the original halves.
  auto join = [&](const Chains& halves) {
    Chains out;
    for (std::size_t c = 0; c + 1 < halves.size(); c += 2) {
      std::vector<double> v = halves[c];
      v.insert(v.end(), halves[c + 1].begin(), halves[c + 1].end());
      out.push_back(std::move(v));
    }
    return out;
  };
  const double r_bulk = split_rhat_raw(join(z));
  const double r_tail = split_rhat_raw(join(zf));
  d.rhat = std::max(r_bulk, r_tail);
  d.ess_bulk = ess_raw(join(z));
  if (std::isfinite(d.ess_bulk)) d.ess_bulk = std::min(d.ess_bulk, total * std::log10(total));
  return d;
}

}  // namespace dabul::sampler
