#pragma once

#include <string>
#include <vector>

namespace dabul::sampler {

struct ParamDiagnostic {
  std::string name;
  double rhat = 1.0;      // rank-normalized split R-hat (max of bulk and folded)
  double ess_bulk = 0.0;  // bulk effective sample size
  bool constant = false;  // no variation at all: rhat 1, ess = total draws
};

// `chains[c][t]` is draw t of chain c; all chains must have equal length >= 4.
ParamDiagnostic diagnose(const std::vector<std::vector<double>>& chains, const std::string& name = "");

// Pieces exposed for testing.
std::vector<double> rank_normalize(const std::vector<double>& pooled);
double split_rhat_raw(const std::vector<std::vector<double>>& chains);
double ess_raw(const std::vector<std::vector<double>>& chains);

}  // namespace dabul::sampler
