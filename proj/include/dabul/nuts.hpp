#pragma once

#include <functional>
#include <vector>

#include <Eigen/Dense>

#include "dabul/rng.hpp"

namespace dabul::sampler {

// Returns the log density; writes the gradient when the pointer is non-null.
using LogDensityFn = std::function<double(const Eigen::VectorXd&, Eigen::VectorXd*)>;

struct NutsSettings {
  double step_size = 0.1;
  Eigen::VectorXd inv_metric;  // diagonal Sigma; momentum ~ N(0, Sigma^-1)
  int max_tree_depth = 10;
  double max_energy_error = 1000.0;
};

struct PhasePoint {
  Eigen::VectorXd q;
  Eigen::VectorXd p;
  Eigen::VectorXd grad;
  double log_density = 0.0;
};

// Evaluates f at q; throws NumericalError if the density or gradient is not finite.
PhasePoint make_point(const Eigen::VectorXd& q, const LogDensityFn& f);

double hamiltonian(const PhasePoint& z, const Eigen::VectorXd& inv_metric);

// One leapfrog step of size eps (negative eps integrates backwards).
void leapfrog(PhasePoint& z, double eps, const Eigen::VectorXd& inv_metric, const LogDensityFn& f);

struct NutsTransition {
  PhasePoint point;  // momentum field is meaningless after a transition
  double accept_stat = 0.0;
  int tree_depth = 0;
  int n_leapfrog = 0;
  bool divergent = false;
};

// Multinomial NUTS with the generalized no-U-turn criterion in the Sigma metric.
NutsTransition nuts_one_step(const PhasePoint& current, const LogDensityFn& f, const NutsSettings& s, Rng& rng);

// Doubling/halving heuristic so that one leapfrog step has acceptance near 0.5.
double find_reasonable_epsilon(const PhasePoint& current, const LogDensityFn& f, const Eigen::VectorXd& inv_metric,
                               double eps0, Rng& rng);

class DualAveraging {
 public:
  explicit DualAveraging(double target_accept = 0.8);
  void restart(double eps);
  // Feed one acceptance statistic; returns the step size to use next.
  double update(double accept_stat);
  double final_step_size() const { return std::exp(x_bar_); }

 private:
  double target_;
  double mu_ = 0.0;
  double h_bar_ = 0.0;
  double x_bar_ = 0.0;
  double counter_ = 0.0;
  static constexpr double kGamma = 0.05, kT0 = 10.0, kKappa = 0.75;
};

/**
 * Warmup schedule over `warmup` iterations:
 *   [0, 15%)     step size only
 *   [15%, 50%)   step size + variance collection; Sigma set at the end
 *   [50%, 90%)   second variance window; Sigma set at the end
 *   [90%, 100%)  step size only
 * Each Sigma update restarts dual averaging from a fresh step-size search.
 */
class WarmupAdapter {
 public:
  WarmupAdapter(int warmup, int dim, double target_accept, bool adapt_step, bool adapt_metric);

  // Call after warmup iteration `iter` (0-based). Returns true when Sigma was
  // just replaced, in which case the caller should re-run the step-size search
  // and call restart_step().
  bool learn(int iter, const NutsTransition& t, NutsSettings& s);
  void restart_step(double eps);
  // Final step size at the end of warmup.
  void finish(NutsSettings& s) const;

  struct Window {
    int begin, end;
  };
  const std::vector<Window>& windows() const { return windows_; }

 private:
  int warmup_;
  bool adapt_step_, adapt_metric_;
  DualAveraging da_;
  std::vector<Window> windows_;
  long n_ = 0;
  Eigen::VectorXd mean_, m2_;
};

}  // namespace dabul::sampler
