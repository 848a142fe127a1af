#include "dabul/nuts.hpp"

#include <cmath>
#include <limits>
#include <random>

#include "dabul/errors.hpp"

namespace dabul::sampler {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

double log_sum_exp(double a, double b) {
  if (a == -kInf) return b;
  if (b == -kInf) return a;
  const double m = std::max(a, b);
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

bool no_u_turn(const Eigen::VectorXd& p_sharp_minus, const Eigen::VectorXd& p_sharp_plus, const Eigen::VectorXd& rho) {
  return p_sharp_plus.dot(rho) > 0.0 && p_sharp_minus.dot(rho) > 0.0;
}

struct TreeBuilder {
  const LogDensityFn& f;
  const NutsSettings& s;
  Rng& rng;
  PhasePoint z;  // integrator position, moves along the trajectory
  double H0 = 0.0;
  int n_leapfrog = 0;
  double sum_metro_prob = 0.0;
  bool divergent = false;

  bool build(int depth, PhasePoint& z_propose, Eigen::VectorXd& p_sharp_beg, Eigen::VectorXd& p_sharp_end,
             Eigen::VectorXd& rho, Eigen::VectorXd& p_beg, Eigen::VectorXd& p_end, double sign,
             double& log_sum_weight) {
    if (depth == 0) {
      leapfrog(z, sign * s.step_size, s.inv_metric, f);
      ++n_leapfrog;
      double h = hamiltonian(z, s.inv_metric);
      if (std::isnan(h)) h = kInf;
      if (h - H0 > s.max_energy_error) divergent = true;
      log_sum_weight = log_sum_exp(log_sum_weight, H0 - h);
      sum_metro_prob += H0 - h > 0 ? 1.0 : std::exp(H0 - h);
      z_propose = z;
      p_sharp_beg = s.inv_metric.cwiseProduct(z.p);
      p_sharp_end = p_sharp_beg;
      rho += z.p;
      p_beg = z.p;
      p_end = p_beg;
      return !divergent;
    }
    const int dim = static_cast<int>(z.q.size());
    Eigen::VectorXd p_init_end(dim), p_sharp_init_end(dim), rho_init = Eigen::VectorXd::Zero(dim);
    double lsw_init = -kInf;
    if (!build(depth - 1, z_propose, p_sharp_beg, p_sharp_init_end, rho_init, p_beg, p_init_end, sign, lsw_init)) {
      return false;
    }
    PhasePoint z_propose_final = z;
    Eigen::VectorXd p_final_beg(dim), p_sharp_final_beg(dim), rho_final = Eigen::VectorXd::Zero(dim);
    double lsw_final = -kInf;
    if (!build(depth - 1, z_propose_final, p_sharp_final_beg, p_sharp_end, rho_final, p_final_beg, p_end, sign,
               lsw_final)) {
      return false;
    }
    const double lsw_subtree = log_sum_exp(lsw_init, lsw_final);
    log_sum_weight = log_sum_exp(log_sum_weight, lsw_subtree);
    if (lsw_final > lsw_subtree) {
      z_propose = z_propose_final;
    } else if (uniform01(rng) < std::exp(lsw_final - lsw_subtree)) {
      z_propose = z_propose_final;
    }
    const Eigen::VectorXd rho_subtree = rho_init + rho_final;
    rho += rho_subtree;
    bool persist = no_u_turn(p_sharp_beg, p_sharp_end, rho_subtree);
    persist = persist && no_u_turn(p_sharp_beg, p_sharp_final_beg, rho_init + p_final_beg);
    persist = persist && no_u_turn(p_sharp_init_end, p_sharp_end, rho_final + p_init_end);
    return persist;
  }
};

}  // namespace

PhasePoint make_point(const Eigen::VectorXd& q, const LogDensityFn& f) {
  PhasePoint z;
  z.q = q;
  z.p = Eigen::VectorXd::Zero(q.size());
  z.log_density = f(q, &z.grad);
  if (!std::isfinite(z.log_density)) throw NumericalError("log density is not finite at the initial point");
  if (!z.grad.allFinite()) throw NumericalError("gradient is not finite at the initial point");
  return z;
}

double hamiltonian(const PhasePoint& z, const Eigen::VectorXd& inv_metric) {
  return -z.log_density + 0.5 * z.p.dot(inv_metric.cwiseProduct(z.p));
}

void leapfrog(PhasePoint& z, double eps, const Eigen::VectorXd& inv_metric, const LogDensityFn& f) {
  z.p += 0.5 * eps * z.grad;
  z.q += eps * inv_metric.cwiseProduct(z.p);
  z.log_density = f(z.q, &z.grad);
  // A non-finite density, or a gradient that overflows far out in the tails,
  // is treated as an infinite energy error by the caller. Only the starting
  // point of a transition (make_point) must be finite.
  if (!std::isfinite(z.log_density) || !z.grad.allFinite()) {
    z.log_density = -kInf;
    z.grad.setZero(z.q.size());
    return;
  }
  z.p += 0.5 * eps * z.grad;
}

NutsTransition nuts_one_step(const PhasePoint& current, const LogDensityFn& f, const NutsSettings& s, Rng& rng) {
  if (!(s.step_size > 0.0)) throw ContractViolation("NUTS step size must be positive");
  const int dim = static_cast<int>(current.q.size());
  if (s.inv_metric.size() != dim) throw ContractViolation("inverse metric has wrong dimension");

  std::normal_distribution<double> normal(0.0, 1.0);
  PhasePoint z = current;
  for (int i = 0; i < dim; ++i) z.p[i] = normal(rng) / std::sqrt(s.inv_metric[i]);

  TreeBuilder tb{f, s, rng, z};
  tb.H0 = hamiltonian(z, s.inv_metric);

  PhasePoint z_fwd = z, z_bck = z;
  PhasePoint z_sample = z, z_propose = z;
  Eigen::VectorXd p_fwd_fwd = z.p, p_fwd_bck = z.p, p_bck_fwd = z.p, p_bck_bck = z.p;
  Eigen::VectorXd p_sharp = s.inv_metric.cwiseProduct(z.p);
  Eigen::VectorXd ps_fwd_fwd = p_sharp, ps_fwd_bck = p_sharp, ps_bck_fwd = p_sharp, ps_bck_bck = p_sharp;
  Eigen::VectorXd rho = z.p;
  double log_sum_weight = 0.0;
  int depth = 0;

  while (depth < s.max_tree_depth) {
    Eigen::VectorXd rho_fwd = Eigen::VectorXd::Zero(dim), rho_bck = Eigen::VectorXd::Zero(dim);
    double lsw_subtree = -kInf;
    bool valid;
    if (uniform01(rng) > 0.5) {
      rho_bck = rho;
      p_bck_fwd = p_fwd_bck;
      ps_bck_fwd = ps_fwd_bck;
      tb.z = z_fwd;
      valid = tb.build(depth, z_propose, ps_fwd_bck, ps_fwd_fwd, rho_fwd, p_fwd_bck, p_fwd_fwd, 1.0, lsw_subtree);
      z_fwd = tb.z;
    } else {
      rho_fwd = rho;
      p_fwd_bck = p_bck_fwd;
      ps_fwd_bck = ps_bck_fwd;
      tb.z = z_bck;
      valid = tb.build(depth, z_propose, ps_bck_fwd, ps_bck_bck, rho_bck, p_bck_fwd, p_bck_bck, -1.0, lsw_subtree);
      z_bck = tb.z;
    }
    if (!valid) break;
    ++depth;
    if (lsw_subtree > log_sum_weight) {
      z_sample = z_propose;
    } else if (uniform01(rng) < std::exp(lsw_subtree - log_sum_weight)) {
      z_sample = z_propose;
    }
    log_sum_weight = log_sum_exp(log_sum_weight, lsw_subtree);
    rho = rho_bck + rho_fwd;
    bool persist = no_u_turn(ps_bck_bck, ps_fwd_fwd, rho);
    persist = persist && no_u_turn(ps_bck_bck, ps_fwd_bck, rho_bck + p_fwd_bck);
    persist = persist && no_u_turn(ps_bck_fwd, ps_fwd_fwd, rho_fwd + p_bck_fwd);
    if (!persist) break;
  }

  NutsTransition t;
  t.point = z_sample;
  t.tree_depth = depth;
  t.n_leapfrog = tb.n_leapfrog;
  t.divergent = tb.divergent;
  t.accept_stat = tb.n_leapfrog > 0 ? tb.sum_metro_prob / tb.n_leapfrog : 0.0;
  return t;
}

double find_reasonable_epsilon(const PhasePoint& current, const LogDensityFn& f, const Eigen::VectorXd& inv_metric,
                               double eps0, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  double eps = eps0 > 0.0 && std::isfinite(eps0) ? eps0 : 1.0;
  const int dim = static_cast<int>(current.q.size());
  int direction = 0;
  for (int iter = 0; iter < 100; ++iter) {
    PhasePoint z = current;
    for (int i = 0; i < dim; ++i) z.p[i] = normal(rng) / std::sqrt(inv_metric[i]);
    const double H0 = hamiltonian(z, inv_metric);
    leapfrog(z, eps, inv_metric, f);
    double h = hamiltonian(z, inv_metric);
    if (std::isnan(h)) h = kInf;
    const double delta = H0 - h;
    const int dir = delta > std::log(0.8) ? 1 : -1;
    if (direction == 0) direction = dir;
    if (dir != direction) break;
    eps = direction == 1 ? 2.0 * eps : 0.5 * eps;
    if (eps > 1e7 || eps < 1e-12) break;
  }
  return std::clamp(eps, 1e-10, 1e6);
}

DualAveraging::DualAveraging(double target_accept) : target_(target_accept) {
  if (!(target_accept > 0.0 && target_accept < 1.0)) throw ContractViolation("target_accept must lie in (0, 1)");
}

void DualAveraging::restart(double eps) {
  mu_ = std::log(10.0 * eps);
  h_bar_ = 0.0;
  x_bar_ = std::log(eps);
  counter_ = 0.0;
}

double DualAveraging::update(double accept_stat) {
  counter_ += 1.0;
  const double a = std::min(1.0, std::isfinite(accept_stat) ? accept_stat : 0.0);
  const double eta = 1.0 / (counter_ + kT0);
  h_bar_ = (1.0 - eta) * h_bar_ + eta * (target_ - a);
  const double x = mu_ - std::sqrt(counter_) / kGamma * h_bar_;
  const double w = std::pow(counter_, -kKappa);
  x_bar_ = w * x + (1.0 - w) * x_bar_;
  return std::exp(x);
}

WarmupAdapter::WarmupAdapter(int warmup, int dim, double target_accept, bool adapt_step, bool adapt_metric)
    : warmup_(warmup), adapt_step_(adapt_step), adapt_metric_(adapt_metric), da_(target_accept) {
  mean_ = Eigen::VectorXd::Zero(dim);
  m2_ = Eigen::VectorXd::Zero(dim);
  if (adapt_metric_) {
    const int a = static_cast<int>(0.15 * warmup);
    const int b = static_cast<int>(0.50 * warmup);
    const int c = static_cast<int>(0.90 * warmup);
    // Windows shorter than a handful of draws give useless variances.
    if (b - a >= 10) windows_.push_back({a, b});
    if (c - b >= 10) windows_.push_back({b, c});
  }
}

void WarmupAdapter::restart_step(double eps) { da_.restart(eps); }

bool WarmupAdapter::learn(int iter, const NutsTransition& t, NutsSettings& s) {
  if (adapt_step_) s.step_size = da_.update(t.accept_stat);
  if (!adapt_metric_) return false;
  for (const auto& w : windows_) {
    if (iter < w.begin || iter >= w.end) continue;
    ++n_;
    const Eigen::VectorXd delta = t.point.q - mean_;
    mean_ += delta / static_cast<double>(n_);
    m2_ += delta.cwiseProduct(t.point.q - mean_);
    if (iter == w.end - 1) {
      const double n = static_cast<double>(n_);
      const Eigen::VectorXd var = m2_ / (n - 1.0);
      // Shrink towards a small constant, as in common NUTS implementations.
      s.inv_metric = (n / (n + 5.0)) * var.array() + 1e-3 * (5.0 / (n + 5.0));
      n_ = 0;
      mean_.setZero();
      m2_.setZero();
      return true;
    }
  }
  return false;
}

void WarmupAdapter::finish(NutsSettings& s) const {
  if (adapt_step_) s.step_size = da_.final_step_size();
}

}  // namespace dabul::sampler
