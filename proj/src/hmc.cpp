#include "msign/hmc.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>
#include <stdexcept>

namespace msign {

long hmc_evaluations(const HmcConfig& cfg) {
  return 1 + static_cast<long>(cfg.adapt_steps + static_cast<long>(cfg.samples) * cfg.thin) *
                 cfg.leapfrog_steps;
}

double hamiltonian(const LeapfrogState& s, const Vec& inv_mass) {
  return -s.log_target + 0.5 * (s.p.array().square() * inv_mass.array()).sum();
}

LeapfrogState leapfrog(const LogDensityGrad& target, LeapfrogState s, double eps, int steps,
                       const Vec& inv_mass) {
  for (int k = 0; k < steps; ++k) {
    s.p += 0.5 * eps * s.grad;
    s.q += eps * (inv_mass.array() * s.p.array()).matrix();
    s.log_target = target(s.q, s.grad);
    s.p += 0.5 * eps * s.grad;
  }
  return s;
}

HmcResult hmc_run(const LogDensityGrad& target, const HmcConfig& cfg, const Vec& init) {
  if (!(cfg.step_size > 0.0)) throw std::invalid_argument("hmc: step_size must be positive");
  if (cfg.leapfrog_steps < 1) throw std::invalid_argument("hmc: leapfrog_steps must be >= 1");
  if (!(cfg.adapt_gamma > 0.0)) throw std::invalid_argument("hmc: adapt_gamma must be positive");
  if (cfg.thin < 1 || cfg.samples < 0 || cfg.adapt_steps < 0)
    throw std::invalid_argument("hmc: invalid chain lengths");
  const int d = static_cast<int>(init.size());
  Vec mass = cfg.mass.size() == d ? cfg.mass : Vec::Ones(d);
  if (cfg.mass.size() != 0 && cfg.mass.size() != d)
    throw std::invalid_argument("hmc: mass dimension mismatch");
  Vec inv_mass = mass.cwiseInverse();
  Vec sqrt_mass = mass.cwiseSqrt();

  RandomStream rs(cfg.seed);
  HmcResult res;
  LogDensityGrad counted = [&](const Vec& q, Vec& g) {
    ++res.gradient_evaluations;
    return target(q, g);
  };
  LeapfrogState cur;
  cur.q = init;
  cur.log_target = counted(cur.q, cur.grad);
  if (!std::isfinite(cur.log_target)) throw NumericalError("hmc: initial state has zero density");

  double eps = cfg.step_size;
  const double mu = std::log(10.0 * cfg.step_size);
  double hbar = 0.0, log_eps_bar = 0.0;
  const double gamma = cfg.adapt_gamma, t0 = 10.0, kappa = 0.75;

  const int total = cfg.adapt_steps + cfg.samples * cfg.thin;
  res.batch.samples.resize(cfg.samples, d);
  res.batch.provenance = "hmc";
  res.log_target.resize(cfg.samples);
  int kept = 0;
  double acc_sum = 0.0;
  int acc_n = 0;
  for (int it = 0; it < total; ++it) {
    LeapfrogState prop = cur;
    prop.p = (sqrt_mass.array() * rs.normal_vec(d).array()).matrix();
    double h0 = hamiltonian(prop, inv_mass);
    double dh = INFINITY;
    try {
      prop = leapfrog(counted, prop, eps, cfg.leapfrog_steps, inv_mass);
      dh = hamiltonian(prop, inv_mass) - h0;
    } catch (const NumericalError&) {
      // The trajectory left the region where the target can be evaluated.
    }
    bool div = !std::isfinite(dh) || dh > cfg.max_energy_error;
    double a = div ? 0.0 : std::min(1.0, std::exp(-dh));
    res.accept_prob.push_back(a);
    res.energy_error.push_back(std::isfinite(dh) ? dh : INFINITY);
    res.divergent.push_back(div);
    if (div) ++res.divergences;
    if (!div && rs.uniform() < a) cur = prop;

    if (it < cfg.adapt_steps) {
      double m = it + 1;
      hbar = (1.0 - 1.0 / (m + t0)) * hbar + (cfg.target_accept - a) / (m + t0);
      double log_eps = mu - std::sqrt(m) / gamma * hbar;
      double w = std::pow(m, -kappa);
      log_eps_bar = w * log_eps + (1.0 - w) * log_eps_bar;
      eps = std::exp(log_eps);
      if (it + 1 == cfg.adapt_steps) eps = std::exp(log_eps_bar);
    } else {
      acc_sum += a;
      ++acc_n;
      int j = it - cfg.adapt_steps;
      if ((j + 1) % cfg.thin == 0) {
        res.batch.samples.row(kept) = cur.q.transpose();
        res.log_target(kept) = cur.log_target;
        ++kept;
      }
    }
    if (res.divergences > total / 2) {
      std::ostringstream os;
      os << "hmc: more than half of the trajectories diverged (" << res.divergences << " of "
         << it + 1 << ")";
      throw NumericalError(os.str());
    }
  }
  res.step_size = eps;
  res.acceptance_rate = acc_n ? acc_sum / acc_n : 0.0;
  return res;
}

std::vector<double> autocorrelation(const Vec& chain, int max_lag) {
  const int n = static_cast<int>(chain.size());
  double m = chain.mean();
  Vec c = chain.array() - m;
  double v = c.squaredNorm() / n;
  std::vector<double> out;
  for (int k = 0; k <= max_lag && k < n; ++k) {
    double s = 0.0;
    for (int i = 0; i + k < n; ++i) s += c(i) * c(i + k);
    out.push_back(v > 0 ? s / n / v : 0.0);
  }
  return out;
}

std::string hmc_chain_csv(const HmcResult& r) {
  std::ostringstream os;
  const int d = r.batch.dim();
  os << "index";
  for (int k = 0; k < d; ++k) os << ",x" << k;
  os << ",log_target\n";
  char buf[64];
  for (int i = 0; i < r.batch.count(); ++i) {
    os << i;
    for (int k = 0; k < d; ++k) {
      std::snprintf(buf, sizeof buf, ",%.12e", r.batch.samples(i, k));
      os << buf;
    }
    std::snprintf(buf, sizeof buf, ",%.12e\n", r.log_target(i));
    os << buf;
  }
  return os.str();
}

}  // namespace msign
