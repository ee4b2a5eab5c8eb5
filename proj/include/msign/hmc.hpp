#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "msign/lattice_prior.hpp"
#include "msign/random.hpp"

namespace msign {

// Returns log density and writes its gradient.
using LogDensityGrad = std::function<double(const Vec&, Vec&)>;

struct HmcConfig {
  double step_size = 0.1;
  int leapfrog_steps = 10;
  Vec mass;  // diagonal; empty means identity
  int adapt_steps = 500;
  int samples = 1000;
  int thin = 1;
  double target_accept = 0.65;
  double adapt_gamma = 0.2;  // dual-averaging shrinkage; larger damps step-size noise
  double max_energy_error = 1000.0;
  std::uint64_t seed = 0;
};

struct HmcResult {
  SampleBatch batch;
  Vec log_target;                  // target log-density at each kept sample
  std::vector<double> accept_prob;  // every iteration, adaptation included
  std::vector<double> energy_error;
  std::vector<bool> divergent;
  double acceptance_rate = 0.0;  // mean acceptance probability after adaptation
  double step_size = 0.0;        // frozen value after adaptation
  int divergences = 0;
  long gradient_evaluations = 0;
};

// Number of target evaluations (value + gradient) a run performs; an upper
// bound when trajectories are cut short by failed evaluations.
long hmc_evaluations(const HmcConfig& cfg);

HmcResult hmc_run(const LogDensityGrad& target, const HmcConfig& cfg, const Vec& init);

// One leapfrog trajectory; exposed for reversibility checks.
struct LeapfrogState {
  Vec q, p;
  double log_target;
  Vec grad;
};
LeapfrogState leapfrog(const LogDensityGrad& target, LeapfrogState s, double eps, int steps,
                       const Vec& inv_mass);
double hamiltonian(const LeapfrogState& s, const Vec& inv_mass);

// Lag-k autocorrelation of a scalar chain for k = 0..max_lag.
std::vector<double> autocorrelation(const Vec& chain, int max_lag);

std::string hmc_chain_csv(const HmcResult& r);

}  // namespace msign
