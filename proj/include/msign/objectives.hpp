#pragma once

#include <functional>
#include <string>
#include <vector>

#include "msign/msign_model.hpp"

namespace msign {

// Unnormalized log target density.
using LogTarget = std::function<double(const Vec&)>;

struct ObjectiveEstimate {
  double value = 0.0;
  double se = 0.0;
  double kl_pq = 0.0;  // E_p[log p - log q]
  double kl_qp = 0.0;  // weighted E_q~[log q - log p]
  Vec gradient;
  double ess = 0.0;    // effective sample size of the proposal weights
  int batch = 0;
};

enum class Baseline {
  None,  // coefficient (1 + log p - log q) as written
  Mean,  // coefficient centred by its batch mean
};

Baseline parse_baseline(const std::string& s);

// Per-sample quantities feeding the estimators. p_* are evaluated on draws from
// p_theta, s_* on draws from the proposal. Gradient rows hold d log p_theta / d theta.
struct JeffreysTerms {
  Vec p_logp, p_logq;
  Vec s_logq, s_logp, s_logprop;
  Mat p_grad, s_grad;
};

struct ImportanceWeights {
  Vec w;        // normalized, sums to 1
  double ess;   // (sum w)^2 / sum w^2
  double max_log_weight;
};

ImportanceWeights normalized_weights(const Vec& log_w);

// Fixed-order pairwise summation.
double tree_sum(const double* v, int n);

ObjectiveEstimate jeffreys_from_terms(const JeffreysTerms& t, bool with_gradient,
                                      Baseline baseline = Baseline::None);
ObjectiveEstimate kl_from_terms(const JeffreysTerms& t, bool with_gradient,
                                Baseline baseline = Baseline::None);

ObjectiveEstimate jeffreys_value(const DensityModel& model, const LogTarget& target,
                                 const ProposalDensity& proposal, RandomStream& p_stream,
                                 RandomStream& q_stream, int batch);
ObjectiveEstimate jeffreys_grad(const DensityModel& model, const LogTarget& target,
                                const ProposalDensity& proposal, RandomStream& p_stream,
                                RandomStream& q_stream, int batch,
                                Baseline baseline = Baseline::None);
ObjectiveEstimate kl_grad(const DensityModel& model, const LogTarget& target,
                          RandomStream& p_stream, int batch, Baseline baseline = Baseline::None);

// Both sample sets of one estimate, frozen at reference parameters. Evaluating
// the value at other parameters reweights the p-side draws by p_theta / p_ref, so
// finite differences of frozen_value at the reference reproduce the score-function
// gradient with common random numbers.
struct FrozenBatch {
  Mat p_samples;
  Vec p_logref;  // log p at the reference parameters
  Vec p_logq;
  Mat s_samples;
  Vec s_logq;
  Vec s_logprop;
};

FrozenBatch freeze_batch(const DensityModel& model, const LogTarget& target,
                         const ProposalDensity& proposal, RandomStream& p_stream,
                         RandomStream& q_stream, int batch);
double frozen_value(const DensityModel& model, const FrozenBatch& fb);
ObjectiveEstimate frozen_grad(const DensityModel& model, const FrozenBatch& fb,
                              Baseline baseline = Baseline::None);

// Toy landscape: q and p_theta are equal-weight two-component 1-D Gaussian mixtures.
struct MixtureLandscape {
  double sigma = 0.25;
  double mu1 = 1.5, mu2 = -1.5;  // target means
  double lo = -4.0, hi = 4.0;
  double tol = 1e-8;

  double kl_pq(double t1, double t2) const;  // D_KL(p_theta || q)
  double kl_qp(double t1, double t2) const;  // D_KL(q || p_theta)
  double jeffreys(double t1, double t2) const { return kl_pq(t1, t2) + kl_qp(t1, t2); }
};

struct LandscapeRow {
  double t1, t2, kl_pq, kl_qp, jeffreys;
};

std::vector<LandscapeRow> landscape_grid(const MixtureLandscape& m, double lo, double hi, int n);
std::string landscape_csv(const std::vector<LandscapeRow>& rows);

}  // namespace msign
