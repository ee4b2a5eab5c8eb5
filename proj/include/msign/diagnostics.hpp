#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "msign/lattice_prior.hpp"
#include "msign/objectives.hpp"

namespace msign {

struct MarginalSummary {
  Vec projections;
  Vec edges;      // bins + 1
  Vec counts;     // bins
  Vec kde;        // Gaussian kernel density at bin centres
  double bandwidth = 0.0;
};

MarginalSummary marginal_projection(const SampleBatch& batch, const Vec& direction, int bins = 50,
                                    double lo = 0.0, double hi = 0.0);
std::string marginal_csv(const MarginalSummary& m);

// Hartigan dip statistic of a 1-D sample.
double dip_statistic(std::vector<double> x);

struct DipTest {
  double dip = 0.0;
  double critical = 0.0;  // null quantile from uniform samples of the same size
  bool bimodal = false;
};
DipTest dip_test(const Vec& x, double level = 0.05, int null_draws = 200, std::uint64_t seed = 7);

struct KsResult {
  double statistic = 0.0;
  double p_value = 1.0;
};
KsResult ks_test(const Vec& x, const std::function<double(double)>& cdf);
double kolmogorov_survival(double lambda);

// Exact moments expressed in a basis (columns = directions).
struct OracleMoments {
  Mat basis;
  Vec mean;  // per direction
  Mat cov;   // in basis coordinates
};

struct RmseReport {
  double mean_rmse = 0.0;
  double std_rmse = 0.0;
  double corr_rmse = 0.0;
};

RmseReport rmse_report(const SampleBatch& batch, const OracleMoments& oracle);

struct ModeBalance {
  Vec proportions;  // k entries, sum to 1
  Mat means;        // k x d, back-projected cluster means
  double inertia = 0.0;
  bool collapsed = false;  // one cluster nearly empty or means nearly identical
};

ModeBalance mode_balance(const SampleBatch& batch, int k = 2, int restarts = 100,
                         std::uint64_t seed = 11);

struct JeffreysReport {
  double value = 0.0;
  double se = 0.0;
  std::string line() const;
};

JeffreysReport jeffreys_between(const DensityModel& model, const LogTarget& target,
                                const ProposalDensity& proposal, RandomStream& p_stream,
                                RandomStream& q_stream, int batch);

// CSV rows "index,x0,...,x{d-1}" with fixed formatting.
std::string batch_csv(const SampleBatch& b);
SampleBatch batch_from_csv(const std::string& text, const std::string& provenance);

}  // namespace msign
