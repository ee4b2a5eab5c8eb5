#pragma once

#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "msign/hmc.hpp"
#include "msign/msign_model.hpp"
#include "msign/objectives.hpp"
#include "msign/problems.hpp"

namespace msign {

enum class ObjectiveKind { Jeffreys, Kl };
ObjectiveKind parse_objective(const std::string& s);
std::string to_string(ObjectiveKind k);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct BootstrapConfig {
  HmcConfig hmc;        // per chain
  int chains = 2;       // started from mirror-paired points
  int steps = 300;      // optimizer steps on the stage-1 flow
  double threshold = 0.5;  // D_J level reported as converged
  bool data_init = true;   // set the first actnorm from the HMC sample moments
};

struct TrainConfig {
  int stages = 3;
  int batch = 100;
  int steps_per_stage = 200;
  std::vector<int> stage_steps;  // optional per-stage override, entries for stages 2..L
  AdamConfig optimizer;
  long nfs_budget = 1000000;
  std::vector<double> budget_split;  // per-stage fractions; empty means equal
  std::uint64_t seed = 0;
  bool freeze_lower_scales = false;
  ObjectiveKind objective = ObjectiveKind::Jeffreys;
  Baseline baseline = Baseline::Mean;
  double ess_floor = 0.05;  // fraction of the batch
  int ess_patience = 25;    // consecutive low-ESS batches before failing
  int final_samples = 2500;
  FlowSpec flow;
  BootstrapConfig bootstrap;
};

// Forward-simulation ledger. Each target value costs one forward simulation;
// each target gradient costs one more (the adjoint).
struct BudgetLedger {
  long forward_count = 0;
  long gradient_count = 0;
  long total() const { return forward_count + gradient_count; }
};

class BudgetExhausted : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Target density of stage l that charges the ledger and refuses to exceed a cap.
class MeteredTarget {
 public:
  MeteredTarget(const PosteriorProblem& problem, BudgetLedger& ledger, long cap)
      : problem_(problem), ledger_(ledger), cap_(cap) {}
  double value(const Vec& x, int l) const;
  double value_grad(const Vec& x, int l, Vec& grad) const;
  long remaining() const { return cap_ - ledger_.total(); }
  void set_cap(long cap) { cap_ = cap; }

 private:
  const PosteriorProblem& problem_;
  BudgetLedger& ledger_;
  long cap_;
};

class Adam {
 public:
  Adam(int n, const AdamConfig& cfg) : cfg_(cfg), m_(Vec::Zero(n)), v_(Vec::Zero(n)) {}
  // Descent step on params given the gradient of the loss.
  void step(Vec& params, const Vec& grad);
  int steps() const { return t_; }

 private:
  AdamConfig cfg_;
  Vec m_, v_;
  int t_ = 0;
};

struct StageRecord {
  int stage = 0;
  int steps_planned = 0;
  int steps_done = 0;
  std::vector<double> loss;  // objective estimate per step
  std::vector<double> loss_se;
  std::vector<double> ess;
  long nfs_used = 0;
  long nfs_allowance = 0;
  bool budget_limited = false;
  // bootstrap only
  double hmc_acceptance = 0.0;
  double hmc_step_size = 0.0;
  int hmc_divergences = 0;
  bool converged = true;
};

struct RunReport {
  std::string problem;
  std::string status = "ok";  // ok | budget_exhausted
  std::vector<StageRecord> stages;
  BudgetLedger ledger;
  long forward_calls = 0;  // problem counters observed over the run
  long adjoint_calls = 0;
  long nfs_budget = 0;
  int trained_through = 0;
  int final_samples = 0;
};

std::string report_json(const RunReport& r);
RunReport report_from_json(const std::string& text);

// Model whose scales mirror the problem hierarchy; every flow identity.
// Conditioners are built unless supplied (index 0 unused).
MsignModel build_model(const PosteriorProblem& problem, const FlowSpec& flow,
                       const std::vector<PriorConditioner>* conditioners = nullptr);

// Per-stage nFS allowance given what earlier stages left unspent.
long stage_allowance(const TrainConfig& cfg, int stage, long remaining);

struct StageContext {
  const TrainConfig& cfg;
  const PosteriorProblem& problem;
  BudgetLedger& ledger;
};

// Stage 1: HMC on q_1, then Jeffreys fitting of F_1 with the chain as the q-side sample.
StageRecord bootstrap_stage1(MsignModel& model, const StageContext& ctx, RandomStream stream,
                             long allowance, SampleBatch* hmc_samples = nullptr);

// Stage l >= 2: identity F_l, proposal q~_l, stochastic optimisation of the objective.
StageRecord train_stage(MsignModel& model, int l, const StageContext& ctx, RandomStream stream,
                        long allowance, int steps);

// Whole schedule. Writes per-stage checkpoints, report.json and samples.csv into
// output_dir. With resume, completed stages found in output_dir are loaded.
RunReport run_full(const TrainConfig& cfg, const PosteriorProblem& problem,
                   const std::string& output_dir, bool resume = false,
                   const std::vector<PriorConditioner>* conditioners = nullptr);

void save_stage_checkpoint(const MsignModel& model, int l, const BudgetLedger& ledger,
                           const std::string& path);
// Returns the stage stored in the checkpoint.
int load_stage_checkpoint(MsignModel& model, BudgetLedger& ledger, const std::string& path);

}  // namespace msign
