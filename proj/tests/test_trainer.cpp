#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "msign/diagnostics.hpp"
#include "msign/trainer.hpp"

using namespace msign;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("msign_trainer_" + name);
  fs::remove_all(p);
  return p;
}

TrainConfig tiny_config() {
  TrainConfig c;
  c.stages = 3;
  c.batch = 32;
  c.steps_per_stage = 15;
  c.nfs_budget = 1000000;
  c.seed = 3;
  c.final_samples = 200;
  c.optimizer.lr = 3e-3;
  c.flow.depth = 2;
  c.flow.hidden = 8;
  c.bootstrap.hmc.adapt_steps = 400;
  c.bootstrap.hmc.samples = 200;
  c.bootstrap.hmc.leapfrog_steps = 10;
  c.bootstrap.steps = 40;
  return c;
}

SyntheticConfig small_synthetic() { return SyntheticConfig{}; }

}  // namespace

TEST(Budget, MeteredTargetChargesAndCaps) {
  SyntheticProblem p(small_synthetic());
  p.reset_counters();
  BudgetLedger ledger;
  MeteredTarget t(p, ledger, 3);
  Vec x = Vec::Zero(p.dim(2)), g;
  t.value(x, 2);
  t.value_grad(x, 2, g);
  EXPECT_EQ(ledger.forward_count, 2);
  EXPECT_EQ(ledger.gradient_count, 1);
  EXPECT_EQ(t.remaining(), 0);
  EXPECT_THROW(t.value(x, 2), BudgetExhausted);
  EXPECT_EQ(ledger.total(), 3);
  EXPECT_EQ(p.forward_calls(), ledger.forward_count);
  EXPECT_EQ(p.adjoint_calls(), ledger.gradient_count);
}

TEST(Budget, StageAllowanceSplits) {
  TrainConfig c;
  c.stages = 3;
  EXPECT_EQ(stage_allowance(c, 1, 900), 300);
  EXPECT_EQ(stage_allowance(c, 2, 600), 300);
  EXPECT_EQ(stage_allowance(c, 3, 301), 301);
  c.budget_split = {0.3, 0.35, 0.35};
  EXPECT_EQ(stage_allowance(c, 1, 1000), 300);
  EXPECT_EQ(stage_allowance(c, 2, 700), 350);
  // unspent allowance flows to later stages
  EXPECT_EQ(stage_allowance(c, 2, 800), 400);
  EXPECT_EQ(stage_allowance(c, 1, 0), 0);
  c.budget_split = {0.5, 0.5};
  EXPECT_THROW(stage_allowance(c, 1, 10), std::invalid_argument);
}

TEST(Adam, FirstStepIsSignedLearningRate) {
  AdamConfig ac;
  ac.lr = 0.01;
  Adam opt(3, ac);
  Vec p = Vec::Zero(3), g(3);
  g << 2.0, -0.5, 1e-3;
  opt.step(p, g);
  for (int i = 0; i < 3; ++i)
    EXPECT_NEAR(p(i), -0.01 * g(i) / (std::abs(g(i)) + ac.eps), 1e-15);
  EXPECT_EQ(opt.steps(), 1);
  g(0) = NAN;
  EXPECT_THROW(opt.step(p, g), NumericalError);
}

TEST(Stage, ZeroStepsLeavesTheProposal) {
  SyntheticProblem p(small_synthetic());
  TrainConfig c = tiny_config();
  MsignModel m = build_model(p, c.flow);
  m.mark_trained(1);
  BudgetLedger ledger;
  StageContext ctx{c, p, ledger};
  StageRecord r = train_stage(m, 2, ctx, RandomStream(1), 1000, 0);
  EXPECT_EQ(r.steps_done, 0);
  EXPECT_EQ(ledger.total(), 0);
  StageProposal prop(m, 2);
  RandomStream rs(2);
  SampleBatch a = prop.sample(rs, 50), b = m.sample(rs, 50, 1.0, 2);
  for (const SampleBatch* s : {&a, &b})
    for (int i = 0; i < s->count(); ++i) {
      Vec x = s->samples.row(i).transpose();
      EXPECT_NEAR(m.log_density(x, 2), prop.log_density(x), 1e-9);
    }
}

TEST(Stage, HigherFlowsStayIdentity) {
  SyntheticProblem p(small_synthetic());
  TrainConfig c = tiny_config();
  MsignModel m = build_model(p, c.flow);
  Vec f3 = m.flow(3).params();
  m.mark_trained(1);
  BudgetLedger ledger;
  StageContext ctx{c, p, ledger};
  train_stage(m, 2, ctx, RandomStream(4), 100000, 5);
  EXPECT_EQ(m.flow(3).params(), f3);
  EXPECT_NE(m.flow(2).params(), FlowStack::init_identity(m.flow(2).spec()).params());
  EXPECT_EQ(ledger.total(), 5 * 2 * c.batch);
}

TEST(Stage, FrozenLowerScalesUntouched) {
  SyntheticProblem p(small_synthetic());
  TrainConfig c = tiny_config();
  c.freeze_lower_scales = true;
  MsignModel m = build_model(p, c.flow);
  RandomStream perturb(5);
  m.flow(1).params() += 0.01 * perturb.normal_vec(m.flow(1).total_params());
  Vec f1 = m.flow(1).params();
  m.mark_trained(1);
  BudgetLedger ledger;
  StageContext ctx{c, p, ledger};
  train_stage(m, 2, ctx, RandomStream(4), 100000, 3);
  EXPECT_EQ(m.flow(1).params(), f1);
}

TEST(Stage, BootstrapOnStandardGaussianTarget) {
  // No likelihood: q_1 is the Gaussian prior, which a stage-1 flow can match exactly.
  SyntheticProblem p(small_synthetic());
  p.set_likelihood_enabled(false);
  TrainConfig c = tiny_config();
  c.bootstrap.hmc.adapt_steps = 1500;
  c.bootstrap.hmc.samples = 1250;
  c.bootstrap.hmc.thin = 2;
  c.bootstrap.steps = 300;
  c.batch = 64;
  MsignModel m = build_model(p, c.flow);
  BudgetLedger ledger;
  StageContext ctx{c, p, ledger};
  StageRecord r = bootstrap_stage1(m, ctx, RandomStream(8), 10000000);
  EXPECT_GE(r.hmc_acceptance, 0.30);
  EXPECT_LE(r.hmc_acceptance, 0.75);
  double tail = 0.0;
  for (int k = 0; k < 30; ++k) tail += r.loss[r.loss.size() - 1 - k] / 30;
  EXPECT_LE(tail, 0.05);
  EXPECT_TRUE(r.converged);
  EXPECT_EQ(r.nfs_used, ledger.total());
}

TEST(Stage, SyntheticBootstrapBalancesModes) {
  SyntheticProblem p(small_synthetic());
  TrainConfig c = tiny_config();
  c.bootstrap.steps = 200;
  c.batch = 64;
  MsignModel m = build_model(p, c.flow);
  BudgetLedger ledger;
  StageContext ctx{c, p, ledger};
  SampleBatch chain;
  bootstrap_stage1(m, ctx, RandomStream(11), 10000000, &chain);
  Vec v = p.functional(1);
  RandomStream rs(3);
  SampleBatch s = m.sample(rs, 2000, 1.0, 1);
  double pos = ((s.samples * v).array() > 0).cast<double>().mean();
  EXPECT_NEAR(pos, 0.5, 0.15);
  double cpos = ((chain.samples * v).array() > 0).cast<double>().mean();
  EXPECT_NEAR(cpos, 0.5, 0.15);
}

class RunFixture : public ::testing::Test {
 protected:
  SyntheticProblem p{small_synthetic()};
};

TEST_F(RunFixture, LedgerEqualsCountersAndOutputsExist) {
  fs::path d = scratch("ledger");
  RunReport r = run_full(tiny_config(), p, d.string());
  EXPECT_EQ(r.status, "ok");
  EXPECT_EQ(r.ledger.forward_count, r.forward_calls);
  EXPECT_EQ(r.ledger.gradient_count, r.adjoint_calls);
  EXPECT_EQ(r.trained_through, 3);
  long used = 0;
  for (const auto& s : r.stages) used += s.nfs_used;
  EXPECT_EQ(used, r.ledger.total());
  for (const char* f : {"stage_1.ckpt", "stage_2.ckpt", "stage_3.ckpt", "report.json", "samples.csv",
                        "hmc_stage1.csv", "timings.json"})
    EXPECT_TRUE(fs::exists(d / f)) << f;
  SampleBatch s = batch_from_csv(slurp(d / "samples.csv"), "run");
  EXPECT_EQ(s.count(), 200);
  EXPECT_EQ(s.dim(), 64);
  RunReport back = report_from_json(slurp(d / "report.json"));
  EXPECT_EQ(report_json(back), slurp(d / "report.json"));
}

TEST_F(RunFixture, IdenticalSeedIdenticalOutputs) {
  fs::path a = scratch("det_a"), b = scratch("det_b");
  TrainConfig c = tiny_config();
  run_full(c, p, a.string());
  run_full(c, p, b.string());
  EXPECT_EQ(slurp(a / "report.json"), slurp(b / "report.json"));
  EXPECT_EQ(slurp(a / "samples.csv"), slurp(b / "samples.csv"));
  c.seed = 4;
  fs::path e = scratch("det_c");
  run_full(c, p, e.string());
  EXPECT_NE(slurp(a / "samples.csv"), slurp(e / "samples.csv"));
}

TEST_F(RunFixture, LossDecreasesOverAStage) {
  TrainConfig c = tiny_config();
  c.steps_per_stage = 300;
  c.batch = 64;
  RunReport r = run_full(c, p, scratch("loss").string());
  const auto& l = r.stages[1].loss;
  double head = 0, tail = 0;
  for (int k = 0; k < 30; ++k) head += l[k] / 30, tail += l[l.size() - 1 - k] / 30;
  EXPECT_LT(tail, head);
}

TEST_F(RunFixture, ResumeReproducesSamples) {
  fs::path a = scratch("resume_a"), b = scratch("resume_b");
  TrainConfig c = tiny_config();
  run_full(c, p, a.string());
  fs::create_directories(b);
  // pretend the run stopped after stage 2
  fs::copy_file(a / "stage_1.ckpt", b / "stage_1.ckpt");
  fs::copy_file(a / "stage_2.ckpt", b / "stage_2.ckpt");
  RunReport full = report_from_json(slurp(a / "report.json"));
  RunReport partial = full;
  partial.stages.resize(2);
  std::ofstream(b / "report.json") << report_json(partial);
  RunReport r = run_full(c, p, b.string(), true);
  EXPECT_EQ(slurp(a / "samples.csv"), slurp(b / "samples.csv"));
  EXPECT_EQ(r.ledger.total(), full.ledger.total());
  EXPECT_EQ(r.ledger.forward_count, r.forward_calls);
  EXPECT_EQ(r.ledger.gradient_count, r.adjoint_calls);
}

TEST_F(RunFixture, BudgetHaltWritesCheckpoint) {
  TrainConfig c = tiny_config();
  long boot = 2L * c.bootstrap.chains * hmc_evaluations(c.bootstrap.hmc);
  c.nfs_budget = boot + 40L * c.batch + 3L * c.batch;  // runs out during stage 2
  c.budget_split = {0.9, 0.05, 0.05};
  fs::path d = scratch("halt");
  RunReport r = run_full(c, p, d.string());
  EXPECT_EQ(r.status, "budget_exhausted");
  EXPECT_LE(r.ledger.total(), c.nfs_budget);
  EXPECT_EQ(r.ledger.forward_count, r.forward_calls);
  EXPECT_EQ(r.ledger.gradient_count, r.adjoint_calls);
  EXPECT_TRUE(fs::exists(d / "halt.ckpt"));
  EXPECT_FALSE(fs::exists(d / "samples.csv"));

  c.nfs_budget = 0;
  RunReport z = run_full(c, p, scratch("zero").string());
  EXPECT_EQ(z.status, "budget_exhausted");
  EXPECT_EQ(z.ledger.total(), 0);
}

TEST(Run, SingleScaleProblem) {
  SyntheticConfig sc;
  sc.finest_side = 4;
  sc.levels = 1;
  SyntheticProblem p(sc);
  TrainConfig c = tiny_config();
  c.stages = 1;
  c.budget_split.clear();
  RunReport r = run_full(c, p, scratch("single").string());
  EXPECT_EQ(r.status, "ok");
  EXPECT_EQ(r.trained_through, 1);
  EXPECT_EQ(r.stages.size(), 1u);
  EXPECT_EQ(r.final_samples, 200);
}

TEST(Run, StageCountMustMatchProblem) {
  SyntheticProblem p(small_synthetic());
  TrainConfig c = tiny_config();
  c.stages = 2;
  EXPECT_THROW(run_full(c, p, scratch("mismatch").string()), std::invalid_argument);
}

TEST(Run, KlObjectiveRuns) {
  SyntheticProblem p(small_synthetic());
  TrainConfig c = tiny_config();
  c.objective = ObjectiveKind::Kl;
  RunReport r = run_full(c, p, scratch("kl").string());
  EXPECT_EQ(r.status, "ok");
  // one target value per sample for the reverse KL
  EXPECT_EQ(r.stages[1].nfs_used, static_cast<long>(c.steps_per_stage) * c.batch);
}
