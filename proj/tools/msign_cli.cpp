// Command-line entry point: precompute, train, compare, landscape, hmc, oracle.
#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "msign/cache.hpp"
#include "msign/config.hpp"
#include "msign/diagnostics.hpp"
#include "msign/hmc.hpp"
#include "msign/objectives.hpp"
#include "msign/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace msign;

namespace {

enum Exit { kOk = 0, kFailure = 1, kConfig = 2, kBudget = 3, kNumerical = 4 };

void write_file(const fs::path& p, const std::string& s) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + p.string());
  os << s;
}

std::string read_file(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw ConfigError("cannot read " + p.string());
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

// Cache key: everything that determines the priors and conditioners.
std::string cache_key(const ExperimentConfig& c) {
  json j = json::parse(config_json(c));
  json k = {{"problem", c.problem}};
  if (c.problem == "synthetic") {
    const auto& s = j["synthetic"];
    k["prior"] = {s["finest_side"], s["levels"], s["alpha"], s["beta"], s["laplacian"]};
  } else {
    const auto& e = j["elliptic"];
    k["prior"] = {e["finest_side"], e["levels"], e["alpha"], e["beta"], e["laplacian"]};
  }
  return k.dump();
}

struct Common {
  std::string config;
  std::vector<std::string> sets;
  ExperimentConfig load() const { return load_config(config, sets); }
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("-c,--config", c.config, "experiment config (JSON)")->required();
  app->add_option("--set", c.sets, "override a config value, e.g. --set train.seed=3");
}

int cmd_precompute(const Common& common) {
  ExperimentConfig cfg = common.load();
  auto problem = make_problem(cfg);
  CacheResult r = ensure_cache(*problem, cfg.cache_dir, cache_key(cfg));
  std::cout << (r.hit ? "cache hit " : (r.rebuilt_after_mismatch ? "cache rebuilt " : "cache built "))
            << r.path << "\n";
  return kOk;
}

int cmd_train(const Common& common, bool resume, const std::string& out_override) {
  ExperimentConfig cfg = common.load();
  auto problem = make_problem(cfg);
  CacheResult cache = ensure_cache(*problem, cfg.cache_dir, cache_key(cfg));
  std::string out = out_override.empty() ? cfg.output_dir : out_override;
  fs::create_directories(out);
  write_file(fs::path(out) / "config.json", config_json(cfg));
  RunReport rep = run_full(cfg.train, *problem, out, resume, &cache.conditioners);
  std::cout << "status " << rep.status << ", nFS " << rep.ledger.total() << " of "
            << rep.nfs_budget << ", trained through stage " << rep.trained_through << "\n";
  if (rep.ledger.forward_count != rep.forward_calls ||
      rep.ledger.gradient_count != rep.adjoint_calls) {
    std::cerr << "ledger mismatch: ledger " << rep.ledger.forward_count << "/"
              << rep.ledger.gradient_count << " counters " << rep.forward_calls << "/"
              << rep.adjoint_calls << "\n";
    return kFailure;
  }
  return rep.status == "budget_exhausted" ? kBudget : kOk;
}

// Direction used for marginals: the oracle's critical direction for the synthetic
// problem, otherwise the leading principal direction of the pooled sources.
Vec comparison_direction(const ExperimentConfig& cfg, const PosteriorProblem& problem,
                         const std::vector<SampleBatch>& sources) {
  if (cfg.problem == "synthetic") {
    auto oracle = build_oracle(static_cast<const SyntheticProblem&>(problem), problem.scales());
    return oracle.critical_direction;
  }
  int n = 0;
  for (const auto& s : sources) n += s.count();
  Mat all(n, sources.front().dim());
  int off = 0;
  for (const auto& s : sources) {
    all.middleRows(off, s.count()) = s.samples;
    off += s.count();
  }
  Vec mu = all.colwise().mean();
  Mat c = all.rowwise() - mu.transpose();
  Mat cov = c.transpose() * c / std::max(n - 1, 1);
  Vec dir = sym_eig(SymMatrix(0.5 * (cov + cov.transpose()))).vectors.col(0);
  // Fix the sign so the output does not depend on the eigensolver.
  int k = 0;
  dir.cwiseAbs().maxCoeff(&k);
  return dir(k) < 0 ? Vec(-dir) : dir;
}

int cmd_compare(const Common& common, const std::vector<std::string>& sources_arg, bool with_oracle,
                const std::string& run_dir, const std::string& out_override) {
  ExperimentConfig cfg = common.load();
  auto problem = make_problem(cfg);
  const auto& dc = cfg.diagnostics;
  std::vector<std::string> names;
  std::vector<SampleBatch> sources;
  if (with_oracle) {
    if (cfg.problem != "synthetic") throw ConfigError("--oracle is only available for the synthetic problem");
    auto o = build_oracle(static_cast<const SyntheticProblem&>(*problem), problem->scales());
    RandomStream rs = RandomStream(dc.seed).substream(0x0AC1E);
    names.push_back("oracle");
    sources.push_back(synthetic_oracle_sample(o, rs, dc.oracle_samples));
  }
  for (const auto& s : sources_arg) {
    auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("source '" + s + "' must be name=path.csv");
    names.push_back(s.substr(0, eq));
    sources.push_back(batch_from_csv(read_file(s.substr(eq + 1)), "external"));
  }
  if (sources.empty()) throw ConfigError("compare: no sources given");
  const int d = problem->dim(problem->scales());
  for (size_t i = 0; i < sources.size(); ++i)
    if (sources[i].dim() != d)
      throw ConfigError("compare: source '" + names[i] + "' has dimension " +
                        std::to_string(sources[i].dim()) + ", expected " + std::to_string(d));

  std::string out = out_override.empty() ? (fs::path(cfg.output_dir) / "compare").string() : out_override;
  fs::create_directories(out);
  Vec dir = comparison_direction(cfg, *problem, sources);

  // Reference moments: exact oracle when available, else the first source.
  OracleMoments ref;
  if (cfg.problem == "synthetic") {
    auto o = build_oracle(static_cast<const SyntheticProblem&>(*problem), problem->scales());
    ref.basis = o.basis;
    ref.mean = Vec::Zero(d);
    ref.cov = o.basis.transpose() * o.covariance() * o.basis;
  } else {
    ref.basis = Mat::Identity(d, d);
    const Mat& x = sources.front().samples;
    ref.mean = x.colwise().mean();
    Mat c = x.rowwise() - ref.mean.transpose();
    ref.cov = c.transpose() * c / std::max<Eigen::Index>(x.rows() - 1, 1);
  }

  json rep;
  rep["reference"] = cfg.problem == "synthetic" ? "oracle" : names.front();
  rep["direction"] = std::vector<double>(dir.data(), dir.data() + dir.size());
  double hi = 0.0;
  for (const auto& s : sources) hi = std::max(hi, (s.samples * dir).cwiseAbs().maxCoeff());
  for (size_t i = 0; i < sources.size(); ++i) {
    const auto& s = sources[i];
    MarginalSummary m = marginal_projection(s, dir, dc.bins, -hi, hi);
    write_file(fs::path(out) / ("marginal_" + names[i] + ".csv"), marginal_csv(m));
    DipTest dip = dip_test(m.projections, dc.dip_level, dc.dip_null_draws, dc.seed);
    RmseReport rm = rmse_report(s, ref);
    ModeBalance mb = mode_balance(s, 2, dc.kmeans_restarts, dc.seed);
    rep["sources"][names[i]] = {
        {"count", s.count()},
        {"dip", {{"statistic", dip.dip}, {"critical", dip.critical}, {"bimodal", dip.bimodal}}},
        {"rmse", {{"mean", rm.mean_rmse}, {"std", rm.std_rmse}, {"corr", rm.corr_rmse}}},
        {"mode_balance",
         {{"proportions", std::vector<double>(mb.proportions.data(),
                                              mb.proportions.data() + mb.proportions.size())},
          {"collapsed", mb.collapsed},
          {"inertia", mb.inertia}}}};
  }

  if (!run_dir.empty()) {
    // model structure comes from the run's own effective config when it has one
    fs::path run_cfg_path = fs::path(run_dir) / "config.json";
    ExperimentConfig run_cfg = fs::exists(run_cfg_path) ? parse_config(read_file(run_cfg_path.string())) : cfg;
    if (run_cfg.problem != cfg.problem)
      throw ConfigError("compare: run " + run_dir + " was trained on '" + run_cfg.problem + "'");
    FlowSpec fspec = run_cfg.train.flow;
    fspec.seed = splitmix64(run_cfg.train.seed ^ 0x5eedf10eULL);
    MsignModel model = build_model(*problem, fspec);
    BudgetLedger ledger;
    const int L = problem->scales();
    load_stage_checkpoint(model, ledger, (fs::path(run_dir) / ("stage_" + std::to_string(L) + ".ckpt")).string());
    model.mark_trained(L);
    MsignDensity dens(model, L);
    LogTarget target = [&](const Vec& x) { return problem->log_posterior(x, L); };
    RandomStream root = RandomStream(dc.seed).substream(0xD1);
    RandomStream ps = root.substream(1), qs = root.substream(2);
    JeffreysReport jr;
    if (L >= 2) {
      StageProposal prop(model, L);
      jr = jeffreys_between(dens, target, prop, ps, qs, dc.jeffreys_batch);
    } else {
      throw ConfigError("compare: Jeffreys estimate needs at least two scales");
    }
    rep["jeffreys"] = {{"value", jr.value}, {"se", jr.se}, {"line", jr.line()},
                       {"forward_simulations", problem->forward_calls()}};
    std::cout << "D_J " << jr.line() << "\n";
  }
  write_file(fs::path(out) / "compare.json", rep.dump(2) + "\n");
  std::cout << "wrote " << out << "/compare.json\n";
  return kOk;
}

int cmd_landscape(double lo, double hi, int n, const std::string& out) {
  MixtureLandscape m;
  write_file(out, landscape_csv(landscape_grid(m, lo, hi, n)));
  std::cout << "wrote " << out << "\n";
  return kOk;
}

int cmd_hmc(const Common& common, int scale, const std::string& out_override) {
  ExperimentConfig cfg = common.load();
  auto problem = make_problem(cfg);
  int l = scale == 0 ? problem->scales() : scale;
  if (l < 1 || l > problem->scales()) throw ConfigError("hmc: scale out of range");
  HmcConfig hc = cfg.train.bootstrap.hmc;
  if (hc.mass.size() == 0) hc.mass = problem->prior(l).precision.mat().diagonal();
  hc.seed = RandomStream(cfg.train.seed).substream(0x4D43).next_u64();
  RandomStream init = RandomStream(cfg.train.seed).substream(0x1417);
  Vec x0 = sample_prior(problem->prior(l), init, 1).samples.row(0).transpose();
  BudgetLedger ledger;
  MeteredTarget tgt(*problem, ledger, cfg.train.nfs_budget);
  HmcResult r;
  try {
    r = hmc_run([&](const Vec& x, Vec& g) { return tgt.value_grad(x, l, g); }, hc, x0);
  } catch (const BudgetExhausted&) {
    std::cerr << "hmc: nFS budget " << cfg.train.nfs_budget << " exhausted\n";
    return kBudget;
  }
  std::string out = out_override.empty() ? (fs::path(cfg.output_dir) / "hmc").string() : out_override;
  fs::create_directories(out);
  write_file(fs::path(out) / "chain.csv", hmc_chain_csv(r));
  Vec lt = r.log_target;
  json j = {{"scale", l},
            {"acceptance_rate", r.acceptance_rate},
            {"step_size", r.step_size},
            {"divergences", r.divergences},
            {"gradient_evaluations", r.gradient_evaluations},
            {"nfs", ledger.total()},
            {"mixing_ok", r.acceptance_rate >= 0.30 && r.acceptance_rate <= 0.75},
            {"log_target_autocorrelation", autocorrelation(lt, 50)}};
  std::string trace = "iteration,accept_prob,energy_error,divergent\n";
  char buf[128];
  for (size_t i = 0; i < r.accept_prob.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%zu,%.10e,%.10e,%d\n", i, r.accept_prob[i], r.energy_error[i],
                  r.divergent[i] ? 1 : 0);
    trace += buf;
  }
  write_file(fs::path(out) / "trace.csv", trace);
  write_file(fs::path(out) / "hmc.json", j.dump(2) + "\n");
  std::cout << "acceptance " << r.acceptance_rate << ", step " << r.step_size << ", nFS "
            << ledger.total() << "\n";
  return kOk;
}

int cmd_oracle(const Common& common, int count, const std::string& out) {
  ExperimentConfig cfg = common.load();
  if (cfg.problem != "synthetic") throw ConfigError("oracle: only the synthetic problem has one");
  auto problem = make_problem(cfg);
  auto o = build_oracle(static_cast<const SyntheticProblem&>(*problem), problem->scales());
  RandomStream rs = RandomStream(cfg.diagnostics.seed).substream(0x0AC1E);
  write_file(out, batch_csv(synthetic_oracle_sample(o, rs, count > 0 ? count : cfg.diagnostics.oracle_samples)));
  std::cout << "wrote " << out << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multiscale invertible generative networks for Bayesian inverse problems"};
  app.require_subcommand(1);

  Common c_pre, c_train, c_cmp, c_hmc, c_orc;
  auto* pre = app.add_subcommand("precompute", "build or reuse the prior/conditioner cache");
  add_common(pre, c_pre);

  auto* train = app.add_subcommand("train", "run multi-stage training");
  add_common(train, c_train);
  bool resume = false;
  std::string train_out;
  train->add_flag("--resume", resume, "continue after the last completed stage");
  train->add_option("-o,--out", train_out, "run directory (defaults to output_dir)");

  auto* cmp = app.add_subcommand("compare", "diagnostics across sample sources");
  add_common(cmp, c_cmp);
  std::vector<std::string> sources;
  bool with_oracle = false;
  std::string run_dir, cmp_out;
  cmp->add_option("-s,--source", sources, "name=path.csv");
  cmp->add_flag("--oracle", with_oracle, "include an exact oracle batch (synthetic)");
  cmp->add_option("--run", run_dir, "training run directory for a Jeffreys estimate");
  cmp->add_option("-o,--out", cmp_out, "output directory");

  auto* land = app.add_subcommand("landscape", "two-mode mixture divergence landscape");
  double lo = -3.0, hi = 3.0;
  int n = 61;
  std::string land_out = "landscape.csv";
  land->add_option("--lo", lo);
  land->add_option("--hi", hi);
  land->add_option("-n,--points", n)->check(CLI::Range(2, 2001));
  land->add_option("-o,--out", land_out);

  auto* hmc = app.add_subcommand("hmc", "HMC baseline on the posterior at one scale");
  add_common(hmc, c_hmc);
  int scale = 0;
  std::string hmc_out;
  hmc->add_option("--scale", scale, "scale (default finest)");
  hmc->add_option("-o,--out", hmc_out);

  auto* orc = app.add_subcommand("oracle", "exact posterior samples (synthetic)");
  add_common(orc, c_orc);
  int count = 0;
  std::string orc_out = "oracle.csv";
  orc->add_option("-n,--count", count);
  orc->add_option("-o,--out", orc_out);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? kOk : kConfig;
  }

  try {
    if (*pre) return cmd_precompute(c_pre);
    if (*train) return cmd_train(c_train, resume, train_out);
    if (*cmp) return cmd_compare(c_cmp, sources, with_oracle, run_dir, cmp_out);
    if (*land) return cmd_landscape(lo, hi, n, land_out);
    if (*hmc) return cmd_hmc(c_hmc, scale, hmc_out);
    if (*orc) return cmd_oracle(c_orc, count, orc_out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const BudgetExhausted& e) {
    std::cerr << "budget exhausted: " << e.what() << "\n";
    return kBudget;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kNumerical;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kOk;
}
