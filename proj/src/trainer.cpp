#include "msign/trainer.hpp"

#include <json.hpp>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "msign/checkpoint.hpp"
#include "msign/diagnostics.hpp"

namespace msign {

namespace fs = std::filesystem;
using nlohmann::json;

ObjectiveKind parse_objective(const std::string& s) {
  if (s == "jeffreys") return ObjectiveKind::Jeffreys;
  if (s == "kl") return ObjectiveKind::Kl;
  throw std::invalid_argument("unknown objective '" + s + "'");
}

std::string to_string(ObjectiveKind k) { return k == ObjectiveKind::Jeffreys ? "jeffreys" : "kl"; }

double MeteredTarget::value(const Vec& x, int l) const {
  if (ledger_.total() + 1 > cap_) throw BudgetExhausted("nFS allowance exhausted");
  ++ledger_.forward_count;
  return problem_.log_posterior(x, l);
}

double MeteredTarget::value_grad(const Vec& x, int l, Vec& grad) const {
  if (ledger_.total() + 2 > cap_) throw BudgetExhausted("nFS allowance exhausted");
  ++ledger_.forward_count;
  ++ledger_.gradient_count;
  return problem_.log_posterior_grad(x, l, grad);
}

void Adam::step(Vec& params, const Vec& grad) {
  if (grad.size() != params.size() || grad.size() != m_.size())
    throw std::invalid_argument("adam: size mismatch");
  if (!grad.allFinite()) throw NumericalError("adam: non-finite gradient");
  ++t_;
  m_ = cfg_.beta1 * m_ + (1.0 - cfg_.beta1) * grad;
  v_ = cfg_.beta2 * v_ + (1.0 - cfg_.beta2) * grad.cwiseAbs2();
  double c1 = 1.0 - std::pow(cfg_.beta1, t_);
  double c2 = 1.0 - std::pow(cfg_.beta2, t_);
  params.array() -= cfg_.lr * (m_.array() / c1) / ((v_.array() / c2).sqrt() + cfg_.eps);
}

MsignModel build_model(const PosteriorProblem& problem, const FlowSpec& flow,
                       const std::vector<PriorConditioner>* conditioners) {
  std::vector<int> sides;
  std::vector<PriorConditioner> pcs;
  if (conditioners && static_cast<int>(conditioners->size()) != problem.scales())
    throw std::invalid_argument("build_model: conditioner count does not match the problem");
  for (int l = 1; l <= problem.scales(); ++l) {
    sides.push_back(problem.scale(l).side);
    if (l == 1)
      pcs.push_back(PriorConditioner{});
    else if (conditioners)
      pcs.push_back((*conditioners)[l - 1]);
    else
      pcs.push_back(build_conditioner(problem.prior(l), problem.scale(l).ops));
  }
  return MsignModel(sides, std::move(pcs), flow);
}

long stage_allowance(const TrainConfig& cfg, int stage, long remaining) {
  if (remaining <= 0) return 0;
  const int L = cfg.stages;
  std::vector<double> f(L, 1.0);
  if (!cfg.budget_split.empty()) {
    if (static_cast<int>(cfg.budget_split.size()) != L)
      throw std::invalid_argument("budget_split needs one entry per stage");
    f = cfg.budget_split;
  }
  double rest = 0.0;
  for (int k = stage; k <= L; ++k) rest += f[k - 1];
  if (stage == L || rest <= 0.0) return remaining;
  return static_cast<long>(std::floor(remaining * f[stage - 1] / rest));
}

namespace {

double tail_mean(const std::vector<double>& v, int k) {
  if (v.empty()) return NAN;
  int n = std::min<int>(k, static_cast<int>(v.size()));
  double s = 0.0;
  for (size_t i = v.size() - n; i < v.size(); ++i) s += v[i];
  return s / n;
}

void init_actnorm_from_samples(FlowStack& f, const Mat& x) {
  const FlowBlock& b = f.blocks().front();
  if (b.kind != BlockKind::ActNorm) return;
  const int d = f.dim();
  Vec mu = x.colwise().mean();
  Mat c = x.rowwise() - mu.transpose();
  Vec sd = (c.colwise().squaredNorm() / std::max<Eigen::Index>(x.rows() - 1, 1)).cwiseSqrt();
  for (int i = 0; i < d; ++i) {
    f.params()(b.offset + i) = std::log(std::max(sd(i), 1e-6));
    f.params()(b.offset + d + i) = mu(i);
  }
}

}  // namespace

StageRecord bootstrap_stage1(MsignModel& model, const StageContext& ctx, RandomStream stream,
                             long allowance, SampleBatch* hmc_samples) {
  const TrainConfig& cfg = ctx.cfg;
  const BootstrapConfig& bc = cfg.bootstrap;
  const PosteriorProblem& problem = ctx.problem;
  StageRecord rec;
  rec.stage = 1;
  rec.steps_planned = bc.steps;
  rec.nfs_allowance = allowance;
  const long start = ctx.ledger.total();
  MeteredTarget tgt(problem, ctx.ledger, start + allowance);
  const int d = model.dim(1);
  if (d > 16) throw std::invalid_argument("bootstrap: stage-1 dimension above 16");
  if (bc.chains < 1) throw std::invalid_argument("bootstrap: need at least one chain");

  HmcConfig hc = bc.hmc;
  if (hc.mass.size() == 0) hc.mass = problem.prior(1).precision.mat().diagonal();
  long hmc_cost = 2L * bc.chains * hmc_evaluations(hc);
  if (hmc_cost > allowance) {
    rec.budget_limited = true;
    rec.nfs_used = 0;
    return rec;
  }

  // Chains start from mirror-paired prior draws.
  RandomStream init_stream = stream.substream(7);
  SampleBatch init = sample_prior(problem.prior(1), init_stream, (bc.chains + 1) / 2);
  std::vector<HmcResult> runs;
  auto target = [&](const Vec& x, Vec& g) { return tgt.value_grad(x, 1, g); };
  for (int c = 0; c < bc.chains; ++c) {
    Vec x0 = init.samples.row(c / 2).transpose();
    if (c % 2 == 1) x0 = problem.mirror(x0, 1);
    HmcConfig cc = hc;
    cc.seed = stream.substream(100 + c).next_u64();
    runs.push_back(hmc_run(target, cc, x0));
    const HmcResult& r = runs.back();
    if (r.acceptance_rate < 0.30 || r.acceptance_rate > 0.75) {
      std::ostringstream os;
      os << "bootstrap: HMC chain " << c << " acceptance " << r.acceptance_rate
         << " outside 30-75% after adaptation";
      throw NumericalError(os.str());
    }
    rec.hmc_acceptance += r.acceptance_rate / bc.chains;
    rec.hmc_step_size += r.step_size / bc.chains;
    rec.hmc_divergences += r.divergences;
  }
  int pool_n = 0;
  for (const auto& r : runs) pool_n += r.batch.count();
  Mat pool(pool_n, d);
  Vec pool_logq(pool_n);
  int off = 0;
  for (const auto& r : runs) {
    pool.middleRows(off, r.batch.count()) = r.batch.samples;
    pool_logq.segment(off, r.batch.count()) = r.log_target;
    off += r.batch.count();
  }
  if (hmc_samples) {
    hmc_samples->scale = 1;
    hmc_samples->samples = pool;
    hmc_samples->log_p = pool_logq;
    hmc_samples->provenance = "hmc";
  }

  if (bc.data_init) init_actnorm_from_samples(model.flow(1), pool);

  Adam opt(model.flow(1).total_params(), cfg.optimizer);
  RandomStream ps = stream.substream(1), qs = stream.substream(2);
  const int B = cfg.batch;
  for (int step = 0; step < bc.steps; ++step) {
    if (tgt.remaining() < B) {
      rec.budget_limited = true;
      break;
    }
    JeffreysTerms t;
    SampleBatch pb = model.sample(ps, B, 1.0, 1);
    t.p_logp.resize(B);
    t.p_logq.resize(B);
    t.p_grad.resize(B, model.param_count(1));
    for (int i = 0; i < B; ++i) {
      Vec x = pb.samples.row(i).transpose();
      Vec g;
      t.p_logp(i) = model.log_density(x, 1, &g);
      t.p_grad.row(i) = g.transpose();
      t.p_logq(i) = tgt.value(x, 1);
    }
    ObjectiveEstimate e;
    if (cfg.objective == ObjectiveKind::Jeffreys) {
      t.s_logq.resize(B);
      t.s_logp.resize(B);
      t.s_grad.resize(B, model.param_count(1));
      for (int i = 0; i < B; ++i) {
        int k = static_cast<int>(qs.next_u64() % static_cast<std::uint64_t>(pool_n));
        Vec x = pool.row(k).transpose();
        Vec g;
        t.s_logq(i) = pool_logq(k);
        t.s_logp(i) = model.log_density(x, 1, &g);
        t.s_grad.row(i) = g.transpose();
      }
      t.s_logprop = t.s_logq;  // chain samples carry equal weight
      e = jeffreys_from_terms(t, true, cfg.baseline);
    } else {
      e = kl_from_terms(t, true, cfg.baseline);
    }
    rec.loss.push_back(e.value);
    rec.loss_se.push_back(e.se);
    rec.ess.push_back(e.ess);
    Vec p = model.flow(1).params();
    opt.step(p, e.gradient);
    model.flow(1).params() = p;
    ++rec.steps_done;
  }
  rec.nfs_used = ctx.ledger.total() - start;
  rec.converged = !rec.loss.empty() && tail_mean(rec.loss, 20) <= bc.threshold;
  if (!rec.converged && !rec.budget_limited)
    std::cerr << "warning: stage-1 D_J estimate " << tail_mean(rec.loss, 20)
              << " above threshold " << bc.threshold << "\n";
  return rec;
}

StageRecord train_stage(MsignModel& model, int l, const StageContext& ctx, RandomStream stream,
                        long allowance, int steps) {
  const TrainConfig& cfg = ctx.cfg;
  if (l < 2 || l > model.scales()) throw std::out_of_range("train_stage: scale out of range");
  StageRecord rec;
  rec.stage = l;
  rec.steps_planned = steps;
  rec.nfs_allowance = allowance;
  const long start = ctx.ledger.total();
  MeteredTarget tgt(ctx.problem, ctx.ledger, start + allowance);

  model.flow(l) = FlowStack::init_identity(model.flow(l).spec());
  model.set_active_scale(l);
  StageProposal proposal(model, l);
  MsignDensity density(model, l);
  LogTarget target = [&](const Vec& x) { return tgt.value(x, l); };

  const int off = cfg.freeze_lower_scales ? model.param_offset(l) : 0;
  const int n = cfg.freeze_lower_scales ? model.flow(l).total_params() : model.param_count(l);
  Adam opt(n, cfg.optimizer);
  RandomStream ps = stream.substream(1), qs = stream.substream(2);
  const int B = cfg.batch;
  const long cost = cfg.objective == ObjectiveKind::Jeffreys ? 2L * B : B;
  int low_ess = 0;
  for (int step = 0; step < steps; ++step) {
    if (tgt.remaining() < cost) {
      rec.budget_limited = true;
      break;
    }
    ObjectiveEstimate e = cfg.objective == ObjectiveKind::Jeffreys
                              ? jeffreys_grad(density, target, proposal, ps, qs, B, cfg.baseline)
                              : kl_grad(density, target, ps, B, cfg.baseline);
    rec.loss.push_back(e.value);
    rec.loss_se.push_back(e.se);
    rec.ess.push_back(e.ess);
    if (cfg.objective == ObjectiveKind::Jeffreys) {
      low_ess = e.ess < cfg.ess_floor * B ? low_ess + 1 : 0;
      if (low_ess >= cfg.ess_patience) {
        std::ostringstream os;
        os << "stage " << l << ": proposal ESS below " << cfg.ess_floor * 100 << "% of the batch for "
           << low_ess << " consecutive steps";
        throw NumericalError(os.str());
      }
    }
    Vec all = model.get_params(l);
    Vec p = all.segment(off, n);
    opt.step(p, e.gradient.segment(off, n));
    all.segment(off, n) = p;
    model.set_params(l, all);
    ++rec.steps_done;
  }
  rec.nfs_used = ctx.ledger.total() - start;
  return rec;
}

void save_stage_checkpoint(const MsignModel& model, int l, const BudgetLedger& ledger,
                           const std::string& path) {
  MatrixBundle b;
  Mat meta(1, 4);
  meta << l, static_cast<double>(ledger.forward_count), static_cast<double>(ledger.gradient_count),
      model.scales();
  b["meta"] = meta;
  for (int k = 1; k <= model.scales(); ++k) b["flow_" + std::to_string(k)] = model.flow(k).params();
  write_bundle(path, b);
}

int load_stage_checkpoint(MsignModel& model, BudgetLedger& ledger, const std::string& path) {
  MatrixBundle b = read_bundle(path);
  auto it = b.find("meta");
  if (it == b.end() || it->second.size() != 4)
    throw std::runtime_error("checkpoint " + path + ": missing meta entry");
  const Mat& meta = it->second;
  if (static_cast<int>(meta(0, 3)) != model.scales())
    throw std::runtime_error("checkpoint " + path + ": scale count mismatch");
  for (int k = 1; k <= model.scales(); ++k) {
    auto f = b.find("flow_" + std::to_string(k));
    if (f == b.end() || f->second.size() != model.flow(k).total_params())
      throw std::runtime_error("checkpoint " + path + ": flow " + std::to_string(k) +
                               " missing or of the wrong size");
    model.flow(k).params() = Eigen::Map<const Vec>(f->second.data(), f->second.size());
  }
  ledger.forward_count = static_cast<long>(meta(0, 1));
  ledger.gradient_count = static_cast<long>(meta(0, 2));
  return static_cast<int>(meta(0, 0));
}

std::string report_json(const RunReport& r) {
  json j;
  j["problem"] = r.problem;
  j["status"] = r.status;
  j["nfs_budget"] = r.nfs_budget;
  j["ledger"] = {{"forward_count", r.ledger.forward_count},
                 {"gradient_count", r.ledger.gradient_count},
                 {"total", r.ledger.total()}};
  j["problem_counters"] = {{"forward_calls", r.forward_calls}, {"adjoint_calls", r.adjoint_calls}};
  j["trained_through"] = r.trained_through;
  j["final_samples"] = r.final_samples;
  j["stages"] = json::array();
  for (const auto& s : r.stages) {
    json js = {{"stage", s.stage},
               {"steps_planned", s.steps_planned},
               {"steps_done", s.steps_done},
               {"loss", s.loss},
               {"loss_se", s.loss_se},
               {"ess", s.ess},
               {"nfs_used", s.nfs_used},
               {"nfs_allowance", s.nfs_allowance},
               {"budget_limited", s.budget_limited}};
    if (s.stage == 1)
      js["bootstrap"] = {{"hmc_acceptance", s.hmc_acceptance},
                         {"hmc_step_size", s.hmc_step_size},
                         {"hmc_divergences", s.hmc_divergences},
                         {"converged", s.converged}};
    j["stages"].push_back(js);
  }
  return j.dump(2) + "\n";
}

RunReport report_from_json(const std::string& text) {
  json j = json::parse(text);
  RunReport r;
  r.problem = j.at("problem");
  r.status = j.at("status");
  r.nfs_budget = j.at("nfs_budget");
  r.ledger.forward_count = j.at("ledger").at("forward_count");
  r.ledger.gradient_count = j.at("ledger").at("gradient_count");
  r.forward_calls = j.at("problem_counters").at("forward_calls");
  r.adjoint_calls = j.at("problem_counters").at("adjoint_calls");
  r.trained_through = j.at("trained_through");
  r.final_samples = j.at("final_samples");
  auto nums = [](const json& a) {
    std::vector<double> v;
    for (const auto& x : a) v.push_back(x.is_null() ? NAN : x.get<double>());
    return v;
  };
  for (const auto& js : j.at("stages")) {
    StageRecord s;
    s.stage = js.at("stage");
    s.steps_planned = js.at("steps_planned");
    s.steps_done = js.at("steps_done");
    s.loss = nums(js.at("loss"));
    s.loss_se = nums(js.at("loss_se"));
    s.ess = nums(js.at("ess"));
    s.nfs_used = js.at("nfs_used");
    s.nfs_allowance = js.at("nfs_allowance");
    s.budget_limited = js.at("budget_limited");
    if (js.contains("bootstrap")) {
      const auto& b = js["bootstrap"];
      s.hmc_acceptance = b.at("hmc_acceptance");
      s.hmc_step_size = b.at("hmc_step_size");
      s.hmc_divergences = b.at("hmc_divergences");
      s.converged = b.at("converged");
    }
    r.stages.push_back(std::move(s));
  }
  return r;
}

namespace {

void write_text(const fs::path& p, const std::string& s) {
  fs::path tmp = p;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + tmp.string());
    os << s;
  }
  fs::rename(tmp, p);
}

std::string read_text(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + p.string());
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

}  // namespace

RunReport run_full(const TrainConfig& cfg, const PosteriorProblem& problem,
                   const std::string& output_dir, bool resume,
                   const std::vector<PriorConditioner>* conditioners) {
  if (cfg.batch < 2) throw std::invalid_argument("config: batch must be at least 2");
  if (cfg.nfs_budget < 0) throw std::invalid_argument("config: nfs_budget must be non-negative");
  if (cfg.stages != problem.scales())
    throw std::invalid_argument("config: stages (" + std::to_string(cfg.stages) +
                                ") must equal the problem's levels (" +
                                std::to_string(problem.scales()) + ")");
  const fs::path dir(output_dir);
  fs::create_directories(dir);
  auto t0 = std::chrono::steady_clock::now();

  FlowSpec fspec = cfg.flow;
  fspec.seed = splitmix64(cfg.seed ^ 0x5eedf10eULL);
  MsignModel model = build_model(problem, fspec, conditioners);
  RunReport rep;
  rep.problem = problem.name();
  rep.nfs_budget = cfg.nfs_budget;
  BudgetLedger& ledger = rep.ledger;

  int first = 1;
  BudgetLedger resumed;
  if (resume) {
    for (int l = cfg.stages; l >= 1; --l) {
      fs::path ck = dir / ("stage_" + std::to_string(l) + ".ckpt");
      if (!fs::exists(ck)) continue;
      load_stage_checkpoint(model, ledger, ck.string());
      RunReport prev = report_from_json(read_text(dir / "report.json"));
      for (const auto& s : prev.stages)
        if (s.stage <= l && !s.budget_limited) rep.stages.push_back(s);
      model.mark_trained(l);
      resumed = ledger;
      first = l + 1;
      std::cerr << "resuming after stage " << l << "\n";
      break;
    }
  }
  const long fwd0 = problem.forward_calls(), adj0 = problem.adjoint_calls();
  StageContext ctx{cfg, problem, ledger};
  RandomStream root(cfg.seed);
  std::vector<double> stage_seconds;

  auto finish = [&]() {
    rep.forward_calls = resumed.forward_count + problem.forward_calls() - fwd0;
    rep.adjoint_calls = resumed.gradient_count + problem.adjoint_calls() - adj0;
    rep.trained_through = model.trained_through();
    write_text(dir / "report.json", report_json(rep));
    json tj;
    tj["stage_seconds"] = stage_seconds;
    tj["total_seconds"] =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    write_text(dir / "timings.json", tj.dump(2) + "\n");
  };

  if (cfg.nfs_budget == 0) {
    rep.status = "budget_exhausted";
    finish();
    return rep;
  }

  for (int l = first; l <= cfg.stages; ++l) {
    auto ts = std::chrono::steady_clock::now();
    long allowance = stage_allowance(cfg, l, cfg.nfs_budget - ledger.total());
    RandomStream st = root.substream(static_cast<std::uint64_t>(l));
    StageRecord rec;
    if (l == 1) {
      SampleBatch chain;
      rec = bootstrap_stage1(model, ctx, st, allowance, &chain);
      if (chain.count() > 0) write_text(dir / "hmc_stage1.csv", batch_csv(chain));
    } else {
      int steps = cfg.steps_per_stage;
      if (!cfg.stage_steps.empty()) {
        if (static_cast<int>(cfg.stage_steps.size()) != cfg.stages - 1)
          throw std::invalid_argument("config: stage_steps needs one entry per stage 2..L");
        steps = cfg.stage_steps[l - 2];
      }
      rec = train_stage(model, l, ctx, st, allowance, steps);
    }
    stage_seconds.push_back(
        std::chrono::duration<double>(std::chrono::steady_clock::now() - ts).count());
    rep.stages.push_back(rec);
    if (rec.budget_limited) {
      rep.status = "budget_exhausted";
      save_stage_checkpoint(model, l, ledger, (dir / "halt.ckpt").string());
      finish();
      return rep;
    }
    model.mark_trained(l);
    save_stage_checkpoint(model, l, ledger, (dir / ("stage_" + std::to_string(l) + ".ckpt")).string());
    rep.trained_through = l;
    write_text(dir / "report.json", report_json(rep));
  }

  RandomStream fs_stream = root.substream(0xF1A1);
  SampleBatch out = model.sample(fs_stream, cfg.final_samples, 1.0, cfg.stages);
  rep.final_samples = out.count();
  write_text(dir / "samples.csv", batch_csv(out));
  finish();
  return rep;
}

}  // namespace msign
