#include "msign/config.hpp"

#include <json.hpp>

#include <fstream>
#include <sstream>

namespace msign {

using nlohmann::json;

namespace {

json hmc_json(const HmcConfig& h) {
  return {{"step_size", h.step_size},       {"leapfrog_steps", h.leapfrog_steps},
          {"mass", std::vector<double>(h.mass.data(), h.mass.data() + h.mass.size())},
          {"adapt_steps", h.adapt_steps},   {"samples", h.samples},
          {"thin", h.thin},                 {"target_accept", h.target_accept},
          {"adapt_gamma", h.adapt_gamma},
          {"max_energy_error", h.max_energy_error}};
}

json patches_json(const std::vector<std::vector<Rect>>& p) {
  json a = json::array();
  for (const auto& f : p) {
    json rects = json::array();
    for (const auto& r : f) rects.push_back({r.s1a, r.s1b, r.s2a, r.s2b});
    a.push_back(rects);
  }
  return a;
}

json to_json(const ExperimentConfig& c) {
  const auto& s = c.synthetic;
  const auto& e = c.elliptic;
  const auto& t = c.train;
  const auto& d = c.diagnostics;
  json j;
  j["version"] = c.version;
  j["name"] = c.name;
  j["problem"] = c.problem;
  j["output_dir"] = c.output_dir;
  j["cache_dir"] = c.cache_dir;
  j["synthetic"] = {{"finest_side", s.finest_side}, {"levels", s.levels},
                    {"alpha", s.alpha},             {"beta", s.beta},
                    {"gamma", s.gamma},             {"measurement_gain", s.measurement_gain},
                    {"laplacian", to_string(s.laplacian)}};
  j["elliptic"] = {{"finest_side", e.finest_side},
                   {"levels", e.levels},
                   {"mesh_refinement", e.mesh_refinement},
                   {"alpha", e.alpha},
                   {"beta", e.beta},
                   {"gamma", e.gamma},
                   {"truth_amplitude", e.truth_amplitude},
                   {"laplacian", to_string(e.laplacian)},
                   {"patches", patches_json(e.patches.empty() ? default_patches() : e.patches)}};
  j["train"] = {
      {"batch", t.batch},
      {"steps_per_stage", t.steps_per_stage},
      {"stage_steps", t.stage_steps},
      {"optimizer",
       {{"lr", t.optimizer.lr}, {"beta1", t.optimizer.beta1}, {"beta2", t.optimizer.beta2},
        {"eps", t.optimizer.eps}}},
      {"nfs_budget", t.nfs_budget},
      {"budget_split", t.budget_split},
      {"seed", t.seed},
      {"freeze_lower_scales", t.freeze_lower_scales},
      {"objective", to_string(t.objective)},
      {"baseline", t.baseline == Baseline::Mean ? "mean" : "none"},
      {"ess_floor", t.ess_floor},
      {"ess_patience", t.ess_patience},
      {"final_samples", t.final_samples},
      {"flow",
       {{"depth", t.flow.depth}, {"hidden", t.flow.hidden}, {"s_max", t.flow.s_max}}},
      {"bootstrap",
       {{"hmc", hmc_json(t.bootstrap.hmc)},
        {"chains", t.bootstrap.chains},
        {"steps", t.bootstrap.steps},
        {"threshold", t.bootstrap.threshold},
        {"data_init", t.bootstrap.data_init}}}};
  j["diagnostics"] = {{"bins", d.bins},
                      {"dip_level", d.dip_level},
                      {"dip_null_draws", d.dip_null_draws},
                      {"kmeans_restarts", d.kmeans_restarts},
                      {"jeffreys_batch", d.jeffreys_batch},
                      {"oracle_samples", d.oracle_samples},
                      {"seed", d.seed}};
  return j;
}

// Every key in user must exist in reference; objects are merged recursively.
void merge_strict(json& ref, const json& user, const std::string& path) {
  for (auto it = user.begin(); it != user.end(); ++it) {
    std::string key = path.empty() ? it.key() : path + "." + it.key();
    if (!ref.contains(it.key())) throw ConfigError("unknown config key '" + key + "'");
    json& slot = ref[it.key()];
    if (slot.is_object()) {
      if (!it.value().is_object()) throw ConfigError("config key '" + key + "' must be an object");
      merge_strict(slot, it.value(), key);
    } else {
      slot = it.value();
    }
  }
}

void apply_override(json& j, const std::string& ov) {
  auto eq = ov.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + ov + "' is not key=value");
  std::string key = ov.substr(0, eq), raw = ov.substr(eq + 1);
  json* node = &j;
  std::stringstream ks(key);
  std::string part;
  while (std::getline(ks, part, '.')) {
    if (!node->is_object() || !node->contains(part))
      throw ConfigError("unknown config key '" + key + "'");
    node = &(*node)[part];
  }
  json v;
  try {
    v = json::parse(raw);
  } catch (const json::parse_error&) {
    v = raw;
  }
  *node = v;
}

Rect rect_from(const json& a) {
  if (!a.is_array() || a.size() != 4) throw ConfigError("patch rectangles need four numbers");
  return {a[0].get<double>(), a[1].get<double>(), a[2].get<double>(), a[3].get<double>()};
}

template <typename T>
T need(const json& j, const char* k, const std::string& where) {
  try {
    return j.at(k).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError("config key '" + where + "." + k + "': " + e.what());
  }
}

ExperimentConfig from_json(const json& j) {
  ExperimentConfig c;
  c.version = need<int>(j, "version", "");
  if (c.version != kConfigVersion)
    throw ConfigError("unsupported config version " + std::to_string(c.version));
  c.name = need<std::string>(j, "name", "");
  c.problem = need<std::string>(j, "problem", "");
  if (c.problem != "synthetic" && c.problem != "elliptic")
    throw ConfigError("problem must be 'synthetic' or 'elliptic'");
  c.output_dir = need<std::string>(j, "output_dir", "");
  c.cache_dir = need<std::string>(j, "cache_dir", "");
  try {
    const json& s = j.at("synthetic");
    c.synthetic.finest_side = need<int>(s, "finest_side", "synthetic");
    c.synthetic.levels = need<int>(s, "levels", "synthetic");
    c.synthetic.alpha = need<double>(s, "alpha", "synthetic");
    c.synthetic.beta = need<double>(s, "beta", "synthetic");
    c.synthetic.gamma = need<double>(s, "gamma", "synthetic");
    c.synthetic.measurement_gain = need<double>(s, "measurement_gain", "synthetic");
    c.synthetic.laplacian = parse_laplacian_scaling(need<std::string>(s, "laplacian", "synthetic"));

    const json& e = j.at("elliptic");
    c.elliptic.finest_side = need<int>(e, "finest_side", "elliptic");
    c.elliptic.levels = need<int>(e, "levels", "elliptic");
    c.elliptic.mesh_refinement = need<int>(e, "mesh_refinement", "elliptic");
    c.elliptic.alpha = need<double>(e, "alpha", "elliptic");
    c.elliptic.beta = need<double>(e, "beta", "elliptic");
    c.elliptic.gamma = need<double>(e, "gamma", "elliptic");
    c.elliptic.truth_amplitude = need<double>(e, "truth_amplitude", "elliptic");
    c.elliptic.laplacian = parse_laplacian_scaling(need<std::string>(e, "laplacian", "elliptic"));
    c.elliptic.patches.clear();
    for (const auto& f : e.at("patches")) {
      std::vector<Rect> rs;
      for (const auto& r : f) rs.push_back(rect_from(r));
      c.elliptic.patches.push_back(rs);
    }

    const json& t = j.at("train");
    TrainConfig& tc = c.train;
    tc.batch = need<int>(t, "batch", "train");
    tc.steps_per_stage = need<int>(t, "steps_per_stage", "train");
    tc.stage_steps = need<std::vector<int>>(t, "stage_steps", "train");
    const json& o = t.at("optimizer");
    tc.optimizer.lr = need<double>(o, "lr", "train.optimizer");
    tc.optimizer.beta1 = need<double>(o, "beta1", "train.optimizer");
    tc.optimizer.beta2 = need<double>(o, "beta2", "train.optimizer");
    tc.optimizer.eps = need<double>(o, "eps", "train.optimizer");
    tc.nfs_budget = need<long>(t, "nfs_budget", "train");
    tc.budget_split = need<std::vector<double>>(t, "budget_split", "train");
    tc.seed = need<std::uint64_t>(t, "seed", "train");
    tc.freeze_lower_scales = need<bool>(t, "freeze_lower_scales", "train");
    tc.objective = parse_objective(need<std::string>(t, "objective", "train"));
    tc.baseline = parse_baseline(need<std::string>(t, "baseline", "train"));
    tc.ess_floor = need<double>(t, "ess_floor", "train");
    tc.ess_patience = need<int>(t, "ess_patience", "train");
    tc.final_samples = need<int>(t, "final_samples", "train");
    const json& f = t.at("flow");
    tc.flow.depth = need<int>(f, "depth", "train.flow");
    tc.flow.hidden = need<int>(f, "hidden", "train.flow");
    tc.flow.s_max = need<double>(f, "s_max", "train.flow");
    const json& b = t.at("bootstrap");
    const json& h = b.at("hmc");
    HmcConfig& hc = tc.bootstrap.hmc;
    hc.step_size = need<double>(h, "step_size", "train.bootstrap.hmc");
    hc.leapfrog_steps = need<int>(h, "leapfrog_steps", "train.bootstrap.hmc");
    auto mass = need<std::vector<double>>(h, "mass", "train.bootstrap.hmc");
    hc.mass = Eigen::Map<const Vec>(mass.data(), static_cast<Eigen::Index>(mass.size()));
    hc.adapt_steps = need<int>(h, "adapt_steps", "train.bootstrap.hmc");
    hc.samples = need<int>(h, "samples", "train.bootstrap.hmc");
    hc.thin = need<int>(h, "thin", "train.bootstrap.hmc");
    hc.target_accept = need<double>(h, "target_accept", "train.bootstrap.hmc");
    hc.adapt_gamma = need<double>(h, "adapt_gamma", "train.bootstrap.hmc");
    hc.max_energy_error = need<double>(h, "max_energy_error", "train.bootstrap.hmc");
    tc.bootstrap.chains = need<int>(b, "chains", "train.bootstrap");
    tc.bootstrap.steps = need<int>(b, "steps", "train.bootstrap");
    tc.bootstrap.threshold = need<double>(b, "threshold", "train.bootstrap");
    tc.bootstrap.data_init = need<bool>(b, "data_init", "train.bootstrap");

    const json& d = j.at("diagnostics");
    c.diagnostics.bins = need<int>(d, "bins", "diagnostics");
    c.diagnostics.dip_level = need<double>(d, "dip_level", "diagnostics");
    c.diagnostics.dip_null_draws = need<int>(d, "dip_null_draws", "diagnostics");
    c.diagnostics.kmeans_restarts = need<int>(d, "kmeans_restarts", "diagnostics");
    c.diagnostics.jeffreys_batch = need<int>(d, "jeffreys_batch", "diagnostics");
    c.diagnostics.oracle_samples = need<int>(d, "oracle_samples", "diagnostics");
    c.diagnostics.seed = need<std::uint64_t>(d, "seed", "diagnostics");
  } catch (const std::invalid_argument& ex) {
    throw ConfigError(ex.what());
  } catch (const json::exception& ex) {
    throw ConfigError(std::string("config: ") + ex.what());
  }
  if (c.train.batch < 2) throw ConfigError("train.batch must be at least 2");
  if (c.train.nfs_budget < 0) throw ConfigError("train.nfs_budget must be non-negative");
  if (c.train.steps_per_stage < 0) throw ConfigError("train.steps_per_stage must be non-negative");
  c.train.stages = c.problem == "synthetic" ? c.synthetic.levels : c.elliptic.levels;
  return c;
}

}  // namespace

ExperimentConfig parse_config(const std::string& text, const std::vector<std::string>& overrides) {
  json user;
  try {
    user = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!user.is_object()) throw ConfigError("config must be a JSON object");
  json ref = to_json(ExperimentConfig{});
  merge_strict(ref, user, "");
  for (const auto& ov : overrides) apply_override(ref, ov);
  return from_json(ref);
}

ExperimentConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file '" + path + "'");
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str(), overrides);
}

std::string config_json(const ExperimentConfig& cfg) { return to_json(cfg).dump(2) + "\n"; }

std::unique_ptr<PosteriorProblem> make_problem(const ExperimentConfig& cfg) {
  if (cfg.problem == "synthetic") return std::make_unique<SyntheticProblem>(cfg.synthetic);
  return std::make_unique<EllipticProblem>(cfg.elliptic);
}

}  // namespace msign
