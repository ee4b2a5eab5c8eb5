#pragma once

#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "msign/problems.hpp"
#include "msign/trainer.hpp"

namespace msign {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr int kConfigVersion = 1;

struct DiagnosticsConfig {
  int bins = 50;
  double dip_level = 0.05;
  int dip_null_draws = 200;
  int kmeans_restarts = 100;
  int jeffreys_batch = 1000;
  int oracle_samples = 2500;
  std::uint64_t seed = 1;
};

struct ExperimentConfig {
  int version = kConfigVersion;
  std::string name = "experiment";
  std::string problem = "synthetic";  // synthetic | elliptic
  SyntheticConfig synthetic;
  EllipticConfig elliptic;
  TrainConfig train;
  DiagnosticsConfig diagnostics;
  std::string output_dir = "runs/experiment";
  std::string cache_dir = "cache";
};

// Parses JSON text; overrides are "dotted.key=value" with JSON or bare-string values.
ExperimentConfig parse_config(const std::string& text,
                              const std::vector<std::string>& overrides = {});
ExperimentConfig load_config(const std::string& path,
                             const std::vector<std::string>& overrides = {});
// Canonical JSON of the effective configuration.
std::string config_json(const ExperimentConfig& cfg);

std::unique_ptr<PosteriorProblem> make_problem(const ExperimentConfig& cfg);

}  // namespace msign
