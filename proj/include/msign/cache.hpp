#pragma once

#include <string>
#include <vector>

#include "msign/prior_conditioning.hpp"
#include "msign/problems.hpp"

namespace msign {

struct CacheResult {
  std::vector<PriorConditioner> conditioners;  // index 0 unused
  bool hit = false;
  bool rebuilt_after_mismatch = false;
  std::string path;
};

// Loads the conditioner cache keyed by key_text, rebuilding it when missing,
// keyed differently, or when its stored content hash does not match.
CacheResult ensure_cache(const PosteriorProblem& problem, const std::string& dir,
                         const std::string& key_text);

std::vector<PriorConditioner> build_conditioners(const PosteriorProblem& problem);

}  // namespace msign
