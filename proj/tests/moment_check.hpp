#pragma once

#include <cmath>
#include <sstream>
#include <string>
#include <vector>

namespace msign::testing {

// Per-entry k-SE comparison of many Monte-Carlo estimates. Each entry is held
// to k standard errors; with n entries some exceedances happen by chance, so
// the count may not exceed the 99.9% binomial quantile at the nominal rate.
// No entry may exceed hard_limit standard errors.
struct SeCheck {
  int entries = 0;
  int exceed = 0;
  int allowed = 0;
  double worst_z = 0.0;
  double hard_limit = 5.0;
  bool ok() const { return exceed <= allowed && worst_z <= hard_limit; }
  std::string summary() const {
    std::ostringstream os;
    os << exceed << "/" << entries << " beyond 3 SE (allowed " << allowed << "), max |z| "
       << worst_z;
    return os.str();
  }
};

inline int binomial_quantile(int n, double p, double q) {
  double cdf = 0.0, pmf = std::pow(1.0 - p, n);
  for (int k = 0; k <= n; ++k) {
    cdf += pmf;
    if (cdf >= q) return k;
    pmf *= (n - k) / (k + 1.0) * p / (1.0 - p);
  }
  return n;
}

inline SeCheck se_check(const std::vector<double>& dev, const std::vector<double>& se, double k = 3.0,
                        double hard_limit = 5.0) {
  SeCheck c;
  c.entries = static_cast<int>(dev.size());
  c.hard_limit = hard_limit;
  for (size_t i = 0; i < dev.size(); ++i) {
    double z = std::abs(dev[i]) / se[i];
    c.exceed += z > k;
    c.worst_z = std::max(c.worst_z, z);
  }
  const double p = std::erfc(k / std::sqrt(2.0));
  c.allowed = binomial_quantile(c.entries, p, 0.999);
  return c;
}

}  // namespace msign::testing
