#pragma once

#include <utility>

#include "msign/lattice_prior.hpp"

namespace msign {

// Exact sampler of the Gaussian conditional rho(x | A x = x_c):
//   x = u_c x_c + w z,  z ~ N(0, I).
struct PriorConditioner {
  int dim = 0;         // d
  int coarse_dim = 0;  // d_c
  Mat pool;            // A
  Mat u_c;             // d x d_c
  Mat w;               // d x (d - d_c)
  Mat a_tilde;         // (d - d_c) x d
  Mat inv_z_map;       // (d - d_c) x d
  SymMatrix sigma_c;
  double log_pdet_w = 0.0;     // log pseudo-determinant of w on its column space
  double log_det_inverse = 0.0;  // log|det [A; inv_z_map]|

  int z_dim() const { return dim - coarse_dim; }
};

PriorConditioner build_conditioner(const GaussianPrior& prior, const MultiscaleOperators& ops);
PriorConditioner build_conditioner(const SymMatrix& sigma, const Mat& pool);

Vec pc_forward(const PriorConditioner& pc, const Vec& x_c, const Vec& z);
std::pair<Vec, Vec> pc_inverse(const PriorConditioner& pc, const Vec& x);

// Standard-normal log-density of z = inv_z_map x minus log_pdet_w.
double conditional_log_density(const PriorConditioner& pc, const Vec& x, const Vec& x_c);

}  // namespace msign
