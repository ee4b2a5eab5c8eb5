#include "msign/prior_conditioning.hpp"

#include <cmath>
#include <sstream>

namespace msign {

PriorConditioner build_conditioner(const SymMatrix& sigma, const Mat& pool) {
  const int d = sigma.dim();
  const int dc = static_cast<int>(pool.rows());
  if (pool.cols() != d) throw std::invalid_argument("build_conditioner: shape mismatch");
  PriorConditioner pc;
  pc.dim = d;
  pc.coarse_dim = dc;
  pc.pool = pool;

  const Mat& S = sigma.mat();
  Mat sat = S * pool.transpose();
  SymMatrix asa(pool * sat);
  EigenDecomp asa_eig = sym_eig(asa);
  double smallest = asa_eig.values(dc - 1);
  if (!(smallest > 1e-14 * asa_eig.values(0))) {
    std::ostringstream os;
    os << "build_conditioner: A Sigma A^T numerically singular, smallest eigenvalue " << smallest;
    throw NumericalError(os.str());
  }
  // U^c = Sigma A^T (A Sigma A^T)^{-1}
  pc.u_c = cholesky_solve(asa, Mat(sat.transpose())).transpose();
  Mat sc = S - pc.u_c * sat.transpose();
  pc.sigma_c = SymMatrix(0.5 * (sc + sc.transpose()));

  pc.a_tilde = orthonormal_complement(pool);
  SymMatrix prec = sym_fractional_power(sigma, -1.0);
  Mat ap = pc.a_tilde * prec.mat();
  Mat m = ap * pc.a_tilde.transpose();
  SymMatrix msym(0.5 * (m + m.transpose()));
  EigenDecomp meig = sym_eig(msym);
  SymMatrix m_inv_sqrt = sym_fractional_power(meig, -0.5, 1e-12);
  pc.w = pc.a_tilde.transpose() * m_inv_sqrt.mat();
  pc.inv_z_map = m_inv_sqrt.mat() * ap;

  // w = a_tilde^T M^{-1/2} with orthonormal rows of a_tilde: pdet(w) = det(M)^{-1/2}.
  double logdet_m = 0.0;
  double fl = 1e-12 * meig.values(0);
  for (int k = 0; k < meig.values.size(); ++k) logdet_m += std::log(std::max(meig.values(k), fl));
  pc.log_pdet_w = -0.5 * logdet_m;

  Mat j(d, d);
  j.topRows(dc) = pool;
  j.bottomRows(d - dc) = pc.inv_z_map;
  pc.log_det_inverse = log_abs_det(j);
  return pc;
}

PriorConditioner build_conditioner(const GaussianPrior& prior, const MultiscaleOperators& ops) {
  return build_conditioner(prior.sigma, ops.pool);
}

Vec pc_forward(const PriorConditioner& pc, const Vec& x_c, const Vec& z) {
  if (x_c.size() != pc.coarse_dim || z.size() != pc.z_dim())
    throw std::invalid_argument("pc_forward: shape mismatch");
  return pc.u_c * x_c + pc.w * z;
}

std::pair<Vec, Vec> pc_inverse(const PriorConditioner& pc, const Vec& x) {
  if (x.size() != pc.dim) throw std::invalid_argument("pc_inverse: shape mismatch");
  return {pc.pool * x, pc.inv_z_map * x};
}

double conditional_log_density(const PriorConditioner& pc, const Vec& x, const Vec& x_c) {
  Vec r = pc.pool * x - x_c;
  double rn = r.norm();
  if (rn > 1e-8) {
    std::ostringstream os;
    os << "conditional_log_density: constraint A x = x_c violated, residual norm " << rn;
    throw std::invalid_argument(os.str());
  }
  Vec z = pc.inv_z_map * x;
  const double l2pi = std::log(2.0 * std::acos(-1.0));
  return -0.5 * z.squaredNorm() - 0.5 * pc.z_dim() * l2pi - pc.log_pdet_w;
}

}  // namespace msign
