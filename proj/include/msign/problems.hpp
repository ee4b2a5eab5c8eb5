#pragma once

#include <Eigen/Sparse>

#include <array>
#include <atomic>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "msign/lattice_prior.hpp"
#include "msign/objectives.hpp"
#include "msign/random.hpp"

namespace msign {

struct ProblemScale {
  int side = 0;
  GaussianPrior prior;
  MultiscaleOperators ops;
};

// Prior hierarchy: the finest prior is built from the Laplacian and every
// coarser prior is its push-forward under pooling.
std::vector<ProblemScale> build_hierarchy(int finest_side, int levels, double alpha, double beta,
                                          LaplacianScaling scaling);

class PosteriorProblem {
 public:
  PosteriorProblem(std::vector<ProblemScale> scales, double gamma);
  virtual ~PosteriorProblem() = default;

  virtual std::string name() const = 0;

  int scales() const { return static_cast<int>(scales_.size()); }
  const ProblemScale& scale(int l) const { return scales_.at(l - 1); }
  const GaussianPrior& prior(int l) const { return scale(l).prior; }
  int dim(int l) const { return prior(l).dim(); }
  int finest_side() const { return scales_.back().side; }
  const Vec& data() const { return y_; }
  double gamma() const { return gamma_; }

  // log L(y | Bhat_l x) up to its constant; one forward simulation.
  double log_likelihood(const Vec& x, int l) const;
  // Value and gradient wrt x; one forward plus one adjoint simulation.
  double log_likelihood_grad(const Vec& x, int l, Vec& grad) const;

  // Unnormalized log q_l = log rho_l + log L_l.
  double log_posterior(const Vec& x, int l) const;
  double log_posterior_grad(const Vec& x, int l, Vec& grad) const;

  // Coarse likelihood L_{l-1}(y | A_l x) for diagnostics.
  double coarse_log_likelihood(const Vec& x, int l) const;

  // Mirror map of the problem's symmetry at scale l.
  virtual Vec mirror(const Vec& x, int l) const = 0;

  // Observables F(x) at the finest scale.
  virtual Vec forward_map(const Vec& x_fine) const = 0;

  long forward_calls() const { return forward_calls_.load(); }
  long adjoint_calls() const { return adjoint_calls_.load(); }
  void reset_counters() {
    forward_calls_ = 0;
    adjoint_calls_ = 0;
  }

  // When set, likelihood terms vanish (q_l equals rho_l); calls are still counted.
  void set_likelihood_enabled(bool on) { likelihood_on_ = on; }

 protected:
  // log-likelihood at the finest scale and, when grad is non-null, its gradient.
  virtual double fine_log_likelihood(const Vec& x_fine, Vec* grad) const = 0;

  std::vector<ProblemScale> scales_;
  Vec y_;
  double gamma_;
  bool likelihood_on_ = true;
  mutable std::atomic<long> forward_calls_{0};
  mutable std::atomic<long> adjoint_calls_{0};
};

struct MapResult {
  Vec x;
  double log_posterior = 0.0;
  double grad_norm = 0.0;  // of log q_l at x, original coordinates
  int iterations = 0;
  bool converged = false;
};

// Local maximizer of log q_l from start: L-BFGS on prior-whitened coordinates
// with backtracking, stopped once the gradient norm falls below grad_tol.
MapResult find_map(const PosteriorProblem& problem, int l, const Vec& start, double grad_tol = 1e-8,
                   int max_iter = 5000);

// ---------------------------------------------------------------- synthetic

struct SyntheticConfig {
  int finest_side = 8;
  int levels = 3;
  double alpha = 0.1;
  double beta = 2.0;
  double gamma = 0.2;
  double measurement_gain = 3.0;
  LaplacianScaling laplacian = LaplacianScaling::Graph;
};

// F(x) = <phi, x>^2 with phi(s) = sin(pi s1) sin(2 pi s2) sampled at interior
// nodes s = (i + 1) h, h = 1 / (n + 1), and <phi, x> = gain * h^2 * sum phi_i x_i.
class SyntheticProblem : public PosteriorProblem {
 public:
  explicit SyntheticProblem(const SyntheticConfig& cfg);
  std::string name() const override { return "synthetic"; }
  Vec mirror(const Vec& x, int) const override { return -x; }
  Vec forward_map(const Vec& x_fine) const override;

  const SyntheticConfig& config() const { return cfg_; }
  // Functional weights at scale l: <phi, Bhat_l x> = v_l . x
  Vec functional(int l) const;
  const Vec& phi() const { return phi_; }
  const Vec& truth() const { return truth_; }

 protected:
  double fine_log_likelihood(const Vec& x_fine, Vec* grad) const override;

 private:
  SyntheticConfig cfg_;
  Vec phi_;     // nodal samples of phi
  Vec weight_;  // gain * h^2 * phi
  Vec truth_;
  static std::vector<ProblemScale> make_scales(const SyntheticConfig& cfg);
};

// Monotone piecewise-cubic inverse-CDF sampler for a 1-D density on a grid.
struct InverseCdf {
  Vec t;    // grid
  Vec cdf;  // normalized, nondecreasing
  Vec slope;
  double mean = 0.0, second_moment = 0.0;

  double quantile(double u) const;
  double cdf_at(double x) const;
};

// Builds the grid from log-density values, refining until every mode is resolved.
InverseCdf build_inverse_cdf(const std::function<double(double)>& log_density, double lo,
                             double hi, int points = 4096, int max_points = 1 << 20);

struct SyntheticOracle {
  int scale = 0;
  Mat basis;       // columns w_k, orthonormal eigenbasis of Sigma_l
  Vec variances;   // Gaussian factor variances (prior eigenvalues); critical entry from quadrature
  int critical_index = 0;
  Vec critical_direction;  // normalized Sigma_l v_l
  Vec v;                   // functional weights at this scale
  double s2 = 0.0;         // v^T Sigma v
  InverseCdf t_marginal;   // law of t = v . x
  SymMatrix sigma;
  Mat sqrt_sigma;
  Vec sigma_v;

  // Exact moments in the original coordinates.
  Vec mean() const { return Vec::Zero(sigma.dim()); }
  Mat covariance() const;
  // Log-density of the critical factor t = v . x up to a constant.
  std::function<double(double)> t_log_density;
};

SyntheticOracle build_oracle(const SyntheticProblem& p, int l);
SampleBatch synthetic_oracle_sample(const SyntheticOracle& o, RandomStream& stream, int count);

// ---------------------------------------------------------------- elliptic

struct Rect {
  double s1a, s1b, s2a, s2b;
};

struct EllipticConfig {
  int finest_side = 16;
  int levels = 3;
  int mesh_refinement = 1;  // mesh cells per lattice cell along each axis
  double alpha = 0.5;
  double beta = 2.0;
  double gamma = 0.02;
  double truth_amplitude = 2.5;
  LaplacianScaling laplacian = LaplacianScaling::Graph;
  std::vector<std::vector<Rect>> patches;  // one list of rectangles per functional
};

std::vector<std::vector<Rect>> default_patches();

// Source term with peaks at (0.25, 0.3), (0.25, 0.7), (0.7, 0.3), (0.7, 0.7).
double elliptic_force(double s1, double s2);

// Bilinear finite elements on a uniform n x n mesh of the unit square with zero
// Dirichlet boundary; coefficient piecewise constant per cell.
class EllipticSolver {
 public:
  EllipticSolver(int mesh_n, const std::vector<std::vector<Rect>>& patches,
                 const std::function<double(double, double)>& force = elliptic_force);

  int mesh_n() const { return n_; }
  int unknowns() const { return (n_ - 1) * (n_ - 1); }
  const Mat& observation() const { return obs_; }
  const Vec& load() const { return load_; }

  Eigen::SparseMatrix<double> stiffness(const Vec& coef) const;
  Vec solve(const Vec& coef) const;
  Vec solve(const Vec& coef, const Vec& rhs) const;
  // Observables for log-coefficient field x (one value per cell).
  Vec observe(const Vec& log_coef) const;
  // -||y - O u||^2 / (2 gamma^2) and its gradient wrt the per-cell log-coefficients.
  double log_likelihood(const Vec& log_coef, const Vec& y, double gamma, Vec* grad) const;

  // L2 norm of (u_h - u_exact) with 3x3 Gauss quadrature per cell.
  double l2_error(const Vec& u, const std::function<double(double, double)>& exact) const;

  // Element-local stiffness for unit coefficient; node order (0,0),(1,0),(1,1),(0,1).
  static const Eigen::Matrix4d& local_stiffness();
  int node_index(int i, int j) const {
    return (i > 0 && i < n_ && j > 0 && j < n_) ? (i - 1) * (n_ - 1) + (j - 1) : -1;
  }

 private:
  int n_;
  Vec load_;
  Mat obs_;
  std::vector<std::array<int, 4>> elements_;
};

class EllipticProblem : public PosteriorProblem {
 public:
  explicit EllipticProblem(const EllipticConfig& cfg);
  std::string name() const override { return "elliptic"; }
  Vec mirror(const Vec& x, int l) const override { return mirror_field(x, scale(l).side); }
  Vec forward_map(const Vec& x_fine) const override;

  const EllipticConfig& config() const { return cfg_; }
  const EllipticSolver& solver() const { return solver_; }
  const Vec& truth() const { return truth_; }
  // Per-mesh-cell log-coefficients for a finest-lattice field.
  Vec to_mesh(const Vec& x_fine) const;

 protected:
  double fine_log_likelihood(const Vec& x_fine, Vec* grad) const override;

 private:
  EllipticConfig cfg_;
  EllipticSolver solver_;
  Vec truth_;
};

}  // namespace msign
