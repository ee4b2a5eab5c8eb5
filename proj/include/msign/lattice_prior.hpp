#pragma once

#include <string>
#include <vector>

#include "msign/numlin.hpp"
#include "msign/random.hpp"

namespace msign {

// Fields on an n x n lattice are stored row-major: x[i * n + j], where i
// indexes the first coordinate and j the second.
struct LatticeSpec {
  int side = 2;
  int scale_index = 1;
  int dim() const { return side * side; }
};

enum class LaplacianScaling {
  Graph,        // plain 5-point stencil: 4 on the diagonal, -1 per neighbour
  GridSpacing,  // 5-point stencil divided by h^2 with h = 1 / (n + 1)
};

LaplacianScaling parse_laplacian_scaling(const std::string& s);
std::string to_string(LaplacianScaling s);

// Dense 5-point Dirichlet Laplacian (positive definite sign convention).
Mat assemble_laplacian(int side, LaplacianScaling scaling);

EigenDecomp build_laplacian_spectrum(const LatticeSpec& spec,
                                     LaplacianScaling scaling = LaplacianScaling::Graph);

struct GaussianPrior {
  LatticeSpec spec;
  double alpha = 0.0;
  double beta = 0.0;
  SymMatrix sigma;
  EigenDecomp sigma_eig;  // spectrum of sigma itself
  EigenDecomp laplacian_eigensystem;  // populated for priors built from the Laplacian
  SymMatrix sqrt_sigma;
  SymMatrix precision;
  double log_det_sigma = 0.0;

  int dim() const { return sigma.dim(); }
  // log N(x; 0, sigma) including the normalizing constant.
  double log_density(const Vec& x) const;
  Vec grad_log_density(const Vec& x) const { return -(precision.mat() * x); }
};

GaussianPrior build_prior(const LatticeSpec& spec, double alpha, double beta,
                          LaplacianScaling scaling = LaplacianScaling::Graph);

// Gaussian from an explicit covariance.
GaussianPrior prior_from_covariance(const LatticeSpec& spec, double alpha, double beta,
                                    const SymMatrix& sigma);

struct MultiscaleOperators {
  int fine_side = 0;
  int coarse_side = 0;
  Mat pool;            // A_l : d_{l-1} x d_l
  Mat upsample;        // B_l : d_l x d_{l-1}
  Mat lift_to_finest;  // Bhat_l : d_L x d_l
};

Mat pool_matrix(int fine_side);
Mat upsample_matrix(int fine_side);

// Operators for lattice sides sides[0] < sides[1] < ... < sides[L-1]. Entry l
// (0-based) describes the pair (sides[l-1], sides[l]); entry 0 has empty pool
// and upsample and only carries its lift.
std::vector<MultiscaleOperators> build_operators(const std::vector<int>& sides);

GaussianPrior coarsen_prior(const GaussianPrior& prior, const MultiscaleOperators& ops);

struct SampleBatch {
  int scale = 0;
  Mat samples;  // count x d
  Vec log_p;    // optional, empty when absent
  std::string provenance;

  int count() const { return static_cast<int>(samples.rows()); }
  int dim() const { return static_cast<int>(samples.cols()); }
};

SampleBatch sample_prior(const GaussianPrior& prior, RandomStream& stream, int count);

// Lattice sides 2^k ... n, coarsest first, L entries.
std::vector<int> lattice_sides(int finest_side, int levels);

// Reflection s2 -> 1 - s2 (column j -> n - 1 - j).
Vec mirror_field(const Vec& x, int side);

}  // namespace msign
