#include "msign/lattice_prior.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace msign {

namespace {

bool is_pow2(int n) { return n >= 1 && (n & (n - 1)) == 0; }

void check_side(int side) {
  if (side < 2 || !is_pow2(side))
    throw std::invalid_argument("lattice side must be a power of 2 and at least 2, got " +
                                std::to_string(side));
}

EigenDecomp spectral_from_values(const EigenDecomp& lap, const Vec& vals) {
  // Reorder so values are descending.
  const int d = static_cast<int>(vals.size());
  std::vector<int> order(d);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return vals(a) > vals(b); });
  EigenDecomp e;
  e.values.resize(d);
  e.vectors.resize(d, d);
  for (int k = 0; k < d; ++k) {
    e.values(k) = vals(order[k]);
    e.vectors.col(k) = lap.vectors.col(order[k]);
  }
  return e;
}

}  // namespace

LaplacianScaling parse_laplacian_scaling(const std::string& s) {
  if (s == "graph") return LaplacianScaling::Graph;
  if (s == "grid_spacing") return LaplacianScaling::GridSpacing;
  throw std::invalid_argument("unknown laplacian scaling '" + s + "'");
}

std::string to_string(LaplacianScaling s) {
  return s == LaplacianScaling::Graph ? "graph" : "grid_spacing";
}

Mat assemble_laplacian(int side, LaplacianScaling scaling) {
  const int n = side;
  Mat m = Mat::Zero(n * n, n * n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      int r = i * n + j;
      m(r, r) = 4.0;
      if (i > 0) m(r, r - n) = -1.0;
      if (i < n - 1) m(r, r + n) = -1.0;
      if (j > 0) m(r, r - 1) = -1.0;
      if (j < n - 1) m(r, r + 1) = -1.0;
    }
  if (scaling == LaplacianScaling::GridSpacing) {
    double h = 1.0 / (n + 1);
    m /= h * h;
  }
  return m;
}

EigenDecomp build_laplacian_spectrum(const LatticeSpec& spec, LaplacianScaling scaling) {
  check_side(spec.side);
  const int n = spec.side;
  const double h = 1.0 / (n + 1);
  const double pi = std::acos(-1.0);
  Vec mu(n);
  Mat v(n, n);  // column k: 1-D mode k+1
  for (int k = 0; k < n; ++k) {
    mu(k) = 2.0 - 2.0 * std::cos((k + 1) * pi * h);
    if (scaling == LaplacianScaling::GridSpacing) mu(k) /= h * h;
    for (int i = 0; i < n; ++i) v(i, k) = std::sqrt(2.0 * h) * std::sin((k + 1) * pi * (i + 1) * h);
  }
  // Ascending eigenvalues of the Laplacian; stored descending per EigenDecomp.
  std::vector<std::pair<int, int>> modes;
  for (int a = 0; a < n; ++a)
    for (int b = 0; b < n; ++b) modes.emplace_back(a, b);
  std::stable_sort(modes.begin(), modes.end(), [&](const auto& p, const auto& q) {
    return mu(p.first) + mu(p.second) > mu(q.first) + mu(q.second);
  });
  EigenDecomp e;
  e.values.resize(n * n);
  e.vectors.resize(n * n, n * n);
  for (int k = 0; k < n * n; ++k) {
    auto [a, b] = modes[k];
    e.values(k) = mu(a) + mu(b);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) e.vectors(i * n + j, k) = v(i, a) * v(j, b);
  }
  return e;
}

double GaussianPrior::log_density(const Vec& x) const {
  const double l2pi = std::log(2.0 * std::acos(-1.0));
  return -0.5 * x.dot(precision.mat() * x) - 0.5 * dim() * l2pi - 0.5 * log_det_sigma;
}

GaussianPrior build_prior(const LatticeSpec& spec, double alpha, double beta,
                          LaplacianScaling scaling) {
  if (!(alpha > 0.0) || !(beta > 0.0))
    throw std::invalid_argument("build_prior: alpha and beta must be positive");
  GaussianPrior p;
  p.spec = spec;
  p.alpha = alpha;
  p.beta = beta;
  p.laplacian_eigensystem = build_laplacian_spectrum(spec, scaling);
  const Vec& lam = p.laplacian_eigensystem.values;
  Vec s(lam.size());
  for (int k = 0; k < lam.size(); ++k) s(k) = beta * beta * std::pow(lam(k), -1.0 - alpha);
  p.sigma_eig = spectral_from_values(p.laplacian_eigensystem, s);
  const Mat& V = p.sigma_eig.vectors;
  const Vec& sv = p.sigma_eig.values;
  Mat sig = V * sv.asDiagonal() * V.transpose();
  p.sigma = SymMatrix(0.5 * (sig + sig.transpose()));
  p.sqrt_sigma = sym_fractional_power(p.sigma_eig, 0.5);
  p.precision = sym_fractional_power(p.sigma_eig, -1.0);
  p.log_det_sigma = sv.array().log().sum();
  return p;
}

GaussianPrior prior_from_covariance(const LatticeSpec& spec, double alpha, double beta,
                                    const SymMatrix& sigma) {
  GaussianPrior p;
  p.spec = spec;
  p.alpha = alpha;
  p.beta = beta;
  p.sigma = sigma;
  p.sigma_eig = sym_eig(sigma);
  if (!(p.sigma_eig.values(p.sigma_eig.values.size() - 1) > 0.0))
    throw NumericalError("prior covariance not positive definite");
  p.sqrt_sigma = sym_fractional_power(p.sigma_eig, 0.5);
  p.precision = sym_fractional_power(p.sigma_eig, -1.0);
  p.log_det_sigma = p.sigma_eig.values.array().log().sum();
  return p;
}

Mat pool_matrix(int fine_side) {
  check_side(fine_side);
  const int n = fine_side, m = n / 2;
  Mat a = Mat::Zero(m * m, n * n);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < m; ++j)
      for (int p = 0; p < 2; ++p)
        for (int q = 0; q < 2; ++q) a(i * m + j, (2 * i + p) * n + 2 * j + q) = 0.25;
  return a;
}

Mat upsample_matrix(int fine_side) { return 4.0 * pool_matrix(fine_side).transpose(); }

std::vector<MultiscaleOperators> build_operators(const std::vector<int>& sides) {
  if (sides.empty()) throw std::invalid_argument("build_operators: no scales");
  for (size_t l = 0; l < sides.size(); ++l) {
    check_side(sides[l]);
    if (l > 0 && sides[l] != 2 * sides[l - 1])
      throw std::invalid_argument("build_operators: sides must double between scales");
  }
  const size_t L = sides.size();
  std::vector<MultiscaleOperators> ops(L);
  for (size_t l = 0; l < L; ++l) {
    ops[l].fine_side = sides[l];
    ops[l].coarse_side = l > 0 ? sides[l - 1] : 0;
    if (l > 0) {
      ops[l].pool = pool_matrix(sides[l]);
      ops[l].upsample = upsample_matrix(sides[l]);
    }
  }
  const int dL = sides[L - 1] * sides[L - 1];
  ops[L - 1].lift_to_finest = Mat::Identity(dL, dL);
  for (size_t l = L - 1; l-- > 0;) ops[l].lift_to_finest = ops[l + 1].lift_to_finest * ops[l + 1].upsample;
  return ops;
}

GaussianPrior coarsen_prior(const GaussianPrior& prior, const MultiscaleOperators& ops) {
  if (ops.pool.cols() != prior.dim())
    throw std::invalid_argument("coarsen_prior: operator shape mismatch");
  Mat c = ops.pool * prior.sigma.mat() * ops.pool.transpose();
  LatticeSpec spec{ops.coarse_side, prior.spec.scale_index - 1};
  return prior_from_covariance(spec, prior.alpha, prior.beta, SymMatrix(0.5 * (c + c.transpose())));
}

SampleBatch sample_prior(const GaussianPrior& prior, RandomStream& stream, int count) {
  if (count < 1) throw std::invalid_argument("sample_prior: count must be positive");
  SampleBatch b;
  b.scale = prior.spec.scale_index;
  b.provenance = "prior";
  Mat xi = stream.normal_mat(count, prior.dim());
  b.samples = xi * prior.sqrt_sigma.mat();
  return b;
}

std::vector<int> lattice_sides(int finest_side, int levels) {
  check_side(finest_side);
  std::vector<int> s(levels);
  int n = finest_side;
  for (int l = levels - 1; l >= 0; --l) {
    if (n < 2) throw std::invalid_argument("too many levels for lattice side");
    s[l] = n;
    n /= 2;
  }
  return s;
}

Vec mirror_field(const Vec& x, int side) {
  Vec y(x.size());
  for (int i = 0; i < side; ++i)
    for (int j = 0; j < side; ++j) y(i * side + j) = x(i * side + side - 1 - j);
  return y;
}

}  // namespace msign
