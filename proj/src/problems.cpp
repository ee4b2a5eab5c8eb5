#include "msign/problems.hpp"

#include <Eigen/SparseCholesky>

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace msign {

namespace {
const double kPi = std::acos(-1.0);
}

std::vector<ProblemScale> build_hierarchy(int finest_side, int levels, double alpha, double beta,
                                          LaplacianScaling scaling) {
  std::vector<int> sides = lattice_sides(finest_side, levels);
  std::vector<MultiscaleOperators> ops = build_operators(sides);
  std::vector<ProblemScale> out(levels);
  out[levels - 1].side = finest_side;
  out[levels - 1].prior = build_prior({finest_side, levels}, alpha, beta, scaling);
  out[levels - 1].ops = ops[levels - 1];
  for (int l = levels - 1; l-- > 0;) {
    out[l].side = sides[l];
    out[l].prior = coarsen_prior(out[l + 1].prior, ops[l + 1]);
    out[l].ops = ops[l];
  }
  return out;
}

PosteriorProblem::PosteriorProblem(std::vector<ProblemScale> scales, double gamma)
    : scales_(std::move(scales)), gamma_(gamma) {
  if (scales_.empty()) throw std::invalid_argument("problem: no scales");
  if (!(gamma > 0.0)) throw std::invalid_argument("problem: gamma must be positive");
}

double PosteriorProblem::log_likelihood(const Vec& x, int l) const {
  if (x.size() != dim(l)) throw std::invalid_argument("log_likelihood: dimension mismatch");
  ++forward_calls_;
  if (!likelihood_on_) return 0.0;
  return fine_log_likelihood(scale(l).ops.lift_to_finest * x, nullptr);
}

double PosteriorProblem::log_likelihood_grad(const Vec& x, int l, Vec& grad) const {
  if (x.size() != dim(l)) throw std::invalid_argument("log_likelihood_grad: dimension mismatch");
  ++forward_calls_;
  ++adjoint_calls_;
  if (!likelihood_on_) {
    grad = Vec::Zero(x.size());
    return 0.0;
  }
  const Mat& lift = scale(l).ops.lift_to_finest;
  Vec gf;
  double v = fine_log_likelihood(lift * x, &gf);
  grad = lift.transpose() * gf;
  return v;
}

double PosteriorProblem::log_posterior(const Vec& x, int l) const {
  return prior(l).log_density(x) + log_likelihood(x, l);
}

double PosteriorProblem::log_posterior_grad(const Vec& x, int l, Vec& grad) const {
  double v = log_likelihood_grad(x, l, grad);
  grad += prior(l).grad_log_density(x);
  return v + prior(l).log_density(x);
}

double PosteriorProblem::coarse_log_likelihood(const Vec& x, int l) const {
  if (l < 2) throw std::out_of_range("coarse_log_likelihood: needs l >= 2");
  return log_likelihood(scale(l).ops.pool * x, l - 1);
}

MapResult find_map(const PosteriorProblem& problem, int l, const Vec& start, double grad_tol,
                   int max_iter) {
  const Mat& S = problem.prior(l).sqrt_sigma.mat();
  // minimise f(u) = -log q(S u)
  auto eval = [&](const Vec& u, Vec& gu, Vec& gx) {
    Vec x = S * u;
    double v = problem.log_posterior_grad(x, l, gx);
    gu = -(S * gx);
    return -v;
  };
  const int m = 10;
  std::vector<Vec> ss, ys;
  std::vector<double> rho;
  Vec u = S.ldlt().solve(start);
  Vec g, gx;
  double f = eval(u, g, gx);
  MapResult r;
  for (r.iterations = 0; r.iterations < max_iter; ++r.iterations) {
    if (gx.norm() <= grad_tol) {
      r.converged = true;
      break;
    }
    Vec q = g;
    std::vector<double> alpha(ss.size());
    for (int k = static_cast<int>(ss.size()) - 1; k >= 0; --k) {
      alpha[k] = rho[k] * ss[k].dot(q);
      q -= alpha[k] * ys[k];
    }
    double scale = ss.empty() ? 1.0 / std::max(1.0, g.norm()) : ss.back().dot(ys.back()) / ys.back().squaredNorm();
    Vec d = scale * q;
    for (size_t k = 0; k < ss.size(); ++k) {
      double b = rho[k] * ys[k].dot(d);
      d += ss[k] * (alpha[k] - b);
    }
    d = -d;
    double slope = g.dot(d);
    if (slope >= 0.0) {  // lost descent; restart from steepest descent
      ss.clear();
      ys.clear();
      rho.clear();
      d = -g / std::max(1.0, g.norm());
      slope = g.dot(d);
    }
    double step = 1.0;
    Vec un, gn, gxn;
    double fn = 0.0;
    bool moved = false;
    for (int bt = 0; bt < 60; ++bt, step *= 0.5) {
      un = u + step * d;
      try {
        fn = eval(un, gn, gxn);
      } catch (const NumericalError&) {
        continue;
      }
      // near the optimum f stops resolving the decrease; accept a smaller gradient then
      if (fn <= f + 1e-4 * step * slope ||
          (fn <= f + 1e-12 * std::abs(f) && gxn.norm() < gx.norm())) {
        moved = true;
        break;
      }
    }
    if (!moved) break;
    Vec sv = un - u, yv = gn - g;
    double sy = sv.dot(yv);
    if (sy > 1e-16 * sv.norm() * yv.norm()) {
      if (static_cast<int>(ss.size()) == m) {
        ss.erase(ss.begin());
        ys.erase(ys.begin());
        rho.erase(rho.begin());
      }
      ss.push_back(sv);
      ys.push_back(yv);
      rho.push_back(1.0 / sy);
    }
    u = un;
    g = gn;
    gx = gxn;
    f = fn;
  }
  r.x = S * u;
  r.log_posterior = -f;
  r.grad_norm = gx.norm();
  return r;
}

// ---------------------------------------------------------------- synthetic

std::vector<ProblemScale> SyntheticProblem::make_scales(const SyntheticConfig& cfg) {
  return build_hierarchy(cfg.finest_side, cfg.levels, cfg.alpha, cfg.beta, cfg.laplacian);
}

SyntheticProblem::SyntheticProblem(const SyntheticConfig& cfg)
    : PosteriorProblem(make_scales(cfg), cfg.gamma), cfg_(cfg) {
  const int n = cfg.finest_side;
  const double h = 1.0 / (n + 1);
  phi_.resize(n * n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      phi_(i * n + j) = std::sin(kPi * (i + 1) * h) * std::sin(2.0 * kPi * (j + 1) * h);
  weight_ = cfg.measurement_gain * h * h * phi_;
  truth_ = phi_;
  y_ = forward_map(truth_);
}

Vec SyntheticProblem::forward_map(const Vec& x_fine) const {
  double s = weight_.dot(x_fine);
  return Vec::Constant(1, s * s);
}

Vec SyntheticProblem::functional(int l) const {
  return scale(l).ops.lift_to_finest.transpose() * weight_;
}

double SyntheticProblem::fine_log_likelihood(const Vec& x_fine, Vec* grad) const {
  double s = weight_.dot(x_fine);
  double r = y_(0) - s * s;
  double g2 = gamma_ * gamma_;
  if (grad) *grad = (r / g2) * 2.0 * s * weight_;
  return -0.5 * r * r / g2;
}

double InverseCdf::quantile(double u) const {
  const int n = static_cast<int>(t.size());
  if (u <= 0.0) return t(0);
  if (u >= 1.0) return t(n - 1);
  int lo = 0, hi = n - 1;
  while (hi - lo > 1) {
    int mid = (lo + hi) / 2;
    if (cdf(mid) <= u) lo = mid; else hi = mid;
  }
  // Bisection on the monotone cubic Hermite segment.
  double a = t(lo), b = t(hi);
  double hseg = b - a;
  auto seg = [&](double x) {
    double s = (x - t(lo)) / hseg;
    double h00 = 2 * s * s * s - 3 * s * s + 1, h10 = s * s * s - 2 * s * s + s;
    double h01 = -2 * s * s * s + 3 * s * s, h11 = s * s * s - s * s;
    return h00 * cdf(lo) + h10 * hseg * slope(lo) + h01 * cdf(hi) + h11 * hseg * slope(hi);
  };
  for (int it = 0; it < 60; ++it) {
    double m = 0.5 * (a + b);
    if (seg(m) < u) a = m; else b = m;
  }
  return 0.5 * (a + b);
}

double InverseCdf::cdf_at(double x) const {
  const int n = static_cast<int>(t.size());
  if (x <= t(0)) return 0.0;
  if (x >= t(n - 1)) return 1.0;
  int lo = static_cast<int>(std::upper_bound(t.data(), t.data() + n, x) - t.data()) - 1;
  int hi = lo + 1;
  double hseg = t(hi) - t(lo);
  double s = (x - t(lo)) / hseg;
  double h00 = 2 * s * s * s - 3 * s * s + 1, h10 = s * s * s - 2 * s * s + s;
  double h01 = -2 * s * s * s + 3 * s * s, h11 = s * s * s - s * s;
  return h00 * cdf(lo) + h10 * hseg * slope(lo) + h01 * cdf(hi) + h11 * hseg * slope(hi);
}

InverseCdf build_inverse_cdf(const std::function<double(double)>& log_density, double lo,
                             double hi, int points, int max_points) {
  for (int np = points; np <= max_points; np *= 2) {
    Vec t = Vec::LinSpaced(np, lo, hi);
    Vec lp(np);
    for (int i = 0; i < np; ++i) lp(i) = log_density(t(i));
    double m = lp.maxCoeff();
    if (!std::isfinite(m)) throw NumericalError("inverse cdf: log-density not finite on grid");
    Vec p = (lp.array() - m).exp();
    // Resolution check: adjacent density values must not jump by more than 2% of the peak.
    double jump = 0.0;
    for (int i = 0; i + 1 < np; ++i) jump = std::max(jump, std::abs(p(i + 1) - p(i)));
    if (jump > 0.02 && np * 2 <= max_points) continue;
    if (p(0) > 1e-12 || p(np - 1) > 1e-12)
      throw NumericalError("inverse cdf: grid does not cover the density support");
    InverseCdf r;
    r.t = t;
    r.cdf.resize(np);
    r.cdf(0) = 0.0;
    double dx = t(1) - t(0);
    // Simpson per cell, using the density at cell midpoints.
    Vec pm(np - 1);
    for (int i = 0; i + 1 < np; ++i) pm(i) = std::exp(log_density(0.5 * (t(i) + t(i + 1))) - m);
    for (int i = 1; i < np; ++i) r.cdf(i) = r.cdf(i - 1) + dx / 6.0 * (p(i - 1) + 4 * pm(i - 1) + p(i));
    double total = r.cdf(np - 1);
    r.cdf /= total;
    r.slope = p / total;
    // Fritsch-Carlson limiter.
    for (int i = 0; i + 1 < np; ++i) {
      double delta = (r.cdf(i + 1) - r.cdf(i)) / dx;
      if (delta == 0.0) {
        r.slope(i) = 0.0;
        r.slope(i + 1) = 0.0;
        continue;
      }
      double a = r.slope(i) / delta, b = r.slope(i + 1) / delta;
      double s2 = a * a + b * b;
      if (s2 > 9.0) {
        double tau = 3.0 / std::sqrt(s2);
        r.slope(i) = tau * a * delta;
        r.slope(i + 1) = tau * b * delta;
      }
    }
    Vec tp = t.array() * p.array();
    Vec t2p = t.array().square() * p.array();
    double m1 = 0.0, m2 = 0.0;
    for (int i = 1; i < np; ++i) {
      double c = 0.5 * (t(i) + t(i - 1));
      m1 += dx / 6.0 * (tp(i - 1) + 4 * c * pm(i - 1) + tp(i));
      m2 += dx / 6.0 * (t2p(i - 1) + 4 * c * c * pm(i - 1) + t2p(i));
    }
    r.mean = m1 / total;
    r.second_moment = m2 / total;
    return r;
  }
  throw NumericalError("inverse cdf: refinement cap reached");
}

Mat SyntheticOracle::covariance() const {
  const Mat& S = sigma.mat();
  Mat c = S - sigma_v * sigma_v.transpose() / s2;
  c += sigma_v * sigma_v.transpose() * (t_marginal.second_moment / (s2 * s2));
  return 0.5 * (c + c.transpose());
}

SyntheticOracle build_oracle(const SyntheticProblem& p, int l) {
  SyntheticOracle o;
  o.scale = l;
  const GaussianPrior& pr = p.prior(l);
  o.sigma = pr.sigma;
  o.sqrt_sigma = pr.sqrt_sigma.mat();
  o.v = p.functional(l);
  o.sigma_v = pr.sigma.mat() * o.v;
  o.s2 = o.v.dot(o.sigma_v);
  o.critical_direction = o.sigma_v.normalized();
  o.basis = pr.sigma_eig.vectors;
  o.variances = pr.sigma_eig.values;
  Vec proj = (o.basis.transpose() * o.v).cwiseAbs();
  proj.maxCoeff(&o.critical_index);

  const double y = p.data()(0), g2 = p.gamma() * p.gamma(), s2 = o.s2;
  o.t_log_density = [y, g2, s2](double t) {
    double r = y - t * t;
    return -0.5 * t * t / s2 - 0.5 * r * r / g2;
  };
  double s = std::sqrt(s2);
  double reach = std::sqrt(std::max(y, 0.0)) + 8.0 * s;
  for (int tries = 0;; ++tries) {
    try {
      o.t_marginal = build_inverse_cdf(o.t_log_density, -reach, reach);
      break;
    } catch (const NumericalError&) {
      if (tries > 8) throw;
      reach *= 2.0;
    }
  }
  // Exact variance along the critical eigenvector.
  Vec w = o.basis.col(o.critical_index);
  Mat cov = o.covariance();
  o.variances(o.critical_index) = w.dot(cov * w);
  return o;
}

SampleBatch synthetic_oracle_sample(const SyntheticOracle& o, RandomStream& stream, int count) {
  SampleBatch b;
  b.scale = o.scale;
  b.provenance = "oracle";
  const int d = o.sigma.dim();
  b.samples.resize(count, d);
  Vec dir = o.sigma_v / o.s2;
  for (int i = 0; i < count; ++i) {
    double t = o.t_marginal.quantile(stream.uniform());
    Vec xi = o.sqrt_sigma * stream.normal_vec(d);
    Vec x = xi - dir * o.v.dot(xi) + dir * t;
    b.samples.row(i) = x.transpose();
  }
  return b;
}

// ---------------------------------------------------------------- elliptic

double elliptic_force(double s1, double s2) {
  static const double c[4][3] = {
      {0.25, 0.3, 2.0}, {0.25, 0.7, 2.0}, {0.7, 0.3, -1.0}, {0.7, 0.7, -1.0}};
  double f = 0.0;
  for (const auto& k : c) {
    double d1 = s1 - k[0], d2 = s2 - k[1];
    f += k[2] * std::exp(-10.0 * (d1 * d1 + d2 * d2));
  }
  return 50.0 / kPi * f;
}

std::vector<std::vector<Rect>> default_patches() {
  // Five columns along s1; each column holds a centre band and two mirrored pairs in s2.
  std::vector<std::vector<Rect>> p;
  const double xs[5] = {0.125, 0.3125, 0.5, 0.6875, 0.875};
  for (double x : xs) {
    double a = x - 0.0625, b = x + 0.0625;
    p.push_back({{a, b, 0.4375, 0.5625}});
    p.push_back({{a, b, 0.125, 0.25}, {a, b, 0.75, 0.875}});
    p.push_back({{a, b, 0.25, 0.375}, {a, b, 0.625, 0.75}});
  }
  return p;
}

const Eigen::Matrix4d& EllipticSolver::local_stiffness() {
  static const Eigen::Matrix4d k = [] {
    Eigen::Matrix4d m;
    m << 4, -1, -2, -1, -1, 4, -1, -2, -2, -1, 4, -1, -1, -2, -1, 4;
    return Eigen::Matrix4d(m / 6.0);
  }();
  return k;
}

EllipticSolver::EllipticSolver(int mesh_n, const std::vector<std::vector<Rect>>& patches,
                               const std::function<double(double, double)>& force)
    : n_(mesh_n) {
  if (mesh_n < 2) throw std::invalid_argument("elliptic: mesh must have at least 2 cells per side");
  const double h = 1.0 / n_;
  const int N = unknowns();
  elements_.resize(n_ * n_);
  for (int i = 0; i < n_; ++i)
    for (int j = 0; j < n_; ++j)
      elements_[i * n_ + j] = {node_index(i, j), node_index(i + 1, j), node_index(i + 1, j + 1),
                               node_index(i, j + 1)};
  load_ = Vec::Zero(N);
  const double g = 1.0 / std::sqrt(3.0);
  const double gp[2] = {0.5 * (1 - g), 0.5 * (1 + g)};
  for (int i = 0; i < n_; ++i)
    for (int j = 0; j < n_; ++j) {
      const auto& el = elements_[i * n_ + j];
      for (double xi : gp)
        for (double eta : gp) {
          double sh[4] = {(1 - xi) * (1 - eta), xi * (1 - eta), xi * eta, (1 - xi) * eta};
          double fv = force((i + xi) * h, (j + eta) * h) * h * h / 4.0;
          for (int a = 0; a < 4; ++a)
            if (el[a] >= 0) load_(el[a]) += fv * sh[a];
        }
    }
  obs_ = Mat::Zero(static_cast<int>(patches.size()), N);
  for (size_t k = 0; k < patches.size(); ++k) {
    double area = 0.0;
    for (const auto& r : patches[k]) area += (r.s1b - r.s1a) * (r.s2b - r.s2a);
    if (!(area > 0.0)) throw std::invalid_argument("elliptic: patch with zero area");
    double val = 1.0 / std::sqrt(area);  // unit L2 norm
    for (const auto& r : patches[k])
      for (int i = 0; i < n_; ++i)
        for (int j = 0; j < n_; ++j) {
          double x0 = std::max(r.s1a, i * h), x1 = std::min(r.s1b, (i + 1) * h);
          double y0 = std::max(r.s2a, j * h), y1 = std::min(r.s2b, (j + 1) * h);
          if (x1 <= x0 || y1 <= y0) continue;
          // Integral of a bilinear function over a rectangle = area * value at centre.
          double cx = 0.5 * (x0 + x1) / h - i, cy = 0.5 * (y0 + y1) / h - j;
          double sh[4] = {(1 - cx) * (1 - cy), cx * (1 - cy), cx * cy, (1 - cx) * cy};
          const auto& el = elements_[i * n_ + j];
          for (int a = 0; a < 4; ++a)
            if (el[a] >= 0) obs_(k, el[a]) += val * (x1 - x0) * (y1 - y0) * sh[a];
        }
  }
}

Eigen::SparseMatrix<double> EllipticSolver::stiffness(const Vec& coef) const {
  if (coef.size() != n_ * n_) throw std::invalid_argument("elliptic: coefficient size mismatch");
  const Eigen::Matrix4d& K = local_stiffness();
  std::vector<Eigen::Triplet<double>> trip;
  trip.reserve(16 * n_ * n_);
  for (int e = 0; e < n_ * n_; ++e) {
    const auto& el = elements_[e];
    for (int a = 0; a < 4; ++a) {
      if (el[a] < 0) continue;
      for (int b = 0; b < 4; ++b)
        if (el[b] >= 0) trip.emplace_back(el[a], el[b], coef(e) * K(a, b));
    }
  }
  Eigen::SparseMatrix<double> m(unknowns(), unknowns());
  m.setFromTriplets(trip.begin(), trip.end());
  return m;
}

Vec EllipticSolver::solve(const Vec& coef, const Vec& rhs) const {
  Eigen::SimplicialLLT<Eigen::SparseMatrix<double>> llt(stiffness(coef));
  if (llt.info() != Eigen::Success) {
    std::ostringstream os;
    os << "elliptic: stiffness factorization failed (coefficient range " << coef.minCoeff()
       << " to " << coef.maxCoeff() << ", ratio " << coef.maxCoeff() / coef.minCoeff() << ")";
    throw NumericalError(os.str());
  }
  return llt.solve(rhs);
}

Vec EllipticSolver::solve(const Vec& coef) const { return solve(coef, load_); }

Vec EllipticSolver::observe(const Vec& log_coef) const {
  return obs_ * solve(log_coef.array().exp().matrix());
}

double EllipticSolver::log_likelihood(const Vec& log_coef, const Vec& y, double gamma,
                                      Vec* grad) const {
  Vec coef = log_coef.array().exp();
  Eigen::SimplicialLLT<Eigen::SparseMatrix<double>> llt(stiffness(coef));
  if (llt.info() != Eigen::Success) throw NumericalError("elliptic: stiffness factorization failed");
  Vec u = llt.solve(load_);
  Vec r = y - obs_ * u;
  double g2 = gamma * gamma;
  double val = -0.5 * r.squaredNorm() / g2;
  if (grad) {
    Vec lam = llt.solve(obs_.transpose() * r / g2);
    const Eigen::Matrix4d& K = local_stiffness();
    grad->resize(n_ * n_);
    for (int e = 0; e < n_ * n_; ++e) {
      const auto& el = elements_[e];
      Eigen::Vector4d ue, le;
      for (int a = 0; a < 4; ++a) {
        ue(a) = el[a] >= 0 ? u(el[a]) : 0.0;
        le(a) = el[a] >= 0 ? lam(el[a]) : 0.0;
      }
      (*grad)(e) = -coef(e) * le.dot(K * ue);
    }
  }
  return val;
}

double EllipticSolver::l2_error(const Vec& u,
                                const std::function<double(double, double)>& exact) const {
  const double h = 1.0 / n_;
  const double q[3] = {0.5 - 0.5 * std::sqrt(0.6), 0.5, 0.5 + 0.5 * std::sqrt(0.6)};
  const double w[3] = {5.0 / 18.0, 8.0 / 18.0, 5.0 / 18.0};
  double acc = 0.0;
  for (int i = 0; i < n_; ++i)
    for (int j = 0; j < n_; ++j) {
      const auto& el = elements_[i * n_ + j];
      double nv[4];
      for (int a = 0; a < 4; ++a) nv[a] = el[a] >= 0 ? u(el[a]) : 0.0;
      for (int a = 0; a < 3; ++a)
        for (int b = 0; b < 3; ++b) {
          double xi = q[a], eta = q[b];
          double uh = nv[0] * (1 - xi) * (1 - eta) + nv[1] * xi * (1 - eta) + nv[2] * xi * eta +
                      nv[3] * (1 - xi) * eta;
          double d = uh - exact((i + xi) * h, (j + eta) * h);
          acc += w[a] * w[b] * d * d * h * h;
        }
    }
  return std::sqrt(acc);
}

namespace {

std::vector<ProblemScale> elliptic_scales(const EllipticConfig& cfg) {
  return build_hierarchy(cfg.finest_side, cfg.levels, cfg.alpha, cfg.beta, cfg.laplacian);
}

}  // namespace

EllipticProblem::EllipticProblem(const EllipticConfig& cfg)
    : PosteriorProblem(elliptic_scales(cfg), cfg.gamma),
      cfg_(cfg),
      solver_(cfg.finest_side * cfg.mesh_refinement,
              cfg.patches.empty() ? default_patches() : cfg.patches) {
  if (cfg_.patches.empty()) cfg_.patches = default_patches();
  const int n = cfg.finest_side;
  truth_.resize(n * n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      truth_(i * n + j) = cfg.truth_amplitude * std::sin(kPi * (i + 0.5) / n) *
                          std::sin(2.0 * kPi * (j + 0.5) / n);
  y_ = forward_map(truth_);
}

Vec EllipticProblem::to_mesh(const Vec& x_fine) const {
  const int n = cfg_.finest_side, r = cfg_.mesh_refinement, m = n * r;
  Vec out(m * m);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < m; ++j) out(i * m + j) = x_fine((i / r) * n + j / r);
  return out;
}

Vec EllipticProblem::forward_map(const Vec& x_fine) const {
  return solver_.observe(to_mesh(x_fine));
}

double EllipticProblem::fine_log_likelihood(const Vec& x_fine, Vec* grad) const {
  if (!grad) return solver_.log_likelihood(to_mesh(x_fine), y_, gamma_, nullptr);
  Vec gm;
  double v = solver_.log_likelihood(to_mesh(x_fine), y_, gamma_, &gm);
  const int n = cfg_.finest_side, r = cfg_.mesh_refinement, m = n * r;
  grad->setZero(n * n);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < m; ++j) (*grad)((i / r) * n + j / r) += gm(i * m + j);
  return v;
}

}  // namespace msign
