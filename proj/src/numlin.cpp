#include "msign/numlin.hpp"

#include <cmath>
#include <limits>
#include <sstream>

namespace msign {

SymMatrix::SymMatrix(const Mat& m) {
  if (m.rows() != m.cols() || m.rows() < 1)
    throw std::invalid_argument("SymMatrix: input must be square and non-empty");
  double scale = m.cwiseAbs().maxCoeff();
  double asym = (m - m.transpose()).cwiseAbs().maxCoeff();
  if (asym > 1e-8 * std::max(scale, 1.0)) {
    std::ostringstream os;
    os << "SymMatrix: input asymmetric by " << asym;
    throw std::invalid_argument(os.str());
  }
  m_ = 0.5 * (m + m.transpose());
}

SymMatrix SymMatrix::identity(int dim) { return SymMatrix(Mat::Identity(dim, dim)); }

SymMatrix SymMatrix::diagonal(const Vec& d) { return SymMatrix(Mat(d.asDiagonal())); }

SymMatrix SymMatrix::operator*(double s) const {
  SymMatrix r;
  r.m_ = m_ * s;
  return r;
}

EigenDecomp sym_eig(const SymMatrix& m) {
  // Householder tridiagonalization followed by implicit QL/QR sweeps.
  Eigen::SelfAdjointEigenSolver<Mat> es(m.mat());
  if (es.info() != Eigen::Success) {
    std::ostringstream os;
    os << "sym_eig: no convergence (dim " << m.dim() << ", max |entry| "
       << m.mat().cwiseAbs().maxCoeff() << ", Frobenius " << m.mat().norm() << ")";
    throw NumericalError(os.str());
  }
  const int n = m.dim();
  EigenDecomp out;
  out.values.resize(n);
  out.vectors.resize(n, n);
  for (int k = 0; k < n; ++k) {
    out.values(k) = es.eigenvalues()(n - 1 - k);
    out.vectors.col(k) = es.eigenvectors().col(n - 1 - k);
  }
  return out;
}

SymMatrix sym_fractional_power(const EigenDecomp& e, double p, double floor_rel) {
  const int n = static_cast<int>(e.values.size());
  double lmax = e.values(0);
  double lmin = e.values(n - 1);
  Vec lam = e.values;
  if (floor_rel > 0.0) {
    double fl = floor_rel * std::max(lmax, 0.0);
    for (int k = 0; k < n; ++k) lam(k) = std::max(lam(k), fl);
  } else if (p < 0.0 && lmin <= 0.0) {
    std::ostringstream os;
    os << "sym_fractional_power: smallest eigenvalue " << lmin << " with negative power " << p;
    throw NumericalError(os.str());
  } else if (p >= 0.0 && lmin < 0.0) {
    if (-lmin > 1e-12 * std::max(lmax, 1e-300)) {
      std::ostringstream os;
      os << "sym_fractional_power: matrix not PSD, smallest eigenvalue " << lmin;
      throw NumericalError(os.str());
    }
    for (int k = 0; k < n; ++k) lam(k) = std::max(lam(k), 0.0);
  }
  Vec d(n);
  for (int k = 0; k < n; ++k) d(k) = (lam(k) == 0.0 && p > 0.0) ? 0.0 : std::pow(lam(k), p);
  Mat r = e.vectors * d.asDiagonal() * e.vectors.transpose();
  return SymMatrix(0.5 * (r + r.transpose()));
}

SymMatrix sym_fractional_power(const SymMatrix& m, double p, double floor_rel) {
  return sym_fractional_power(sym_eig(m), p, floor_rel);
}

Mat orthonormal_complement(const Mat& a) {
  const int dc = static_cast<int>(a.rows());
  const int d = static_cast<int>(a.cols());
  if (dc >= d) throw std::invalid_argument("orthonormal_complement: need rows < cols");
  Eigen::ColPivHouseholderQR<Mat> qr(a.transpose());
  qr.setThreshold(1e-12);
  if (qr.rank() < dc) {
    std::ostringstream os;
    os << "orthonormal_complement: rank deficient input, numerical rank " << qr.rank() << " of "
       << dc;
    throw NumericalError(os.str());
  }
  Mat q = qr.householderQ();
  return q.rightCols(d - dc).transpose();
}

Mat cholesky_factor(const SymMatrix& m) {
  Eigen::LLT<Mat> llt(m.mat());
  if (llt.info() == Eigen::Success) return llt.matrixL();
  // Slow path locates the failing pivot.
  const int n = m.dim();
  Mat l = Mat::Zero(n, n);
  const Mat& a = m.mat();
  for (int j = 0; j < n; ++j) {
    double s = a(j, j) - l.row(j).head(j).squaredNorm();
    if (!(s > 0.0)) {
      std::ostringstream os;
      os << "cholesky: non-positive pivot " << s << " at index " << j;
      throw NumericalError(os.str());
    }
    double ljj = std::sqrt(s);
    l(j, j) = ljj;
    for (int i = j + 1; i < n; ++i)
      l(i, j) = (a(i, j) - l.row(i).head(j).dot(l.row(j).head(j))) / ljj;
  }
  return l;
}

Mat cholesky_solve(const SymMatrix& m, const Mat& rhs) {
  Mat l = cholesky_factor(m);
  Mat y = l.triangularView<Eigen::Lower>().solve(rhs);
  return l.transpose().triangularView<Eigen::Upper>().solve(y);
}

Vec cholesky_solve(const SymMatrix& m, const Vec& rhs) {
  return cholesky_solve(m, Mat(rhs)).col(0);
}

double log_abs_det(const Mat& m, int* sign) {
  Eigen::PartialPivLU<Mat> lu(m);
  const Mat& f = lu.matrixLU();
  double s = lu.permutationP().determinant();
  double acc = 0.0;
  for (int i = 0; i < f.rows(); ++i) {
    double v = f(i, i);
    if (v == 0.0) {
      if (sign) *sign = 0;
      return -std::numeric_limits<double>::infinity();
    }
    if (v < 0) s = -s;
    acc += std::log(std::abs(v));
  }
  if (sign) *sign = s > 0 ? 1 : -1;
  return acc;
}

}  // namespace msign
