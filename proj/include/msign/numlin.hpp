#pragma once

#include <Eigen/Dense>

#include <stdexcept>
#include <string>

namespace msign {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Dense symmetric matrix. Symmetry is exact: the stored array is the average
// of the input and its transpose.
class SymMatrix {
 public:
  SymMatrix() = default;
  explicit SymMatrix(const Mat& m);

  static SymMatrix identity(int dim);
  static SymMatrix diagonal(const Vec& d);

  int dim() const { return static_cast<int>(m_.rows()); }
  const Mat& mat() const { return m_; }
  double operator()(int i, int j) const { return m_(i, j); }

  SymMatrix operator*(double s) const;

 private:
  Mat m_;
};

struct EigenDecomp {
  Mat vectors;  // columns
  Vec values;   // descending
};

EigenDecomp sym_eig(const SymMatrix& m);

// V diag(lambda^p) V^T. Eigenvalues below floor_rel * lambda_max are raised to
// that floor when floor_rel > 0.
SymMatrix sym_fractional_power(const SymMatrix& m, double p, double floor_rel = 0.0);
SymMatrix sym_fractional_power(const EigenDecomp& e, double p, double floor_rel = 0.0);

// Rows form an orthonormal basis of the null space of a.
Mat orthonormal_complement(const Mat& a);

// Lower Cholesky factor; throws naming the first non-positive pivot.
Mat cholesky_factor(const SymMatrix& m);
Vec cholesky_solve(const SymMatrix& m, const Vec& rhs);
Mat cholesky_solve(const SymMatrix& m, const Mat& rhs);

// log|det m| via partial-pivot LU, sign returned separately.
double log_abs_det(const Mat& m, int* sign = nullptr);

}  // namespace msign
