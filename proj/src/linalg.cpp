#include "elorax/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace elorax {

RowMatrix gaussian_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  RowMatrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = rng.normal();
  return m;
}

Vector gaussian_vector(Eigen::Index size, Rng& rng) {
  Vector v(size);
  for (Eigen::Index i = 0; i < size; ++i) v(i) = rng.normal();
  return v;
}

Vector orthogonalize_against(const RowMatrix& basis, Vector v) {
  for (int pass = 0; pass < 2; ++pass) {
    for (Eigen::Index i = 0; i < basis.rows(); ++i) {
      const double coeff = basis.row(i).dot(v);
      v -= coeff * basis.row(i).transpose();
    }
  }
  return v;
}

Vector sign_normalize_rows(RowMatrix& rows) {
  Vector signs = Vector::Ones(rows.rows());
  for (Eigen::Index i = 0; i < rows.rows(); ++i) {
    if (rows.cols() == 0) continue;
    const double top = rows.row(i).cwiseAbs().maxCoeff();
    // Magnitudes within rounding of the maximum count as ties; lowest index wins.
    Eigen::Index best = 0;
    while (std::abs(rows(i, best)) < top * (1.0 - kSignTieTolerance)) ++best;
    if (rows(i, best) < 0.0) {
      rows.row(i) *= -1.0;
      signs(i) = -1.0;
    }
  }
  return signs;
}

Eigen::Index numerical_rank(const Vector& singular_values, Eigen::Index rows, Eigen::Index cols) {
  if (singular_values.size() == 0) return 0;
  const double top = singular_values.maxCoeff();
  if (!(top > 0.0)) return 0;
  const double tol =
      static_cast<double>(std::max(rows, cols)) * std::numeric_limits<double>::epsilon() * top;
  Eigen::Index rank = 0;
  for (Eigen::Index i = 0; i < singular_values.size(); ++i)
    if (singular_values(i) > tol) ++rank;
  return rank;
}

double largest_principal_angle(const RowMatrix& u, const RowMatrix& w) {
  const RowMatrix& small = u.rows() <= w.rows() ? u : w;
  const RowMatrix& large = u.rows() <= w.rows() ? w : u;
  if (small.rows() == 0) return 0.0;
  // sin of the largest angle = spectral norm of the part of `small` outside `large`.
  const RowMatrix outside = small - (small * large.transpose()) * large;
  Eigen::JacobiSVD<RowMatrix> svd(outside);
  const double s = std::clamp(svd.singularValues()(0), 0.0, 1.0);
  return std::asin(s);
}

OrthonormalityError orthonormality_error(const RowMatrix& rows) {
  OrthonormalityError err;
  const RowMatrix gram = rows * rows.transpose();
  for (Eigen::Index i = 0; i < gram.rows(); ++i) {
    err.max_norm_deviation =
        std::max(err.max_norm_deviation, std::abs(std::sqrt(gram(i, i)) - 1.0));
    for (Eigen::Index j = 0; j < gram.cols(); ++j)
      if (i != j) err.max_off_diagonal = std::max(err.max_off_diagonal, std::abs(gram(i, j)));
  }
  return err;
}

}  // namespace elorax
