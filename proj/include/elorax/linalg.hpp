#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <optional>

#include "elorax/rng.hpp"

namespace elorax {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

RowMatrix gaussian_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng);
Vector gaussian_vector(Eigen::Index size, Rng& rng);

/// Modified Gram-Schmidt of `v` against the (orthonormal) rows of `basis`,
/// followed by a second full pass to recover orthogonality lost to
/// cancellation. Returns the residual, not normalized.
Vector orthogonalize_against(const RowMatrix& basis, Vector v);

inline constexpr double kSignTieTolerance = 1e-12;

/// Flips each row so its largest-magnitude entry is positive (ties resolved
/// towards the lowest index). Returns +1/-1 per row so callers can apply the
/// same flips to paired left vectors.
Vector sign_normalize_rows(RowMatrix& rows);

/// Number of singular values above max(rows, cols) * eps * sigma_max.
Eigen::Index numerical_rank(const Vector& singular_values, Eigen::Index rows, Eigen::Index cols);

/// Largest principal angle (radians) between the row spaces of two matrices
/// with orthonormal rows. When dimensions differ this measures how far the
/// smaller space is from lying inside the larger one.
double largest_principal_angle(const RowMatrix& u, const RowMatrix& w);

/// max_{i != j} |<v_i, v_j>| and max_i | ||v_i|| - 1 | over the rows.
struct OrthonormalityError {
  double max_off_diagonal = 0.0;
  double max_norm_deviation = 0.0;
};
OrthonormalityError orthonormality_error(const RowMatrix& rows);

}  // namespace elorax
