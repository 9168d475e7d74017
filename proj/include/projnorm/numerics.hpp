#pragma once

// Dense linear-algebra primitives for the overparameterized linear theory:
// minimum-norm interpolation, orthogonal projection onto a row space, and
// eigendecomposition of empirical covariances (with the Gram trick for d > n).

#include <Eigen/Dense>

namespace projnorm {

using Index = Eigen::Index;
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// Singular values below kRankTolerance * sigma_max are treated as zero.
inline constexpr double kRankTolerance = 1e-10;

// Covariance eigenvalues below kEigenTolerance * lambda_max are treated as zero.
// The Gram route cannot resolve anything smaller than roughly n * eps * lambda_max.
inline constexpr double kEigenTolerance = 1e-12;

bool all_finite(const Matrix& m);
bool all_finite(const Vector& v);

// Throws DimensionError naming `what` if any entry is NaN or infinite.
void require_finite(const Matrix& m, const char* what);
void require_finite(const Vector& v, const char* what);

// Number of singular values above kRankTolerance * sigma_max.
Index numerical_rank(const Matrix& x);

// Smallest-norm theta with X theta = y (n <= d). Cholesky on X X^T, falling back
// to a truncated SVD when the Gram matrix is numerically singular. A rank
// deficient but consistent system is still solved; an inconsistent one raises
// RankDeficientError.
Vector min_norm_solve(const Matrix& x, const Vector& y);

// Orthogonal projector onto span of the rows of a source matrix, stored as an
// orthonormal basis (one basis vector per row).
class RowSpaceProjector {
 public:
  explicit RowSpaceProjector(Matrix basis) : basis_(std::move(basis)) {}

  const Matrix& basis() const { return basis_; }
  Index source_rank() const { return basis_.rows(); }
  Index ambient_dim() const { return basis_.cols(); }

  Vector apply(const Vector& v) const;
  // Dense d x d projection matrix; only sensible for small d.
  Matrix dense() const;

 private:
  Matrix basis_;
};

RowSpaceProjector row_space_projector(const Matrix& x);

Vector project(const RowSpaceProjector& p, const Vector& v);

// Top eigenpairs of X^T X / n in descending order. Eigenvectors are the columns
// of `eigenvectors`, with the first nonzero coordinate made positive.
struct SpectralDecomposition {
  Vector eigenvalues;
  Matrix eigenvectors;  // ambient_dim x eigenvalues.size()
  Index ambient_dim = 0;
  // Set when fewer than the requested pairs were numerically nonzero.
  bool rank_limited = false;

  Index size() const { return eigenvalues.size(); }
};

enum class EigenRoute {
  kAuto,    // Gram trick when d > n, direct otherwise
  kDirect,  // eigendecomposition of the d x d covariance
  kGram,    // eigendecomposition of X X^T / n, mapped back through X^T
};

SpectralDecomposition covariance_eig(const Matrix& x, Index top_k,
                                     EigenRoute route = EigenRoute::kAuto);

// Flips each column so that its first nonzero coordinate is positive.
void canonicalize_signs(Matrix& columns);

}  // namespace projnorm
