#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "projnorm/error.hpp"
#include "projnorm/numerics.hpp"
#include "test_util.hpp"

using namespace projnorm;
using testutil::randn;

namespace {

// Plain gradient descent from zero on 0.5 ||X theta - y||^2.
Vector descent_from_zero(const Matrix& x, const Vector& y) {
  const double smax = Eigen::JacobiSVD<Matrix>(x).singularValues()(0);
  const double step = 1.0 / (smax * smax);
  Vector theta = Vector::Zero(x.cols());
  for (int it = 0; it < 200000; ++it) {
    const Vector r = x * theta - y;
    theta -= step * (x.transpose() * r);
    if (r.norm() < 1e-13 * y.norm()) break;
  }
  return theta;
}

}  // namespace

TEST(MinNormSolve, SingleRow) {
  Matrix x(1, 2);
  x << 1, 1;
  Vector y(1);
  y << 2;
  const Vector theta = min_norm_solve(x, y);
  EXPECT_NEAR(theta(0), 1.0, 1e-14);
  EXPECT_NEAR(theta(1), 1.0, 1e-14);
}

TEST(MinNormSolve, IdentityReturnsTarget) {
  const Vector y = randn(6, 3);
  const Vector theta = min_norm_solve(Matrix::Identity(6, 6), y);
  EXPECT_LT((theta - y).norm(), 1e-14);
}

TEST(MinNormSolve, MatchesGradientDescent) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Matrix x = randn(3, 8, 100 + seed);
    const Vector y = randn(3, 200 + seed);
    const Vector theta = min_norm_solve(x, y);
    EXPECT_LT((theta - descent_from_zero(x, y)).norm(), 1e-4) << "seed " << seed;
  }
}

TEST(MinNormSolve, InterpolatesAndLiesInRowSpace) {
  const Matrix x = randn(7, 30, 11);
  const Vector y = randn(7, 12);
  const Vector theta = min_norm_solve(x, y);
  EXPECT_LE((x * theta - y).norm(), 1e-8 * y.norm());
  const Vector z = randn(30, 13);
  const Vector z_perp = z - row_space_projector(x).apply(z);
  EXPECT_NEAR(theta.dot(z_perp), 0.0, 1e-10);
  EXPECT_LT((project(row_space_projector(x), theta) - theta).norm(), 1e-8);
}

TEST(MinNormSolve, DuplicateRowsConsistent) {
  Matrix x = randn(3, 6, 21);
  x.row(2) = x.row(0);
  Vector y = randn(3, 22);
  y(2) = y(0);
  const Vector theta = min_norm_solve(x, y);
  EXPECT_LE((x * theta - y).norm(), 1e-8 * y.norm());
}

TEST(MinNormSolve, InconsistentRankDeficientThrows) {
  Matrix x = randn(3, 6, 23);
  x.row(2) = x.row(0);
  Vector y(3);
  y << 1, 2, 3;
  try {
    min_norm_solve(x, y);
    FAIL() << "expected RankDeficientError";
  } catch (const RankDeficientError& e) {
    EXPECT_EQ(e.effective_rank(), 2);
  }
}

TEST(MinNormSolve, DimensionErrors) {
  EXPECT_THROW(min_norm_solve(randn(5, 3, 1), randn(5, 2)), DimensionError);
  EXPECT_THROW(min_norm_solve(randn(2, 4, 1), randn(3, 2)), DimensionError);
  Matrix bad = randn(2, 4, 3);
  bad(0, 0) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(min_norm_solve(bad, randn(2, 4)), DimensionError);
}

TEST(RowSpaceProjector, FirstAxis) {
  Matrix x(1, 3);
  x << 1, 0, 0;
  const auto p = row_space_projector(x);
  Vector v(3);
  v << 4, -2, 7;
  const Vector pv = p.apply(v);
  EXPECT_NEAR(pv(0), 4.0, 1e-15);
  EXPECT_NEAR(pv(1), 0.0, 1e-15);
  EXPECT_NEAR(pv(2), 0.0, 1e-15);
  EXPECT_EQ(p.source_rank(), 1);
}

TEST(RowSpaceProjector, OrthonormalRows) {
  const Matrix x = Matrix::Identity(2, 5);
  const Vector v = randn(5, 4);
  const Vector pv = row_space_projector(x).apply(v);
  EXPECT_NEAR(pv(0), v(0), 1e-15);
  EXPECT_NEAR(pv(1), v(1), 1e-15);
  EXPECT_LT(pv.tail(3).norm(), 1e-15);
}

TEST(RowSpaceProjector, MatchesNormalEquations) {
  const Matrix x = randn(4, 10, 5);
  const Vector v = randn(10, 6);
  const Vector oracle = testutil::dense_projection(x) * v;
  EXPECT_LT((row_space_projector(x).apply(v) - oracle).norm(), 1e-8);
  EXPECT_LT((row_space_projector(x).dense() - testutil::dense_projection(x)).norm(), 1e-8);
}

TEST(RowSpaceProjector, IdempotentAndFixesRows) {
  const Matrix x = randn(5, 12, 7);
  const auto p = row_space_projector(x);
  const Vector v = randn(12, 8);
  EXPECT_LT((p.apply(p.apply(v)) - p.apply(v)).norm(), 1e-8);
  for (Index i = 0; i < x.rows(); ++i) {
    const Vector row = x.row(i).transpose();
    EXPECT_LT((p.apply(row) - row).norm(), 1e-8 * row.norm());
  }
  const Matrix g = p.basis() * p.basis().transpose();
  EXPECT_LT((g - Matrix::Identity(5, 5)).norm(), 1e-10);
}

TEST(RowSpaceProjector, RankDeficientSource) {
  Matrix x = randn(4, 9, 9);
  x.row(3) = 2.0 * x.row(1) - x.row(0);
  EXPECT_EQ(row_space_projector(x).source_rank(), 3);
}

TEST(RowSpaceProjector, Errors) {
  EXPECT_THROW(row_space_projector(Matrix::Zero(3, 4)), Error);
  EXPECT_THROW(row_space_projector(Matrix(0, 4)), Error);
  const auto p = row_space_projector(randn(2, 4, 1));
  EXPECT_THROW(project(p, randn(5, 2)), DimensionError);
}

TEST(Project, RowSpaceAndComplement) {
  const Matrix x = randn(3, 8, 31);
  const auto p = row_space_projector(x);
  const Vector in_space = x.transpose() * randn(3, 32);
  EXPECT_LT((project(p, in_space) - in_space).norm(), 1e-10 * in_space.norm());
  const Vector v = randn(8, 33);
  const Vector perp = v - testutil::dense_projection(x) * v;
  EXPECT_LT(project(p, perp).norm(), 1e-10);
}

TEST(Project, PropertiesOnRandomInputs) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Index n = 1 + static_cast<Index>(seed % 6);
    const Matrix x = randn(n, 10, 1000 + seed);
    const auto p = row_space_projector(x);
    const Vector v = randn(10, 2000 + seed);
    const Vector pv = project(p, v);
    EXPECT_LE(pv.norm(), v.norm() * (1 + 1e-12));
    EXPECT_LT((project(p, pv) - pv).norm(), 1e-8);
    EXPECT_NEAR((v - pv).squaredNorm() + pv.squaredNorm(), v.squaredNorm(), 1e-8);
    EXPECT_LT((pv - testutil::dense_projection(x) * v).norm(), 1e-8);
  }
}

TEST(CovarianceEig, ScaledIdentity) {
  const Index n = 4;
  const Matrix x = std::sqrt(static_cast<double>(n)) * Matrix::Identity(n, n);
  const auto eig = covariance_eig(x, n);
  for (Index i = 0; i < n; ++i) EXPECT_NEAR(eig.eigenvalues(i), 1.0, 1e-12);
  const Matrix abs_vecs = eig.eigenvectors.cwiseAbs();
  // Every eigenvector is a standard basis vector (degenerate spectrum: any
  // orthonormal basis is valid, so check the span instead).
  EXPECT_LT((eig.eigenvectors.transpose() * eig.eigenvectors - Matrix::Identity(n, n)).norm(), 1e-10);
  EXPECT_EQ(abs_vecs.rows(), n);
}

TEST(CovarianceEig, DiagonalCase) {
  const double n = 2.0;
  Matrix x(2, 2);
  x << std::sqrt(n) * std::sqrt(3.0), 0, 0, std::sqrt(n);
  const auto eig = covariance_eig(x, 2);
  EXPECT_NEAR(eig.eigenvalues(0), 3.0, 1e-12);
  EXPECT_NEAR(eig.eigenvalues(1), 1.0, 1e-12);
  EXPECT_NEAR(eig.eigenvectors(0, 0), 1.0, 1e-12);
  EXPECT_NEAR(eig.eigenvectors(1, 1), 1.0, 1e-12);
}

TEST(CovarianceEig, ResidualsOnWideMatrix) {
  const Matrix x = randn(5, 50, 41);
  const Matrix cov = x.transpose() * x / 5.0;
  const auto eig = covariance_eig(x, 5);
  ASSERT_EQ(eig.size(), 5);
  EXPECT_FALSE(eig.rank_limited);
  for (Index i = 0; i < eig.size(); ++i) {
    const Vector v = eig.eigenvectors.col(i);
    EXPECT_LE((cov * v - eig.eigenvalues(i) * v).norm(), 1e-6 * eig.eigenvalues(i));
    if (i > 0) {
      EXPECT_GE(eig.eigenvalues(i - 1), eig.eigenvalues(i));
    }
  }
  EXPECT_LT((eig.eigenvectors.transpose() * eig.eigenvectors - Matrix::Identity(5, 5)).norm(), 1e-8);
}

TEST(CovarianceEig, GramAndDirectAgree) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Index d = 8 + static_cast<Index>(seed) * 6;
    const Matrix x = randn(6, d, 300 + seed);
    const auto a = covariance_eig(x, 6, EigenRoute::kGram);
    const auto b = covariance_eig(x, 6, EigenRoute::kDirect);
    ASSERT_EQ(a.size(), b.size());
    for (Index i = 0; i < a.size(); ++i) {
      EXPECT_NEAR(a.eigenvalues(i), b.eigenvalues(i), 1e-8 * b.eigenvalues(i));
      // Signs are canonical, so the vectors agree too.
      EXPECT_LT((a.eigenvectors.col(i) - b.eigenvectors.col(i)).norm(), 1e-6);
    }
  }
}

TEST(CovarianceEig, RowPermutationInvariance) {
  const Matrix x = randn(9, 20, 51);
  std::vector<Index> perm(9);
  std::iota(perm.begin(), perm.end(), 0);
  std::reverse(perm.begin(), perm.end());
  std::swap(perm[2], perm[5]);
  Matrix xp(9, 20);
  for (Index i = 0; i < 9; ++i) xp.row(i) = x.row(perm[static_cast<std::size_t>(i)]);
  const auto a = covariance_eig(x, 9);
  const auto b = covariance_eig(xp, 9);
  for (Index i = 0; i < 9; ++i) EXPECT_NEAR(a.eigenvalues(i), b.eigenvalues(i), 1e-8 * a.eigenvalues(i));
}

TEST(CovarianceEig, ReconstructionWithAllPairs) {
  const Matrix x = randn(12, 6, 61);
  const Matrix cov = x.transpose() * x / 12.0;
  const auto eig = covariance_eig(x, 6);
  const Matrix rec = eig.eigenvectors * eig.eigenvalues.asDiagonal() * eig.eigenvectors.transpose();
  EXPECT_LT((rec - cov).norm(), 1e-6 * cov.norm());
  EXPECT_GE(eig.eigenvalues.minCoeff(), -1e-10);
}

TEST(CovarianceEig, RankLimitedFlag) {
  Matrix x = randn(4, 10, 71);
  x.row(3) = x.row(0) + x.row(1);
  const auto eig = covariance_eig(x, 4);
  EXPECT_TRUE(eig.rank_limited);
  EXPECT_EQ(eig.size(), 3);
}

TEST(CovarianceEig, SignConvention) {
  const auto eig = covariance_eig(randn(6, 15, 81), 6);
  for (Index c = 0; c < eig.size(); ++c) {
    Index first = 0;
    while (std::abs(eig.eigenvectors(first, c)) <= 1e-12) ++first;
    EXPECT_GT(eig.eigenvectors(first, c), 0.0);
  }
}

TEST(CovarianceEig, Errors) {
  EXPECT_THROW(covariance_eig(randn(3, 5, 1), 4), DimensionError);
  EXPECT_THROW(covariance_eig(Matrix(0, 5), 1), DimensionError);
}

TEST(NumericalRank, Basics) {
  EXPECT_EQ(numerical_rank(Matrix::Identity(4, 4)), 4);
  EXPECT_EQ(numerical_rank(Matrix::Zero(3, 3)), 0);
  Matrix x = randn(3, 5, 2);
  x.row(2) = 3.0 * x.row(1);
  EXPECT_EQ(numerical_rank(x), 2);
}
