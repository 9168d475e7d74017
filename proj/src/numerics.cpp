#include "projnorm/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "projnorm/error.hpp"

namespace projnorm {
namespace {

constexpr double kSignTolerance = 1e-12;
constexpr double kResidualTolerance = 1e-8;

Eigen::BDCSVD<Matrix> thin_svd(const Matrix& x) {
  return Eigen::BDCSVD<Matrix>(x, Eigen::ComputeThinU | Eigen::ComputeThinV);
}

Index rank_from_singular_values(const Vector& s) {
  if (s.size() == 0 || s(0) <= 0.0) return 0;
  const double cutoff = kRankTolerance * s(0);
  Index r = 0;
  while (r < s.size() && s(r) > cutoff) ++r;
  return r;
}

bool residual_ok(const Matrix& x, const Vector& theta, const Vector& y) {
  const double r = (x * theta - y).norm();
  return std::isfinite(r) && r <= kResidualTolerance * y.norm();
}

}  // namespace

bool all_finite(const Matrix& m) { return m.allFinite(); }
bool all_finite(const Vector& v) { return v.allFinite(); }

void require_finite(const Matrix& m, const char* what) {
  if (!m.allFinite()) throw DimensionError(std::string(what) + " has non-finite entries");
}

void require_finite(const Vector& v, const char* what) {
  if (!v.allFinite()) throw DimensionError(std::string(what) + " has non-finite entries");
}

Index numerical_rank(const Matrix& x) {
  if (x.size() == 0) return 0;
  Eigen::BDCSVD<Matrix> svd(x);
  return rank_from_singular_values(svd.singularValues());
}

Vector min_norm_solve(const Matrix& x, const Vector& y) {
  if (x.rows() != y.size()) {
    throw DimensionError("min_norm_solve: X has " + std::to_string(x.rows()) +
                         " rows but y has " + std::to_string(y.size()) + " entries");
  }
  if (x.rows() > x.cols()) {
    throw DimensionError("min_norm_solve: expected n <= d, got n=" + std::to_string(x.rows()) +
                         ", d=" + std::to_string(x.cols()));
  }
  require_finite(x, "min_norm_solve: X");
  require_finite(y, "min_norm_solve: y");
  if (x.rows() == 0) return Vector::Zero(x.cols());

  const Matrix gram = x * x.transpose();
  Eigen::LLT<Matrix> llt(gram);
  if (llt.info() == Eigen::Success) {
    Vector theta = x.transpose() * llt.solve(y);
    if (residual_ok(x, theta, y)) return theta;
  }

  // Numerically singular (or ill-conditioned) Gram: truncated pseudo-inverse.
  const auto svd = thin_svd(x);
  const Index r = rank_from_singular_values(svd.singularValues());
  if (r == 0) {
    if (y.norm() == 0.0) return Vector::Zero(x.cols());
    throw RankDeficientError("min_norm_solve: X is numerically zero", 0);
  }
  const Vector coeff = (svd.matrixU().leftCols(r).transpose() * y).cwiseQuotient(
      svd.singularValues().head(r));
  Vector theta = svd.matrixV().leftCols(r) * coeff;
  if (!residual_ok(x, theta, y)) {
    throw RankDeficientError("min_norm_solve: X X^T is numerically singular and X theta = y "
                             "has no exact solution",
                             r);
  }
  return theta;
}

Vector RowSpaceProjector::apply(const Vector& v) const {
  if (v.size() != ambient_dim()) {
    throw DimensionError("project: vector of dimension " + std::to_string(v.size()) +
                         " for projector in dimension " + std::to_string(ambient_dim()));
  }
  return basis_.transpose() * (basis_ * v);
}

Matrix RowSpaceProjector::dense() const { return basis_.transpose() * basis_; }

RowSpaceProjector row_space_projector(const Matrix& x) {
  if (x.size() == 0) throw DimensionError("row_space_projector: empty matrix");
  require_finite(x, "row_space_projector: X");
  const auto svd = thin_svd(x);
  const Index r = rank_from_singular_values(svd.singularValues());
  if (r == 0) throw RankDeficientError("row_space_projector: empty row space", 0);
  return RowSpaceProjector(svd.matrixV().leftCols(r).transpose());
}

Vector project(const RowSpaceProjector& p, const Vector& v) { return p.apply(v); }

void canonicalize_signs(Matrix& columns) {
  for (Index j = 0; j < columns.cols(); ++j) {
    for (Index i = 0; i < columns.rows(); ++i) {
      const double c = columns(i, j);
      if (std::abs(c) > kSignTolerance) {
        if (c < 0.0) columns.col(j) *= -1.0;
        break;
      }
    }
  }
}

SpectralDecomposition covariance_eig(const Matrix& x, Index top_k, EigenRoute route) {
  const Index n = x.rows();
  const Index d = x.cols();
  if (n < 1) throw DimensionError("covariance_eig: need at least one row");
  if (top_k < 0 || top_k > std::min(n, d)) {
    throw DimensionError("covariance_eig: top_k=" + std::to_string(top_k) +
                         " exceeds min(n, d)=" + std::to_string(std::min(n, d)));
  }
  require_finite(x, "covariance_eig: X");
  if (route == EigenRoute::kAuto) route = d > n ? EigenRoute::kGram : EigenRoute::kDirect;

  const double inv_n = 1.0 / static_cast<double>(n);
  Vector values;
  Matrix vectors;
  if (route == EigenRoute::kDirect) {
    const Matrix cov = (x.transpose() * x) * inv_n;
    Eigen::SelfAdjointEigenSolver<Matrix> es(cov);
    if (es.info() != Eigen::Success) throw NumericalError("covariance_eig: solver failed");
    values = es.eigenvalues().reverse();
    vectors = es.eigenvectors().rowwise().reverse();
  } else {
    const Matrix gram = (x * x.transpose()) * inv_n;
    Eigen::SelfAdjointEigenSolver<Matrix> es(gram);
    if (es.info() != Eigen::Success) throw NumericalError("covariance_eig: solver failed");
    values = es.eigenvalues().reverse();
    vectors = x.transpose() * es.eigenvectors().rowwise().reverse();
  }

  const double lambda_max = values.size() > 0 ? std::max(values(0), 0.0) : 0.0;
  const double cutoff = kEigenTolerance * lambda_max;
  Index available = 0;
  while (available < values.size() && values(available) > cutoff) ++available;

  SpectralDecomposition out;
  out.ambient_dim = d;
  const Index k = std::min(top_k, available);
  out.rank_limited = k < top_k;
  out.eigenvalues = values.head(k);
  out.eigenvectors = vectors.leftCols(k);
  if (route == EigenRoute::kGram) {
    for (Index j = 0; j < k; ++j) out.eigenvectors.col(j).normalize();
  }
  canonicalize_signs(out.eigenvectors);
  return out;
}

}  // namespace projnorm
