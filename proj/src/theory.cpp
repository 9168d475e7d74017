#include "projnorm/theory.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "projnorm/error.hpp"
#include "projnorm/metrics.hpp"
#include "projnorm/rng.hpp"

namespace projnorm {

void SyntheticLinearTask::validate() const {
  if (x.cols() != x_tilde.cols() || x.cols() != theta_star.size()) {
    throw DimensionError("linear task: X, X_tilde and theta_star dimensions disagree");
  }
  if (x.rows() < 1 || x_tilde.rows() < 1) throw DimensionError("linear task: empty design");
  require_finite(x, "X");
  require_finite(x_tilde, "X_tilde");
  require_finite(theta_star, "theta_star");
}

double test_loss_orthogonal_form(const SyntheticLinearTask& task) {
  task.validate();
  const RowSpaceProjector p = row_space_projector(task.x);
  const Vector orth = task.theta_star - project(p, task.theta_star);
  return (task.x_tilde * orth).squaredNorm() / static_cast<double>(task.x_tilde.rows());
}

double test_loss(const SyntheticLinearTask& task) {
  task.validate();
  const Vector theta_hat = min_norm_solve(task.x, task.y());
  const double m = static_cast<double>(task.x_tilde.rows());
  const double direct = (task.x_tilde * theta_hat - task.y_tilde()).squaredNorm() / m;
  const double orth = test_loss_orthogonal_form(task);
  const double scale = task.y_tilde().squaredNorm() / m;
  if (std::abs(direct - orth) > 1e-6 * std::max(scale, 1e-300) + 1e-12) {
    throw NumericalError("test_loss: direct and orthogonal-component forms disagree");
  }
  return direct;
}

AlignmentMatrix alignment_matrix(const SpectralDecomposition& train_eig,
                                 const SpectralDecomposition& test_eig, Index k) {
  if (train_eig.ambient_dim != test_eig.ambient_dim) {
    throw DimensionError("alignment_matrix: ambient dimensions differ");
  }
  if (k < 0 || k > train_eig.size() || k > test_eig.size()) {
    throw DimensionError("alignment_matrix: K exceeds available eigenvectors");
  }
  AlignmentMatrix h;
  h.entries = (test_eig.eigenvectors.leftCols(k).transpose() * train_eig.eigenvectors.leftCols(k))
                  .cwiseAbs()
                  .cwiseMin(1.0);
  return h;
}

double check_norm_assumption(const SyntheticLinearTask& task) {
  task.validate();
  const double train_norm = project(row_space_projector(task.x), task.theta_star).norm();
  if (train_norm == 0.0) throw NumericalError("check_norm_assumption: ||P theta*|| is zero");
  const double test_norm = project(row_space_projector(task.x_tilde), task.theta_star).norm();
  return (test_norm - train_norm) / train_norm;
}

double largest_principal_angle(const Matrix& a, const Matrix& b) {
  if (a.cols() == 0 || b.cols() == 0) return 0.0;
  // sin of the largest angle is the norm of b's component outside span(a).
  const Matrix outside = b - a * (a.transpose() * b);
  const double s = Eigen::JacobiSVD<Matrix>(outside).singularValues()(0);
  return std::asin(std::clamp(s, 0.0, 1.0));
}

SpectralCheck check_spectral_assumption(const SpectralDecomposition& train_eig,
                                        const SpectralDecomposition& test_eig, Index k) {
  if (train_eig.ambient_dim != test_eig.ambient_dim) {
    throw DimensionError("check_spectral_assumption: ambient dimensions differ");
  }
  if (k < 1 || k >= train_eig.size() || k >= test_eig.size()) {
    throw DimensionError("check_spectral_assumption: need 0 < k < both eigenpair counts");
  }
  SpectralCheck out;
  out.shared_gap = largest_principal_angle(train_eig.eigenvectors.leftCols(k),
                                           test_eig.eigenvectors.leftCols(k));
  const Matrix cross = train_eig.eigenvectors.rightCols(train_eig.size() - k).transpose() *
                       test_eig.eigenvectors.rightCols(test_eig.size() - k);
  out.cross_overlap = Eigen::JacobiSVD<Matrix>(cross).singularValues()(0);
  return out;
}

BoundReport verify_prop1(const SyntheticLinearTask& task, Index k) {
  task.validate();
  const Index n = task.x.rows();
  const Index m = task.x_tilde.rows();
  if (k < 1 || k >= std::min(n, m)) throw DimensionError("verify_prop1: need 0 < k < min(n, m)");

  BoundReport r;
  r.k = k;
  r.test_loss = test_loss(task);
  r.proj_norm_linear = proj_norm_linear(task.x, task.y(), task.x_tilde);
  const SpectralDecomposition test_eig = covariance_eig(task.x_tilde, m);
  if (test_eig.size() < m) {
    throw RankDeficientError("verify_prop1: X_tilde must have rank m", test_eig.size());
  }
  const double md = static_cast<double>(m);
  r.lambda_k_plus_1 = test_eig.eigenvalues(k) * md;
  r.lambda_m = test_eig.eigenvalues(m - 1) * md;
  r.lower = r.lambda_m / md;
  r.upper = r.lambda_k_plus_1 / md;

  const SpectralDecomposition train_eig = covariance_eig(task.x, n);
  if (train_eig.size() > k) r.spectral = check_spectral_assumption(train_eig, test_eig, k);
  r.norm_discrepancy = check_norm_assumption(task);

  // ProjNormLinear is ||theta_hat - P_test theta_hat|| with ||theta_hat|| = ||P theta*||; anything at
  // rounding level relative to that is a zero.
  const double scale = project(row_space_projector(task.x), task.theta_star).norm();
  if (r.proj_norm_linear <= kRankTolerance * scale) {
    r.ratio_defined = false;
    r.holds = false;
    return r;
  }
  r.ratio = r.test_loss / (r.proj_norm_linear * r.proj_norm_linear);
  const double tol = kBoundTolerance * r.upper;
  r.holds = r.lower - tol <= r.ratio && r.ratio <= r.upper + tol;
  return r;
}

void InstanceSpec::validate() const {
  if (k < 1 || k >= std::min(n, m)) throw DimensionError("construct_instance: need 0 < k < min(n, m)");
  if (n + m - k > d) {
    throw DimensionError("construct_instance: k + (n-k) + (m-k) = " + std::to_string(n + m - k) +
                         " exceeds d = " + std::to_string(d));
  }
  if (!(tail.exponent >= 0.0)) throw DimensionError("construct_instance: exponent must be >= 0");
}

namespace {

Matrix random_orthonormal(Index rows, Index cols, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix g(rows, cols);
  for (Index i = 0; i < rows; ++i) {
    for (Index j = 0; j < cols; ++j) g(i, j) = normal(rng);
  }
  Eigen::HouseholderQR<Matrix> qr(g);
  return qr.householderQ() * Matrix::Identity(rows, cols);
}

Vector covariance_profile(Index count, Index k, const TailProfile& tail) {
  Vector c(count);
  for (Index i = 0; i < count; ++i) {
    const Index rank = (tail.flat_tail && i >= k) ? k + 1 : i + 1;
    c(i) = std::pow(static_cast<double>(rank), -tail.exponent);
  }
  return c;
}

// rows x d design whose covariance X^T X / rows has eigenvectors `frame`
// (columns) and eigenvalues `profile`.
Matrix design_from_frame(const Matrix& frame, const Vector& profile, Rng& rng) {
  const Index rows = frame.cols();
  const Matrix mixer = random_orthonormal(rows, rows, rng);
  const Vector scale = (profile * static_cast<double>(rows)).cwiseSqrt();
  return mixer * scale.asDiagonal() * frame.transpose();
}

}  // namespace

SyntheticLinearTask construct_instance(const InstanceSpec& spec) {
  spec.validate();
  Rng rng = make_rng(spec.seed, "theory/instance");
  const Index k = spec.k;
  const Index train_tail = spec.n - k;
  const Index test_tail = spec.m - k;

  const Matrix frame = random_orthonormal(spec.d, k + train_tail + test_tail, rng);
  const Matrix shared = frame.leftCols(k);
  const Matrix u_tail = frame.middleCols(k, train_tail);
  const Matrix v_tail = frame.rightCols(test_tail);
  // Rotate the test head inside the shared span so the two eigenbases differ.
  const Matrix test_head = shared * random_orthonormal(k, k, rng);

  Matrix train_frame(spec.d, spec.n);
  train_frame << shared, u_tail;
  Matrix test_frame(spec.d, spec.m);
  test_frame << test_head, v_tail;

  SyntheticLinearTask task;
  task.x = design_from_frame(train_frame, covariance_profile(spec.n, k, spec.tail), rng);
  task.x_tilde = design_from_frame(test_frame, covariance_profile(spec.m, k, spec.tail), rng);

  std::normal_distribution<double> normal(0.0, 1.0);
  auto gaussian = [&](Index size) {
    Vector v(size);
    for (Index i = 0; i < size; ++i) v(i) = normal(rng);
    return v;
  };
  const Vector head = shared * gaussian(k);
  const Vector b = u_tail * gaussian(train_tail);
  Vector c = v_tail * gaussian(test_tail);
  Vector rest = gaussian(spec.d);
  rest -= frame * (frame.transpose() * rest);
  // Equal tail norms give ||P theta*|| = ||P_test theta*||.
  c *= b.norm() / c.norm();
  task.theta_star = head + b + c + rest;
  return task;
}

std::vector<double> eigen_spectrum(const Matrix& x, Index top_k) {
  const SpectralDecomposition eig = covariance_eig(x, top_k);
  return {eig.eigenvalues.data(), eig.eigenvalues.data() + eig.eigenvalues.size()};
}

}  // namespace projnorm
